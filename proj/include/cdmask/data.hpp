// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>
#include <vector>

#include "cdmask/image.hpp"
#include "cdmask/random.hpp"

namespace cdmask {

/// One bi-temporal triplet on disk. Layout:
///   <root>/{train,val,test}/{A,B,label}/<name>.png
struct SampleRecord {
  std::string id;  // "<split>/<name>"
  std::string t1_path, t2_path, label_path;
  std::string split;
};

struct ScanResult {
  std::vector<SampleRecord> records;    // sorted by id, deterministic
  std::vector<std::string> anomalies;   // per-sample problems, scan continues
};

/// Walks the A/B/label sibling directories of every split present under
/// root. Missing counterpart files are reported as anomalies and skipped;
/// an entirely empty scan is an error.
ScanResult scan_dataset(const std::string& root);

/// Records of one split; errors if the split is empty.
std::vector<SampleRecord> split_records(const ScanResult& scan, const std::string& split);

struct SamplePair {
  ImageU8 t1, t2, label;
  std::string id;
};

/// Loads and validates one record (all three rasters, equal sizes).
SamplePair load_sample(const SampleRecord& rec);

/// Non-overlapping grid tiles of `size`; trailing partial tiles are
/// discarded. Errors if size exceeds the image.
std::vector<SamplePair> tile(const SamplePair& sample, int size);

/// Training augmentation: independent 0.5-probability horizontal/vertical
/// flips applied jointly to T1/T2/label, then a 0.5-probability Gaussian
/// blur (sigma uniform in [0.1, 2.0]) on the images only.
void augment(SamplePair& sample, uint64_t seed);

struct SyntheticSpec {
  int canvas = 64;
  int shapes_per_image = 2;
  bool rectangles = true;
  bool strips = true;
  double jitter = 8.0;  // photometric amplitude, 8-bit units
  uint64_t seed = 0;
  int train_count = 64, val_count = 16, test_count = 16;

  void validate() const;
};

struct SyntheticShape {
  int y = 0, x = 0, h = 0, w = 0;  // raster-aligned box, fits the canvas
};

struct SyntheticReport {
  struct ImageInfo {
    std::string id;
    std::vector<SyntheticShape> shapes;
  };
  std::vector<ImageInfo> images;
};

/// Emits a synthetic change dataset in the standard layout: textured
/// backgrounds, inserted/removed rectangle and strip shapes, photometric
/// jitter on T2, labels marking exactly the shape pixels. Deterministic in
/// the spec seed.
SyntheticReport generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir);

}  // namespace cdmask
