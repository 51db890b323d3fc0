// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#include "cdmask/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

namespace fs = std::filesystem;

namespace cdmask {

namespace {

constexpr std::array<const char*, 3> kSplits{"train", "val", "test"};

}  // namespace

ScanResult scan_dataset(const std::string& root) {
  if (!fs::exists(root)) throw std::invalid_argument("scan_dataset: no such root " + root);
  ScanResult res;
  for (const char* split : kSplits) {
    const fs::path a_dir = fs::path(root) / split / "A";
    if (!fs::exists(a_dir)) continue;
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(a_dir))
      if (e.is_regular_file()) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    for (const auto& name : names) {
      const fs::path b = fs::path(root) / split / "B" / name;
      const fs::path l = fs::path(root) / split / "label" / name;
      SampleRecord rec;
      rec.id = std::string(split) + "/" + name;
      rec.split = split;
      rec.t1_path = (a_dir / name).string();
      rec.t2_path = b.string();
      rec.label_path = l.string();
      if (!fs::exists(b)) {
        res.anomalies.push_back(rec.id + ": missing B counterpart");
        continue;
      }
      if (!fs::exists(l)) {
        res.anomalies.push_back(rec.id + ": missing label counterpart");
        continue;
      }
      res.records.push_back(std::move(rec));
    }
  }
  if (res.records.empty())
    throw std::runtime_error("scan_dataset: no usable samples under " + root);
  return res;
}

std::vector<SampleRecord> split_records(const ScanResult& scan, const std::string& split) {
  std::vector<SampleRecord> out;
  for (const auto& r : scan.records)
    if (r.split == split) out.push_back(r);
  if (out.empty())
    throw std::runtime_error("split_records: split '" + split + "' is empty");
  return out;
}

SamplePair load_sample(const SampleRecord& rec) {
  SamplePair s;
  s.id = rec.id;
  s.t1 = read_png(rec.t1_path, 3);
  s.t2 = read_png(rec.t2_path, 3);
  s.label = read_png(rec.label_path, 1);
  if (!s.t1.same_size(s.t2) || !s.t1.same_size(s.label))
    throw std::runtime_error("load_sample: size mismatch in " + rec.id);
  return s;
}

std::vector<SamplePair> tile(const SamplePair& sample, int size) {
  if (size <= 0 || size > sample.t1.h || size > sample.t1.w)
    throw std::invalid_argument("tile: size exceeds image dimensions");
  std::vector<SamplePair> out;
  auto crop = [&](const ImageU8& img, int y0, int x0) {
    ImageU8 c(size, size, img.c);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        for (int ch = 0; ch < img.c; ++ch) c.at(y, x, ch) = img.at(y0 + y, x0 + x, ch);
    return c;
  };
  for (int y0 = 0; y0 + size <= sample.t1.h; y0 += size)
    for (int x0 = 0; x0 + size <= sample.t1.w; x0 += size) {
      SamplePair t;
      t.id = sample.id + "@" + std::to_string(y0) + "," + std::to_string(x0);
      t.t1 = crop(sample.t1, y0, x0);
      t.t2 = crop(sample.t2, y0, x0);
      t.label = crop(sample.label, y0, x0);
      out.push_back(std::move(t));
    }
  return out;
}

void augment(SamplePair& sample, uint64_t seed) {
  Rng rng(seed);
  if (rng.bernoulli(0.5)) {
    sample.t1 = flip_horizontal(sample.t1);
    sample.t2 = flip_horizontal(sample.t2);
    sample.label = flip_horizontal(sample.label);
  }
  if (rng.bernoulli(0.5)) {
    sample.t1 = flip_vertical(sample.t1);
    sample.t2 = flip_vertical(sample.t2);
    sample.label = flip_vertical(sample.label);
  }
  if (rng.bernoulli(0.5)) {
    const double sigma = rng.uniform(0.1, 2.0);
    sample.t1 = gaussian_blur(sample.t1, sigma);
    sample.t2 = gaussian_blur(sample.t2, sigma);
  }
}

void SyntheticSpec::validate() const {
  check(canvas >= 16, "SyntheticSpec: canvas too small");
  check(shapes_per_image >= 0, "SyntheticSpec: negative shape count");
  check(rectangles || strips || shapes_per_image == 0,
        "SyntheticSpec: no shape kinds enabled");
  check(jitter >= 0, "SyntheticSpec: negative jitter");
}

namespace {

ImageU8 textured_background(int canvas, Rng& rng) {
  // Coarse value-noise grid upsampled bilinearly plus fine noise.
  const int g = 8;
  std::vector<double> grid(g * g);
  for (double& v : grid) v = rng.uniform(60.0, 190.0);
  ImageU8 img(canvas, canvas, 3);
  for (int y = 0; y < canvas; ++y)
    for (int x = 0; x < canvas; ++x) {
      const double gy = (y + 0.5) / canvas * (g - 1);
      const double gx = (x + 0.5) / canvas * (g - 1);
      const int y0 = static_cast<int>(gy), x0 = static_cast<int>(gx);
      const int y1 = std::min(y0 + 1, g - 1), x1 = std::min(x0 + 1, g - 1);
      const double fy = gy - y0, fx = gx - x0;
      const double base = (1 - fy) * ((1 - fx) * grid[y0 * g + x0] + fx * grid[y0 * g + x1]) +
                          fy * ((1 - fx) * grid[y1 * g + x0] + fx * grid[y1 * g + x1]);
      for (int ch = 0; ch < 3; ++ch) {
        const double v = base + rng.uniform(-6.0, 6.0);
        img.at(y, x, ch) = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  return img;
}

void draw_shape(ImageU8& img, const SyntheticShape& s, double value, Rng& rng) {
  for (int y = s.y; y < s.y + s.h; ++y)
    for (int x = s.x; x < s.x + s.w; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const double v = value + rng.uniform(-4.0, 4.0);
        img.at(y, x, ch) = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
}

}  // namespace

SyntheticReport generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
  spec.validate();
  SyntheticReport report;
  const std::array<std::pair<const char*, int>, 3> splits{
      std::pair{"train", spec.train_count}, {"val", spec.val_count},
      {"test", spec.test_count}};
  for (const auto& [split, count] : splits) {
    for (const char* sub : {"A", "B", "label"})
      fs::create_directories(fs::path(out_dir) / split / sub);
    for (int i = 0; i < count; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%s_%04d.png", split, i);
      const std::string id = std::string(split) + "/" + name;
      Rng rng(derive_seed(spec.seed, id));

      ImageU8 t1 = textured_background(spec.canvas, rng);
      ImageU8 t2 = t1;
      Tensor<uint8_t> label({spec.canvas, spec.canvas});

      SyntheticReport::ImageInfo info;
      info.id = id;
      for (int k = 0; k < spec.shapes_per_image; ++k) {
        SyntheticShape s;
        const bool strip =
            spec.strips && (!spec.rectangles || rng.bernoulli(0.5));
        if (strip) {
          const int len = rng.uniform_int(spec.canvas / 2, spec.canvas * 9 / 10);
          const int thick = rng.uniform_int(2, std::max(3, spec.canvas / 16));
          if (rng.bernoulli(0.5)) {
            s.h = thick;
            s.w = len;
          } else {
            s.h = len;
            s.w = thick;
          }
        } else {
          s.h = rng.uniform_int(spec.canvas / 8, spec.canvas / 3);
          s.w = rng.uniform_int(spec.canvas / 8, spec.canvas / 3);
        }
        s.y = rng.uniform_int(0, spec.canvas - s.h);
        s.x = rng.uniform_int(0, spec.canvas - s.w);
        // Fill tone well separated from the mid-gray background band.
        const double value = rng.bernoulli(0.5) ? rng.uniform(0.0, 40.0)
                                                : rng.uniform(215.0, 255.0);
        // Appearing shapes go to T2, disappearing ones to T1.
        draw_shape(rng.bernoulli(0.5) ? t2 : t1, s, value, rng);
        for (int y = s.y; y < s.y + s.h; ++y)
          for (int x = s.x; x < s.x + s.w; ++x) label.at(y, x) = 1;
        info.shapes.push_back(s);
      }

      // Photometric jitter on T2 only; labels are unaffected.
      if (spec.jitter > 0) {
        const double shift = rng.uniform(-spec.jitter, spec.jitter);
        for (auto& px : t2.data) {
          const double v = px + shift + rng.uniform(-spec.jitter / 2, spec.jitter / 2);
          px = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      }

      write_png((fs::path(out_dir) / split / "A" / name).string(), t1);
      write_png((fs::path(out_dir) / split / "B" / name).string(), t2);
      write_png((fs::path(out_dir) / split / "label" / name).string(),
                mask_to_image(label));
      report.images.push_back(std::move(info));
    }
  }
  return report;
}

}  // namespace cdmask
