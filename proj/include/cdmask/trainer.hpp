// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iostream>
#include <string>
#include <vector>

#include "cdmask/checkpoint.hpp"
#include "cdmask/config.hpp"
#include "cdmask/data.hpp"
#include "cdmask/metrics.hpp"
#include "cdmask/model.hpp"

namespace cdmask {

using ModelF = CDMaskFormer<float>;

struct TrainResult {
  std::vector<double> losses;  // mean batch loss per step
  double best_val_f1 = 0.0;
  double final_train_f1 = 0.0;
  int steps_run = 0;
  std::string best_ckpt, last_ckpt;
};

/// Binary label map downsampled to prediction resolution by block-mean
/// voting (a block is change iff more than half of its pixels changed).
Tensor<float> downsample_mask(const Tensor<uint8_t>& label, int factor);

/// Step-based training loop with poly LR decay, parameter-group optimizer
/// settings, deterministic single-worker data order, periodic validation,
/// and best-F1 checkpointing. Structured one-line records go to `log`.
TrainResult train(const TrainConfig& cfg, std::ostream& log = std::cout,
                  const std::string& resume_path = "");

/// Runs prediction over records and micro-averages the confusion counts.
MetricReport evaluate_model(const ModelF& model, const std::vector<SampleRecord>& records,
                            double threshold);

MetricReport evaluate_checkpoint(const std::string& ckpt_path, const std::string& split,
                                 double threshold, std::ostream& log = std::cout,
                                 const std::string& data_root_override = "");

/// Appendix-style threshold sweep over T in {0.2,...,0.8}.
void sweep_threshold(const std::string& ckpt_path, const std::string& split,
                     std::ostream& log = std::cout,
                     const std::string& data_root_override = "");

void predict_files(const std::string& ckpt_path, const std::string& t1_path,
                   const std::string& t2_path, const std::string& out_path,
                   double threshold, const std::string& score_out = "");

void visualize_files(const std::string& pred_path, const std::string& gt_path,
                     const std::string& out_path);

/// Rebuilds the model a checkpoint was trained with and loads its weights.
std::pair<std::unique_ptr<ModelF>, TrainConfig> load_model_checkpoint(
    const std::string& ckpt_path);

}  // namespace cdmask
