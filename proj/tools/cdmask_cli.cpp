// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <iostream>

#include "cdmask/trainer.hpp"

int main(int argc, char** argv) {
  CLI::App app{"cdmask: mask-classification change detection toolkit"};
  app.require_subcommand(1);

  std::string config_path, resume_path;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
  train_cmd->add_option("--config", config_path, "Training config file")->required();
  train_cmd->add_option("--resume", resume_path, "Checkpoint to resume from");

  std::string ckpt, split = "test", data_root;
  double threshold = 0.5;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--split", split, "Dataset split (train/val/test)");
  eval_cmd->add_option("--threshold", threshold, "Detection threshold in (0,1)");
  eval_cmd->add_option("--data-root", data_root, "Override the dataset root");

  auto* sweep_cmd = app.add_subcommand("sweep-threshold",
                                       "Metric table across thresholds 0.2..0.8");
  sweep_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  sweep_cmd->add_option("--split", split, "Dataset split");
  sweep_cmd->add_option("--data-root", data_root, "Override the dataset root");

  std::string t1_path, t2_path, out_path, score_path;
  auto* predict_cmd = app.add_subcommand("predict", "Predict a change mask for a pair");
  predict_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  predict_cmd->add_option("--t1", t1_path, "First temporal image")->required();
  predict_cmd->add_option("--t2", t2_path, "Second temporal image")->required();
  predict_cmd->add_option("--out", out_path, "Output mask PNG")->required();
  predict_cmd->add_option("--threshold", threshold, "Detection threshold in (0,1)");
  predict_cmd->add_option("--score-out", score_path, "Optional normalized score PNG");

  std::string pred_path, gt_path;
  auto* vis_cmd = app.add_subcommand("visualize", "TP/TN/FP/FN color error map");
  vis_cmd->add_option("--pred", pred_path, "Predicted mask PNG")->required();
  vis_cmd->add_option("--gt", gt_path, "Ground-truth mask PNG")->required();
  vis_cmd->add_option("--out", out_path, "Output RGB PNG")->required();

  std::string spec_path, synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth_cmd->add_option("--spec", spec_path, "Synthetic spec JSON")->required();
  synth_cmd->add_option("--out", synth_out, "Output dataset directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      cdmask::TrainConfig cfg = cdmask::load_train_config(config_path);
      cdmask::TrainResult res = cdmask::train(cfg, std::cout, resume_path);
      std::cout << "done steps=" << res.steps_run << " best_val_f1=" << res.best_val_f1
                << " best_ckpt=" << res.best_ckpt << "\n";
    } else if (*eval_cmd) {
      cdmask::evaluate_checkpoint(ckpt, split, threshold, std::cout, data_root);
    } else if (*sweep_cmd) {
      cdmask::sweep_threshold(ckpt, split, std::cout, data_root);
    } else if (*predict_cmd) {
      cdmask::predict_files(ckpt, t1_path, t2_path, out_path, threshold, score_path);
    } else if (*vis_cmd) {
      cdmask::visualize_files(pred_path, gt_path, out_path);
    } else if (*synth_cmd) {
      cdmask::SyntheticSpec spec = cdmask::load_synthetic_spec(spec_path);
      cdmask::generate_synthetic(spec, synth_out);
      std::cout << "wrote " << synth_out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
