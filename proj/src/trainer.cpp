// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#include "cdmask/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;

namespace cdmask {

namespace {

struct LoadedSample {
  Tensor<float> t1, t2;        // normalized [3,H,W]
  Tensor<uint8_t> label;       // [H,W]
  std::string id;
};

LoadedSample prepare_train_sample(const SampleRecord& rec, int tile_size,
                                  uint64_t seed, int64_t visit) {
  SamplePair pair = load_sample(rec);
  const std::string visit_key = rec.id + "#" + std::to_string(visit);
  if (pair.t1.h < tile_size || pair.t1.w < tile_size)
    throw std::runtime_error("train: sample " + rec.id + " smaller than tile size");
  if (pair.t1.h > tile_size || pair.t1.w > tile_size) {
    // Random tile-sized crop, seeded per visit.
    Rng crop_rng(derive_seed(seed, "crop:" + visit_key));
    const int y0 = crop_rng.uniform_int(0, pair.t1.h - tile_size);
    const int x0 = crop_rng.uniform_int(0, pair.t1.w - tile_size);
    auto crop = [&](const ImageU8& img) {
      ImageU8 c(tile_size, tile_size, img.c);
      for (int y = 0; y < tile_size; ++y)
        for (int x = 0; x < tile_size; ++x)
          for (int ch = 0; ch < img.c; ++ch) c.at(y, x, ch) = img.at(y0 + y, x0 + x, ch);
      return c;
    };
    pair.t1 = crop(pair.t1);
    pair.t2 = crop(pair.t2);
    pair.label = crop(pair.label);
  }
  augment(pair, derive_seed(seed, "aug:" + visit_key));
  LoadedSample out;
  out.id = rec.id;
  out.t1 = image_to_chw<float>(pair.t1);
  out.t2 = image_to_chw<float>(pair.t2);
  out.label = binarize_label(pair.label);
  return out;
}

TargetSet<float> make_targets(const Tensor<uint8_t>& label) {
  TargetSet<float> targets;
  Tensor<float> quarter = downsample_mask(label, 4);
  bool any = false;
  for (int64_t i = 0; i < quarter.numel() && !any; ++i) any = quarter[i] > 0;
  if (any) targets.masks.push_back(std::move(quarter));
  return targets;
}

std::vector<int> epoch_permutation(uint64_t seed, int64_t epoch, int n) {
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, "epoch:" + std::to_string(epoch)));
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  return perm;
}

}  // namespace

Tensor<float> downsample_mask(const Tensor<uint8_t>& label, int factor) {
  const int h = label.dim(0) / factor, w = label.dim(1) / factor;
  check(h > 0 && w > 0, "downsample_mask: label smaller than factor");
  Tensor<float> out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int count = 0;
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx)
          count += label.at(y * factor + dy, x * factor + dx);
      out.at(y, x) = count * 2 > factor * factor ? 1.0f : 0.0f;
    }
  return out;
}

MetricReport evaluate_model(const ModelF& model, const std::vector<SampleRecord>& records,
                            double threshold) {
  check(!records.empty(), "evaluate_model: empty split");
  ConfusionCounts counts;
  for (const auto& rec : records) {
    SamplePair pair = load_sample(rec);
    auto pred = model.predict(image_to_chw<float>(pair.t1), image_to_chw<float>(pair.t2),
                              threshold);
    Tensor<uint8_t> gt = binarize_label(pair.label);
    accumulate(pred.change_mask.data(), gt.data(), gt.numel(), counts);
  }
  return compute(counts);
}

TrainResult train(const TrainConfig& cfg, std::ostream& log,
                  const std::string& resume_path) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  std::ofstream file_log(fs::path(cfg.out_dir) / "train.log", std::ios::app);
  auto emit = [&](const std::string& line) {
    log << line << "\n";
    log.flush();
    file_log << line << "\n";
  };

  ScanResult scan = scan_dataset(cfg.data_root);
  for (const auto& a : scan.anomalies) emit("anomaly=\"" + a + "\"");
  std::vector<SampleRecord> train_recs = split_records(scan, "train");
  std::vector<SampleRecord> val_recs = split_records(scan, "val");

  ModelF model(cfg.model, cfg.seed);
  auto groups = make_param_groups(model.params(), cfg.backbone_lr,
                                  cfg.backbone_weight_decay, cfg.base_lr,
                                  cfg.weight_decay);
  Adam<float> adam(model.params(), groups, cfg.adam);

  int64_t start_step = 0;
  if (!resume_path.empty()) {
    CheckpointInfo info = load_checkpoint(resume_path, model.params(), &adam);
    start_step = info.step;
    emit("resume=\"" + resume_path + "\" step=" + std::to_string(start_step));
  }

  const std::string config_json = to_json(cfg).dump();
  const int n_train = static_cast<int>(train_recs.size());
  TrainResult result;
  const std::string best_path = (fs::path(cfg.out_dir) / "best.ckpt").string();
  const std::string last_path = (fs::path(cfg.out_dir) / "last.ckpt").string();

  int64_t perm_epoch = -1;
  std::vector<int> perm;
  bool stopped_early = false;

  for (int64_t step = start_step; step < cfg.total_steps && !stopped_early; ++step) {
    if (cfg.halt_after_steps > 0 && step >= cfg.halt_after_steps) break;
    const double lr = poly_lr(step, cfg.total_steps, cfg.base_lr, cfg.poly_power);
    const double lr_scale = poly_lr(step, cfg.total_steps, 1.0, cfg.poly_power);

    double batch_loss = 0;
    LossBreakdown batch_bd;
    std::vector<std::string> batch_ids;
    for (int j = 0; j < cfg.batch_size; ++j) {
      const int64_t visit = step * cfg.batch_size + j;
      const int64_t epoch = visit / n_train;
      if (epoch != perm_epoch) {
        perm = epoch_permutation(cfg.seed, epoch, n_train);
        perm_epoch = epoch;
      }
      const SampleRecord& rec = train_recs[perm[visit % n_train]];
      batch_ids.push_back(rec.id);
      LoadedSample sample = prepare_train_sample(rec, cfg.tile, cfg.seed, visit);
      TargetSet<float> targets = make_targets(sample.label);

      ModelOutputs<float> out = model.forward(sample.t1, sample.t2);
      LossBreakdown bd;
      ag::Var<float> loss = total_loss(out.predictions, targets, cfg.loss, &bd);
      const double loss_value = loss.value()[0];
      if (!std::isfinite(loss_value)) {
        std::ostringstream oss;
        oss << "train: non-finite loss at step " << step << " batch=[";
        for (size_t k = 0; k < batch_ids.size(); ++k)
          oss << (k ? "," : "") << batch_ids[k];
        oss << "]";
        emit("abort=\"" + oss.str() + "\"");
        throw std::runtime_error(oss.str());
      }
      batch_loss += loss_value / cfg.batch_size;
      batch_bd.bce += bd.bce / cfg.batch_size;
      batch_bd.dice += bd.dice / cfg.batch_size;
      batch_bd.cls += bd.cls / cfg.batch_size;
      ag::scale(loss, 1.0 / cfg.batch_size).backward();
    }
    adam.step(lr_scale);
    model.params().zero_grad();
    result.losses.push_back(batch_loss);
    result.steps_run = static_cast<int>(step + 1);

    if ((step + 1) % cfg.log_every == 0 || step == start_step) {
      std::ostringstream oss;
      oss << "step=" << step + 1 << " lr=" << lr << " loss=" << batch_loss
          << " bce=" << batch_bd.bce << " dice=" << batch_bd.dice
          << " cls=" << batch_bd.cls;
      emit(oss.str());
    }

    const bool last_step = step + 1 == cfg.total_steps;
    if ((step + 1) % cfg.eval_every == 0 || last_step) {
      MetricReport train_m = evaluate_model(model, train_recs, cfg.threshold);
      MetricReport val_m = evaluate_model(model, val_recs, cfg.threshold);
      std::ostringstream oss;
      oss << "eval step=" << step + 1 << " train_f1=" << train_m.f1
          << " val_f1=" << val_m.f1 << " val_pre=" << val_m.precision
          << " val_rec=" << val_m.recall << " val_iou=" << val_m.iou;
      emit(oss.str());
      result.final_train_f1 = train_m.f1;
      if (val_m.f1 >= result.best_val_f1) {
        result.best_val_f1 = val_m.f1;
        save_checkpoint(best_path, config_json, model.params(), step + 1, &adam);
        result.best_ckpt = best_path;
      }
      if (cfg.stop_train_f1 > 0 && cfg.stop_val_f1 > 0 &&
          train_m.f1 >= cfg.stop_train_f1 && val_m.f1 >= cfg.stop_val_f1) {
        emit("early_stop step=" + std::to_string(step + 1));
        stopped_early = true;
      }
    }
  }

  save_checkpoint(last_path, config_json, model.params(),
                  static_cast<int64_t>(result.steps_run), &adam);
  result.last_ckpt = last_path;
  if (result.best_ckpt.empty()) result.best_ckpt = last_path;
  return result;
}

std::pair<std::unique_ptr<ModelF>, TrainConfig> load_model_checkpoint(
    const std::string& ckpt_path) {
  // First pass reads the config snapshot so the right model can be built.
  std::ifstream probe(ckpt_path, std::ios::binary);
  check(probe.good(), "load_model_checkpoint: cannot open " + ckpt_path);
  probe.close();

  // Build a throwaway store to pull the config, then the real model.
  // The checkpoint layout stores config before tensors, so read it directly.
  std::ifstream in(ckpt_path, std::ios::binary);
  char magic[8];
  in.read(magic, sizeof(magic));
  check(std::memcmp(magic, kCheckpointMagic, sizeof(magic)) == 0,
        "load_model_checkpoint: not a checkpoint: " + ckpt_path);
  const auto version = detail::read_pod<uint32_t>(in);
  check(version == kCheckpointVersion, "load_model_checkpoint: unsupported version");
  const auto scalar = detail::read_pod<uint8_t>(in);
  check(scalar == sizeof(float), "load_model_checkpoint: scalar width mismatch");
  const std::string config_json = detail::read_string(in);
  in.close();

  TrainConfig cfg = train_config_from_json(json::parse(config_json));
  auto model = std::make_unique<ModelF>(cfg.model, cfg.seed);
  load_checkpoint(ckpt_path, model->params());
  return {std::move(model), cfg};
}

MetricReport evaluate_checkpoint(const std::string& ckpt_path, const std::string& split,
                                 double threshold, std::ostream& log,
                                 const std::string& data_root_override) {
  auto [model, cfg] = load_model_checkpoint(ckpt_path);
  const std::string root = data_root_override.empty() ? cfg.data_root : data_root_override;
  ScanResult scan = scan_dataset(root);
  std::vector<SampleRecord> recs = split_records(scan, split);
  MetricReport report = evaluate_model(*model, recs, threshold);
  log << format_report(report);
  return report;
}

void sweep_threshold(const std::string& ckpt_path, const std::string& split,
                     std::ostream& log, const std::string& data_root_override) {
  auto [model, cfg] = load_model_checkpoint(ckpt_path);
  const std::string root = data_root_override.empty() ? cfg.data_root : data_root_override;
  ScanResult scan = scan_dataset(root);
  std::vector<SampleRecord> recs = split_records(scan, split);
  log << "T     F1     Pre    Rec    IoU    OA\n";
  for (double t : {0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8}) {
    MetricReport r = evaluate_model(*model, recs, t);
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%.1f  %6.2f %6.2f %6.2f %6.2f %6.2f\n", t,
                  r.f1 * 100, r.precision * 100, r.recall * 100, r.iou * 100,
                  r.oa * 100);
    log << buf;
  }
}

void predict_files(const std::string& ckpt_path, const std::string& t1_path,
                   const std::string& t2_path, const std::string& out_path,
                   double threshold, const std::string& score_out) {
  auto [model, cfg] = load_model_checkpoint(ckpt_path);
  ImageU8 t1 = read_png(t1_path, 3);
  ImageU8 t2 = read_png(t2_path, 3);
  check(t1.same_size(t2), "predict: input sizes differ");
  auto out = model->predict(image_to_chw<float>(t1), image_to_chw<float>(t2), threshold);
  write_png(out_path, mask_to_image(out.change_mask));
  if (!score_out.empty()) {
    ImageU8 score(out.score_map.dim(0), out.score_map.dim(1), 1);
    for (int64_t i = 0; i < out.score_map.numel(); ++i)
      score.data[i] = static_cast<uint8_t>(std::lround(out.score_map[i] * 255.0));
    write_png(score_out, score);
  }
}

void visualize_files(const std::string& pred_path, const std::string& gt_path,
                     const std::string& out_path) {
  Tensor<uint8_t> pred = binarize_label(read_png(pred_path, 1));
  Tensor<uint8_t> gt = binarize_label(read_png(gt_path, 1));
  write_png(out_path, error_map(pred, gt));
}

}  // namespace cdmask
