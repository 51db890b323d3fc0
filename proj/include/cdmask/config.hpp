// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <string>

#include "cdmask/data.hpp"
#include "cdmask/matching.hpp"
#include "cdmask/model.hpp"

namespace cdmask {

using json = nlohmann::json;

/// Everything the training loop needs; serialized as nested JSON and stored
/// verbatim inside checkpoints.
struct TrainConfig {
  uint64_t seed = 0;

  std::string data_root;
  int tile = 256;  // training crop size; dataset-dependent (e.g. 512 sources)

  ModelConfig model;
  LossWeights loss;

  double base_lr = 1e-4;
  double backbone_lr = 5e-4;
  double weight_decay = 0.05;
  double backbone_weight_decay = 0.01;
  double poly_power = 0.9;
  int total_steps = 2000;
  int batch_size = 8;
  AdamConfig adam;

  int log_every = 10;
  int eval_every = 100;
  double threshold = 0.5;
  std::string out_dir = "runs/default";
  // Optional early stop once both targets are reached (0 disables).
  double stop_train_f1 = 0.0;
  double stop_val_f1 = 0.0;
  // Checkpoint-and-stop after this absolute step (0 disables); the poly
  // schedule still runs against total_steps, so a halted run resumes onto
  // the same trajectory.
  int halt_after_steps = 0;

  void validate() const {
    model.validate();
    loss.validate();
    check(base_lr > 0 && backbone_lr > 0, "TrainConfig: learning rates must be positive");
    check(poly_power > 0, "TrainConfig: poly power must be positive");
    check(batch_size >= 1, "TrainConfig: batch size must be >= 1");
    check(total_steps >= 1, "TrainConfig: total steps must be >= 1");
    check(tile % 32 == 0, "TrainConfig: tile must be a multiple of 32");
    check(threshold > 0 && threshold < 1, "TrainConfig: threshold must lie in (0,1)");
  }
};

// --- JSON (de)serialization -------------------------------------------------

inline std::string to_string(BackboneConfig::Variant v) {
  return v == BackboneConfig::Variant::kReferenceSmall ? "reference-small"
                                                       : "pluggable-external";
}

inline std::string to_string(PixelDecoderConfig::Kind k) {
  return k == PixelDecoderConfig::Kind::kDeformable ? "deformable" : "fpn";
}

inline std::string to_string(DecoderConfig::Variant v) {
  switch (v) {
    case DecoderConfig::Variant::kMab3: return "mab3";
    case DecoderConfig::Variant::kMab4: return "mab4";
    case DecoderConfig::Variant::kMab3SaabV1: return "mab3+saab-v1";
    default: return "mab3+saab";
  }
}

inline json to_json(const ModelConfig& m) {
  json j;
  j["channels"] = m.channels;
  j["backbone"] = {{"variant", to_string(m.backbone.variant)},
                   {"widths", m.backbone.widths},
                   {"in_channels", m.backbone.in_channels},
                   {"external_name", m.backbone.external_name}};
  j["extractor"] = {{"spatial_weight", m.extractor.spatial_weight},
                    {"channel_weight", m.extractor.channel_weight},
                    {"dmlp_branches", m.extractor.dmlp_branches}};
  j["pixel_decoder"] = {{"kind", to_string(m.pixel_decoder.kind)},
                        {"layers", m.pixel_decoder.layers},
                        {"heads", m.pixel_decoder.heads},
                        {"points", m.pixel_decoder.points},
                        {"ffn_mult", m.pixel_decoder.ffn_mult}};
  j["decoder"] = {{"variant", to_string(m.decoder.variant)},
                  {"num_queries", m.decoder.num_queries},
                  {"heads", m.decoder.heads},
                  {"ffn_mult", m.decoder.ffn_mult},
                  {"rounds", m.decoder.rounds}};
  return j;
}

inline ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.channels = j.value("channels", m.channels);
  if (j.contains("backbone")) {
    const auto& b = j["backbone"];
    const std::string v = b.value("variant", "reference-small");
    check(v == "reference-small" || v == "pluggable-external",
          "config: unknown backbone variant " + v);
    m.backbone.variant = v == "reference-small"
                             ? BackboneConfig::Variant::kReferenceSmall
                             : BackboneConfig::Variant::kPluggableExternal;
    if (b.contains("widths")) {
      auto w = b["widths"].get<std::vector<int>>();
      check(w.size() == 4, "config: backbone widths must have 4 entries");
      std::copy(w.begin(), w.end(), m.backbone.widths.begin());
    }
    m.backbone.in_channels = b.value("in_channels", m.backbone.in_channels);
    m.backbone.external_name = b.value("external_name", std::string());
  }
  if (j.contains("extractor")) {
    const auto& e = j["extractor"];
    m.extractor.spatial_weight = e.value("spatial_weight", true);
    m.extractor.channel_weight = e.value("channel_weight", true);
    m.extractor.dmlp_branches = e.value("dmlp_branches", 2);
  }
  if (j.contains("pixel_decoder")) {
    const auto& p = j["pixel_decoder"];
    const std::string k = p.value("kind", "deformable");
    check(k == "deformable" || k == "fpn", "config: unknown pixel decoder kind " + k);
    m.pixel_decoder.kind = k == "deformable" ? PixelDecoderConfig::Kind::kDeformable
                                             : PixelDecoderConfig::Kind::kFpn;
    m.pixel_decoder.layers = p.value("layers", m.pixel_decoder.layers);
    m.pixel_decoder.heads = p.value("heads", m.pixel_decoder.heads);
    m.pixel_decoder.points = p.value("points", m.pixel_decoder.points);
    m.pixel_decoder.ffn_mult = p.value("ffn_mult", m.pixel_decoder.ffn_mult);
  }
  if (j.contains("decoder")) {
    const auto& d = j["decoder"];
    const std::string v = d.value("variant", "mab3+saab");
    if (v == "mab3")
      m.decoder.variant = DecoderConfig::Variant::kMab3;
    else if (v == "mab4")
      m.decoder.variant = DecoderConfig::Variant::kMab4;
    else if (v == "mab3+saab-v1")
      m.decoder.variant = DecoderConfig::Variant::kMab3SaabV1;
    else if (v == "mab3+saab")
      m.decoder.variant = DecoderConfig::Variant::kMab3Saab;
    else
      throw std::invalid_argument("config: unknown decoder variant " + v);
    m.decoder.num_queries = d.value("num_queries", m.decoder.num_queries);
    m.decoder.heads = d.value("heads", m.decoder.heads);
    m.decoder.ffn_mult = d.value("ffn_mult", m.decoder.ffn_mult);
    m.decoder.rounds = d.value("rounds", m.decoder.rounds);
  }
  return m;
}

inline json to_json(const TrainConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["data"] = {{"root", c.data_root}, {"tile", c.tile}};
  j["model"] = to_json(c.model);
  j["loss"] = {{"cls", c.loss.cls},
               {"dice", c.loss.dice},
               {"ce", c.loss.ce},
               {"null_class_weight", c.loss.null_class_weight}};
  j["train"] = {{"base_lr", c.base_lr},
                {"backbone_lr", c.backbone_lr},
                {"weight_decay", c.weight_decay},
                {"backbone_weight_decay", c.backbone_weight_decay},
                {"poly_power", c.poly_power},
                {"total_steps", c.total_steps},
                {"batch_size", c.batch_size},
                {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
                {"log_every", c.log_every},
                {"eval_every", c.eval_every},
                {"out_dir", c.out_dir},
                {"stop_train_f1", c.stop_train_f1},
                {"stop_val_f1", c.stop_val_f1},
                {"halt_after_steps", c.halt_after_steps}};
  j["eval"] = {{"threshold", c.threshold}};
  return j;
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.seed = j.value("seed", uint64_t(0));
  if (j.contains("data")) {
    c.data_root = j["data"].value("root", std::string());
    c.tile = j["data"].value("tile", c.tile);
  }
  if (j.contains("model")) c.model = model_from_json(j["model"]);
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    c.loss.cls = l.value("cls", c.loss.cls);
    c.loss.dice = l.value("dice", c.loss.dice);
    c.loss.ce = l.value("ce", c.loss.ce);
    c.loss.null_class_weight = l.value("null_class_weight", c.loss.null_class_weight);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    c.base_lr = t.value("base_lr", c.base_lr);
    c.backbone_lr = t.value("backbone_lr", c.backbone_lr);
    c.weight_decay = t.value("weight_decay", c.weight_decay);
    c.backbone_weight_decay = t.value("backbone_weight_decay", c.backbone_weight_decay);
    c.poly_power = t.value("poly_power", c.poly_power);
    c.total_steps = t.value("total_steps", c.total_steps);
    c.batch_size = t.value("batch_size", c.batch_size);
    if (t.contains("adam")) {
      c.adam.beta1 = t["adam"].value("beta1", c.adam.beta1);
      c.adam.beta2 = t["adam"].value("beta2", c.adam.beta2);
      c.adam.eps = t["adam"].value("eps", c.adam.eps);
    }
    c.log_every = t.value("log_every", c.log_every);
    c.eval_every = t.value("eval_every", c.eval_every);
    c.out_dir = t.value("out_dir", c.out_dir);
    c.stop_train_f1 = t.value("stop_train_f1", c.stop_train_f1);
    c.stop_val_f1 = t.value("stop_val_f1", c.stop_val_f1);
    c.halt_after_steps = t.value("halt_after_steps", c.halt_after_steps);
  }
  if (j.contains("eval")) c.threshold = j["eval"].value("threshold", c.threshold);
  return c;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "load_train_config: cannot open " + path);
  json j;
  in >> j;
  return train_config_from_json(j);
}

inline SyntheticSpec synthetic_spec_from_json(const json& j) {
  SyntheticSpec s;
  s.canvas = j.value("canvas", s.canvas);
  s.shapes_per_image = j.value("shapes_per_image", s.shapes_per_image);
  if (j.contains("kinds")) {
    s.rectangles = false;
    s.strips = false;
    for (const auto& k : j["kinds"]) {
      const std::string kind = k.get<std::string>();
      if (kind == "rectangle")
        s.rectangles = true;
      else if (kind == "strip")
        s.strips = true;
      else
        throw std::invalid_argument("synthetic spec: unknown shape kind " + kind);
    }
  }
  s.jitter = j.value("jitter", s.jitter);
  s.seed = j.value("seed", s.seed);
  s.train_count = j.value("train_count", s.train_count);
  s.val_count = j.value("val_count", s.val_count);
  s.test_count = j.value("test_count", s.test_count);
  return s;
}

inline SyntheticSpec load_synthetic_spec(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "load_synthetic_spec: cannot open " + path);
  json j;
  in >> j;
  return synthetic_spec_from_json(j);
}

}  // namespace cdmask
