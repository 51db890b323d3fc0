// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cdmask/nn.hpp"

namespace cdmask {

/// lr = base * (1 - step/total)^power.
inline double poly_lr(int64_t step, int64_t total, double base, double power) {
  check(total > 0, "poly_lr: total steps must be positive");
  check(step >= 0 && step <= total, "poly_lr: step outside [0, total]");
  check(power > 0, "poly_lr: power must be positive");
  return base * std::pow(1.0 - static_cast<double>(step) / total, power);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One learning-rate/decay group over parameter indices into a ParamStore.
struct ParamGroup {
  std::string name;
  std::vector<int> indices;
  double lr = 1e-4;
  double weight_decay = 0.0;
};

/// Adam with L2-style weight decay added to the gradient (the convention
/// the reported hyperparameters assume). Poly decay enters as a
/// multiplicative factor on every group's base rate.
template <typename T>
class Adam {
 public:
  Adam(nn::ParamStore<T>& store, std::vector<ParamGroup> groups, AdamConfig cfg = {})
      : store_(store), groups_(std::move(groups)), cfg_(cfg) {
    m_.resize(store.params().size());
    v_.resize(store.params().size());
    for (size_t i = 0; i < store.params().size(); ++i) {
      m_[i] = Tensor<T>(store.params()[i].var.value().shape());
      v_[i] = Tensor<T>(store.params()[i].var.value().shape());
    }
  }

  void step(double lr_scale) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (const auto& group : groups_) {
      const double lr = group.lr * lr_scale;
      for (int idx : group.indices) {
        auto& param = store_.params()[idx].var;
        if (!param.has_grad()) continue;
        Tensor<T>& theta = param.value();
        const Tensor<T>& g = param.grad();
        Tensor<T>& m = m_[idx];
        Tensor<T>& v = v_[idx];
        for (int64_t i = 0; i < theta.numel(); ++i) {
          const double gi = static_cast<double>(g[i]) +
                            group.weight_decay * static_cast<double>(theta[i]);
          m[i] = static_cast<T>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi);
          v[i] = static_cast<T>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi);
          const double mhat = m[i] / bc1;
          const double vhat = v[i] / bc2;
          theta[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
      }
    }
  }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }

 private:
  nn::ParamStore<T>& store_;
  std::vector<ParamGroup> groups_;
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  int64_t t_ = 0;
};

/// Parameter-group split used by training: backbone parameters in one group,
/// everything else in the other.
template <typename T>
std::vector<ParamGroup> make_param_groups(const nn::ParamStore<T>& store,
                                          double backbone_lr, double backbone_decay,
                                          double main_lr, double main_decay) {
  ParamGroup backbone{"backbone", {}, backbone_lr, backbone_decay};
  ParamGroup main{"main", {}, main_lr, main_decay};
  for (size_t i = 0; i < store.params().size(); ++i) {
    if (store.params()[i].name.rfind("backbone.", 0) == 0)
      backbone.indices.push_back(static_cast<int>(i));
    else
      main.indices.push_back(static_cast<int>(i));
  }
  return {backbone, main};
}

}  // namespace cdmask
