// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "selfteach/network.hpp"

namespace selfteach {

enum class OptimizerKind { sgd_momentum, adam };

inline std::string_view to_string(OptimizerKind k) {
  return k == OptimizerKind::adam ? "adam" : "sgd_momentum";
}

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd_momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
  fail(ErrorCode::configuration, "unknown optimizer '" + std::string(s) + "'");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 3e-3;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;

  void validate() const {
    require(learning_rate > 0.0, ErrorCode::configuration, "learning_rate must be > 0");
    require(epochs >= 1, ErrorCode::configuration, "epochs must be >= 1");
    require(batch_size >= 1, ErrorCode::configuration, "batch_size must be >= 1");
    require(momentum >= 0.0 && momentum < 1.0, ErrorCode::configuration, "momentum must be in [0, 1)");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorCode::configuration,
            "Adam betas must be in [0, 1)");
    require(epsilon > 0.0, ErrorCode::configuration, "epsilon must be > 0");
  }
};

/// First/second moment buffers shaped like the parameters. SGD uses only
/// `first` as its velocity.
template <typename Real> struct OptimizerState {
  StackParams<Real> first;
  StackParams<Real> second;
  std::uint64_t step = 0;

  OptimizerState() = default;
  explicit OptimizerState(const StackSpec &spec) : first(spec), second(spec) {}

  friend bool operator==(const OptimizerState &, const OptimizerState &) = default;
};

template <typename Real>
void apply_update(StackParams<Real> &params, const StackParams<Real> &grads,
                  OptimizerState<Real> &state, const OptimizerConfig &cfg) {
  ++state.step;
  const Real lr = Real(cfg.learning_rate);
  std::vector<Tensor2<Real> *> p, m, v;
  std::vector<const Tensor2<Real> *> g;
  params.for_each_block([&](const std::string &, Tensor2<Real> &t) { p.push_back(&t); });
  state.first.for_each_block([&](const std::string &, Tensor2<Real> &t) { m.push_back(&t); });
  state.second.for_each_block([&](const std::string &, Tensor2<Real> &t) { v.push_back(&t); });
  grads.for_each_block([&](const std::string &, const Tensor2<Real> &t) { g.push_back(&t); });
  require(p.size() == g.size() && p.size() == m.size(), ErrorCode::invalid_state,
          "optimizer state does not match parameters");

  if (cfg.kind == OptimizerKind::sgd_momentum) {
    const Real mu = Real(cfg.momentum);
    for (std::size_t b = 0; b < p.size(); ++b)
      for (std::size_t i = 0; i < p[b]->size(); ++i) {
        Real &vel = (*m[b])[i];
        vel = mu * vel + (*g[b])[i];
        (*p[b])[i] -= lr * vel;
      }
    return;
  }

  const Real b1 = Real(cfg.beta1), b2 = Real(cfg.beta2), eps = Real(cfg.epsilon);
  const Real c1 = Real(1) - Real(std::pow(cfg.beta1, double(state.step)));
  const Real c2 = Real(1) - Real(std::pow(cfg.beta2, double(state.step)));
  for (std::size_t b = 0; b < p.size(); ++b)
    for (std::size_t i = 0; i < p[b]->size(); ++i) {
      const Real gi = (*g[b])[i];
      Real &mi = (*m[b])[i];
      Real &vi = (*v[b])[i];
      mi = b1 * mi + (Real(1) - b1) * gi;
      vi = b2 * vi + (Real(1) - b2) * gi * gi;
      (*p[b])[i] -= lr * (mi / c1) / (std::sqrt(vi / c2) + eps);
    }
}

} // namespace selfteach
