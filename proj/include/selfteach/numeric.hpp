// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "selfteach/error.hpp"

namespace selfteach {

/// A categorical distribution carried together with its log-probabilities.
/// Loss code reads `logp` and never takes log of `p`.
template <typename Real> struct ProbVec {
  std::vector<Real> p;
  std::vector<Real> logp;

  std::size_t size() const noexcept { return p.size(); }

  /// Builds from explicit probabilities. Zero entries get logp = -inf.
  static ProbVec from_probs(std::span<const Real> probs) {
    require(!probs.empty(), ErrorCode::empty_input, "empty distribution");
    ProbVec out;
    out.p.assign(probs.begin(), probs.end());
    out.logp.resize(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
      require(std::isfinite(probs[i]) && probs[i] >= Real(0),
              ErrorCode::invalid_input, "probability outside [0, 1]");
      out.logp[i] = probs[i] > Real(0) ? std::log(probs[i])
                                       : -std::numeric_limits<Real>::infinity();
    }
    return out;
  }
  static ProbVec from_probs(std::initializer_list<Real> probs) {
    return from_probs(std::span<const Real>(probs.begin(), probs.size()));
  }

  static ProbVec uniform(std::size_t z) {
    require(z > 0, ErrorCode::empty_input, "empty distribution");
    ProbVec out;
    out.p.assign(z, Real(1) / Real(z));
    out.logp.assign(z, -std::log(Real(z)));
    return out;
  }

  static ProbVec one_hot(std::size_t z, std::size_t k) {
    require(k < z, ErrorCode::invalid_input, "one-hot index out of range");
    ProbVec out;
    out.p.assign(z, Real(0));
    out.logp.assign(z, -std::numeric_limits<Real>::infinity());
    out.p[k] = Real(1);
    out.logp[k] = Real(0);
    return out;
  }
};

/// Max-shifted log-sum-exp softmax.
template <typename Real> ProbVec<Real> softmax(std::span<const Real> logits) {
  require(!logits.empty(), ErrorCode::empty_input, "softmax of empty vector");
  Real mx = logits[0];
  for (Real v : logits) {
    require(std::isfinite(v), ErrorCode::invalid_input, "non-finite logit");
    mx = std::max(mx, v);
  }
  ProbVec<Real> out;
  const std::size_t z = logits.size();
  out.p.resize(z);
  out.logp.resize(z);
  Real sum = 0;
  for (std::size_t i = 0; i < z; ++i) {
    out.p[i] = std::exp(logits[i] - mx);
    sum += out.p[i];
  }
  const Real log_sum = std::log(sum);
  for (std::size_t i = 0; i < z; ++i) {
    out.logp[i] = (logits[i] - mx) - log_sum;
    out.p[i] /= sum;
  }
  return out;
}

template <typename Real> ProbVec<Real> softmax(std::span<Real> logits) {
  return softmax(std::span<const Real>(logits));
}

template <typename Real> ProbVec<Real> softmax(const std::vector<Real> &logits) {
  return softmax(std::span<const Real>(logits));
}

/// H(p) in nats. 0 log 0 contributes 0.
template <typename Real> Real entropy(const ProbVec<Real> &p) {
  Real h = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.p[i] > Real(0)) h -= p.p[i] * p.logp[i];
  return h;
}

/// H(p, q) = -sum p_i log q_i. Returns +inf when q_i = 0 where p_i > 0; see
/// is_divergence_overflow.
template <typename Real> Real cross_entropy(const ProbVec<Real> &p, const ProbVec<Real> &q) {
  require(p.size() == q.size(), ErrorCode::invalid_input,
          "cross-entropy of distributions with different support");
  Real h = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.p[i] == Real(0)) continue;
    if (std::isinf(q.logp[i])) return std::numeric_limits<Real>::infinity();
    h -= p.p[i] * q.logp[i];
  }
  return h;
}

/// KL(p || q) = H(p, q) - H(p), accumulated term-wise as p_i (log p_i - log q_i).
template <typename Real> Real kl_divergence(const ProbVec<Real> &p, const ProbVec<Real> &q) {
  require(p.size() == q.size(), ErrorCode::invalid_input,
          "KL of distributions with different support");
  Real d = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.p[i] == Real(0)) continue;
    if (std::isinf(q.logp[i])) return std::numeric_limits<Real>::infinity();
    d += p.p[i] * (p.logp[i] - q.logp[i]);
  }
  return d;
}

template <typename Real> bool is_divergence_overflow(Real value) {
  return std::isinf(value) && value > 0;
}

} // namespace selfteach
