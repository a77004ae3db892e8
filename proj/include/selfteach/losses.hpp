// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "selfteach/error.hpp"
#include "selfteach/numeric.hpp"

namespace selfteach {

// Declaration order is the row order of comparison summaries.
enum class LossVariant {
  baseline,
  label_smoothing,
  confidence_penalty,
  self_teach_with_h,
  self_teach_no_h,
  teacher_student,
};

inline constexpr std::array<LossVariant, 6> kAllVariants = {
    LossVariant::baseline,          LossVariant::label_smoothing,
    LossVariant::confidence_penalty, LossVariant::self_teach_with_h,
    LossVariant::self_teach_no_h,   LossVariant::teacher_student};

inline std::string_view to_string(LossVariant v) {
  switch (v) {
  case LossVariant::baseline: return "baseline";
  case LossVariant::label_smoothing: return "ls";
  case LossVariant::confidence_penalty: return "cp";
  case LossVariant::self_teach_with_h: return "st-h";
  case LossVariant::self_teach_no_h: return "st-noh";
  case LossVariant::teacher_student: return "ts";
  }
  return "?";
}

inline LossVariant parse_variant(std::string_view name) {
  for (auto v : kAllVariants)
    if (to_string(v) == name) return v;
  fail(ErrorCode::configuration,
       "unknown loss variant '" + std::string(name) +
           "' (expected baseline, ls, cp, st-h, st-noh or ts)");
}

inline bool uses_aux_head(LossVariant v) {
  return v == LossVariant::self_teach_with_h || v == LossVariant::self_teach_no_h;
}
inline bool uses_teacher(LossVariant v) { return v == LossVariant::teacher_student; }

struct LossConfig {
  LossVariant variant = LossVariant::baseline;
  double lambda = 0.0;
  std::vector<double> smoothing_prior; // empty selects uniform
  std::size_t aux_layer = 0;           // 0 selects the stack default
  bool teacher_ground_truth = false;   // keep H(y, p_S) in teacher-student

  void validate() const {
    require(lambda >= 0.0 && std::isfinite(lambda), ErrorCode::configuration,
            "lambda must be a finite nonnegative number");
    if (!smoothing_prior.empty()) {
      double s = 0;
      for (double q : smoothing_prior) {
        require(q >= 0.0 && std::isfinite(q), ErrorCode::configuration,
                "smoothing prior entries must be nonnegative");
        s += q;
      }
      require(std::abs(s - 1.0) < 1e-9, ErrorCode::configuration,
              "smoothing prior must sum to 1");
    }
  }

  template <typename Real> ProbVec<Real> prior(std::size_t classes) const {
    if (smoothing_prior.empty()) return ProbVec<Real>::uniform(classes);
    require(smoothing_prior.size() == classes, ErrorCode::configuration,
            "smoothing prior length does not match the number of classes");
    std::vector<Real> q(smoothing_prior.begin(), smoothing_prior.end());
    return ProbVec<Real>::from_probs(std::span<const Real>(q));
  }
};

namespace detail {
inline void check_lambda(double lambda) {
  require(lambda >= 0.0, ErrorCode::configuration, "lambda must be nonnegative");
}
template <typename Real> Real label_ce(std::size_t label, const ProbVec<Real> &p) {
  require(label < p.size(), ErrorCode::invalid_input, "label outside [0, classes)");
  return -p.logp[label];
}
} // namespace detail

// Frame-level objectives. `label` is the index of the one-hot target.

template <typename Real> Real baseline_loss(std::size_t label, std::span<const Real> top_logits) {
  return detail::label_ce(label, softmax(top_logits));
}

/// H(y, p_T) + lambda [H(p_T, p_l) - H(p_T)], or without the entropy term
/// H(y, p_T) + lambda H(p_T, p_l).
template <typename Real>
Real self_teach_loss(std::size_t label, std::span<const Real> top_logits,
                     std::span<const Real> aux_logits, Real lambda, bool include_entropy) {
  detail::check_lambda(lambda);
  require(top_logits.size() == aux_logits.size(), ErrorCode::invalid_input,
          "top and auxiliary logits differ in length");
  const auto pt = softmax(top_logits);
  const auto pl = softmax(aux_logits);
  const Real ce = detail::label_ce(label, pt);
  const Real reg = include_entropy ? cross_entropy(pt, pl) - entropy(pt) : cross_entropy(pt, pl);
  return ce + lambda * reg;
}

/// H(y, p_T) + lambda KL(q || p_T).
template <typename Real>
Real label_smooth_loss(std::size_t label, std::span<const Real> top_logits, Real lambda,
                       const ProbVec<Real> &prior) {
  detail::check_lambda(lambda);
  require(prior.size() == top_logits.size(), ErrorCode::invalid_input,
          "smoothing prior length does not match logits");
  const auto pt = softmax(top_logits);
  return detail::label_ce(label, pt) + lambda * kl_divergence(prior, pt);
}

/// H(y, p_T) - lambda H(p_T).
template <typename Real>
Real confidence_penalty_loss(std::size_t label, std::span<const Real> top_logits, Real lambda) {
  detail::check_lambda(lambda);
  const auto pt = softmax(top_logits);
  return detail::label_ce(label, pt) - lambda * entropy(pt);
}

/// [H(y, p_S)] + lambda H(p_teacher, p_S). The teacher is a constant.
template <typename Real>
Real teacher_student_loss(std::size_t label, std::span<const Real> student_logits,
                          const ProbVec<Real> &teacher, Real lambda, bool use_ground_truth) {
  detail::check_lambda(lambda);
  require(teacher.size() == student_logits.size(), ErrorCode::invalid_input,
          "teacher distribution length does not match logits");
  const auto ps = softmax(student_logits);
  const Real distill = lambda * cross_entropy(teacher, ps);
  return use_ground_truth ? detail::label_ce(label, ps) + distill : distill;
}

template <typename Real> struct FrameLoss {
  Real value = 0;
  Real ce = 0; // H(y, p_T), the label term alone
  std::vector<Real> dtop;
  std::vector<Real> daux; // zero vector when the variant has no aux term
};

/// Loss value and analytic gradients w.r.t. both logit heads for one frame.
///
/// `aux_logits` is read by the self-teaching variants, `teacher` by
/// teacher-student. For self-teaching the gradient flows through both
/// posteriors; the teacher never receives gradient.
template <typename Real>
FrameLoss<Real> loss_grad_logits(const LossConfig &config, std::size_t label,
                                 std::span<const Real> top_logits,
                                 std::span<const Real> aux_logits = {},
                                 const ProbVec<Real> *teacher = nullptr,
                                 const ProbVec<Real> *prior = nullptr) {
  detail::check_lambda(config.lambda);
  const Real lambda = static_cast<Real>(config.lambda);
  const std::size_t z = top_logits.size();
  const auto pt = softmax(top_logits);
  FrameLoss<Real> out;
  out.daux.assign(z, Real(0));
  out.dtop.resize(z);
  const Real ce = detail::label_ce(label, pt);
  out.ce = ce;
  // (p - y), the softmax cross-entropy gradient
  for (std::size_t j = 0; j < z; ++j) out.dtop[j] = pt.p[j] - (j == label ? Real(1) : Real(0));

  switch (config.variant) {
  case LossVariant::baseline:
    out.value = ce;
    break;

  case LossVariant::label_smoothing: {
    const auto q = prior ? *prior : config.prior<Real>(z);
    require(q.size() == z, ErrorCode::configuration, "smoothing prior length mismatch");
    out.value = ce + lambda * kl_divergence(q, pt);
    for (std::size_t j = 0; j < z; ++j) out.dtop[j] += lambda * (pt.p[j] - q.p[j]);
    break;
  }

  case LossVariant::confidence_penalty: {
    const Real h = entropy(pt);
    out.value = ce - lambda * h;
    // dH/dz_j = -p_j (log p_j + H)
    for (std::size_t j = 0; j < z; ++j) out.dtop[j] += lambda * pt.p[j] * (pt.logp[j] + h);
    break;
  }

  case LossVariant::self_teach_with_h:
  case LossVariant::self_teach_no_h: {
    require(aux_logits.size() == z, ErrorCode::configuration,
            "self-teaching loss needs auxiliary logits of the same length");
    const auto pl = softmax(aux_logits);
    const Real hpq = cross_entropy(pt, pl);
    if (config.variant == LossVariant::self_teach_with_h) {
      const Real h = entropy(pt);
      out.value = ce + lambda * (hpq - h);
      // d KL(p||q) / dz_j = p_j ((log p_j - log q_j) - KL)
      const Real kl = hpq - h;
      for (std::size_t j = 0; j < z; ++j)
        out.dtop[j] += lambda * pt.p[j] * ((pt.logp[j] - pl.logp[j]) - kl);
    } else {
      out.value = ce + lambda * hpq;
      // d H(p,q) / dz_j = -p_j (log q_j + H(p,q))
      for (std::size_t j = 0; j < z; ++j)
        out.dtop[j] -= lambda * pt.p[j] * (pl.logp[j] + hpq);
    }
    for (std::size_t j = 0; j < z; ++j) out.daux[j] = lambda * (pl.p[j] - pt.p[j]);
    break;
  }

  case LossVariant::teacher_student: {
    require(teacher != nullptr && teacher->size() == z, ErrorCode::configuration,
            "teacher-student loss needs a teacher distribution of matching length");
    const Real distill = lambda * cross_entropy(*teacher, pt);
    if (config.teacher_ground_truth) {
      out.value = ce + distill;
      for (std::size_t j = 0; j < z; ++j) out.dtop[j] += lambda * (pt.p[j] - teacher->p[j]);
    } else {
      out.value = distill;
      for (std::size_t j = 0; j < z; ++j) out.dtop[j] = lambda * (pt.p[j] - teacher->p[j]);
    }
    break;
  }
  }
  return out;
}

} // namespace selfteach
