// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "selfteach/checkpoint.hpp"
#include "selfteach/data.hpp"
#include "selfteach/losses.hpp"
#include "selfteach/network.hpp"
#include "selfteach/optimizer.hpp"

namespace selfteach {

struct TbpttConfig {
  std::size_t chunk_len = 16;
  bool carry_state = true;

  void validate() const {
    require(chunk_len >= 1, ErrorCode::configuration, "chunk_len must be >= 1");
  }
};

/// Rejects loss/model/teacher combinations that cannot be trained.
template <typename Real>
void check_loss_setup(const StackParams<Real> &model, const LossConfig &loss,
                      const std::type_identity_t<StackParams<Real>> *teacher) {
  loss.validate();
  if (uses_aux_head(loss.variant)) {
    require(model.spec.has_aux(), ErrorCode::configuration,
            "self-teaching loss requested but the stack has no auxiliary head");
    require(loss.aux_layer == 0 || loss.aux_layer == model.spec.resolved_aux_layer(),
            ErrorCode::configuration,
            "loss aux_layer " + std::to_string(loss.aux_layer) +
                " does not match the stack's auxiliary layer " +
                std::to_string(model.spec.resolved_aux_layer()));
  }
  if (uses_teacher(loss.variant)) {
    require(teacher != nullptr, ErrorCode::configuration,
            "teacher-student loss requires a frozen teacher model");
    require(teacher->spec.input_dim == model.spec.input_dim &&
                teacher->spec.classes == model.spec.classes,
            ErrorCode::configuration, "teacher and student disagree on input or class dimension");
  } else {
    require(teacher == nullptr, ErrorCode::configuration,
            "a teacher model is only accepted by the teacher-student loss");
  }
  if (loss.variant == LossVariant::label_smoothing && !loss.smoothing_prior.empty())
    require(loss.smoothing_prior.size() == model.spec.classes, ErrorCode::configuration,
            "smoothing prior length does not match the number of classes");
}

template <typename Real> void accumulate(StackParams<Real> &into, const StackParams<Real> &g) {
  std::vector<const Tensor2<Real> *> src;
  g.for_each_block([&](const std::string &, const Tensor2<Real> &t) { src.push_back(&t); });
  std::size_t i = 0;
  into.for_each_block([&](const std::string &, Tensor2<Real> &t) { t += *src.at(i++); });
}

template <typename Real> struct BatchGradient {
  double loss = 0; // mean objective over frames
  double ce = 0;   // mean H(y, p_T) over frames
  std::size_t frames = 0;
  StackParams<Real> grads;
  std::vector<StackState<Real>> final_states; // per sequence
  // d loss / d(initial state) of every chunk, in processing order. Filled on
  // request; the trainer never feeds these back across chunk boundaries.
  std::vector<StackState<Real>> chunk_state_grads;
};

namespace detail {
template <typename Real>
Tensor2<Real> frames_as(const SequenceExample &seq, std::size_t begin, std::size_t end) {
  Tensor2<Real> out(end - begin, seq.frames.cols());
  for (std::size_t t = begin; t < end; ++t) {
    auto src = seq.frames.row(t);
    auto dst = out.row(t - begin);
    for (std::size_t d = 0; d < src.size(); ++d) dst[d] = static_cast<Real>(src[d]);
  }
  return out;
}
} // namespace detail

/// Gradient of the mean frame loss over `batch` at fixed parameters.
///
/// Each sequence is cut into chunks of chunk_len frames (the last may be
/// shorter). Hidden and cell states flow across chunk boundaries when
/// carry_state is set; gradients stop there.
template <typename Real>
BatchGradient<Real> batch_gradient(const StackParams<Real> &params,
                                   std::span<const SequenceExample *const> batch,
                                   const LossConfig &loss, const TbpttConfig &tbptt,
                                   const std::type_identity_t<StackParams<Real>> *teacher = nullptr,
                                   bool keep_chunk_state_grads = false) {
  check_loss_setup(params, loss, teacher);
  tbptt.validate();
  require(!batch.empty(), ErrorCode::empty_input, "empty batch");

  BatchGradient<Real> out;
  out.grads = StackParams<Real>(params.spec);
  out.grads.set_zero();
  for (const auto *seq : batch) out.frames += seq->length();
  require(out.frames > 0, ErrorCode::empty_input, "batch has no frames");
  const Real inv_n = Real(1) / Real(out.frames);
  const bool want_aux = uses_aux_head(loss.variant);
  const std::size_t z = params.spec.classes;
  const auto prior = loss.variant == LossVariant::label_smoothing
                         ? loss.prior<Real>(z)
                         : ProbVec<Real>::uniform(z);

  double loss_sum = 0, ce_sum = 0;
  for (const auto *seq : batch) {
    require(seq->frames.cols() == params.spec.input_dim, ErrorCode::configuration,
            "sequence feature width does not match the model");
    auto state = zero_state<Real>(params.spec);
    StackState<Real> teacher_state;
    if (teacher) teacher_state = zero_state<Real>(teacher->spec);

    for (std::size_t begin = 0; begin < seq->length(); begin += tbptt.chunk_len) {
      const std::size_t end = std::min(seq->length(), begin + tbptt.chunk_len);
      const auto frames = detail::frames_as<Real>(*seq, begin, end);
      auto fwd = stack_forward(params, frames, &state, want_aux);

      Tensor2<Real> teacher_logits;
      if (teacher) {
        auto tf = stack_forward(*teacher, frames, &teacher_state, false);
        teacher_logits = std::move(tf.top_logits);
        teacher_state = tbptt.carry_state ? std::move(tf.final_state)
                                          : zero_state<Real>(teacher->spec);
      }

      Tensor2<Real> dtop(end - begin, z);
      Tensor2<Real> daux;
      if (want_aux) daux = Tensor2<Real>(end - begin, z);
      for (std::size_t t = 0; t < end - begin; ++t) {
        const std::size_t label = seq->labels[begin + t];
        ProbVec<Real> tprobs;
        if (teacher) tprobs = softmax(teacher_logits.row(t));
        const auto fl = loss_grad_logits<Real>(
            loss, label, fwd.top_logits.row(t),
            want_aux ? fwd.aux_logits.row(t) : std::span<const Real>{},
            teacher ? &tprobs : nullptr, &prior);
        loss_sum += double(fl.value);
        ce_sum += double(fl.ce);
        auto dt = dtop.row(t);
        for (std::size_t j = 0; j < z; ++j) dt[j] = fl.dtop[j] * inv_n;
        if (want_aux) {
          auto da = daux.row(t);
          for (std::size_t j = 0; j < z; ++j) da[j] = fl.daux[j] * inv_n;
        }
      }

      auto g = stack_backward(params, fwd.cache, dtop, daux);
      accumulate(out.grads, g.params);
      if (keep_chunk_state_grads) out.chunk_state_grads.push_back(std::move(g.initial_state));
      state = tbptt.carry_state ? std::move(fwd.final_state) : zero_state<Real>(params.spec);
    }
    out.final_states.push_back(std::move(state));
  }
  out.loss = loss_sum / double(out.frames);
  out.ce = ce_sum / double(out.frames);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

template <typename Real> struct TrainState {
  StackParams<Real> params;
  OptimizerState<Real> optimizer;
  std::size_t epoch = 0; // completed epochs
  std::uint64_t seed = 0;

  TrainState() = default;
  TrainState(StackParams<Real> p, std::uint64_t s)
      : params(std::move(p)), optimizer(params.spec), seed(s) {
    optimizer.first.set_zero();
    optimizer.second.set_zero();
  }

  friend bool operator==(const TrainState &, const TrainState &) = default;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_ce = 0;
  std::size_t batches = 0;
};

template <typename Real> Checkpoint to_checkpoint(const TrainState<Real> &state) {
  Checkpoint ck;
  put_params(ck, state.params);
  put_params(ck, state.optimizer.first, "opt/first/");
  put_params(ck, state.optimizer.second, "opt/second/");
  // The seed is split into 32-bit halves so it survives the f64 encoding.
  ck.put_scalars("meta/train", {double(state.epoch), double(state.optimizer.step),
                                double(state.seed >> 32), double(state.seed & 0xFFFFFFFFull)});
  return ck;
}

template <typename Real> TrainState<Real> train_state_from_checkpoint(const Checkpoint &ck) {
  TrainState<Real> st;
  st.params = get_params<Real>(ck);
  st.optimizer.first = get_params<Real>(ck, st.params.spec, "opt/first/");
  st.optimizer.second = get_params<Real>(ck, st.params.spec, "opt/second/");
  const auto &meta = ck.get("meta/train");
  require(meta.size() == 4, ErrorCode::invalid_state, "meta/train must hold 4 values");
  st.epoch = std::size_t(meta[0]);
  st.optimizer.step = std::uint64_t(meta[1]);
  st.seed = (std::uint64_t(meta[2]) << 32) | std::uint64_t(meta[3]);
  return st;
}

/// Batches for one epoch: a seeded shuffle, then grouped by sequence length
/// so that no batch mixes lengths.
inline std::vector<std::vector<std::size_t>> epoch_batches(const Dataset &data, std::size_t batch_size,
                                                           std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(data.sequences.size());
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq sseq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(epoch)};
  std::mt19937_64 rng(sseq);
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return data.sequences[a].length() < data.sequences[b].length();
  });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t idx : order) {
    if (batches.empty() || batches.back().size() == batch_size ||
        data.sequences[batches.back().front()].length() != data.sequences[idx].length())
      batches.emplace_back();
    batches.back().push_back(idx);
  }
  return batches;
}

namespace detail {
template <typename Real> std::string norm_report(const StackParams<Real> &p) {
  std::ostringstream os;
  bool first = true;
  p.for_each_block([&](const std::string &name, const Tensor2<Real> &t) {
    os << (first ? "" : ", ") << name << "=" << std::sqrt(linalg::squared_norm(t));
    first = false;
  });
  return os.str();
}
} // namespace detail

template <typename Real>
using EpochHook = std::function<void(const EpochMetrics &, const TrainState<Real> &)>;

/// Runs epochs until state.epoch == opt.epochs. One parameter update per batch.
template <typename Real>
std::vector<EpochMetrics> train_epochs(TrainState<Real> &state, const Dataset &data,
                                       const LossConfig &loss, const OptimizerConfig &opt,
                                       const TbpttConfig &tbptt,
                                       const std::type_identity_t<StackParams<Real>> *teacher = nullptr,
                                       const EpochHook<Real> &hook = {}) {
  opt.validate();
  tbptt.validate();
  check_loss_setup(state.params, loss, teacher);
  require(!data.sequences.empty(), ErrorCode::empty_input, "training dataset is empty");
  require(data.dim == state.params.spec.input_dim && data.classes == state.params.spec.classes,
          ErrorCode::configuration, "dataset dimensions do not match the model");
  for (const auto &seq : data.sequences)
    require(seq.frames.all_finite(), ErrorCode::invalid_input, "training frames contain NaN or Inf");

  std::vector<EpochMetrics> history;
  while (state.epoch < opt.epochs) {
    const auto batches = epoch_batches(data, opt.batch_size, state.seed, state.epoch);
    EpochMetrics m;
    m.epoch = state.epoch + 1;
    double loss_sum = 0, ce_sum = 0;
    std::size_t frame_sum = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      std::vector<const SequenceExample *> seqs;
      for (auto idx : batches[bi]) seqs.push_back(&data.sequences[idx]);
      auto diverged = [&](const std::string &what) {
        fail(ErrorCode::numerical, what + " at epoch " + std::to_string(m.epoch) + ", batch " +
                                       std::to_string(bi) + "; parameter norms: " +
                                       detail::norm_report(state.params));
      };
      BatchGradient<Real> bg;
      try {
        bg = batch_gradient(state.params, std::span<const SequenceExample *const>(seqs), loss,
                            tbptt, teacher);
      } catch (const Error &e) {
        // Inputs were checked above, so a non-finite value here came from
        // the parameters.
        if (e.code() != ErrorCode::invalid_input) throw;
        diverged(std::string("training diverged (") + e.what() + ")");
      }
      bool finite = std::isfinite(bg.loss);
      if (finite)
        bg.grads.for_each_block([&](const std::string &, const Tensor2<Real> &t) {
          finite = finite && t.all_finite();
        });
      if (!finite) diverged("non-finite loss or gradient");
      apply_update(state.params, bg.grads, state.optimizer, opt);
      loss_sum += bg.loss * double(bg.frames);
      ce_sum += bg.ce * double(bg.frames);
      frame_sum += bg.frames;
    }
    m.batches = batches.size();
    m.train_loss = loss_sum / double(frame_sum);
    m.train_ce = ce_sum / double(frame_sum);
    ++state.epoch;
    history.push_back(m);
    if (hook) hook(m, state);
  }
  return history;
}

template <typename Real> struct TrainResult {
  TrainState<Real> state;
  std::vector<EpochMetrics> metrics;
};

template <typename Real>
TrainResult<Real> train(StackParams<Real> model, const Dataset &data, const LossConfig &loss,
                        const OptimizerConfig &opt, const TbpttConfig &tbptt,
                        const std::type_identity_t<StackParams<Real>> *teacher = nullptr,
                        const EpochHook<Real> &hook = {}) {
  TrainResult<Real> r{TrainState<Real>(std::move(model), opt.seed), {}};
  r.metrics = train_epochs(r.state, data, loss, opt, tbptt, teacher, hook);
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalMetrics {
  double frame_cross_entropy = 0;
  double frame_error_rate = 0;

  friend bool operator==(const EvalMetrics &, const EvalMetrics &) = default;
};

/// Frame cross-entropy and argmax error of the top head over whole sequences
/// starting from zero state. The auxiliary head is never evaluated.
template <typename Real> EvalMetrics evaluate(const StackParams<Real> &model, const Dataset &data) {
  require(data.dim == model.spec.input_dim && data.classes == model.spec.classes,
          ErrorCode::configuration,
          "dataset (classes=" + std::to_string(data.classes) + ", dim=" + std::to_string(data.dim) +
              ") does not match the model (classes=" + std::to_string(model.spec.classes) +
              ", input_dim=" + std::to_string(model.spec.input_dim) + ")");
  require(!data.sequences.empty(), ErrorCode::empty_input, "evaluation dataset is empty");
  double ce = 0;
  std::size_t errors = 0, frames = 0;
  for (const auto &seq : data.sequences) {
    const auto x = detail::frames_as<Real>(seq, 0, seq.length());
    const auto fwd = stack_forward(model, x, nullptr, false);
    for (std::size_t t = 0; t < seq.length(); ++t) {
      const auto row = fwd.top_logits.row(t);
      const auto p = softmax(row);
      ce -= double(p.logp[seq.labels[t]]);
      const auto best = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
      errors += best != seq.labels[t];
      ++frames;
    }
  }
  return {ce / double(frames), double(errors) / double(frames)};
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct GradcheckOptions {
  std::size_t sequences = 2;
  std::size_t steps = 0; // 0 draws a length in [2, 6] from the seed
  double step = 1e-5;
  double tolerance = 1e-4;
  double abs_tolerance = 1e-10; // below this, differences are finite-difference rounding noise
  std::size_t max_params = 10000;
  // Test hook applied to the analytic gradients before comparison.
  std::function<void(StackGradients<double> &)> corrupt;
};

struct BlockError {
  std::string name;
  double max_rel_error = 0;
  bool pass = true;
};

struct GradcheckReport {
  std::vector<BlockError> blocks;
  double worst = 0;           // relative
  double worst_abs = 0;       // absolute
  double largest_grad = 0;
  bool pass = true;
};

/// Compares analytic gradients with central differences of the mean frame
/// loss on random data. Covers every parameter block and the initial states.
inline GradcheckReport gradcheck(const StackSpec &spec, const LossConfig &loss, std::uint64_t seed,
                                 const GradcheckOptions &options = {}) {
  const auto counts = param_count(spec);
  require(counts.training <= options.max_params, ErrorCode::configuration,
          "gradcheck refuses stacks above " + std::to_string(options.max_params) +
              " parameters (this one has " + std::to_string(counts.training) + ")");

  std::mt19937_64 rng(seed ^ 0xA5A5A5A5DEADBEEFull);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto jitter = [&](StackParams<double> &p, double scale) {
    p.for_each_block([&](const std::string &, Tensor2<double> &t) {
      for (auto &v : t.values()) v += scale * normal(rng);
    });
  };

  auto params = init_params<double>(spec, seed);
  jitter(params, 0.1);
  std::optional<StackParams<double>> teacher;
  if (uses_teacher(loss.variant)) {
    StackSpec ts = spec;
    ts.aux_head = false;
    teacher = init_params<double>(ts, seed + 1);
    jitter(*teacher, 0.5);
  }
  check_loss_setup(params, loss, teacher ? &*teacher : nullptr);

  const std::size_t steps =
      options.steps ? options.steps : std::uniform_int_distribution<std::size_t>(2, 6)(rng);
  std::vector<Tensor2<double>> xs;
  std::vector<std::vector<std::size_t>> ys;
  std::vector<StackState<double>> init;
  std::uniform_int_distribution<std::size_t> label(0, spec.classes - 1);
  for (std::size_t s = 0; s < options.sequences; ++s) {
    Tensor2<double> x(steps, spec.input_dim);
    for (auto &v : x.values()) v = normal(rng);
    std::vector<std::size_t> y(steps);
    for (auto &l : y) l = label(rng);
    auto st = zero_state<double>(spec);
    for (auto &l : st) {
      for (auto &v : l.h) v = 0.5 * normal(rng);
      for (auto &v : l.c) v = 0.5 * normal(rng);
    }
    xs.push_back(std::move(x));
    ys.push_back(std::move(y));
    init.push_back(std::move(st));
  }
  const double inv_n = 1.0 / double(steps * options.sequences);
  const bool want_aux = uses_aux_head(loss.variant);
  const auto prior = loss.prior<double>(spec.classes);

  std::vector<Tensor2<double>> teacher_logits;
  if (teacher)
    for (const auto &x : xs) teacher_logits.push_back(stack_forward(*teacher, x).top_logits);

  auto frame_losses = [&](const ForwardResult<double> &fwd, std::size_t s, Tensor2<double> *dtop,
                          Tensor2<double> *daux) {
    double total = 0;
    for (std::size_t t = 0; t < steps; ++t) {
      ProbVec<double> tp;
      if (teacher) tp = softmax(teacher_logits[s].row(t));
      const auto fl = loss_grad_logits<double>(
          loss, ys[s][t], fwd.top_logits.row(t),
          want_aux ? fwd.aux_logits.row(t) : std::span<const double>{}, teacher ? &tp : nullptr,
          &prior);
      total += fl.value;
      if (dtop)
        for (std::size_t j = 0; j < spec.classes; ++j) (*dtop)(t, j) = fl.dtop[j] * inv_n;
      if (daux && want_aux)
        for (std::size_t j = 0; j < spec.classes; ++j) (*daux)(t, j) = fl.daux[j] * inv_n;
    }
    return total;
  };

  auto objective = [&](const StackParams<double> &p, const std::vector<StackState<double>> &s0) {
    double total = 0;
    for (std::size_t s = 0; s < xs.size(); ++s)
      total += frame_losses(stack_forward(p, xs[s], &s0[s], want_aux), s, nullptr, nullptr);
    return total * inv_n;
  };

  // Analytic.
  StackGradients<double> analytic{StackParams<double>(spec), {}};
  analytic.params.set_zero();
  std::vector<StackState<double>> init_grads;
  for (std::size_t s = 0; s < xs.size(); ++s) {
    auto fwd = stack_forward(params, xs[s], &init[s], want_aux);
    Tensor2<double> dtop(steps, spec.classes), daux;
    if (want_aux) daux = Tensor2<double>(steps, spec.classes);
    frame_losses(fwd, s, &dtop, &daux);
    auto g = stack_backward(params, fwd.cache, dtop, daux);
    accumulate(analytic.params, g.params);
    init_grads.push_back(std::move(g.initial_state));
  }
  if (options.corrupt) {
    analytic.initial_state = init_grads.front();
    options.corrupt(analytic);
    init_grads.front() = analytic.initial_state;
  }

  GradcheckReport report;
  auto rel_error = [&](double a, double n) {
    const double diff = std::abs(a - n);
    report.worst_abs = std::max(report.worst_abs, diff);
    report.largest_grad = std::max(report.largest_grad, std::abs(a));
    if (diff <= options.abs_tolerance) return 0.0;
    return diff / std::max(std::abs(a), std::abs(n));
  };
  auto central = [&](double &slot, auto &&eval) {
    const double saved = slot;
    slot = saved + options.step;
    const double up = eval();
    slot = saved - options.step;
    const double down = eval();
    slot = saved;
    return (up - down) / (2.0 * options.step);
  };
  auto record = [&](const std::string &name, double err) {
    BlockError b{name, err, err < options.tolerance};
    report.worst = std::max(report.worst, err);
    report.pass = report.pass && b.pass;
    report.blocks.push_back(std::move(b));
  };

  std::vector<const Tensor2<double> *> agrads;
  analytic.params.for_each_block(
      [&](const std::string &, const Tensor2<double> &t) { agrads.push_back(&t); });
  std::size_t bi = 0;
  params.for_each_block([&](const std::string &name, Tensor2<double> &t) {
    const auto &a = *agrads[bi++];
    double worst = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double num = central(t[i], [&] { return objective(params, init); });
      worst = std::max(worst, rel_error(a[i], num));
    }
    record(name, worst);
  });

  for (std::size_t s = 0; s < init.size(); ++s)
    for (std::size_t k = 0; k < spec.layers; ++k) {
      const std::string pre = "init/seq" + std::to_string(s + 1) + "/layer" + std::to_string(k + 1);
      double wh = 0, wc = 0;
      for (std::size_t i = 0; i < spec.proj; ++i) {
        const double num = central(init[s][k].h[i], [&] { return objective(params, init); });
        wh = std::max(wh, rel_error(init_grads[s][k].h[i], num));
      }
      for (std::size_t i = 0; i < spec.cell; ++i) {
        const double num = central(init[s][k].c[i], [&] { return objective(params, init); });
        wc = std::max(wc, rel_error(init_grads[s][k].c[i], num));
      }
      record(pre + "/h", wh);
      record(pre + "/c", wc);
    }
  return report;
}

} // namespace selfteach
