// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "selfteach/error.hpp"
#include "selfteach/tensor.hpp"

namespace selfteach {

/// Architecture of an LSTM-with-projection stack plus its heads.
///
/// Layers are numbered 1..layers. The auxiliary head reads the projected
/// output of layer `aux_layer`, which must lie strictly below the top layer.
struct StackSpec {
  std::size_t layers = 6;
  std::size_t input_dim = 8;
  std::size_t cell = 32;
  std::size_t proj = 16;
  std::size_t classes = 10;
  bool aux_head = true;
  std::size_t aux_layer = 0; // 0 selects ceil(layers / 2)
  bool share_head = false;   // aux logits reuse the output head weights

  std::size_t resolved_aux_layer() const {
    return aux_layer != 0 ? aux_layer : (layers + 1) / 2;
  }
  bool has_aux() const { return aux_head; }
  bool owns_aux_weights() const { return aux_head && !share_head; }

  void validate() const {
    require(layers >= 1, ErrorCode::configuration, "stack needs at least one layer");
    require(input_dim >= 1 && cell >= 1 && proj >= 1 && classes >= 1,
            ErrorCode::configuration, "all stack dimensions must be positive");
    if (aux_head) {
      const auto l = resolved_aux_layer();
      require(l >= 1 && l < layers, ErrorCode::configuration,
              "auxiliary layer must satisfy 1 <= aux_layer < layers (got aux_layer=" +
                  std::to_string(l) + ", layers=" + std::to_string(layers) + ")");
    }
  }

  std::size_t layer_input_dim(std::size_t k) const { return k == 0 ? input_dim : proj; }

  friend bool operator==(const StackSpec &, const StackSpec &) = default;
};

struct ParamCount {
  std::uint64_t training = 0;
  std::uint64_t inference = 0;
};

/// Closed-form parameter counts. Inference excludes the auxiliary head.
inline ParamCount param_count(const StackSpec &spec) {
  spec.validate();
  std::uint64_t total = 0;
  const std::uint64_t c = spec.cell, p = spec.proj, z = spec.classes;
  for (std::size_t k = 0; k < spec.layers; ++k) {
    const std::uint64_t in = spec.layer_input_dim(k);
    total += 4 * c * (in + p) + 4 * c + p * c;
  }
  total += z * p + z;
  ParamCount out;
  out.inference = total;
  out.training = total + (spec.owns_aux_weights() ? z * p + z : 0);
  return out;
}

// Gate blocks inside the 4*cell rows of W, R and b.
enum Gate : std::size_t { kInput = 0, kForget = 1, kCandidate = 2, kOutput = 3 };

template <typename Real> struct LstmLayerParams {
  Tensor2<Real> W; // 4*cell x input_dim
  Tensor2<Real> R; // 4*cell x proj
  Tensor2<Real> b; // 4*cell x 1
  Tensor2<Real> P; // proj x cell

  LstmLayerParams() = default;
  LstmLayerParams(std::size_t input_dim, std::size_t cell, std::size_t proj)
      : W(4 * cell, input_dim), R(4 * cell, proj), b(4 * cell, 1), P(proj, cell) {}

  std::size_t cell() const { return P.cols(); }
  std::size_t proj() const { return P.rows(); }
  std::size_t input_dim() const { return W.cols(); }

  void check() const {
    const auto c = cell();
    require(W.rows() == 4 * c && R.rows() == 4 * c && b.rows() == 4 * c &&
                b.cols() == 1 && R.cols() == proj(),
            ErrorCode::invalid_input, "inconsistent LSTM layer shapes");
  }

  friend bool operator==(const LstmLayerParams &, const LstmLayerParams &) = default;
};

template <typename Real> struct Head {
  Tensor2<Real> W; // classes x proj
  Tensor2<Real> b; // classes x 1

  Head() = default;
  Head(std::size_t classes, std::size_t proj) : W(classes, proj), b(classes, 1) {}

  friend bool operator==(const Head &, const Head &) = default;
};

template <typename Real> struct StackParams {
  StackSpec spec;
  std::vector<LstmLayerParams<Real>> layers;
  Head<Real> out;
  std::optional<Head<Real>> aux;

  StackParams() = default;
  explicit StackParams(const StackSpec &s) : spec(s), out(s.classes, s.proj) {
    spec.validate();
    for (std::size_t k = 0; k < s.layers; ++k)
      layers.emplace_back(s.layer_input_dim(k), s.cell, s.proj);
    if (s.owns_aux_weights()) aux.emplace(s.classes, s.proj);
  }

  /// Visits every parameter block in a fixed order with a stable name.
  template <typename F> void for_each_block(F &&f) {
    visit_blocks(*this, f);
  }
  template <typename F> void for_each_block(F &&f) const {
    visit_blocks(*this, f);
  }

  void set_zero() {
    for_each_block([](const std::string &, Tensor2<Real> &t) { t.set_zero(); });
  }

  /// Copy without the auxiliary head, as deployed for inference.
  StackParams without_aux() const {
    StackParams copy = *this;
    copy.aux.reset();
    copy.spec.aux_head = false;
    copy.spec.share_head = false;
    return copy;
  }

  template <typename Other> StackParams<Other> cast() const {
    StackParams<Other> o;
    o.spec = spec;
    for (const auto &l : layers) {
      auto &d = o.layers.emplace_back();
      d.W = l.W.template cast<Other>();
      d.R = l.R.template cast<Other>();
      d.b = l.b.template cast<Other>();
      d.P = l.P.template cast<Other>();
    }
    auto head = [](const Head<Real> &h) {
      Head<Other> d;
      d.W = h.W.template cast<Other>();
      d.b = h.b.template cast<Other>();
      return d;
    };
    o.out = head(out);
    if (aux) o.aux = head(*aux);
    return o;
  }

  friend bool operator==(const StackParams &, const StackParams &) = default;

private:
  template <typename Self, typename F> static void visit_blocks(Self &self, F &f) {
    for (std::size_t k = 0; k < self.layers.size(); ++k) {
      const std::string pre = "layer" + std::to_string(k + 1) + "/";
      f(pre + "W", self.layers[k].W);
      f(pre + "R", self.layers[k].R);
      f(pre + "b", self.layers[k].b);
      f(pre + "P", self.layers[k].P);
    }
    f(std::string("out/W"), self.out.W);
    f(std::string("out/b"), self.out.b);
    if (self.aux) {
      f(std::string("aux/W"), self.aux->W);
      f(std::string("aux/b"), self.aux->b);
    }
  }
};

/// FNV-1a style hash over shapes and raw value words. Pairs a forward cache
/// with the parameters that produced it.
template <typename Real> std::uint64_t fingerprint(const StackParams<Real> &params) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void *p, std::size_t n) {
    const auto *bytes = static_cast<const unsigned char *>(p);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
      std::uint64_t w;
      std::memcpy(&w, bytes + i, 8);
      h = (h ^ w) * 1099511628211ull;
    }
    for (; i < n; ++i) h = (h ^ bytes[i]) * 1099511628211ull;
  };
  params.for_each_block([&](const std::string &, const Tensor2<Real> &t) {
    const std::uint64_t shape[2] = {t.rows(), t.cols()};
    mix(shape, sizeof(shape));
    mix(t.data(), t.size() * sizeof(Real));
  });
  const std::uint64_t flags[3] = {params.spec.has_aux(), params.spec.share_head,
                                  params.spec.resolved_aux_layer()};
  mix(flags, sizeof(flags));
  return h;
}

/// Glorot-uniform weights; zero biases except forget gate = 1. All draws are
/// made in double from a 64-bit Mersenne twister, layer by layer, then the
/// output head, then the auxiliary head, so adding an auxiliary head leaves
/// every other weight unchanged.
template <typename Real> StackParams<Real> init_params(const StackSpec &spec, std::uint64_t seed) {
  StackParams<Real> params(spec);
  std::mt19937_64 rng(seed);
  auto glorot = [&rng](Tensor2<Real> &t, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
    for (auto &v : t.values()) {
      const double u = double(rng() >> 11) * 0x1.0p-53; // [0, 1)
      v = static_cast<Real>((2.0 * u - 1.0) * limit);
    }
  };
  for (auto &layer : params.layers) {
    const auto c = layer.cell();
    glorot(layer.W, layer.input_dim(), 4 * c);
    glorot(layer.R, layer.proj(), 4 * c);
    glorot(layer.P, c, layer.proj());
    for (std::size_t j = 0; j < c; ++j) layer.b[kForget * c + j] = Real(1);
  }
  glorot(params.out.W, spec.proj, spec.classes);
  if (params.aux) glorot(params.aux->W, spec.proj, spec.classes);
  return params;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <typename Real> struct LayerState {
  std::vector<Real> h; // proj
  std::vector<Real> c; // cell

  friend bool operator==(const LayerState &, const LayerState &) = default;
};

template <typename Real> using StackState = std::vector<LayerState<Real>>;

template <typename Real> StackState<Real> zero_state(const StackSpec &spec) {
  StackState<Real> s(spec.layers);
  for (auto &l : s) {
    l.h.assign(spec.proj, Real(0));
    l.c.assign(spec.cell, Real(0));
  }
  return s;
}

/// Per-timestep quantities the reverse pass needs for one cell step.
template <typename Real> struct CellCacheEntry {
  std::vector<Real> gates;  // 4*cell activations [i f g o]
  std::vector<Real> tanh_c; // cell
};

template <typename Real> struct CellStep {
  std::vector<Real> h;
  std::vector<Real> c;
  CellCacheEntry<Real> cache;
};

namespace detail {

template <typename Real> inline Real sigmoid(Real x) {
  return Real(1) / (Real(1) + std::exp(-x));
}

// Writes gates (activated), c, tanh(c), h. `gates` must have 4*cell entries.
template <typename Real>
void cell_step(const LstmLayerParams<Real> &p, std::span<const Real> x,
               std::span<const Real> h_prev, std::span<const Real> c_prev,
               std::span<Real> gates, std::span<Real> c, std::span<Real> tanh_c,
               std::span<Real> h, std::span<Real> m_scratch) {
  const std::size_t n = p.cell();
  std::copy(p.b.values().begin(), p.b.values().end(), gates.begin());
  linalg::gemv_acc(p.W, x, gates);
  linalg::gemv_acc(p.R, h_prev, gates);
  for (std::size_t j = 0; j < n; ++j) {
    const Real i = sigmoid(gates[kInput * n + j]);
    const Real f = sigmoid(gates[kForget * n + j]);
    const Real g = std::tanh(gates[kCandidate * n + j]);
    const Real o = sigmoid(gates[kOutput * n + j]);
    gates[kInput * n + j] = i;
    gates[kForget * n + j] = f;
    gates[kCandidate * n + j] = g;
    gates[kOutput * n + j] = o;
    c[j] = f * c_prev[j] + i * g;
    tanh_c[j] = std::tanh(c[j]);
    m_scratch[j] = o * tanh_c[j];
  }
  std::fill(h.begin(), h.end(), Real(0));
  linalg::gemv_acc(p.P, std::span<const Real>(m_scratch.data(), n), h);
}

} // namespace detail

/// One LSTM-with-projection step: h_t = P (o * tanh(c_t)).
template <typename Real>
CellStep<Real> lstm_cell_forward(const LstmLayerParams<Real> &params,
                                 std::span<const Real> x, std::span<const Real> h_prev,
                                 std::span<const Real> c_prev) {
  params.check();
  require(x.size() == params.input_dim() && h_prev.size() == params.proj() &&
              c_prev.size() == params.cell(),
          ErrorCode::invalid_input, "lstm_cell_forward: input/state shape mismatch");
  for (auto span : {x, h_prev, c_prev})
    for (Real v : span)
      require(std::isfinite(v), ErrorCode::invalid_input, "lstm_cell_forward: non-finite input");
  CellStep<Real> out;
  const auto n = params.cell();
  out.h.resize(params.proj());
  out.c.resize(n);
  out.cache.gates.resize(4 * n);
  out.cache.tanh_c.resize(n);
  std::vector<Real> m(n);
  detail::cell_step<Real>(params, x, h_prev, c_prev, out.cache.gates, out.c,
                          out.cache.tanh_c, out.h, m);
  return out;
}

/// Everything one layer produced over a sequence; rows are timesteps.
template <typename Real> struct LayerTrace {
  Tensor2<Real> x;      // T x input_dim
  Tensor2<Real> h_prev; // T x proj
  Tensor2<Real> c_prev; // T x cell
  Tensor2<Real> gates;  // T x 4*cell
  Tensor2<Real> c;      // T x cell
  Tensor2<Real> tanh_c; // T x cell
  Tensor2<Real> h;      // T x proj
};

template <typename Real> struct ForwardCache {
  std::uint64_t params_fingerprint = 0;
  std::size_t steps = 0;
  std::vector<LayerTrace<Real>> layers;
};

template <typename Real> struct ForwardResult {
  Tensor2<Real> top_logits; // T x Z
  Tensor2<Real> aux_logits; // T x Z, empty when the stack has no aux head
  StackState<Real> final_state;
  ForwardCache<Real> cache;

  /// Projected hidden states of layer k (1-based), T x proj.
  const Tensor2<Real> &hidden(std::size_t k) const { return cache.layers.at(k - 1).h; }
};

namespace detail {
template <typename Real>
void head_forward(const Head<Real> &head, const Tensor2<Real> &h, Tensor2<Real> &logits) {
  const std::size_t steps = h.rows();
  logits = Tensor2<Real>(steps, head.W.rows());
  for (std::size_t t = 0; t < steps; ++t) {
    auto row = logits.row(t);
    std::copy(head.b.values().begin(), head.b.values().end(), row.begin());
    linalg::gemv_acc(head.W, h.row(t), row);
  }
}
} // namespace detail

/// Runs the stack over `frames` (T x input_dim). Starts from `initial` when
/// given, zero state otherwise. With `want_aux` false the auxiliary head is
/// skipped even if present.
template <typename Real>
ForwardResult<Real> stack_forward(const StackParams<Real> &params, const Tensor2<Real> &frames,
                                  const std::type_identity_t<StackState<Real>> *initial = nullptr,
                                  bool want_aux = true) {
  const auto &spec = params.spec;
  spec.validate();
  require(frames.cols() == spec.input_dim, ErrorCode::invalid_input,
          "frame dimension " + std::to_string(frames.cols()) +
              " does not match stack input_dim " + std::to_string(spec.input_dim));
  require(frames.all_finite(), ErrorCode::invalid_input, "input frames contain NaN or Inf");
  require(frames.rows() >= 1, ErrorCode::empty_input, "empty sequence");
  require(params.layers.size() == spec.layers, ErrorCode::invalid_state,
          "parameter layers do not match spec");
  require(params.aux.has_value() == spec.owns_aux_weights(), ErrorCode::invalid_state,
          "auxiliary head presence does not match spec");

  const std::size_t steps = frames.rows();
  ForwardResult<Real> res;
  res.cache.params_fingerprint = fingerprint(params);
  res.cache.steps = steps;
  res.cache.layers.resize(spec.layers);
  res.final_state = initial ? *initial : zero_state<Real>(spec);
  require(res.final_state.size() == spec.layers, ErrorCode::invalid_input,
          "initial state has wrong layer count");

  std::vector<Real> m(spec.cell);
  const Tensor2<Real> *input = &frames;
  for (std::size_t k = 0; k < spec.layers; ++k) {
    const auto &lp = params.layers[k];
    auto &tr = res.cache.layers[k];
    auto &st = res.final_state[k];
    require(st.h.size() == spec.proj && st.c.size() == spec.cell, ErrorCode::invalid_input,
            "initial state has wrong shape");
    tr.x = *input;
    tr.h_prev = Tensor2<Real>(steps, spec.proj);
    tr.c_prev = Tensor2<Real>(steps, spec.cell);
    tr.gates = Tensor2<Real>(steps, 4 * spec.cell);
    tr.c = Tensor2<Real>(steps, spec.cell);
    tr.tanh_c = Tensor2<Real>(steps, spec.cell);
    tr.h = Tensor2<Real>(steps, spec.proj);
    for (std::size_t t = 0; t < steps; ++t) {
      if (t == 0) {
        std::copy(st.h.begin(), st.h.end(), tr.h_prev.row(0).begin());
        std::copy(st.c.begin(), st.c.end(), tr.c_prev.row(0).begin());
      } else {
        auto hp = tr.h.row(t - 1);
        auto cp = tr.c.row(t - 1);
        std::copy(hp.begin(), hp.end(), tr.h_prev.row(t).begin());
        std::copy(cp.begin(), cp.end(), tr.c_prev.row(t).begin());
      }
      detail::cell_step<Real>(lp, tr.x.row(t), tr.h_prev.row(t), tr.c_prev.row(t),
                              tr.gates.row(t), tr.c.row(t), tr.tanh_c.row(t), tr.h.row(t), m);
    }
    auto hl = tr.h.row(steps - 1);
    auto cl = tr.c.row(steps - 1);
    st.h.assign(hl.begin(), hl.end());
    st.c.assign(cl.begin(), cl.end());
    input = &tr.h;
  }

  detail::head_forward(params.out, res.cache.layers.back().h, res.top_logits);
  if (want_aux && spec.has_aux()) {
    const auto &src = res.cache.layers[spec.resolved_aux_layer() - 1].h;
    detail::head_forward(spec.share_head ? params.out : *params.aux, src, res.aux_logits);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

template <typename Real> struct StackGradients {
  StackParams<Real> params;          // same layout as the parameters
  StackState<Real> initial_state;    // d loss / d (initial h, c) per layer
};

namespace detail {
template <typename Real>
void head_backward(const Head<Real> &head, const Tensor2<Real> &h, const Tensor2<Real> &dlogits,
                   Head<Real> &dhead, Tensor2<Real> &dh) {
  for (std::size_t t = 0; t < h.rows(); ++t) {
    auto dl = dlogits.row(t);
    for (std::size_t z = 0; z < dl.size(); ++z) dhead.b[z] += dl[z];
    linalg::ger_acc(dhead.W, dl, h.row(t));
    linalg::gemv_t_acc(head.W, dl, dh.row(t));
  }
}

template <typename Real> bool any_nonzero(const Tensor2<Real> &t) {
  for (Real v : t.values())
    if (v != Real(0)) return true;
  return false;
}
} // namespace detail

/// Exact reverse pass of sum_t (dtop . top_logits + daux . aux_logits).
/// `daux` may be empty or all-zero; then the auxiliary head gets zero gradient
/// and nothing flows from it into the stack.
template <typename Real>
StackGradients<Real> stack_backward(const StackParams<Real> &params, const ForwardCache<Real> &cache,
                                    const Tensor2<Real> &dtop, const Tensor2<Real> &daux) {
  const auto &spec = params.spec;
  require(cache.params_fingerprint == fingerprint(params) && cache.layers.size() == spec.layers,
          ErrorCode::invalid_state, "forward cache was not produced by these parameters");
  const std::size_t steps = cache.steps;
  require(dtop.rows() == steps && dtop.cols() == spec.classes, ErrorCode::invalid_input,
          "top-logit gradient has wrong shape");
  const bool aux_active = !daux.empty() && detail::any_nonzero(daux);
  if (aux_active) {
    require(spec.has_aux(), ErrorCode::configuration,
            "auxiliary gradient supplied but the stack has no auxiliary head");
    require(daux.rows() == steps && daux.cols() == spec.classes, ErrorCode::invalid_input,
            "auxiliary-logit gradient has wrong shape");
  }

  StackGradients<Real> g{StackParams<Real>(spec), zero_state<Real>(spec)};
  g.params.set_zero();

  // d loss / d h^k for every layer k, filled top-down.
  Tensor2<Real> dh_ext(steps, spec.proj);
  detail::head_backward(params.out, cache.layers.back().h, dtop, g.params.out, dh_ext);

  const std::size_t aux_k = spec.has_aux() ? spec.resolved_aux_layer() - 1 : spec.layers;
  const std::size_t n = spec.cell;
  std::vector<Real> dh(spec.proj), dh_rec(spec.proj), dc(n), dc_next(n), dm(n), mbuf(n), da(4 * n);

  for (std::size_t kk = spec.layers; kk-- > 0;) {
    if (kk == aux_k && aux_active) {
      auto &dhead = spec.share_head ? g.params.out : *g.params.aux;
      const auto &head = spec.share_head ? params.out : *params.aux;
      detail::head_backward(head, cache.layers[kk].h, daux, dhead, dh_ext);
    }
    const auto &lp = params.layers[kk];
    const auto &tr = cache.layers[kk];
    auto &gl = g.params.layers[kk];
    Tensor2<Real> dx(steps, lp.input_dim());
    std::fill(dh_rec.begin(), dh_rec.end(), Real(0));
    std::fill(dc_next.begin(), dc_next.end(), Real(0));

    for (std::size_t t = steps; t-- > 0;) {
      auto ext = dh_ext.row(t);
      for (std::size_t j = 0; j < spec.proj; ++j) dh[j] = ext[j] + dh_rec[j];

      auto gates = tr.gates.row(t);
      auto tc = tr.tanh_c.row(t);
      auto cp = tr.c_prev.row(t);

      // h = P m,  m = o * tanh(c)
      std::fill(dm.begin(), dm.end(), Real(0));
      linalg::gemv_t_acc(lp.P, std::span<const Real>(dh), std::span<Real>(dm));
      for (std::size_t j = 0; j < n; ++j) {
        const Real i = gates[kInput * n + j], f = gates[kForget * n + j];
        const Real gg = gates[kCandidate * n + j], o = gates[kOutput * n + j];
        mbuf[j] = o * tc[j];
        const Real d_o = dm[j] * tc[j];
        dc[j] = dm[j] * o * (Real(1) - tc[j] * tc[j]) + dc_next[j];
        da[kInput * n + j] = dc[j] * gg * i * (Real(1) - i);
        da[kForget * n + j] = dc[j] * cp[j] * f * (Real(1) - f);
        da[kCandidate * n + j] = dc[j] * i * (Real(1) - gg * gg);
        da[kOutput * n + j] = d_o * o * (Real(1) - o);
        dc_next[j] = dc[j] * f;
      }
      linalg::ger_acc(gl.P, std::span<const Real>(dh), std::span<const Real>(mbuf));
      const std::span<const Real> da_span(da);
      for (std::size_t r = 0; r < 4 * n; ++r) gl.b[r] += da[r];
      linalg::ger_acc(gl.W, da_span, tr.x.row(t));
      linalg::ger_acc(gl.R, da_span, tr.h_prev.row(t));
      linalg::gemv_t_acc(lp.W, da_span, dx.row(t));
      std::fill(dh_rec.begin(), dh_rec.end(), Real(0));
      linalg::gemv_t_acc(lp.R, da_span, std::span<Real>(dh_rec));
    }
    g.initial_state[kk].h = dh_rec;
    g.initial_state[kk].c = dc_next;
    dh_ext = std::move(dx);
  }
  return g;
}

} // namespace selfteach
