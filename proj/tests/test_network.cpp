#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracle.hpp"
#include "selfteach/network.hpp"

using namespace selfteach;

namespace {

StackSpec random_spec(std::mt19937_64 &rng) {
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  StackSpec s;
  s.layers = pick(2, 4);
  s.input_dim = pick(1, 4);
  s.cell = pick(1, 5);
  s.proj = pick(1, 4);
  s.classes = pick(2, 5);
  s.aux_head = true;
  s.aux_layer = pick(1, s.layers - 1);
  s.share_head = pick(0, 3) == 0;
  return s;
}

Tensor2<double> random_frames(std::mt19937_64 &rng, std::size_t t, std::size_t d) {
  std::normal_distribution<double> n(0, 1);
  Tensor2<double> x(t, d);
  for (auto &v : x.values()) v = n(rng);
  return x;
}

void jitter(StackParams<double> &p, std::mt19937_64 &rng, double scale) {
  std::normal_distribution<double> n(0, scale);
  p.for_each_block([&](const std::string &, Tensor2<double> &t) {
    for (auto &v : t.values()) v += n(rng);
  });
}

StackState<double> random_state(const StackSpec &s, std::mt19937_64 &rng) {
  std::normal_distribution<double> n(0, 0.5);
  auto st = zero_state<double>(s);
  for (auto &l : st) {
    for (auto &v : l.h) v = n(rng);
    for (auto &v : l.c) v = n(rng);
  }
  return st;
}

} // namespace

TEST(ParamCount, TrivialStack) {
  StackSpec s{1, 1, 1, 1, 1, false, 0, false};
  // 4*1*(1+1) + 4 + 1 for the layer, 1 + 1 for the head.
  EXPECT_EQ(param_count(s).inference, 15u);
  EXPECT_EQ(param_count(s).training, 15u);
}

TEST(ParamCount, ClosedFormMatchesAllocatedBlocks) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 50; ++i) {
    const auto s = random_spec(rng);
    StackParams<double> p(s);
    std::uint64_t n = 0;
    p.for_each_block([&](const std::string &, const Tensor2<double> &t) { n += t.size(); });
    EXPECT_EQ(param_count(s).training, n);
    std::uint64_t inf = 0;
    p.without_aux().for_each_block(
        [&](const std::string &, const Tensor2<double> &t) { inf += t.size(); });
    EXPECT_EQ(param_count(s).inference, inf);
  }
}

TEST(ParamCount, SmallProductionArchitecture) {
  StackSpec s{6, 80, 1024, 512, 9404, true, 3, false};
  EXPECT_EQ(param_count(s).inference, 31390908u);
  EXPECT_EQ(param_count(s).training, 31390908u + 9404u * 512u + 9404u);
}

TEST(StackSpec, AuxLayerBounds) {
  StackSpec s;
  s.layers = 4;
  EXPECT_EQ(s.resolved_aux_layer(), 2u);
  s.layers = 5;
  EXPECT_EQ(s.resolved_aux_layer(), 3u);
  s.aux_layer = 5;
  EXPECT_ERROR_CODE(s.validate(), ErrorCode::configuration);
  s.layers = 1;
  s.aux_layer = 0;
  EXPECT_ERROR_CODE(s.validate(), ErrorCode::configuration);
  s.aux_head = false;
  EXPECT_NO_THROW(s.validate());
}

TEST(Init, DeterministicAndAuxDrawnLast) {
  StackSpec s{3, 4, 5, 3, 6, true, 1, false};
  const auto a = init_params<double>(s, 42);
  EXPECT_EQ(a, init_params<double>(s, 42));
  EXPECT_NE(a, init_params<double>(s, 43));
  StackSpec plain = s;
  plain.aux_head = false;
  const auto b = init_params<double>(plain, 42);
  EXPECT_EQ(a.without_aux(), b);
}

TEST(Init, ForgetBiasAndGlorotRange) {
  StackSpec s{2, 7, 9, 4, 3, false, 0, false};
  const auto p = init_params<double>(s, 1);
  for (const auto &l : p.layers) {
    for (std::size_t j = 0; j < s.cell; ++j) {
      EXPECT_EQ(l.b(kForget * s.cell + j, 0), 1.0);
      EXPECT_EQ(l.b(kInput * s.cell + j, 0), 0.0);
    }
    const double lim = std::sqrt(6.0 / double(l.input_dim() + 4 * s.cell));
    for (double v : l.W.values()) EXPECT_LE(std::abs(v), lim);
  }
}

TEST(Cell, HandComputedStep) {
  LstmLayerParams<double> p(1, 1, 1);
  p.P(0, 0) = 1.0;
  const std::vector<double> x{0.3}, h{0.0}, c{2.0};
  const auto out = lstm_cell_forward<double>(p, x, h, c);
  // All gates see 0: i = f = o = 1/2, g = 0.
  EXPECT_DOUBLE_EQ(out.c[0], 1.0);
  EXPECT_DOUBLE_EQ(out.h[0], 0.5 * std::tanh(1.0));
}

TEST(Cell, RejectsBadInput) {
  LstmLayerParams<double> p(2, 3, 1);
  const std::vector<double> x{1, 2}, h{0}, c{0, 0, 0}, bad{1, std::nan("")};
  EXPECT_ERROR_CODE((lstm_cell_forward<double>(p, std::vector<double>{1}, h, c)),
                    ErrorCode::invalid_input);
  EXPECT_ERROR_CODE((lstm_cell_forward<double>(p, bad, h, c)), ErrorCode::invalid_input);
}

TEST(Forward, MatchesReferenceImplementation) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    const auto s = random_spec(rng);
    auto p = init_params<double>(s, trial);
    jitter(p, rng, 0.3);
    const auto x = random_frames(rng, 1 + trial % 7, s.input_dim);
    const auto init = random_state(s, rng);
    const auto fwd = stack_forward(p, x, &init);
    const auto ref = oracle::stack_run(p, x, &init);
    for (std::size_t t = 0; t < x.rows(); ++t)
      for (std::size_t z = 0; z < s.classes; ++z) {
        EXPECT_NEAR(fwd.top_logits(t, z), double(ref.top[t][z]), 1e-12);
        EXPECT_NEAR(fwd.aux_logits(t, z), double(ref.aux[t][z]), 1e-12);
      }
    for (std::size_t k = 0; k < s.layers; ++k) {
      for (std::size_t i = 0; i < s.proj; ++i)
        EXPECT_NEAR(fwd.final_state[k].h[i], double(ref.h[k][i]), 1e-12);
      for (std::size_t i = 0; i < s.cell; ++i)
        EXPECT_NEAR(fwd.final_state[k].c[i], double(ref.c[k][i]), 1e-12);
    }
  }
}

TEST(Forward, FloatTracksDouble) {
  std::mt19937_64 rng(9);
  const auto s = random_spec(rng);
  const auto p = init_params<double>(s, 3);
  const auto x = random_frames(rng, 10, s.input_dim);
  const auto d = stack_forward(p, x);
  const auto f = stack_forward(p.cast<float>(), x.cast<float>());
  for (std::size_t i = 0; i < d.top_logits.size(); ++i)
    EXPECT_NEAR(f.top_logits[i], d.top_logits[i], 1e-5);
}

TEST(Forward, ValidatesFrames) {
  StackSpec s{2, 3, 2, 2, 2, true, 1, false};
  const auto p = init_params<double>(s, 1);
  EXPECT_ERROR_CODE(stack_forward(p, Tensor2<double>(4, 2)), ErrorCode::invalid_input);
  Tensor2<double> x(2, 3);
  x(1, 2) = std::numeric_limits<double>::infinity();
  EXPECT_ERROR_CODE(stack_forward(p, x), ErrorCode::invalid_input);
}

TEST(Forward, WithoutAuxSkipsHead) {
  StackSpec s{3, 2, 2, 2, 4, true, 2, false};
  const auto p = init_params<double>(s, 1);
  const Tensor2<double> x(3, 2);
  EXPECT_TRUE(stack_forward(p, x, nullptr, false).aux_logits.empty());
  EXPECT_EQ(stack_forward(p, x).aux_logits.rows(), 3u);
}

// The reverse pass of a linear functional of the logits, checked against
// central differences of the reference forward pass.
TEST(Backward, MatchesFiniteDifferencesOfReference) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n(0, 1);
  for (int trial = 0; trial < 12; ++trial) {
    const auto s = random_spec(rng);
    auto p = init_params<double>(s, trial);
    jitter(p, rng, 0.2);
    const std::size_t T = 2 + trial % 4;
    const auto x = random_frames(rng, T, s.input_dim);
    auto init = random_state(s, rng);
    Tensor2<double> dtop(T, s.classes), daux(T, s.classes);
    for (auto &v : dtop.values()) v = n(rng);
    for (auto &v : daux.values()) v = n(rng);

    auto functional = [&](const StackParams<double> &q, const StackState<double> &st) {
      const auto r = oracle::stack_run(q, x, &st);
      long double f = 0;
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t z = 0; z < s.classes; ++z)
          f += dtop(t, z) * r.top[t][z] + daux(t, z) * r.aux[t][z];
      return f;
    };
    const auto fwd = stack_forward(p, x, &init);
    const auto g = stack_backward(p, fwd.cache, dtop, daux);

    const long double h = 1e-6L;
    std::vector<const Tensor2<double> *> grads;
    g.params.for_each_block([&](const std::string &, const Tensor2<double> &t) { grads.push_back(&t); });
    std::size_t bi = 0;
    p.for_each_block([&](const std::string &name, Tensor2<double> &t) {
      const auto &gt = *grads[bi++];
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double saved = t[i];
        t[i] = saved + double(h);
        const auto up = functional(p, init);
        t[i] = saved - double(h);
        const auto dn = functional(p, init);
        t[i] = saved;
        EXPECT_NEAR(gt[i], double((up - dn) / (2 * h)), 1e-6) << name << "[" << i << "]";
      }
    });
    for (std::size_t k = 0; k < s.layers; ++k)
      for (std::size_t i = 0; i < s.cell; ++i) {
        const double saved = init[k].c[i];
        init[k].c[i] = saved + double(h);
        const auto up = functional(p, init);
        init[k].c[i] = saved - double(h);
        const auto dn = functional(p, init);
        init[k].c[i] = saved;
        EXPECT_NEAR(g.initial_state[k].c[i], double((up - dn) / (2 * h)), 1e-6);
      }
  }
}

TEST(Backward, ZeroAuxGradientIsolatesAuxHead) {
  StackSpec s{3, 2, 3, 2, 4, true, 1, false};
  const auto p = init_params<double>(s, 8);
  std::mt19937_64 rng(1);
  const auto x = random_frames(rng, 5, 2);
  Tensor2<double> dtop(5, 4);
  for (auto &v : dtop.values()) v = 0.1;
  const auto fwd = stack_forward(p, x);
  const auto g = stack_backward(p, fwd.cache, dtop, Tensor2<double>(5, 4));
  for (double v : g.params.aux->W.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.params.aux->b.values()) EXPECT_EQ(v, 0.0);

  // Same gradients, bit for bit, as the identical stack without an aux head.
  const auto plain = p.without_aux();
  const auto fwd2 = stack_forward(plain, x);
  const auto g2 = stack_backward(plain, fwd2.cache, dtop, Tensor2<double>{});
  EXPECT_EQ(g.params.without_aux(), g2.params);
}

TEST(Backward, RejectsStaleCache) {
  StackSpec s{2, 2, 2, 2, 2, true, 1, false};
  auto p = init_params<double>(s, 1);
  const Tensor2<double> x(3, 2);
  const auto fwd = stack_forward(p, x);
  p.out.b[0] += 1e-3;
  EXPECT_ERROR_CODE(stack_backward(p, fwd.cache, Tensor2<double>(3, 2), Tensor2<double>{}),
                    ErrorCode::invalid_state);
}
