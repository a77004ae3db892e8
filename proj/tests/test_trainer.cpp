#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "oracle.hpp"
#include "selfteach/trainer.hpp"

using namespace selfteach;

namespace {

StackSpec tiny_spec(bool aux = true) { return {3, 3, 4, 3, 4, aux, 1, false}; }

Dataset tiny_data(std::size_t n = 12, std::size_t length = 20, std::uint64_t seed = 1) {
  DatasetSpec s;
  s.classes = 4;
  s.dim = 3;
  s.length = length;
  s.n_sequences = n;
  s.class_means = make_class_means(4, 3, 1.5, 7);
  s.seed = seed;
  return generate(s);
}

OptimizerConfig fast_opt(std::size_t epochs) {
  OptimizerConfig o;
  o.epochs = epochs;
  o.batch_size = 4;
  o.learning_rate = 1e-2;
  o.seed = 3;
  return o;
}

LossConfig loss_of(LossVariant v, double lambda) {
  LossConfig l;
  l.variant = v;
  l.lambda = lambda;
  return l;
}

std::vector<const SequenceExample *> all_of(const Dataset &d) {
  std::vector<const SequenceExample *> v;
  for (const auto &s : d.sequences) v.push_back(&s);
  return v;
}

double max_abs_diff(const StackParams<double> &a, const StackParams<double> &b) {
  std::vector<const Tensor2<double> *> tb;
  b.for_each_block([&](const std::string &, const Tensor2<double> &t) { tb.push_back(&t); });
  double worst = 0;
  std::size_t i = 0;
  a.for_each_block([&](const std::string &, const Tensor2<double> &t) {
    for (std::size_t k = 0; k < t.size(); ++k) worst = std::max(worst, std::abs(t[k] - (*tb[i])[k]));
    ++i;
  });
  return worst;
}

} // namespace

TEST(EpochBatches, PartitionIsDeterministicAndLengthPure) {
  Dataset d = tiny_data(10, 5);
  for (std::size_t i = 0; i < 4; ++i) {
    d.sequences[i].labels.resize(3);
    d.sequences[i].frames = Tensor2<float>(3, 3);
  }
  const auto a = epoch_batches(d, 4, 9, 0);
  EXPECT_EQ(a, epoch_batches(d, 4, 9, 0));
  EXPECT_NE(a, epoch_batches(d, 4, 9, 1));
  std::vector<std::size_t> seen;
  for (const auto &b : a) {
    EXPECT_LE(b.size(), 4u);
    for (auto i : b) {
      EXPECT_EQ(d.sequences[i].length(), d.sequences[b.front()].length());
      seen.push_back(i);
    }
  }
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen[i], i);
}

TEST(BatchGradient, SingleChunkEqualsDirectBackprop) {
  const auto spec = tiny_spec();
  const auto p = init_params<double>(spec, 2);
  const auto d = tiny_data(3, 7);
  const auto seqs = all_of(d);
  const auto loss = loss_of(LossVariant::self_teach_with_h, 0.3);
  const auto bg = batch_gradient(p, std::span<const SequenceExample *const>(seqs), loss, {50, true});

  StackParams<double> expect(spec);
  expect.set_zero();
  for (const auto &s : d.sequences) {
    const auto x = s.frames.cast<double>();
    const auto fwd = stack_forward(p, x);
    Tensor2<double> dtop(7, 4), daux(7, 4);
    for (std::size_t t = 0; t < 7; ++t) {
      const auto fl = loss_grad_logits<double>(loss, s.labels[t], fwd.top_logits.row(t),
                                               fwd.aux_logits.row(t));
      for (std::size_t j = 0; j < 4; ++j) {
        dtop(t, j) = fl.dtop[j] / 21.0;
        daux(t, j) = fl.daux[j] / 21.0;
      }
    }
    accumulate(expect, stack_backward(p, fwd.cache, dtop, daux).params);
  }
  EXPECT_LE(max_abs_diff(bg.grads, expect), 1e-15);
  EXPECT_EQ(bg.frames, 21u);
}

TEST(BatchGradient, ChunksDetachStateButCarryValues) {
  const auto spec = tiny_spec(false);
  const auto p = init_params<double>(spec, 4);
  const auto d = tiny_data(1, 10);
  const auto seqs = all_of(d);
  const auto loss = loss_of(LossVariant::baseline, 0);
  const auto bg =
      batch_gradient(p, std::span<const SequenceExample *const>(seqs), loss, {4, true}, nullptr, true);
  ASSERT_EQ(bg.chunk_state_grads.size(), 3u); // 4 + 4 + 2

  // Oracle: run each chunk from the carried state, backprop it alone, sum.
  const auto &s = d.sequences[0];
  StackParams<double> expect(spec);
  expect.set_zero();
  auto state = zero_state<double>(spec);
  for (std::size_t begin = 0; begin < 10; begin += 4) {
    const std::size_t end = std::min<std::size_t>(10, begin + 4);
    Tensor2<double> x(end - begin, 3);
    for (std::size_t t = begin; t < end; ++t)
      for (std::size_t k = 0; k < 3; ++k) x(t - begin, k) = s.frames(t, k);
    const auto fwd = stack_forward(p, x, &state);
    Tensor2<double> dtop(end - begin, 4);
    for (std::size_t t = 0; t < end - begin; ++t) {
      const auto pr = oracle::softmax({fwd.top_logits(t, 0), fwd.top_logits(t, 1),
                                       fwd.top_logits(t, 2), fwd.top_logits(t, 3)});
      for (std::size_t j = 0; j < 4; ++j)
        dtop(t, j) = double((pr[j] - (j == s.labels[begin + t] ? 1 : 0)) / 10.0L);
    }
    accumulate(expect, stack_backward(p, fwd.cache, dtop, Tensor2<double>{}).params);
    state = fwd.final_state;
  }
  EXPECT_LE(max_abs_diff(bg.grads, expect), 1e-14);
  EXPECT_EQ(bg.final_states[0], state);
}

TEST(BatchGradient, NoCarryRestartsFromZero) {
  const auto spec = tiny_spec(false);
  const auto p = init_params<double>(spec, 4);
  const auto d = tiny_data(1, 10);
  const auto seqs = all_of(d);
  const auto bg = batch_gradient(p, std::span<const SequenceExample *const>(seqs),
                                 loss_of(LossVariant::baseline, 0), {4, false});
  EXPECT_EQ(bg.final_states[0], zero_state<double>(spec));
}

TEST(Setup, RejectsInconsistentCombinations) {
  const auto with_aux = init_params<double>(tiny_spec(true), 1);
  const auto plain = init_params<double>(tiny_spec(false), 1);
  EXPECT_ERROR_CODE(check_loss_setup(plain, loss_of(LossVariant::self_teach_no_h, 0.1), nullptr),
                    ErrorCode::configuration);
  auto l = loss_of(LossVariant::self_teach_with_h, 0.1);
  l.aux_layer = 2;
  EXPECT_ERROR_CODE(check_loss_setup(with_aux, l, nullptr), ErrorCode::configuration);
  EXPECT_ERROR_CODE(check_loss_setup(plain, loss_of(LossVariant::teacher_student, 0.1), nullptr),
                    ErrorCode::configuration);
  EXPECT_ERROR_CODE(check_loss_setup(plain, loss_of(LossVariant::baseline, 0), &plain),
                    ErrorCode::configuration);
  StackSpec other = tiny_spec(false);
  other.classes = 5;
  const auto wrong_teacher = init_params<double>(other, 1);
  EXPECT_ERROR_CODE(
      check_loss_setup(plain, loss_of(LossVariant::teacher_student, 0.1), &wrong_teacher),
      ErrorCode::configuration);
}

TEST(Optimizer, SgdMomentumAndAdamFirstStep) {
  const auto spec = tiny_spec(false);
  auto p = init_params<double>(spec, 1);
  const auto p0 = p;
  StackParams<double> g(spec);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  g.for_each_block([&](const std::string &, Tensor2<double> &t) {
    for (auto &v : t.values()) v = n(rng);
  });

  OptimizerConfig sgd;
  sgd.kind = OptimizerKind::sgd_momentum;
  sgd.learning_rate = 0.1;
  OptimizerState<double> st(spec);
  st.first.set_zero();
  apply_update(p, g, st, sgd);
  apply_update(p, g, st, sgd);
  // v1 = g, v2 = 0.9 g + g: total displacement 0.1 * 2.9 g.
  EXPECT_NEAR(p.out.W[3], p0.out.W[3] - 0.29 * g.out.W[3], 1e-15);

  OptimizerConfig adam;
  adam.learning_rate = 0.01;
  auto q = p0;
  OptimizerState<double> sa(spec);
  sa.first.set_zero();
  sa.second.set_zero();
  apply_update(q, g, sa, adam);
  const double gi = g.layers[1].R[2];
  EXPECT_NEAR(q.layers[1].R[2], p0.layers[1].R[2] - 0.01 * gi / (std::abs(gi) + 1e-8), 1e-15);
}

TEST(Train, DeterministicAndLossDecreases) {
  const auto d = tiny_data(16, 20);
  const auto opt = fast_opt(6);
  const auto loss = loss_of(LossVariant::self_teach_no_h, 0.05);
  const auto a = train(init_params<double>(tiny_spec(), 5), d, loss, opt, {8, true});
  const auto b = train(init_params<double>(tiny_spec(), 5), d, loss, opt, {8, true});
  EXPECT_EQ(a.state, b.state);
  EXPECT_LT(a.metrics.back().train_ce, a.metrics.front().train_ce);
  EXPECT_EQ(a.metrics.size(), 6u);
  EXPECT_EQ(a.metrics.front().batches, 4u);
}

TEST(Train, ResumeIsBitExact) {
  const auto d = tiny_data(12, 20);
  const auto loss = loss_of(LossVariant::label_smoothing, 0.1);
  const auto full = train(init_params<double>(tiny_spec(false), 5), d, loss, fast_opt(4), {8, true});

  auto half = train(init_params<double>(tiny_spec(false), 5), d, loss, fast_opt(2), {8, true});
  const auto bytes = encode_checkpoint(to_checkpoint(half.state));
  auto resumed = train_state_from_checkpoint<double>(decode_checkpoint(bytes));
  EXPECT_EQ(resumed, half.state);
  train_epochs(resumed, d, loss, fast_opt(4), {8, true});
  EXPECT_EQ(resumed, full.state);
}

TEST(Train, DivergenceIsNumericalError) {
  const auto d = tiny_data(8, 10);
  auto opt = fast_opt(5);
  opt.kind = OptimizerKind::sgd_momentum;
  opt.learning_rate = 1e300;
  try {
    train(init_params<double>(tiny_spec(false), 1), d, loss_of(LossVariant::baseline, 0), opt,
          {8, true});
    ADD_FAILURE() << "expected divergence";
  } catch (const Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::numerical);
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("parameter norms"), std::string::npos);
  }
}

TEST(Train, TeacherIsNotModified) {
  const auto d = tiny_data(8, 12);
  const auto teacher = train(init_params<double>(tiny_spec(false), 9), d,
                             loss_of(LossVariant::baseline, 0), fast_opt(2), {8, true})
                           .state.params;
  const auto before = teacher;
  const auto fp = fingerprint(teacher);
  const auto r = train(init_params<double>(tiny_spec(false), 1), d,
                       loss_of(LossVariant::teacher_student, 0.5), fast_opt(2), {8, true}, &teacher);
  EXPECT_EQ(teacher, before);
  EXPECT_EQ(fingerprint(teacher), fp);
  EXPECT_NE(r.state.params, init_params<double>(tiny_spec(false), 1));
}

TEST(Evaluate, MetricsAndMismatch) {
  const auto d = tiny_data(4, 10);
  const auto p = init_params<double>(tiny_spec(), 1);
  const auto m = evaluate(p, d);
  EXPECT_GT(m.frame_cross_entropy, 0.0);
  EXPECT_GE(m.frame_error_rate, 0.0);
  EXPECT_LE(m.frame_error_rate, 1.0);
  auto wrong = tiny_spec();
  wrong.input_dim = 2;
  EXPECT_ERROR_CODE(evaluate(init_params<double>(wrong, 1), d), ErrorCode::configuration);
  // The auxiliary head does not influence evaluation.
  EXPECT_EQ(evaluate(p.without_aux(), d).frame_cross_entropy, m.frame_cross_entropy);
}

TEST(Gradcheck, PassesAndDetectsCorruption) {
  StackSpec s{3, 2, 3, 2, 3, true, 2, false};
  for (auto v : kAllVariants) {
    const auto rep = gradcheck(s, loss_of(v, 0.5), 4);
    EXPECT_TRUE(rep.pass) << to_string(v) << " worst " << rep.worst;
  }
  GradcheckOptions bad;
  bad.corrupt = [](StackGradients<double> &g) { g.params.layers[0].R[1] *= 1.01; };
  EXPECT_FALSE(gradcheck(s, loss_of(LossVariant::self_teach_with_h, 0.5), 4, bad).pass);
  bad.corrupt = [](StackGradients<double> &g) { g.initial_state[1].c[0] += 1e-3; };
  EXPECT_FALSE(gradcheck(s, loss_of(LossVariant::baseline, 0), 4, bad).pass);
}

TEST(Gradcheck, SharedHead) {
  StackSpec s{2, 2, 3, 2, 3, true, 1, true};
  EXPECT_TRUE(gradcheck(s, loss_of(LossVariant::self_teach_with_h, 0.7), 2).pass);
}

TEST(Gradcheck, RefusesLargeStacks) {
  StackSpec s{6, 80, 64, 32, 10, true, 0, false};
  EXPECT_ERROR_CODE(gradcheck(s, loss_of(LossVariant::baseline, 0), 1), ErrorCode::configuration);
}
