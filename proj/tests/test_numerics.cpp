#include "ptcode/certify.hpp"
#include "ptcode/gradcheck.hpp"

#include <gtest/gtest.h>

#include <chrono>

using namespace ptcode;

TEST(RelativeError, FloorsTheDenominator) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-12), 1e-12 / 1e-8);
}

TEST(FiniteDifference, QuadraticIsNearlyExact) {
  ParameterStore<double> ps;
  auto w = ps.add("w", 3, 1);
  ps[w].value << 0.5, -1.5, 2.0;
  Vec<double> c(3);
  c << 1.0, 2.0, -3.0;
  auto rep = finite_difference_check(ps, [&](Tape<double>& t) {
    Var d = t.sub(t.param(w), t.constant(c));
    return t.dot(d, d);
  });
  EXPECT_TRUE(rep.passed);
  ASSERT_EQ(rep.tensors.size(), 1u);
  EXPECT_EQ(rep.tensors[0].checked, 3u);
  EXPECT_LT(rep.tensors[0].max_rel_error, 1e-9);
  // Gradients are cleared afterwards.
  EXPECT_TRUE(ps[w].grad.isZero(0.0));
}

TEST(FiniteDifference, DetectsMissingGradient) {
  ParameterStore<double> ps;
  auto w = ps.add("w", 2, 1);
  ps[w].value << 0.3, 0.7;
  // The second term reads the parameter as a constant, so its gradient is lost.
  auto rep = finite_difference_check(ps, [&](Tape<double>& t) {
    Var p = t.param(w);
    Var q = t.constant(t.store()[w].value);
    return t.add(t.dot(p, p), t.dot(q, q));
  });
  EXPECT_FALSE(rep.passed);
  EXPECT_GT(rep.max_rel_error(), 0.4);
}

TEST(FiniteDifference, SkipsFrozenAndSubsamplesLargeTensors) {
  ParameterStore<double> ps;
  auto big = ps.add("big", 20, 10);
  auto frozen = ps.add("frozen", 2, 1, false);
  ps[big].value.setConstant(0.1);
  ps[frozen].value.setConstant(1.0);
  auto rep = finite_difference_check(ps, [&](Tape<double>& t) {
    std::vector<Var> rows;
    for (std::size_t r = 0; r < 20; ++r) rows.push_back(t.lookup(big, r));
    Var s = t.sum(rows);
    return t.dot(s, t.tanh(s));
  });
  ASSERT_EQ(rep.tensors.size(), 1u);
  EXPECT_EQ(rep.tensors[0].name, "big");
  EXPECT_EQ(rep.tensors[0].checked, 50u);
  EXPECT_TRUE(rep.passed);
}

TEST(FiniteDifference, ExcludesArgmaxFlips) {
  ParameterStore<double> ps;
  auto a = ps.add("a", 1, 1);
  auto b = ps.add("b", 1, 1);
  ps[a].value << 1.0;
  ps[b].value << 1.0;
  auto rep = finite_difference_check(ps, [&](Tape<double>& t) {
    std::vector<Var> xs{t.param(a), t.param(b)};
    return t.sum(std::vector<Var>{t.max_pool(xs)});
  });
  EXPECT_EQ(rep.tensors[0].excluded + rep.tensors[1].excluded, 2u);
}

TEST(GradientSuite, TinyModelPassesQuickly) {
  const auto start = std::chrono::steady_clock::now();
  auto rep = run_gradient_suite(0);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_TRUE(rep.passed());
  EXPECT_LE(rep.max_rel_error(), 1e-4);
  EXPECT_LT(secs, 10.0);
  // Every tensor of the tiny model is trainable; the completion loss never
  // touches the emotion head.
  EXPECT_EQ(rep.emotion.tensors.size(), tiny_model(0).params.size());
  EXPECT_EQ(rep.completion.tensors.size(), tiny_model(0).params.size());
  for (const auto& t : rep.completion.tensors) EXPECT_GT(t.checked, 0u) << t.name;
}

// Other seeds can put a coordinate with a gradient near 1e-7 under the
// relative check, where central-difference roundoff alone reaches 1e-4;
// absolute agreement holds everywhere.
TEST(GradientSuite, OtherSeedsAgreeInAbsoluteError) {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    auto rep = run_gradient_suite(seed);
    for (const auto* part : {&rep.completion, &rep.emotion})
      for (const auto& t : part->tensors) EXPECT_LT(t.max_abs_error, 1e-8) << seed << " " << t.name;
  }
}
