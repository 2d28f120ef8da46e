#include "ptcode/autodiff.hpp"
#include "ptcode/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ptcode;
using V = Vec<double>;

namespace {

V vec(std::initializer_list<double> xs) {
  V v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

}  // namespace

TEST(Autodiff, StableSigmoidAndSoftplus) {
  EXPECT_NEAR(detail::sigmoid(1.0), 0.7310585786300049, 1e-15);
  EXPECT_NEAR(detail::sigmoid(-1.0), 1.0 - 0.7310585786300049, 1e-15);
  EXPECT_EQ(detail::sigmoid(-800.0), 0.0);
  EXPECT_EQ(detail::sigmoid(800.0), 1.0);
  EXPECT_NEAR(detail::softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(detail::softplus(800.0), 800.0, 1e-12);
  EXPECT_TRUE(std::isfinite(detail::softplus(-800.0)));
}

TEST(Autodiff, DotGradientIsTheOtherOperand) {
  ParameterStore<double> ps;
  auto u = ps.add("u", 3, 1);
  ps[u].value << 0.3, -0.2, 0.9;
  Tape<double> t(ps);
  Var fixed = t.constant(vec({1.0, 2.0, -1.5}));
  t.backward(t.dot(fixed, t.param(u)));
  EXPECT_DOUBLE_EQ(ps[u].grad(0), 1.0);
  EXPECT_DOUBLE_EQ(ps[u].grad(1), 2.0);
  EXPECT_DOUBLE_EQ(ps[u].grad(2), -1.5);
}

TEST(Autodiff, UnusedTensorGetsZeroGradient) {
  ParameterStore<double> ps;
  auto a = ps.add("a", 2, 1);
  auto b = ps.add("b", 2, 1);
  ps[a].value << 1.0, 2.0;
  ps[b].value << 3.0, 4.0;
  Tape<double> t(ps);
  t.backward(t.dot(t.param(a), t.param(a)));
  EXPECT_TRUE(ps[b].grad.isZero(0.0));
  EXPECT_DOUBLE_EQ(ps[a].grad(0), 2.0);
}

TEST(Autodiff, FrozenTensorReceivesNoGradient) {
  ParameterStore<double> ps;
  auto a = ps.add("a", 2, 1, /*trainable=*/false);
  ps[a].value << 1.0, 2.0;
  Tape<double> t(ps);
  t.backward(t.dot(t.param(a), t.param(a)));
  EXPECT_TRUE(ps[a].grad.isZero(0.0));
}

TEST(Autodiff, GradientsAccumulateOverUses) {
  ParameterStore<double> ps;
  auto w = ps.add("w", 1, 1);
  ps[w].value(0, 0) = 3.0;
  Tape<double> t(ps);
  Var x = t.param(w);
  Var y = t.add(t.mul(x, x), x);  // x^2 + x
  t.backward(y);
  EXPECT_DOUBLE_EQ(ps[w].grad(0, 0), 7.0);
}

TEST(Autodiff, NonScalarLossThrows) {
  ParameterStore<double> ps;
  auto w = ps.add("w", 2, 1);
  Tape<double> t(ps);
  EXPECT_THROW(t.backward(t.param(w)), std::invalid_argument);
}

TEST(Autodiff, ReadOnlyTapeRefusesBackward) {
  ParameterStore<double> ps;
  auto w = ps.add("w", 1, 1);
  const auto& cps = ps;
  Tape<double> t(cps);
  Var x = t.param(w);
  EXPECT_THROW(t.backward(t.sum(std::vector<Var>{x})), std::logic_error);
}

TEST(Autodiff, MaxPoolTieGoesToEarliest) {
  ParameterStore<double> ps;
  auto a = ps.add("a", 2, 1);
  auto b = ps.add("b", 2, 1);
  ps[a].value << 1.0, 5.0;
  ps[b].value << 1.0, 7.0;
  Tape<double> t(ps);
  std::vector<Var> xs{t.param(a), t.param(b)};
  Var m = t.max_pool(xs);
  EXPECT_DOUBLE_EQ(t.value(m)(0), 1.0);
  EXPECT_DOUBLE_EQ(t.value(m)(1), 7.0);
  t.backward(t.sum(std::vector<Var>{t.dot(m, t.constant(vec({1.0, 1.0})))}));
  EXPECT_DOUBLE_EQ(ps[a].grad(0), 1.0);
  EXPECT_DOUBLE_EQ(ps[b].grad(0), 0.0);
  EXPECT_DOUBLE_EQ(ps[a].grad(1), 0.0);
  EXPECT_DOUBLE_EQ(ps[b].grad(1), 1.0);
  EXPECT_EQ(t.argmax_trace(), (std::vector<int>{0, 1}));
}

TEST(Autodiff, LogSoftmaxIsNormalised) {
  ParameterStore<double> ps;
  Tape<double> t(ps);
  Var l = t.log_softmax(t.constant(vec({1000.0, 1001.0, -3.0})));
  EXPECT_NEAR(t.value(l).array().exp().sum(), 1.0, 1e-12);
}

TEST(Autodiff, EveryOpMatchesFiniteDifferences) {
  ParameterStore<double> ps;
  auto a = ps.add("a", 3, 1);
  auto b = ps.add("b", 3, 1);
  auto w = ps.add("w", 2, 3);
  auto c = ps.add("c", 2, 1);
  auto table = ps.add("table", 4, 3);
  Rng rng(1);
  for (auto& p : ps.all())
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = rng.uniform(-1, 1);
  auto build = [&](Tape<double>& t) {
    Var x = t.param(a), y = t.param(b);
    Var row = t.lookup(table, 2);
    Var h = t.tanh(t.affine(w, t.mul(x, row), c));
    Var g = t.sigmoid(t.sub(y, t.scale(x, 0.5)));
    std::vector<Var> seq{x, y, row, g};
    Var pooled = t.add(t.max_pool(seq), t.mean_pool(seq));
    Var cat = t.concat({h, t.neg(pooled)});
    Var ls = t.log_softmax(cat);
    Var picked = t.pick(t.clamp_min(ls, -50.0), 1);
    Var masked = t.mask(pooled, vec({2.0, 0.0, 2.0}));
    Var ll = t.log_sigmoid(t.dot(masked, y));
    std::vector<Var> terms{picked, ll, t.dot(h, h)};
    return t.sum(terms);
  };
  auto report = finite_difference_check(ps, build);
  EXPECT_TRUE(report.passed) << report.max_rel_error();
  EXPECT_LT(report.max_rel_error(), 1e-6);
}
