#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "botarena/diffmath.hpp"
#include "botarena/rng.hpp"
#include "test_support.hpp"

using botarena::Error;
using botarena::Rng;
using namespace botarena::diffmath;
using testsupport::fd_check;
using testsupport::FdParam;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, scale);
  return v;
}

}  // namespace

// ===========================================================================
// Forward values
// ===========================================================================

TEST_CASE("forward: pointwise op reference values") {
  Tape t;
  double xs[3] = {0.0, -2.0, 3.0};
  Var x = t.constant(1, 3, xs);

  Var s = t.sigmoid(x);
  CHECK(s.value()[0] == doctest::Approx(0.5).epsilon(1e-12));

  Var lr = t.leaky_relu(x, 0.01);
  CHECK(lr.value()[0] == doctest::Approx(0.0));
  CHECK(lr.value()[1] == doctest::Approx(-0.02).epsilon(1e-12));
  CHECK(lr.value()[2] == doctest::Approx(3.0));
}

TEST_CASE("forward: softmax of equal logits is uniform") {
  Tape t;
  double xs[4] = {1.0, 1.0, 1.0, 1.0};
  Var sm = t.softmax_rows(t.constant(1, 4, xs));
  for (int j = 0; j < 4; ++j) {
    CHECK(sm.value()[j] == doctest::Approx(0.25).epsilon(1e-12));
  }
}

TEST_CASE("forward: softmax rows sum to one and match exp(log_softmax)") {
  Rng rng(7);
  Tape t;
  auto xs = random_vec(5 * 9, rng, 3.0);
  Var x = t.constant(5, 9, xs);
  Var sm = t.softmax_rows(x);
  Var lsm = t.log_softmax_rows(x);
  for (int i = 0; i < 5; ++i) {
    double rowsum = 0.0;
    for (int j = 0; j < 9; ++j) {
      double p = sm.value()[i * 9 + j];
      rowsum += p;
      CHECK(std::fabs(p - std::exp(lsm.value()[i * 9 + j])) < 1e-12);
    }
    CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("forward: dropout scales kept entries by 1/(1-p)") {
  Tape t;
  double xs[4] = {1.0, 2.0, 3.0, 4.0};
  double mask[4] = {1.0, 0.0, 1.0, 0.0};
  Var d = t.dropout(t.constant(1, 4, xs), mask, 0.5);
  CHECK(d.value()[0] == doctest::Approx(2.0));
  CHECK(d.value()[1] == doctest::Approx(0.0));
  CHECK(d.value()[2] == doctest::Approx(6.0));
  CHECK(d.value()[3] == doctest::Approx(0.0));
}

// ===========================================================================
// Backward: hand-derived values
// ===========================================================================

TEST_CASE("backward: d sigmoid / dx at 0 is 0.25") {
  Tape t;
  double x0[1] = {0.0};
  Var x = t.input(1, 1, x0, true);
  Var y = t.sigmoid(x);
  t.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("backward: mean_all spreads gradient 1/n") {
  Tape t;
  double xs[6] = {1, 2, 3, 4, 5, 6};
  Var x = t.input(2, 3, xs, true);
  Var m = t.mean_all(x);
  t.backward(m);
  for (int i = 0; i < 6; ++i) {
    CHECK(x.grad()[i] == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
  }
}

TEST_CASE("backward: leaky_relu slope appears on the negative side") {
  Tape t;
  double xs[2] = {2.0, -2.0};
  Var x = t.input(1, 2, xs, true);
  Var y = t.sum_all(t.leaky_relu(x, 0.01));
  t.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(1.0));
  CHECK(x.grad()[1] == doctest::Approx(0.01));
}

// ===========================================================================
// Backward: finite-difference oracle
// ===========================================================================

TEST_CASE("backward: two-layer composition matches central differences") {
  Rng rng(42);
  const int n = 4, din = 6, dh = 12, dout = 5;
  auto xv = random_vec(n * din, rng);
  auto w1 = random_vec(din * dh, rng, 0.5);
  auto b1 = random_vec(dh, rng, 0.1);
  auto w2 = random_vec(dh * dout, rng, 0.5);
  auto b2 = random_vec(dout, rng, 0.1);
  std::vector<int> targets = {0, 3, 1, 4};

  auto run = [&](bool want_grads, std::vector<std::vector<double>>* grads) {
    Tape t;
    Var x = t.constant(n, din, xv);
    Var vw1 = t.input(din, dh, w1, true);
    Var vb1 = t.input(1, dh, b1, true);
    Var vw2 = t.input(dh, dout, w2, true);
    Var vb2 = t.input(1, dout, b2, true);
    Var h = t.leaky_relu(t.add_rowvec(t.matmul(x, vw1), vb1), 0.01);
    Var logits = t.add_rowvec(t.matmul(h, vw2), vb2);
    Var lsm = t.log_softmax_rows(logits);
    Var nll = t.scale(t.mean_all(t.pick_per_row(lsm, targets)), -1.0);
    double loss = nll.scalar_value();
    if (want_grads) {
      t.backward(nll);
      *grads = {vw1.grad(), vb1.grad(), vw2.grad(), vb2.grad()};
    }
    return loss;
  };

  std::vector<std::vector<double>> grads;
  run(true, &grads);
  auto loss_only = [&]() { return run(false, nullptr); };

  // 72 + 12 + 60 + 5 = 149 parameters; check every informative one.
  Rng fdrng(1);
  auto res = fd_check({FdParam{&w1, &grads[0]}, FdParam{&b1, &grads[1]},
                       FdParam{&w2, &grads[2]}, FdParam{&b2, &grads[3]}},
                      loss_only, 1000, 1e-4, fdrng);
  CHECK(res.informative >= 100);
  CHECK(res.max_rel_err < 1e-4);
  CHECK(res.max_small_abs_err < 1e-6);
}

TEST_CASE("backward: structural ops match central differences") {
  // Exercises concat_cols, gather_rows, segment_sum, neighbor_mean, dropout,
  // tanh, mul, sub, log_sigmoid and sigmoid in one recording.
  Rng rng(99);
  const int n = 5, d = 4;
  auto a = random_vec(n * d, rng);
  auto b = random_vec(n * d, rng);
  std::vector<int> gather = {0, 2, 2, 4, 1, 3};
  std::vector<int> segs = {0, 1, 0, 2, 2, 1};
  std::vector<std::vector<int>> nbrs = {{1, 2}, {0}, {3, 4, 0}, {}, {2, 1}};
  auto mask = std::vector<double>(gather.size() * 2 * d, 1.0);
  mask[3] = 0.0;
  mask[11] = 0.0;

  auto run = [&](bool want_grads, std::vector<std::vector<double>>* grads) {
    Tape t;
    Var va = t.input(n, d, a, true);
    Var vb = t.input(n, d, b, true);
    Var mixed = t.sub(t.mul(t.tanh(va), t.sigmoid(vb)), t.scale(vb, 0.25));
    Var nm = t.neighbor_mean(mixed, nbrs);
    std::vector<Var> parts = {mixed, nm};
    Var cat = t.concat_cols(parts);
    Var g = t.gather_rows(cat, gather);
    Var dp = t.dropout(g, mask, 0.25);
    Var ls = t.log_sigmoid(dp);
    std::vector<int> pick(gather.size(), 3);
    Var col = t.pick_per_row(ls, pick);
    Var ss = t.segment_sum(col, segs, 3);
    Var loss = t.add(t.mean_all(ss), t.scale(t.mean_all(ls), 0.5));
    double lv = loss.scalar_value();
    if (want_grads) {
      t.backward(loss);
      *grads = {va.grad(), vb.grad()};
    }
    return lv;
  };

  std::vector<std::vector<double>> grads;
  run(true, &grads);
  auto loss_only = [&]() { return run(false, nullptr); };
  Rng fdrng(2);
  auto res = fd_check({FdParam{&a, &grads[0]}, FdParam{&b, &grads[1]}}, loss_only, 1000, 1e-4,
                      fdrng, 1e-5);
  CHECK(res.informative >= 10);
  CHECK(res.max_rel_err < 1e-4);
  CHECK(res.max_small_abs_err < 1e-6);
}

// ===========================================================================
// Adam
// ===========================================================================

TEST_CASE("adam: first step with unit gradient moves by about -lr") {
  Adam opt(AdamConfig{.lr = 1e-3});
  std::vector<double> p = {0.0};
  std::vector<double> g = {1.0};
  opt.step("p", p, g);
  // Bias-corrected m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
  double expected = -1e-3 * (1.0 / (1.0 + 1e-8));
  CHECK(std::fabs(p[0] - expected) < 1e-15);
  CHECK(std::fabs(p[0] + 1e-3) < 1e-9);
}

TEST_CASE("adam: decoupled weight decay shrinks a zero-gradient parameter") {
  Adam opt(AdamConfig{.lr = 1e-3, .weight_decay = 0.1});
  std::vector<double> p = {2.0};
  std::vector<double> g = {0.0};
  opt.step("p", p, g);
  CHECK(std::fabs(p[0] - 2.0 * (1.0 - 1e-3 * 0.1)) < 1e-15);
  opt.step("p", p, g);
  CHECK(std::fabs(p[0] - 2.0 * (1.0 - 1e-4) * (1.0 - 1e-4)) < 1e-15);
}

TEST_CASE("adam: zero gradient and zero decay is a fixed point") {
  Adam opt(AdamConfig{.lr = 1e-2});
  std::vector<double> p = {1.5, -2.5};
  std::vector<double> g = {0.0, 0.0};
  for (int i = 0; i < 5; ++i) opt.step("p", p, g);
  CHECK(p[0] == 1.5);
  CHECK(p[1] == -2.5);
}

TEST_CASE("adam: per-name slots keep independent step counts") {
  Adam opt(AdamConfig{.lr = 1e-3});
  std::vector<double> p1 = {0.0}, p2 = {0.0};
  std::vector<double> g = {1.0};
  opt.step("a", p1, g);
  opt.step("a", p1, g);
  opt.step("b", p2, g);
  double expected_first = -1e-3 * (1.0 / (1.0 + 1e-8));
  CHECK(std::fabs(p2[0] - expected_first) < 1e-15);
}

// ===========================================================================
// Error handling
// ===========================================================================

TEST_CASE("errors: shape mismatches are rejected") {
  Tape t;
  double xs[2] = {1, 2};
  double ys[3] = {1, 2, 3};
  Var a = t.constant(1, 2, xs);
  Var b = t.constant(1, 3, ys);
  CHECK_THROWS_AS(t.add(a, b), Error);
  CHECK_THROWS_AS(t.matmul(a, a), Error);
  CHECK_THROWS_AS(t.input(2, 2, xs, true), Error);
}

TEST_CASE("errors: non-finite results trip the check") {
  Tape t;
  double xs[1] = {-1.0};
  Var x = t.constant(1, 1, xs);
  CHECK_THROWS_AS(t.log(x), Error);
  double big[1] = {1e308};
  Var y = t.constant(1, 1, big);
  CHECK_THROWS_AS(t.mul(y, y), Error);
  double nan[1] = {std::nan("")};
  CHECK_THROWS_AS(t.constant(1, 1, nan), Error);
}

TEST_CASE("errors: one backward per recording, no recording after backward") {
  Tape t;
  double xs[1] = {0.3};
  Var x = t.input(1, 1, xs, true);
  Var y = t.sigmoid(x);
  t.backward(y);
  CHECK_THROWS_AS(t.backward(y), Error);
  CHECK_THROWS_AS(t.sigmoid(x), Error);
}

TEST_CASE("errors: backward needs a differentiable 1x1 loss") {
  Tape t;
  double xs[2] = {1.0, 2.0};
  Var c = t.constant(1, 2, xs);
  Var s = t.sum_all(c);
  CHECK_THROWS_AS(t.backward(s), Error);  // no differentiable input

  Tape t2;
  Var x = t2.input(1, 2, xs, true);
  CHECK_THROWS_AS(t2.backward(x), Error);  // not 1x1
}

TEST_CASE("errors: dropout validates mask and rate") {
  Tape t;
  double xs[2] = {1.0, 2.0};
  Var x = t.constant(1, 2, xs);
  double short_mask[1] = {1.0};
  CHECK_THROWS_AS(t.dropout(x, short_mask, 0.5), Error);
  double bad_mask[2] = {1.0, 0.5};
  CHECK_THROWS_AS(t.dropout(x, bad_mask, 0.5), Error);
  double mask[2] = {1.0, 1.0};
  CHECK_THROWS_AS(t.dropout(x, mask, 1.0), Error);
}

TEST_CASE("errors: index ops validate ranges") {
  Tape t;
  double xs[4] = {1, 2, 3, 4};
  Var x = t.constant(2, 2, xs);
  std::vector<int> bad = {2};
  CHECK_THROWS_AS(t.gather_rows(x, bad), Error);
  std::vector<int> badcols = {0, 5};
  CHECK_THROWS_AS(t.pick_per_row(x, badcols), Error);
}
