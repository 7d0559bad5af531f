#include <cmath>
#include <vector>

#include <doctest.h>

#include "mmc/ops.hpp"
#include "mmc/optim.hpp"
#include "mmc/rng.hpp"
#include "support/gradcheck.hpp"
#include "support/testutil.hpp"

using namespace mmc;
using mmc::testing::finite_diff_check;
using mmc::testing::rand_tensor;
using mmc::testing::rand_tensor_away_from_zero;

namespace {

// Probe loss sq_l2(y, r) with a fixed random target r: exercises every output
// coordinate with a distinct weight, unlike a plain sum.
double probe_loss_value(const Tensor& y, const Tensor& r) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y[i] - r[i];
    acc += d * d;
  }
  return acc;
}

}  // namespace

TEST_SUITE("ndtensor.ops") {

TEST_CASE("conv2d: 1x1 identity kernel reproduces the input") {
  Rng rng(7);
  Tape tape;
  Tensor x = rand_tensor(rng, {2, 1, 4, 5});
  Tensor w({1, 1, 1, 1}, {1.0});
  Tensor b({1}, {0.0});
  Tensor y = conv2d(tape, x, w, b, 1, 0);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("conv2d: hand-evaluated 2x2 all-ones kernel") {
  Tape tape;
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor w({1, 1, 2, 2}, {1, 1, 1, 1});
  Tensor b({1}, {0.0});
  Tensor y = conv2d(tape, x, w, b, 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == 10.0);
}

TEST_CASE("conv2d: output extent follows floor((in + 2p - k)/s) + 1") {
  Tape tape;
  Tensor x({1, 1, 7, 9});
  Tensor w({3, 1, 3, 3});
  Tensor b({3});
  Tensor y = conv2d(tape, x, w, b, 2, 1);
  CHECK(y.shape() == Shape{1, 3, 4, 5});
}

TEST_CASE("conv2d: invalid arguments") {
  Tape tape;
  Tensor x({1, 2, 4, 4});
  Tensor w({1, 3, 3, 3});  // channel mismatch
  Tensor b({1});
  CHECK_THROWS_AS(conv2d(tape, x, w, b, 1, 0), ShapeError);
  Tensor w2({1, 2, 3, 3});
  CHECK_THROWS_AS(conv2d(tape, x, w2, b, 0, 0), ValueError);
  CHECK_THROWS_AS(conv2d(tape, x, w2, b, 1, -1), ValueError);
  Tensor tiny({1, 2, 2, 2});
  CHECK_THROWS_AS(conv2d(tape, tiny, w2, b, 1, 0), ShapeError);
}

TEST_CASE("conv2d: gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    Tensor x = rand_tensor(rng, {1, 2, 5, 5});
    Tensor w = rand_tensor(rng, {3, 2, 3, 3});
    Tensor b = rand_tensor(rng, {3});
    Tensor target = rand_tensor(rng, {1, 3, 5, 5});
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    b.set_requires_grad(true);

    Tape tape;
    Tensor y = conv2d(tape, x, w, b, 1, 1);
    Tensor loss = sq_l2(tape, y, target);
    tape.backward(loss);

    auto forward = [&]() {
      Tape t;
      return probe_loss_value(conv2d(t, x, w, b, 1, 1), target);
    };
    for (Tensor* p : {&x, &w, &b}) {
      auto res = finite_diff_check(*p, p->grad(), forward);
      CAPTURE(seed);
      CHECK(res.max_rel_err < 1e-5);
    }
  }
}

TEST_CASE("relu: values and subgradient") {
  Tape tape;
  Tensor neg({3}, {-1.0, -0.5, -2.0});
  Tensor out = relu(tape, neg);
  for (std::size_t i = 0; i < 3; ++i) CHECK(out[i] == 0.0);

  Tensor pos({3}, {1.0, 0.5, 2.0});
  Tensor out2 = relu(tape, pos);
  for (std::size_t i = 0; i < 3; ++i) CHECK(out2[i] == pos[i]);

  Tensor x({3}, {-1.0, 0.0, 2.0});
  x.set_requires_grad(true);
  Tape t2;
  Tensor y = relu(t2, x);
  Tensor loss = sum(t2, y);
  t2.backward(loss);
  CHECK(x.grad() == std::vector<double>{0.0, 0.0, 1.0});
}

TEST_CASE("gap: spatial mean per channel") {
  Tape tape;
  SUBCASE("constant map") {
    Tensor x({1, 2, 3, 3}, std::vector<double>(18, 2.5));
    Tensor y = gap(tape, x);
    CHECK(y.shape() == Shape{1, 2});
    CHECK(y[0] == 2.5);
    CHECK(y[1] == 2.5);
  }
  SUBCASE("1x1 spatial map is the identity") {
    Tensor x({2, 3, 1, 1}, {1, 2, 3, 4, 5, 6});
    Tensor y = gap(tape, x);
    for (std::size_t i = 0; i < 6; ++i) CHECK(y[i] == x[i]);
  }
  SUBCASE("hand mean") {
    Tensor x({1, 1, 2, 2}, {1, 3, 5, 7});
    CHECK(gap(tape, x)[0] == 4.0);
  }
  SUBCASE("backward distributes grad/(H*W)") {
    Tensor x({1, 1, 2, 2}, {1, 3, 5, 7});
    x.set_requires_grad(true);
    Tape t;
    Tensor loss = sum(t, gap(t, x));
    t.backward(loss);
    for (double g : x.grad()) CHECK(g == 0.25);
  }
}

TEST_CASE("linear: identity, hand matvec, finite differences") {
  Tape tape;
  Tensor v({1, 2}, {1.0, 2.0});
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor y = linear(tape, v, eye);
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 2.0);

  Tensor w({2, 2}, {1, 1, 0, 1});
  Tensor y2 = linear(tape, v, w);
  CHECK(y2[0] == 3.0);
  CHECK(y2[1] == 2.0);

  Tensor bad({3, 4});
  CHECK_THROWS_AS(linear(tape, v, bad), ShapeError);

  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 11);
    Tensor vv = rand_tensor(rng, {3, 4});
    Tensor ww = rand_tensor(rng, {2, 4});
    Tensor bb = rand_tensor(rng, {2});
    Tensor target = rand_tensor(rng, {3, 2});
    vv.set_requires_grad(true);
    ww.set_requires_grad(true);
    bb.set_requires_grad(true);
    Tape t;
    Tensor loss = sq_l2(t, linear(t, vv, ww, bb), target);
    t.backward(loss);
    auto forward = [&]() {
      Tape tt;
      return probe_loss_value(linear(tt, vv, ww, bb), target);
    };
    for (Tensor* p : {&vv, &ww, &bb})
      CHECK(finite_diff_check(*p, p->grad(), forward).max_rel_err < 1e-5);
  }
}

TEST_CASE("mul_broadcast: identity and zero masks") {
  Rng rng(3);
  Tape tape;
  Tensor x = rand_tensor(rng, {2, 3, 4, 4});
  Tensor ones({2, 1, 4, 4}, std::vector<double>(32, 1.0));
  Tensor zeros({2, 1, 4, 4});
  Tensor y = mul_broadcast(tape, x, ones);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
  Tensor z = mul_broadcast(tape, x, zeros);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == 0.0);
}

TEST_CASE("mul_broadcast: grad w.r.t. map is the channel-sum of the input") {
  Rng rng(4);
  Tensor x = rand_tensor(rng, {1, 3, 2, 2});
  Tensor h = rand_tensor(rng, {1, 1, 2, 2}, 0.0, 1.0);
  h.set_requires_grad(true);
  Tape tape;
  Tensor loss = sum(tape, mul_broadcast(tape, x, h));
  tape.backward(loss);
  for (std::size_t i = 0; i < 4; ++i) {
    const double expect = x[i] + x[4 + i] + x[8 + i];
    CHECK(h.grad()[i] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("mul_broadcast: zero mask annihilates gradients w.r.t. the input") {
  Rng rng(5);
  Tensor x = rand_tensor(rng, {1, 2, 3, 3});
  x.set_requires_grad(true);
  Tensor h({1, 1, 3, 3});
  Tape tape;
  Tensor loss = sum(tape, mul_broadcast(tape, x, h));
  tape.backward(loss);
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("minmax_normalize: examples") {
  Tape tape;
  Tensor a({3}, {0.0, 0.5, 1.0});
  Tensor na = minmax_normalize(tape, a);
  CHECK(na[0] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(na[1] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(na[2] == doctest::Approx(1.0).epsilon(1e-9));

  Tensor c({4}, {3.0, 3.0, 3.0, 3.0});
  Tensor nc = minmax_normalize(tape, c);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::fabs(nc[i]) < 1e-6);

  Tensor m({3}, {2.0, 4.0, 6.0});
  Tensor nm = minmax_normalize(tape, m);
  CHECK(nm[0] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(nm[1] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(nm[2] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("minmax_normalize: output range and extrema attainment") {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    Rng rng(seed * 101);
    Tape tape;
    Tensor m = rand_tensor(rng, {5, 7}, -3.0, 3.0);
    Tensor y = minmax_normalize(tape, m);
    double lo = 1e9, hi = -1e9;
    for (std::size_t i = 0; i < y.size(); ++i) {
      lo = std::min(lo, y[i]);
      hi = std::max(hi, y[i]);
    }
    CHECK(lo == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(hi == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(hi <= 1.0);
  }
}

TEST_CASE("minmax_normalize: gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 13);
    // Distinct well-separated values keep the arg-extrema stable under h.
    std::vector<double> vals(12);
    for (std::size_t i = 0; i < vals.size(); ++i)
      vals[i] = static_cast<double>(i) * 0.05 + rng.uniform(0.0, 0.04);
    Rng shuffle_rng(seed);
    shuffle_rng.shuffle(vals);
    Tensor m({3, 4}, vals);
    Tensor target = rand_tensor(rng, {3, 4});
    m.set_requires_grad(true);

    for (bool detach : {false, true}) {
      m.zero_grad();
      Tape tape;
      Tensor loss = sq_l2(tape, minmax_normalize(tape, m, 1e-12, detach), target);
      tape.backward(loss);
      if (detach) continue;  // detached extrema are not the analytic derivative
      auto forward = [&]() {
        Tape t;
        return probe_loss_value(minmax_normalize(t, m), target);
      };
      CHECK(finite_diff_check(m, m.grad(), forward).max_rel_err < 1e-5);
    }
  }
}

TEST_CASE("bilinear_resize: identity, constant, hand-evaluated upsample") {
  Rng rng(6);
  Tape tape;
  Tensor m = rand_tensor(rng, {3, 4});
  Tensor same = bilinear_resize(tape, m, 3, 4);
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(same[i] == doctest::Approx(m[i]).epsilon(1e-12));

  Tensor c({2, 2}, {0.7, 0.7, 0.7, 0.7});
  Tensor cr = bilinear_resize(tape, c, 5, 3);
  for (std::size_t i = 0; i < cr.size(); ++i) CHECK(cr[i] == doctest::Approx(0.7).epsilon(1e-12));

  Tensor col({2, 1}, {0.0, 1.0});
  Tensor up = bilinear_resize(tape, col, 4, 1);
  CHECK(up[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(up[1] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(up[2] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(up[3] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("bilinear_resize: gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 17);
    Tensor m = rand_tensor(rng, {4, 3});
    Tensor target = rand_tensor(rng, {7, 9});
    m.set_requires_grad(true);
    Tape tape;
    Tensor loss = sq_l2(tape, bilinear_resize(tape, m, 7, 9), target);
    tape.backward(loss);
    auto forward = [&]() {
      Tape t;
      return probe_loss_value(bilinear_resize(t, m, 7, 9), target);
    };
    CHECK(finite_diff_check(m, m.grad(), forward).max_rel_err < 1e-5);
  }
}

TEST_CASE("softmax_cross_entropy: symmetry, hand value, margin limit") {
  Tape tape;
  Tensor uniform({2, 4}, std::vector<double>(8, 0.3));
  CHECK(softmax_cross_entropy(tape, uniform, {0, 3}).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Tensor two({1, 2}, {1.0, 2.0});
  CHECK(softmax_cross_entropy(tape, two, {1}).item() ==
        doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));

  double prev = std::log(3.0);
  for (double margin : {1.0, 4.0, 16.0}) {
    Tensor logits({1, 3}, {margin, 0.0, 0.0});
    const double loss = softmax_cross_entropy(tape, logits, {0}).item();
    CHECK(loss < prev);
    prev = loss;
  }
  CHECK(prev < 1e-6);

  CHECK_THROWS_AS(softmax_cross_entropy(tape, two, {2}), ValueError);
  CHECK_THROWS_AS(softmax_cross_entropy(tape, two, {-1}), ValueError);
}

TEST_CASE("softmax_cross_entropy: gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 19);
    Tensor logits = rand_tensor(rng, {4, 5}, -2.0, 2.0);
    logits.set_requires_grad(true);
    const std::vector<int> labels = {0, 2, 4, 1};
    Tape tape;
    Tensor loss = softmax_cross_entropy(tape, logits, labels);
    tape.backward(loss);
    auto forward = [&]() {
      Tape t;
      return softmax_cross_entropy(t, logits, labels).item();
    };
    CHECK(finite_diff_check(logits, logits.grad(), forward).max_rel_err < 1e-5);
  }
}

TEST_CASE("sq_l2: examples and analytic gradient") {
  Tape tape;
  Tensor a({2}, {1.0, 2.0});
  CHECK(sq_l2(tape, a, a.clone()).item() == 0.0);

  Tensor p({2}, {0.0, 0.0});
  Tensor q({2}, {3.0, 4.0});
  CHECK(sq_l2(tape, p, q).item() == 25.0);

  Tensor x({3}, {1.0, -2.0, 0.5});
  Tensor y({3}, {0.0, 1.0, 0.5});
  x.set_requires_grad(true);
  Tape t;
  Tensor loss = sq_l2(t, x, y);
  t.backward(loss);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(x.grad()[i] == doctest::Approx(2.0 * (x[i] - y[i])).epsilon(1e-12));

  Tensor bad({4});
  CHECK_THROWS_AS(sq_l2(t, x, bad), ShapeError);
}

TEST_CASE("backward: seed cases, accumulation, error contracts") {
  Tensor x({3}, {1.0, -2.0, 3.0});
  x.set_requires_grad(true);

  SUBCASE("sum gives unit gradients") {
    Tape tape;
    Tensor loss = sum(tape, x);
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("sq_l2 against zero gives 2x") {
    Tape tape;
    Tensor loss = sq_l2(tape, x, Tensor({3}));
    tape.backward(loss);
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0 * x[i]);
  }
  SUBCASE("repeated backward accumulates") {
    Tape tape;
    Tensor loss = sum(tape, x);
    tape.backward(loss);
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == 2.0);
  }
  SUBCASE("non-scalar loss is rejected") {
    Tape tape;
    Tensor y = relu(tape, x);
    CHECK_THROWS_AS(tape.backward(y), ValueError);
  }
  SUBCASE("loss from another tape is rejected") {
    Tape tape;
    Tensor loss = sum(tape, x);
    Tape other;
    CHECK_THROWS_AS(other.backward(loss), ValueError);
  }
}

TEST_CASE("composite graph: conv -> relu -> gap -> linear matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 23);
    Tensor x = rand_tensor(rng, {2, 2, 6, 6});
    Tensor w1 = rand_tensor(rng, {4, 2, 3, 3}, -0.5, 0.5);
    Tensor b1 = rand_tensor_away_from_zero(rng, {4}, 0.2);
    Tensor w2 = rand_tensor(rng, {3, 4});
    Tensor target = rand_tensor(rng, {2, 3});
    for (Tensor* p : {&x, &w1, &b1, &w2}) p->set_requires_grad(true);

    auto build = [&](Tape& t) {
      Tensor h = relu(t, conv2d(t, x, w1, b1, 2, 1));
      return sq_l2(t, linear(t, gap(t, h), w2), target);
    };
    Tape tape;
    Tensor loss = build(tape);
    tape.backward(loss);
    auto forward = [&]() {
      Tape t;
      return build(t).item();
    };
    for (Tensor* p : {&x, &w1, &b1, &w2}) {
      auto res = finite_diff_check(*p, p->grad(), forward);
      CAPTURE(seed);
      CHECK(res.max_rel_err < 1e-5);
    }
  }
}

TEST_CASE("tape: replay reproduces outputs bit-exactly, backward is deterministic") {
  Rng rng(99);
  Tensor x = rand_tensor(rng, {1, 2, 5, 5});
  Tensor w = rand_tensor(rng, {2, 2, 3, 3});
  Tensor b = rand_tensor(rng, {2});
  Tensor w2 = rand_tensor(rng, {2, 2});
  for (Tensor* p : {&x, &w, &b, &w2}) p->set_requires_grad(true);

  Tape tape;
  Tensor feat = relu(tape, conv2d(tape, x, w, b, 1, 1));
  Tensor logits = linear(tape, gap(tape, feat), w2);
  Tensor loss = softmax_cross_entropy(tape, logits, {1});

  const std::vector<double> feat_snapshot = feat.values();
  const std::vector<double> loss_snapshot = loss.values();
  tape.replay();
  CHECK(feat.values() == feat_snapshot);
  CHECK(loss.values() == loss_snapshot);

  tape.backward(loss);
  const std::vector<double> gx = x.grad();
  const std::vector<double> gw = w.grad();
  for (Tensor* p : {&x, &w, &b, &w2}) p->zero_grad();
  tape.backward(loss);
  CHECK(x.grad() == gx);
  CHECK(w.grad() == gw);
}

TEST_CASE("row / select_image / stack_maps move values and gradients faithfully") {
  Tensor m({2, 3}, {1, 2, 3, 4, 5, 6});
  m.set_requires_grad(true);
  Tape tape;
  Tensor r1 = row(tape, m, 1);
  CHECK(r1.values() == std::vector<double>{4, 5, 6});
  Tensor loss = sum(tape, r1);
  tape.backward(loss);
  CHECK(m.grad() == std::vector<double>{0, 0, 0, 1, 1, 1});
  CHECK_THROWS_AS(row(tape, m, 2), ValueError);

  Rng rng(8);
  Tensor batch = rand_tensor(rng, {3, 2, 2, 2});
  batch.set_requires_grad(true);
  Tape t2;
  Tensor img = select_image(t2, batch, 2);
  CHECK(img.shape() == Shape{2, 2, 2});
  CHECK(img[0] == batch[16]);

  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor bmap({2, 2}, {5, 6, 7, 8});
  a.set_requires_grad(true);
  Tape t3;
  Tensor stacked = stack_maps(t3, {a, bmap});
  CHECK(stacked.shape() == Shape{2, 1, 2, 2});
  CHECK(stacked[5] == 6.0);
  Tensor l3 = sum(t3, stacked);
  t3.backward(l3);
  CHECK(a.grad() == std::vector<double>(4, 1.0));
}

}  // TEST_SUITE

TEST_SUITE("ndtensor.sgd") {

TEST_CASE("sgd_step: zero lr, hand update, momentum recursion") {
  ParamSet ps;
  ps.add("p", Tensor({1}, {1.0}));
  ps.at("p").grad()[0] = 2.0;
  SgdState st;

  SUBCASE("lr = 0 leaves parameters unchanged") {
    sgd_step(ps, st, 0.0, 0.0);
    CHECK(ps.at("p")[0] == 1.0);
  }
  SUBCASE("plain step") {
    sgd_step(ps, st, 0.1, 0.0);
    CHECK(ps.at("p")[0] == doctest::Approx(0.8).epsilon(1e-15));
  }
}

TEST_CASE("sgd_step: two momentum steps with constant gradient") {
  ParamSet ps;
  ps.add("p", Tensor({1}, {0.0}));
  SgdState st;
  ps.at("p").grad()[0] = 1.0;
  sgd_step(ps, st, 0.1, 0.9);
  CHECK(ps.at("p")[0] == doctest::Approx(-0.1).epsilon(1e-15));
  ps.at("p").zero_grad();
  ps.at("p").grad()[0] = 1.0;
  sgd_step(ps, st, 0.1, 0.9);
  CHECK(ps.at("p")[0] == doctest::Approx(-0.29).epsilon(1e-15));
}

TEST_CASE("sgd_step: non-trainable parameters are untouched bit-exactly") {
  ParamSet ps;
  ps.add("frozen", Tensor({2}, {0.3, -0.7}), false);
  ps.add("live", Tensor({1}, {1.0}));
  ps.at("live").grad()[0] = 1.0;
  SgdState st;
  sgd_step(ps, st, 0.5, 0.9);
  CHECK(ps.at("frozen")[0] == 0.3);
  CHECK(ps.at("frozen")[1] == -0.7);
  CHECK(ps.at("live")[0] == 0.5);
}

TEST_CASE("sgd_step: missing gradient on a trainable parameter") {
  ParamSet ps;
  ps.add("p", Tensor({1}, {1.0}));
  SgdState st;
  CHECK_THROWS_AS(sgd_step(ps, st, 0.1, 0.9), MissingGradError);
}

}  // TEST_SUITE
