#include <catch2/catch.hpp>

#include <cmath>

#include "minisvrt/gradcheck.hpp"
#include "minisvrt/parallel.hpp"
#include "minisvrt/rng.hpp"
#include "minisvrt/tensor.hpp"

using namespace minisvrt;

namespace {

template <typename T>
Tensor<T> randn(Rng& rng, std::vector<std::size_t> shape, T scale = T(1)) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = scale * static_cast<T>(rng.normal());
  return t;
}

}  // namespace

TEST_CASE("tensor shape bookkeeping", "[tensor]") {
  Tensor<float> t({2, 3, 4});
  REQUIRE(t.numel() == 24);
  REQUIRE(t.rank() == 3);
  REQUIRE(t.dim(1) == 3);
  for (std::size_t i = 0; i < t.numel(); ++i) REQUIRE(t[i] == 0.0f);
  REQUIRE_THROWS_AS(Tensor<float>({2, 2}, {1.0f, 2.0f, 3.0f}), ShapeError);
}

TEST_CASE("conv2d forward semantics", "[tensor]") {
  SECTION("1x1 identity kernel preserves the input") {
    Rng rng(1);
    Tensor<double> x = randn<double>(rng, {2, 1, 4, 4});
    Tape<double> t;
    Tensor<double> w({1, 1, 1, 1});
    w[0] = 1.0;
    Tensor<double> b({1});
    auto y = t.conv2d(t.input(x), t.input(w), t.input(b), 1, 0);
    for (std::size_t i = 0; i < x.numel(); ++i) REQUIRE(t.value(y)[i] == Approx(x[i]).margin(0.0));
  }
  SECTION("zero input yields broadcast bias") {
    Tape<double> t;
    Tensor<double> x({1, 2, 3, 3});
    Rng rng(2);
    Tensor<double> w = randn<double>(rng, {3, 2, 3, 3});
    Tensor<double> b({3});
    b[0] = 0.5;
    b[1] = -1.0;
    b[2] = 2.0;
    auto y = t.conv2d(t.input(x), t.input(w), t.input(b), 1, 1);
    const auto& out = t.value(y);
    for (std::size_t f = 0; f < 3; ++f)
      for (std::size_t p = 0; p < 9; ++p) REQUIRE(out[f * 9 + p] == b[f]);
  }
  SECTION("shape violations") {
    Tape<double> t;
    auto x = t.input(Tensor<double>({1, 2, 4, 4}));
    auto w_even = t.input(Tensor<double>({1, 2, 2, 2}));
    REQUIRE_THROWS_AS(t.conv2d(x, w_even, Tape<double>::kNoNode), ShapeError);
    auto w_badc = t.input(Tensor<double>({1, 3, 3, 3}));
    REQUIRE_THROWS_AS(t.conv2d(x, w_badc, Tape<double>::kNoNode, 1, 1), ShapeError);
    auto w = t.input(Tensor<double>({1, 2, 3, 3}));
    REQUIRE_THROWS_AS(t.conv2d(x, w, Tape<double>::kNoNode, 2, 1), ShapeError);  // non-integral
  }
}

TEST_CASE("batchnorm2d semantics", "[tensor]") {
  SECTION("train mode normalizes per channel") {
    Rng rng(3);
    Tensor<double> x = randn<double>(rng, {4, 2, 5, 5}, 3.0);
    Tensor<double> gamma = Tensor<double>::full({2}, 1.0);
    Tensor<double> beta({2});
    Tensor<double> rm({2}), rv = Tensor<double>::full({2}, 1.0);
    Tape<double> t;
    auto y = t.batchnorm2d(t.input(x), t.input(gamma), t.input(beta), &rm, &rv, true);
    const auto& out = t.value(y);
    for (std::size_t c = 0; c < 2; ++c) {
      double mean = 0.0, var = 0.0;
      std::size_t m = 0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 25; ++i) {
          mean += out[(n * 2 + c) * 25 + i];
          ++m;
        }
      mean /= static_cast<double>(m);
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 25; ++i) {
          double d = out[(n * 2 + c) * 25 + i] - mean;
          var += d * d;
        }
      var /= static_cast<double>(m);
      REQUIRE(mean == Approx(0.0).margin(1e-4));
      REQUIRE(var == Approx(1.0).margin(1e-4));
    }
    // running stats moved toward the batch stats
    REQUIRE(rm[0] != 0.0);
    REQUIRE(rv[0] != 1.0);
  }
  SECTION("eval mode with unit running stats is an affine shift") {
    Rng rng(4);
    Tensor<double> x = randn<double>(rng, {2, 2, 3, 3});
    Tensor<double> gamma = Tensor<double>::full({2}, 1.0);
    Tensor<double> beta = Tensor<double>::full({2}, 5.0);
    Tensor<double> rm({2}), rv = Tensor<double>::full({2}, 1.0);
    Tape<double> t;
    auto y = t.batchnorm2d(t.input(x), t.input(gamma), t.input(beta), &rm, &rv, false);
    for (std::size_t i = 0; i < x.numel(); ++i)
      REQUIRE(t.value(y)[i] == Approx(x[i] + 5.0).margin(1e-4));
  }
  SECTION("train mode rejects batches smaller than 2") {
    Tensor<double> x({1, 2, 3, 3});
    Tensor<double> gamma({2}), beta({2}), rm({2}), rv({2});
    Tape<double> t;
    REQUIRE_THROWS_AS(t.batchnorm2d(t.input(x), t.input(gamma), t.input(beta), &rm, &rv, true),
                      ArgumentError);
  }
}

TEST_CASE("pointwise and pooling op semantics", "[tensor]") {
  Tape<double> t;
  SECTION("relu clamps negatives") {
    Tensor<double> x({4});
    x[0] = -1.0;
    x[1] = 0.0;
    x[2] = 0.5;
    x[3] = -0.25;
    auto y = t.relu(t.input(x));
    REQUIRE(t.value(y)[0] == 0.0);
    REQUIRE(t.value(y)[1] == 0.0);
    REQUIRE(t.value(y)[2] == 0.5);
    REQUIRE(t.value(y)[3] == 0.0);
  }
  SECTION("maxpool2 picks window maxima") {
    Tensor<double> x({1, 1, 2, 4}, {1, 5, 2, 0, 3, -1, 7, 4});
    auto y = t.maxpool2(t.input(x));
    REQUIRE(t.value(y).shape() == std::vector<std::size_t>{1, 1, 1, 2});
    REQUIRE(t.value(y)[0] == 5.0);
    REQUIRE(t.value(y)[1] == 7.0);
  }
  SECTION("global_avg_pool averages over space") {
    Tensor<double> x({1, 2, 2, 2}, {1, 2, 3, 4, 10, 10, 10, 14});
    auto y = t.global_avg_pool(t.input(x));
    REQUIRE(t.value(y).shape() == std::vector<std::size_t>{1, 2});
    REQUIRE(t.value(y)[0] == Approx(2.5));
    REQUIRE(t.value(y)[1] == Approx(11.0));
  }
  SECTION("add requires matching shapes and acts elementwise") {
    Tensor<double> a({2, 2}, {1, 2, 3, 4});
    Tensor<double> b({2, 2}, {10, 20, 30, 40});
    auto y = t.add(t.input(a), t.input(b));
    REQUIRE(t.value(y)[3] == 44.0);
    REQUIRE_THROWS_AS(t.add(t.input(a), t.input(Tensor<double>({4}))), ShapeError);
  }
  SECTION("add with zeros is the identity (property over random shapes)") {
    Rng rng(55);
    for (int trial = 0; trial < 25; ++trial) {
      std::vector<std::size_t> shape;
      int rank = static_cast<int>(rng.uniform_int(1, 4));
      for (int d = 0; d < rank; ++d)
        shape.push_back(static_cast<std::size_t>(rng.uniform_int(1, 5)));
      Tensor<double> x = randn<double>(rng, shape);
      Tape<double> tt;
      auto y = tt.add(tt.input(x), tt.input(Tensor<double>(shape)));
      for (std::size_t i = 0; i < x.numel(); ++i) REQUIRE(tt.value(y)[i] == x[i]);
    }
  }
  SECTION("concat_channels shape law") {
    Rng rng(56);
    for (int trial = 0; trial < 25; ++trial) {
      std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 3));
      std::size_t h = static_cast<std::size_t>(rng.uniform_int(1, 4));
      std::size_t w = static_cast<std::size_t>(rng.uniform_int(1, 4));
      std::size_t ca = static_cast<std::size_t>(rng.uniform_int(1, 6));
      std::size_t cb = static_cast<std::size_t>(rng.uniform_int(1, 6));
      Tape<double> tt;
      auto y = tt.concat_channels(tt.input(randn<double>(rng, {n, ca, h, w})),
                                  tt.input(randn<double>(rng, {n, cb, h, w})));
      REQUIRE(tt.value(y).shape() == std::vector<std::size_t>{n, ca + cb, h, w});
    }
    Tensor<double> a({1, 3, 2, 2}), b({1, 5, 2, 2});
    Tape<double> tt;
    auto y = tt.concat_channels(tt.input(a), tt.input(b));
    REQUIRE(tt.value(y).dim(1) == 8);
  }
}

TEST_CASE("sigmoid_bce stability and closed forms", "[tensor]") {
  SECTION("z=0, t=1 gives ln 2 and p=0.5") {
    Tape<double> t;
    Tensor<double> z({1}), targets({1});
    targets[0] = 1.0;
    auto r = t.sigmoid_bce(t.input(z), targets);
    REQUIRE(t.value(r.loss)[0] == Approx(std::log(2.0)).epsilon(1e-12));
    REQUIRE(r.prob[0] == Approx(0.5).epsilon(1e-12));
  }
  SECTION("extreme logits do not overflow") {
    Tape<double> t;
    Tensor<double> z({2}), targets({2});
    z[0] = 100.0;
    z[1] = -100.0;
    targets[0] = 1.0;
    targets[1] = 1.0;
    Tensor<double> z0({1}), t1({1});
    z0[0] = 100.0;
    t1[0] = 1.0;
    auto hi = t.sigmoid_bce(t.input(z0), t1);
    REQUIRE(t.value(hi.loss)[0] < 1e-40);
    Tensor<double> z1({1});
    z1[0] = -100.0;
    Tape<double> t2;
    auto lo = t2.sigmoid_bce(t2.input(z1), t1);
    REQUIRE(t2.value(lo.loss)[0] == Approx(100.0).epsilon(1e-10));
    REQUIRE(std::isfinite(t.value(hi.loss)[0]));
  }
  SECTION("targets must be binary") {
    Tape<double> t;
    Tensor<double> z({1}), targets({1});
    targets[0] = 0.5;
    REQUIRE_THROWS_AS(t.sigmoid_bce(t.input(z), targets), ArgumentError);
  }
}

TEST_CASE("backward mechanics", "[tensor]") {
  SECTION("single dense layer reproduces the closed-form gradient") {
    Rng rng(6);
    Tensor<double> xv = randn<double>(rng, {3, 4});
    Parameter<double> w("w", randn<double>(rng, {4, 2}));
    Parameter<double> b("b", randn<double>(rng, {2}));
    Tensor<double> proj = randn<double>(rng, {6});
    Tape<double> t;
    auto y = t.dense(t.input(xv), t.param(w), t.param(b));
    t.backward(t.weighted_sum(y, proj));
    // dw = x^T * dy with dy[s,j] = proj[s*2+j]
    for (std::size_t q = 0; q < 4; ++q)
      for (std::size_t j = 0; j < 2; ++j) {
        double expect = 0.0;
        for (std::size_t s = 0; s < 3; ++s) expect += xv[s * 4 + q] * proj[s * 2 + j];
        REQUIRE(w.grad[q * 2 + j] == Approx(expect).epsilon(1e-12));
      }
    REQUIRE(w.grad_ready);
  }
  SECTION("backward twice is an error") {
    Tape<double> t;
    Parameter<double> p("p", Tensor<double>::full({1}, 2.0));
    auto y = t.relu(t.param(p));
    auto loss = t.weighted_sum(y, Tensor<double>::full({1}, 1.0));
    t.backward(loss);
    REQUIRE_THROWS_AS(t.backward(loss), StateError);
  }
  SECTION("loss must be scalar") {
    Tape<double> t;
    auto x = t.input(Tensor<double>({3}));
    REQUIRE_THROWS_AS(t.backward(x), ArgumentError);
  }
  SECTION("parameters off the loss path get zero gradient but are marked ready") {
    Parameter<double> used("used", Tensor<double>::full({1}, 1.0));
    Parameter<double> unused("unused", Tensor<double>::full({2}, 3.0));
    Tape<double> t;
    auto a = t.param(used);
    t.param(unused);
    t.backward(t.weighted_sum(a, Tensor<double>::full({1}, 2.0)));
    REQUIRE(used.grad[0] == 2.0);
    REQUIRE(unused.grad_ready);
    REQUIRE(unused.grad[0] == 0.0);
    REQUIRE(unused.grad[1] == 0.0);
  }
  SECTION("checked mode flags non-finite values") {
    Tape<double> t(/*checked=*/true);
    Tensor<double> x({2});
    x[0] = 1e308;
    x[1] = 1e308;
    auto a = t.input(x);
    REQUIRE_THROWS_AS(t.add(a, a), NumericError);
  }
}

TEST_CASE("finite_diff_grad oracle", "[tensor]") {
  SECTION("sum of squares") {
    Tensor<double> x({2});
    x[0] = 1.0;
    x[1] = 2.0;
    auto f = [](const Tensor<double>& v) {
      double acc = 0.0;
      for (std::size_t i = 0; i < v.numel(); ++i) acc += v[i] * v[i];
      return acc;
    };
    Tensor<double> g = finite_diff_grad(f, x, 1e-5);
    REQUIRE(g[0] == Approx(2.0).margin(1e-6));
    REQUIRE(g[1] == Approx(4.0).margin(1e-6));
  }
  SECTION("linear functions are exact to round-off") {
    Tensor<double> x({3});
    x[0] = 0.25;
    x[1] = -0.5;
    x[2] = 4.0;
    auto f = [](const Tensor<double>& v) { return 3.0 * v[0] - 2.0 * v[1] + 0.5 * v[2]; };
    Tensor<double> g = finite_diff_grad(f, x, 1e-4);
    REQUIRE(g[0] == Approx(3.0).margin(1e-10));
    REQUIRE(g[1] == Approx(-2.0).margin(1e-10));
    REQUIRE(g[2] == Approx(0.5).margin(1e-10));
  }
  SECTION("eps must be positive") {
    Tensor<double> x({1});
    auto f = [](const Tensor<double>&) { return 0.0; };
    REQUIRE_THROWS_AS(finite_diff_grad(f, x, 0.0), ArgumentError);
  }
}

TEST_CASE("gradient suite: every op matches finite differences", "[tensor][gradcheck]") {
  auto results = run_gradcheck_suite();
  for (const auto& r : results) {
    INFO(r.name << ": max_rel " << r.max_rel << ", max_abs_small " << r.max_abs_small << " over "
                << r.coords << " coords");
    CHECK(r.pass);
  }
  REQUIRE(results.size() >= 11);
}

TEST_CASE("gradient suite self-test catches an injected batchnorm fault", "[tensor][gradcheck]") {
  GradcheckOptions opt;
  opt.inject_batchnorm_fault = true;
  auto results = run_gradcheck_suite(opt);
  bool bn_failed = false;
  for (const auto& r : results)
    if (r.name == "batchnorm2d_train" && !r.pass) bn_failed = true;
  REQUIRE(bn_failed);
}

TEST_CASE("forward determinism across worker counts", "[tensor]") {
  Rng rng(77);
  Tensor<float> x = randn<float>(rng, {4, 3, 16, 16});
  Tensor<float> w = randn<float>(rng, {8, 3, 3, 3});
  Tensor<float> b = randn<float>(rng, {8});
  auto run = [&](int threads) {
    set_max_threads(threads);
    Tape<float> t;
    auto y = t.conv2d(t.input(x), t.input(w), t.input(b), 1, 1);
    Tensor<float> out = t.value(y);
    set_max_threads(0);
    return out;
  };
  Tensor<float> one = run(1);
  Tensor<float> four = run(4);
  REQUIRE(one.numel() == four.numel());
  for (std::size_t i = 0; i < one.numel(); ++i) REQUIRE(one[i] == four[i]);
}

TEST_CASE("backward determinism across worker counts", "[tensor]") {
  Rng rng(78);
  Tensor<double> x = randn<double>(rng, {4, 3, 8, 8});
  Tensor<double> proj = randn<double>(rng, {4 * 6 * 8 * 8});
  auto run = [&](int threads) {
    set_max_threads(threads);
    Parameter<double> w("w", Tensor<double>({6, 3, 3, 3}));
    Rng r2(79);
    for (std::size_t i = 0; i < w.value.numel(); ++i) w.value[i] = r2.normal();
    Tape<double> t;
    auto y = t.conv2d(t.input(x), t.param(w), Tape<double>::kNoNode, 1, 1);
    t.backward(t.weighted_sum(y, proj));
    set_max_threads(0);
    return w.grad;
  };
  Tensor<double> one = run(1);
  Tensor<double> eight = run(8);
  for (std::size_t i = 0; i < one.numel(); ++i) REQUIRE(one[i] == eight[i]);
}
