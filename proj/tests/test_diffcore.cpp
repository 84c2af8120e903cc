#include <cmath>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "pnfrl/diffcore.hpp"

using namespace pnfrl;
using testutil::dense;
using testutil::rel_err;

namespace {

Tensor random_tensor(size_t rows, size_t cols, Rng& rng) {
  Tensor t(rows, cols);
  for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// independent scalar evaluation of act(W x + b) for one layer
std::vector<double> ref_layer(const std::vector<std::vector<double>>& w,
                              const std::vector<double>& b,
                              const std::vector<double>& x, bool use_tanh) {
  std::vector<double> y(b.size());
  for (size_t i = 0; i < b.size(); ++i) {
    double z = b[i];
    for (size_t j = 0; j < x.size(); ++j) z += w[i][j] * x[j];
    y[i] = use_tanh ? std::tanh(z) : z;
  }
  return y;
}

}  // namespace

TEST_SUITE("diffcore") {

TEST_CASE("identity layer passes input through") {
  MlpParams p{{dense(2, 2, {1, 0, 0, 1}, {0, 0})}};
  const Tensor y = mlp_forward(p, Tensor::row(std::vector<double>{1.0, 2.0}));
  CHECK(y(0, 0) == 1.0);
  CHECK(y(0, 1) == 2.0);
}

TEST_CASE("tanh net with zero biases maps zero to zero") {
  Rng rng(3);
  MlpParams p = make_mlp({3, 5, 4, 2}, Activation::kTanh, rng);
  const Tensor y = mlp_forward(p, Tensor(1, 3));
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("two-layer forward matches straight-line evaluation") {
  const std::vector<std::vector<double>> w1 = {{0.1, -0.2}, {0.3, 0.4}, {-0.5, 0.6}};
  const std::vector<double> b1 = {0.01, -0.02, 0.03};
  const std::vector<std::vector<double>> w2 = {{0.7, -0.8, 0.9}};
  const std::vector<double> b2 = {0.05};
  MlpParams p{{dense(3, 2, {0.1, -0.2, 0.3, 0.4, -0.5, 0.6}, b1, Activation::kTanh),
               dense(1, 3, {0.7, -0.8, 0.9}, b2)}};
  const std::vector<double> x = {0.5, -0.5};
  const auto h = ref_layer(w1, b1, x, true);
  const auto expected = ref_layer(w2, b2, h, false);
  const Tensor y = mlp_forward(p, Tensor::row(x));
  CHECK(y(0, 0) == doctest::Approx(expected[0]).epsilon(1e-14));
}

TEST_CASE("forward reports the offending layer on shape mismatch") {
  MlpParams p{{dense(3, 2, std::vector<double>(6, 0.1), {0, 0, 0}, Activation::kTanh),
               dense(1, 4, std::vector<double>(4, 0.1), {0})}};
  try {
    mlp_forward(p, Tensor(1, 2));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(e.layer() == 1);
  }
  try {
    mlp_forward(MlpParams{{dense(1, 2, {1, 1}, {0})}}, Tensor(1, 3));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(e.layer() == 0);
  }
}

TEST_CASE("linear layer input gradient is the column sums of W") {
  MlpParams p{{dense(2, 3, {1, 2, 3, 4, 5, 6}, {0.5, -0.5})}};
  const Tensor x = Tensor::row(std::vector<double>{0.3, -0.1, 2.0});
  const Tensor up(1, 2, 1.0);
  const auto g = mlp_backward(p, x, up);
  CHECK(g.input(0, 0) == 5.0);
  CHECK(g.input(0, 1) == 7.0);
  CHECK(g.input(0, 2) == 9.0);
  const Tensor fd = finite_diff_input_grad(p, x, up, 1e-5);
  for (size_t j = 0; j < 3; ++j) CHECK(std::abs(fd(0, j) - g.input(0, j)) < 1e-8);
}

TEST_CASE("constant network has zero input gradient") {
  MlpParams p{{dense(3, 2, std::vector<double>(6, 0.0), {1, 2, 3}, Activation::kTanh),
               dense(1, 3, std::vector<double>(3, 0.0), {4})}};
  const auto g = mlp_backward(p, Tensor::row(std::vector<double>{0.2, 0.7}), Tensor(1, 1, 1.0));
  for (double v : g.input.data()) CHECK(v == 0.0);
}

TEST_CASE("central difference of x^2 at 3 gives 6") {
  const double h = 1e-5;
  const double fd = ((3.0 + h) * (3.0 + h) - (3.0 - h) * (3.0 - h)) / (2 * h);
  CHECK(std::abs(fd - 6.0) < 1e-6);
  // the library routine on f(x) = x with upstream 6 lands on the same value
  MlpParams p{{dense(1, 1, {1.0}, {0.0})}};
  const Tensor g = finite_diff_input_grad(p, Tensor::row(std::vector<double>{3.0}),
                                          Tensor::row(std::vector<double>{6.0}), h);
  CHECK(std::abs(g(0, 0) - 6.0) < 1e-6);
}

TEST_CASE("random tanh nets: backward agrees with finite differences") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    MlpParams p = make_mlp({3, 7, 2}, Activation::kTanh, rng);
    const Tensor x = random_tensor(4, 3, rng);
    const Tensor up = random_tensor(4, 2, rng);
    const Tensor g = mlp_backward(p, x, up).input;
    const Tensor fd = finite_diff_input_grad(p, x, up, 1e-5);
    for (size_t i = 0; i < g.size(); ++i) CHECK(rel_err(g[i], fd[i]) <= 1e-4);
  }
}

TEST_CASE("architecture family: depths 1-3, widths 2-16") {
  Rng rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    const size_t depth = 1 + rng.index(3);
    std::vector<size_t> sizes = {2 + rng.index(15)};
    for (size_t d = 0; d < depth; ++d) sizes.push_back(2 + rng.index(15));
    const Activation act = rng.uniform() < 0.5 ? Activation::kTanh : Activation::kRelu;
    MlpParams p = make_mlp(sizes, act, rng);
    const Tensor x = random_tensor(2, sizes.front(), rng);
    const Tensor up = random_tensor(2, sizes.back(), rng);
    const Tensor g = mlp_backward(p, x, up).input;
    const Tensor fd = finite_diff_input_grad(p, x, up, 1e-5);
    for (size_t i = 0; i < g.size(); ++i) CHECK(rel_err(g[i], fd[i]) <= 1e-4);
  }
}

TEST_CASE("parameter gradients match finite differences") {
  Rng rng(5);
  MlpParams p = make_mlp({2, 4, 3}, Activation::kTanh, rng);
  const Tensor x = random_tensor(3, 2, rng);
  const Tensor up = random_tensor(3, 3, rng);
  const auto g = mlp_backward(p, x, up);
  auto objective = [&](const MlpParams& q) {
    const Tensor y = mlp_forward(q, x);
    double s = 0.0;
    for (size_t i = 0; i < y.size(); ++i) s += y[i] * up[i];
    return s;
  };
  const double h = 1e-6;
  for (size_t l = 0; l < p.layers.size(); ++l) {
    for (size_t k = 0; k < p.layers[l].weight.size(); ++k) {
      MlpParams a = p, b = p;
      a.layers[l].weight[k] += h;
      b.layers[l].weight[k] -= h;
      const double fd = (objective(a) - objective(b)) / (2 * h);
      CHECK(rel_err(fd, g.params.layers[l].weight[k]) <= 1e-5);
    }
    for (size_t k = 0; k < p.layers[l].bias.size(); ++k) {
      MlpParams a = p, b = p;
      a.layers[l].bias[k] += h;
      b.layers[l].bias[k] -= h;
      const double fd = (objective(a) - objective(b)) / (2 * h);
      CHECK(rel_err(fd, g.params.layers[l].bias[k]) <= 1e-5);
    }
  }
}

TEST_CASE("batch gradient is the sum of per-sample gradients") {
  Rng rng(8);
  MlpParams p = make_mlp({3, 6, 2}, Activation::kTanh, rng);
  const Tensor x = random_tensor(5, 3, rng);
  const Tensor up = random_tensor(5, 2, rng);
  const auto whole = mlp_backward(p, x, up).params;
  MlpParams sum = zeros_like(p);
  for (size_t i = 0; i < 5; ++i)
    accumulate(sum, mlp_backward(p, Tensor::row(x.row_span(i)), Tensor::row(up.row_span(i))).params);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    for (size_t k = 0; k < sum.layers[l].weight.size(); ++k)
      CHECK(whole.layers[l].weight[k] == doctest::Approx(sum.layers[l].weight[k]).epsilon(1e-12));
  }
}

TEST_CASE("forward is pure") {
  Rng rng(2);
  MlpParams p = make_mlp({4, 8, 8, 3}, Activation::kTanh, rng);
  const Tensor x = random_tensor(6, 4, rng);
  CHECK(mlp_forward(p, x) == mlp_forward(p, x));
}

TEST_CASE("tape backward without parameter gradients gives the same input gradient") {
  Rng rng(4);
  MlpParams p = make_mlp({3, 5, 2}, Activation::kRelu, rng);
  const Tensor x = random_tensor(3, 3, rng);
  const Tensor up = random_tensor(3, 2, rng);
  MlpTape tape;
  mlp_forward(p, x, &tape);
  CHECK(mlp_backward(p, tape, up, false).input == mlp_backward(p, x, up).input);
}

TEST_CASE("init is seeded and fan-in scaled") {
  Rng a(11), b(11);
  CHECK(make_mlp({4, 16, 1}, Activation::kTanh, a) == make_mlp({4, 16, 1}, Activation::kTanh, b));
  Rng c(12);
  MlpParams p = make_mlp({4, 16, 1}, Activation::kRelu, c);
  const double he = std::sqrt(6.0 / 4.0);
  for (double w : p.layers[0].weight.data()) CHECK(std::abs(w) <= he);
  for (double v : p.layers[0].bias.data()) CHECK(v == 0.0);
  CHECK(p.layers.back().activation == Activation::kIdentity);
}

TEST_CASE("adam: zero gradient leaves parameters, advances the step") {
  Rng rng(1);
  MlpParams p = make_mlp({2, 3, 1}, Activation::kTanh, rng);
  auto [q, st] = adam_step(p, zeros_like(p), make_adam(p));
  CHECK(q == p);
  CHECK(st.step == 1);
  auto [q2, st2] = adam_step(q, zeros_like(p), st);
  CHECK(st2.step == 2);
}

TEST_CASE("adam: one and two steps match the closed-form recursion") {
  MlpParams p{{dense(1, 2, {0.5, -0.25}, {0.1})}};
  MlpParams g{{dense(1, 2, {0.2, -3.0}, {1e-3})}};
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  auto [p1, s1] = adam_step(p, g, make_adam(p, lr, b1, b2, eps));
  auto [p2, s2] = adam_step(p1, g, s1);
  auto expected = [&](double w, double gr, int steps) {
    double m = 0.0, v = 0.0;
    for (int t = 1; t <= steps; ++t) {
      m = b1 * m + (1 - b1) * gr;
      v = b2 * v + (1 - b2) * gr * gr;
      const double mh = m / (1 - std::pow(b1, t));
      const double vh = v / (1 - std::pow(b2, t));
      w -= lr * mh / (std::sqrt(vh) + eps);
    }
    return w;
  };
  CHECK(p1.layers[0].weight[0] == doctest::Approx(expected(0.5, 0.2, 1)).epsilon(1e-14));
  CHECK(p1.layers[0].weight[1] == doctest::Approx(expected(-0.25, -3.0, 1)).epsilon(1e-14));
  CHECK(p1.layers[0].bias[0] == doctest::Approx(expected(0.1, 1e-3, 1)).epsilon(1e-14));
  CHECK(p2.layers[0].weight[0] == doctest::Approx(expected(0.5, 0.2, 2)).epsilon(1e-14));
  CHECK(p2.layers[0].weight[1] == doctest::Approx(expected(-0.25, -3.0, 2)).epsilon(1e-14));
  // first step moves each entry by about lr against the gradient sign
  CHECK(p1.layers[0].weight[0] == doctest::Approx(0.5 - lr).epsilon(1e-6));
  CHECK(p1.layers[0].weight[1] == doctest::Approx(-0.25 + lr).epsilon(1e-6));
}

TEST_CASE("adam names the block holding a non-finite gradient") {
  Rng rng(1);
  MlpParams p = make_mlp({2, 3, 1}, Activation::kTanh, rng);
  MlpParams g = zeros_like(p);
  g.layers[1].weight[2] = std::nan("");
  try {
    adam_step(p, g, make_adam(p));
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("layer 1 weight") != std::string::npos);
  }
}

TEST_CASE("polyak average") {
  MlpParams t{{dense(1, 1, {0.0}, {0.0})}};
  MlpParams s{{dense(1, 1, {1.0}, {2.0})}};
  polyak_update(t, s, 0.25);
  CHECK(t.layers[0].weight[0] == doctest::Approx(0.25));
  CHECK(t.layers[0].bias[0] == doctest::Approx(0.5));
}

TEST_CASE("checkpoint round trip and header layout") {
  Rng rng(6);
  MlpParams p = make_mlp({3, 4, 2}, Activation::kRelu, rng);
  std::stringstream ss;
  write_checkpoint(ss, p);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "PNF1");
  // magic + L + 3 sizes + 2 activation codes + doubles
  CHECK(bytes.size() == 4 + 4 + 3 * 4 + 2 + 8 * p.parameter_count());
  CHECK(read_checkpoint(ss) == p);
  std::stringstream bad("PNF0junk");
  CHECK_THROWS(read_checkpoint(bad));
}

TEST_CASE("validate rejects non-chaining shapes and non-identity output") {
  MlpParams p{{dense(3, 2, std::vector<double>(6, 0.0), {0, 0, 0}, Activation::kTanh),
               dense(1, 2, {0, 0}, {0})}};
  CHECK_THROWS_AS(validate(p), DimensionError);
  MlpParams q{{dense(1, 2, {0, 0}, {0}, Activation::kTanh)}};
  CHECK_THROWS_AS(validate(q), DimensionError);
}

TEST_CASE("tensor shape invariant") {
  CHECK_THROWS(Tensor({2, 3}, std::vector<double>(5, 0.0)));
  Tensor t({2, 3}, std::vector<double>(6, 1.0));
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.all_finite());
  t(1, 2) = INFINITY;
  CHECK_FALSE(t.all_finite());
}

}  // TEST_SUITE
