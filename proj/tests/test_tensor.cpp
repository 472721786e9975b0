#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <random>

#include "op_fd_harness.hpp"
#include "oracles.hpp"
#include "selftpt/tensor.hpp"

using namespace selftpt;

namespace {

std::vector<double> to_vec(const DiffTensor& t) {
  return {t.values().begin(), t.values().end()};
}

bool bit_identical(const DiffTensor& a, const DiffTensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("matmul matches the worked 2x2 example") {
  DiffTensor a = DiffTensor::matrix(2, 2, {1, 2, 3, 4});
  DiffTensor b = DiffTensor::matrix(2, 1, {1, 1});
  DiffTensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.at(0, 0) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(c.at(1, 0) == doctest::Approx(7.0).epsilon(1e-15));
}

TEST_CASE("l2_normalize of a 3-4 vector gives the 0.6/0.8 direction") {
  DiffTensor v = l2_normalize(DiffTensor::vector({3.0, 4.0}));
  CHECK(v.at(0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(v.at(1) == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("logsumexp of four zeros is log 4") {
  DiffTensor y = logsumexp_row(DiffTensor::vector({0, 0, 0, 0}));
  CHECK(y.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and stay strictly positive") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> d(-30.0, 30.0);
  std::vector<double> logits(6 * 9);
  for (double& x : logits) x = d(rng);
  DiffTensor p = softmax_row(DiffTensor::matrix(6, 9, logits));
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      CHECK(p.at(i, j) > 0.0);
      s += p.at(i, j);
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("shape mismatches are rejected with both shapes in the message") {
  DiffTensor a = DiffTensor::matrix(2, 3, std::vector<double>(6, 1.0));
  DiffTensor b = DiffTensor::matrix(3, 2, std::vector<double>(6, 1.0));
  CHECK_THROWS_WITH_AS(add(a, b), "add: shape mismatch [2x3] vs [3x2]", std::invalid_argument);
  CHECK_THROWS_WITH_AS(matmul(a, a), "matmul: inner dimensions differ: [2x3] vs [2x3]",
                       std::invalid_argument);
}

TEST_CASE("domain violations are rejected instead of producing NaN") {
  CHECK_THROWS_AS(log(DiffTensor::vector({1.0, 0.0})), std::invalid_argument);
  CHECK_THROWS_AS(log(DiffTensor::vector({-0.5})), std::invalid_argument);
  CHECK_THROWS_AS(sqrt(DiffTensor::vector({-1.0})), std::invalid_argument);
  CHECK_THROWS_AS(l2_normalize(DiffTensor::vector({0.0, 0.0})), std::invalid_argument);
  CHECK_THROWS_AS(elementwise_div(DiffTensor::vector({1.0}), DiffTensor::vector({0.0})),
                  std::invalid_argument);
}

TEST_CASE("tensor_op rejects unknown kinds and wrong arity") {
  std::vector<DiffTensor> one{DiffTensor::vector({1.0})};
  CHECK_THROWS_WITH_AS(tensor_op("conv2d", one), "tensor_op: unknown kind 'conv2d'",
                       std::invalid_argument);
  CHECK_THROWS_AS(tensor_op("add", one), std::invalid_argument);
}

TEST_CASE("backward of sum of squares is exactly 2x") {
  GradientTape tape;
  DiffTensor x = tape.leaf(Shape{3}, {1.5, -2.0, 0.25});
  DiffTensor loss = sum(elementwise_mul(x, x));
  std::array<DiffTensor, 1> wrt{x};
  DiffTensor g = backward(loss, wrt)[0];
  CHECK(g.at(0) == 3.0);
  CHECK(g.at(1) == -4.0);
  CHECK(g.at(2) == 0.5);
}

TEST_CASE("backward of a dot product returns the opposite operands") {
  GradientTape tape;
  DiffTensor a = tape.leaf(Shape{3}, {1, 2, 3});
  DiffTensor b = tape.leaf(Shape{3}, {4, 5, 6});
  std::array<DiffTensor, 2> wrt{a, b};
  auto g = backward(dot(a, b), wrt);
  CHECK(to_vec(g[0]) == std::vector<double>{4, 5, 6});
  CHECK(to_vec(g[1]) == std::vector<double>{1, 2, 3});
}

TEST_CASE("leaves outside the graph receive zero gradients of their shape") {
  GradientTape tape;
  DiffTensor x = tape.leaf(Shape{2}, {1, 2});
  DiffTensor unused = tape.leaf(Shape{2, 2}, {1, 2, 3, 4});
  DiffTensor constant = DiffTensor::vector({9, 9, 9});
  DiffTensor loss = sum(x);
  std::array<DiffTensor, 2> wrt{unused, constant};
  auto g = backward(loss, wrt);
  CHECK(g[0].shape() == Shape{2, 2});
  CHECK(to_vec(g[0]) == std::vector<double>(4, 0.0));
  CHECK(g[1].shape() == Shape{3});
  CHECK(to_vec(g[1]) == std::vector<double>(3, 0.0));
}

TEST_CASE("backward rejects non-scalar and untracked roots") {
  GradientTape tape;
  DiffTensor x = tape.leaf(Shape{2}, {1, 2});
  std::array<DiffTensor, 1> wrt{x};
  CHECK_THROWS_AS(backward(x, wrt), std::invalid_argument);
  DiffTensor c = DiffTensor::scalar(1.0);
  CHECK_THROWS_AS(backward(c, wrt), std::invalid_argument);
}

TEST_CASE("identical tapes give bit-identical gradients") {
  auto run = [] {
    GradientTape tape;
    DiffTensor x = tape.leaf(Shape{4}, {0.3, -1.2, 2.2, 0.9});
    DiffTensor w = tape.leaf(Shape{4}, {1.0, 0.5, -0.25, 2.0});
    DiffTensor loss = sum(elementwise_mul(tanh(elementwise_mul(x, w)), x));
    std::array<DiffTensor, 2> wrt{x, w};
    auto g = backward(loss, wrt);
    return std::pair{g[0].detached(), g[1].detached()};
  };
  auto [gx1, gw1] = run();
  auto [gx2, gw2] = run();
  CHECK(bit_identical(gx1, gx2));
  CHECK(bit_identical(gw1, gw2));
}

TEST_CASE("every public op matches finite differences on seeded instances") {
  for (std::string_view kind : tensor_op_names()) {
    CAPTURE(kind);
    std::mt19937_64 rng(0x5e1f00dULL ^ std::hash<std::string_view>{}(kind));
    for (int rep = 0; rep < 10; ++rep) {
      auto inst = fdcheck::make_instance(kind, rng);
      CHECK(fdcheck::check_instance(inst) < 1e-4);
    }
  }
}

TEST_CASE("internal primitives match finite differences too") {
  for (std::string_view kind : fdcheck::internal_op_names()) {
    CAPTURE(kind);
    std::mt19937_64 rng(0xbada55ULL ^ std::hash<std::string_view>{}(kind));
    for (int rep = 0; rep < 10; ++rep) {
      auto inst = fdcheck::make_instance(kind, rng);
      CHECK(fdcheck::check_instance(inst) < 1e-4);
    }
  }
}

namespace {

// Quadratic loss 0.5 * theta' A theta for a fixed symmetric A.
DiffTensor quadratic_loss(GradientTape&, const DiffTensor& theta) {
  DiffTensor a = DiffTensor::matrix(2, 2, {2, 1, 1, 3});
  DiffTensor col = reshape(theta, Shape{2, 1});
  return scalar_mul(dot(theta, reshape(matmul(a, col), Shape{2})), 0.5);
}

}  // namespace

TEST_CASE("both HVP backends recover the Hessian column of a quadratic") {
  DiffTensor theta = DiffTensor::vector({0.7, -1.1});
  DiffTensor v = DiffTensor::vector({1.0, 0.0});
  DiffTensor exact = hessian_vector_product(quadratic_loss, theta, v,
                                            HvpBackend::kDoubleBackward);
  CHECK(exact.at(0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(exact.at(1) == doctest::Approx(1.0).epsilon(1e-12));
  DiffTensor approx = hessian_vector_product(quadratic_loss, theta, v,
                                             HvpBackend::kPearlmutterFd);
  CHECK(approx.at(0) == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(approx.at(1) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("HVP of a zero direction is a zero vector for both backends") {
  DiffTensor theta = DiffTensor::vector({0.4, 0.2});
  DiffTensor zero = DiffTensor::vector({0.0, 0.0});
  for (auto backend : {HvpBackend::kDoubleBackward, HvpBackend::kPearlmutterFd}) {
    DiffTensor hv = hessian_vector_product(quadratic_loss, theta, zero, backend);
    CHECK(to_vec(hv) == std::vector<double>{0.0, 0.0});
  }
}

TEST_CASE("double-backward HVP is linear in the direction") {
  // Non-quadratic loss so the Hessian actually varies with theta.
  auto loss = [](GradientTape&, const DiffTensor& t) {
    return sum(elementwise_mul(tanh(t), elementwise_mul(t, t)));
  };
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> d(-1.5, 1.5);
  std::vector<double> tv(6), v1(6), v2(6);
  for (auto* vec : {&tv, &v1, &v2}) {
    for (double& x : *vec) x = d(rng);
  }
  DiffTensor theta = DiffTensor::vector(tv);
  const double a = 0.7, b = -1.3;
  std::vector<double> combo(6);
  for (int i = 0; i < 6; ++i) combo[i] = a * v1[i] + b * v2[i];
  DiffTensor h_combo = hessian_vector_product(loss, theta, DiffTensor::vector(combo),
                                              HvpBackend::kDoubleBackward);
  DiffTensor h1 = hessian_vector_product(loss, theta, DiffTensor::vector(v1),
                                         HvpBackend::kDoubleBackward);
  DiffTensor h2 = hessian_vector_product(loss, theta, DiffTensor::vector(v2),
                                         HvpBackend::kDoubleBackward);
  for (int i = 0; i < 6; ++i) {
    CHECK(h_combo.at(i) == doctest::Approx(a * h1.at(i) + b * h2.at(i)).epsilon(1e-8));
  }
}

TEST_CASE("HVP backends agree on a non-quadratic loss") {
  auto loss = [](GradientTape&, const DiffTensor& t) {
    DiffTensor z = l2_normalize(t);
    return sum(elementwise_mul(exp(scalar_mul(z, 0.5)), tanh(t)));
  };
  std::mt19937_64 rng(123);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<double> tv(8), vv(8);
  for (double& x : tv) x = d(rng);
  for (double& x : vv) x = d(rng);
  DiffTensor exact = hessian_vector_product(loss, DiffTensor::vector(tv),
                                            DiffTensor::vector(vv),
                                            HvpBackend::kDoubleBackward);
  DiffTensor approx = hessian_vector_product(loss, DiffTensor::vector(tv),
                                             DiffTensor::vector(vv),
                                             HvpBackend::kPearlmutterFd);
  CHECK(oracle::max_rel_err(to_vec(approx), to_vec(exact)) < 1e-3);
}

TEST_CASE("transpose, slicing and padding round-trip values") {
  DiffTensor m = DiffTensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  DiffTensor t = transpose(m);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.at(2, 1) == 6.0);
  DiffTensor back = transpose(t);
  CHECK(to_vec(back) == to_vec(m));

  DiffTensor big = pad_rows(m, 4, 1);
  CHECK(big.shape() == Shape{4, 3});
  CHECK(big.at(0, 0) == 0.0);
  CHECK(to_vec(slice_rows(big, 1, 3)) == to_vec(m));

  std::vector<DiffTensor> parts{slice_rows(m, 0, 1), slice_rows(m, 1, 2)};
  CHECK(to_vec(concat_rows(parts)) == to_vec(m));
}

TEST_CASE("mean and sum agree with direct accumulation") {
  DiffTensor m = DiffTensor::matrix(2, 2, {1.0, 2.0, 3.0, 4.0});
  CHECK(sum(m).item() == 10.0);
  CHECK(mean(m).item() == 2.5);
}
