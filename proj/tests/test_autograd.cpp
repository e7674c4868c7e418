#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "ulab/errors.hpp"
#include "ulab/ops.hpp"

using namespace ulab;
using testutil::gradcheck;
using testutil::probe;
using testutil::randn;

namespace {
constexpr double kTol = 1e-4;
}

TEST_CASE("elementwise ops") {
  std::mt19937_64 g(1);
  Tensor a = randn({3, 4}, g), b = randn({3, 4}, g);
  CHECK(gradcheck([&] { return probe(add(a, b)); }, {a, b}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(sub(a, b)); }, {a, b}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(mul(a, b)); }, {a, b}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(scale(a, -2.5)); }, {a}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(add_scalar(a, 0.3)); }, {a}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(silu(a)); }, {a}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(gelu(a)); }, {a}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(sigmoid(a)); }, {a}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(exp(scale(a, 0.5))); }, {a}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(square(a)); }, {a}).max_rel < kTol);
}

TEST_CASE("relu away from the kink") {
  Tensor a = Tensor::from({4}, {-1.0, -0.2, 0.3, 2.0});
  CHECK(gradcheck([&] { return probe(relu(a)); }, {a}).max_rel < kTol);
}

TEST_CASE("matmul in all transpose layouts") {
  std::mt19937_64 g(2);
  Tensor a = randn({3, 5}, g), b = randn({5, 4}, g);
  Tensor at = randn({5, 3}, g), bt = randn({4, 5}, g);
  CHECK(gradcheck([&] { return probe(matmul(a, b)); }, {a, b}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(matmul(at, b, true, false)); }, {at, b}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(matmul(a, bt, false, true)); }, {a, bt}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(matmul(at, bt, true, true)); }, {at, bt}).max_rel < kTol);
}

TEST_CASE("linear, bias, reshape, transpose") {
  std::mt19937_64 g(3);
  Tensor x = randn({4, 6}, g), w = randn({3, 6}, g), bias = randn({3}, g);
  CHECK(gradcheck([&] { return probe(linear(x, w, bias)); }, {x, w, bias}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(linear(x, w, Tensor{})); }, {x, w}).max_rel < kTol);
  Tensor bias6 = randn({6}, g);
  CHECK(gradcheck([&] { return probe(add_row_bias(x, bias6)); }, {x, bias6}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(reshape(x, {2, 12})); }, {x}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(transpose(x)); }, {x}).max_rel < kTol);
  Tensor x3 = randn({2, 3, 4}, g);
  CHECK(gradcheck([&] { return probe(transpose(x3)); }, {x3}).max_rel < kTol);
}

TEST_CASE("convolution family") {
  std::mt19937_64 g(4);
  Tensor x = randn({2, 3, 6, 6}, g);
  Tensor w = randn({4, 3, 3, 3}, g, 0.3), bias = randn({4}, g);
  Tensor w1 = randn({4, 3, 1, 1}, g);
  CHECK(gradcheck([&] { return probe(conv2d(x, w, bias, 1, 1)); }, {x, w, bias}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(conv2d(x, w, bias, 2, 1)); }, {x, w, bias}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(conv2d(x, w1, bias, 1, 0)); }, {x, w1, bias}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(upsample_nearest2x(x)); }, {x}).max_rel < kTol);
  Tensor y = randn({2, 2, 6, 6}, g);
  CHECK(gradcheck([&] { return probe(concat_channels(x, y)); }, {x, y}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(slice_channels(x, 1, 3)); }, {x}).max_rel < kTol);
  Tensor v = randn({2, 3}, g);
  CHECK(gradcheck([&] { return probe(add_channel_vector(x, v)); }, {x, v}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(global_avg_pool(x)); }, {x}).max_rel < kTol);
}

TEST_CASE("normalization") {
  std::mt19937_64 g(5);
  Tensor x = randn({3, 8}, g), gamma = randn({8}, g), beta = randn({8}, g);
  CHECK(gradcheck([&] { return probe(layer_norm(x, gamma, beta)); }, {x, gamma, beta}).max_rel < kTol);
  Tensor img = randn({2, 4, 3, 3}, g), gg = randn({4}, g), gb = randn({4}, g);
  CHECK(gradcheck([&] { return probe(group_norm(img, 2, gg, gb)); }, {img, gg, gb}).max_rel < kTol);
}

TEST_CASE("attention, causal and full") {
  std::mt19937_64 g(6);
  Tensor q = randn({2, 5, 8}, g), k = randn({2, 5, 8}, g), v = randn({2, 5, 8}, g);
  CHECK(gradcheck([&] { return probe(attention(q, k, v, 2, false)); }, {q, k, v}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(attention(q, k, v, 2, true)); }, {q, k, v}).max_rel < kTol);
  Tensor kc = randn({2, 2, 8}, g), vc = randn({2, 2, 8}, g);
  CHECK(gradcheck([&] { return probe(attention(q, kc, vc, 4, false)); }, {q, kc, vc}).max_rel < kTol);
}

TEST_CASE("indexing and row ops") {
  std::mt19937_64 g(7);
  Tensor table = randn({6, 4}, g);
  CHECK(gradcheck([&] { return probe(embedding(table, {1, 1, 5, 0})); }, {table}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(select_rows(table, {4, 2, 4})); }, {table}).max_rel < kTol);
  Tensor e = randn({3, 4}, g), tok = randn({4}, g);
  CHECK(gradcheck([&] { return probe(append_token(e, tok)); }, {e, tok}).max_rel < kTol);
  CHECK(gradcheck([&] { return probe(normalize_rows(e)); }, {e}).max_rel < kTol);
}

TEST_CASE("reductions and losses") {
  std::mt19937_64 g(8);
  Tensor a = randn({3, 5}, g), b = randn({3, 5}, g);
  CHECK(gradcheck([&] { return sum(a); }, {a}).max_rel < kTol);
  CHECK(gradcheck([&] { return mean(a); }, {a}).max_rel < kTol);
  CHECK(gradcheck([&] { return mse(a, b); }, {a, b}).max_rel < kTol);
  CHECK(gradcheck([&] { return frobenius_norm(a); }, {a}).max_rel < kTol);
  CHECK(gradcheck([&] { return cross_entropy(a, {0, 4, 2}); }, {a}).max_rel < kTol);
}

TEST_CASE("forward values of simple ops") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {0, 1, 1, 0});
  CHECK(matmul(a, b).values() == std::vector<double>{2, 1, 4, 3});
  CHECK(mse(Tensor::from({2}, {1, 0}), Tensor::from({2}, {0, 0})).item() == doctest::Approx(0.5));
  CHECK(frobenius_norm(Tensor::from({2, 2}, {3, 4, 0, 0})).item() == doctest::Approx(5.0));
  CHECK(frobenius_norm(Tensor::zeros({2, 2})).item() == 0.0);
  CHECK(cross_entropy(Tensor::from({1, 2}, {0, 0}), {1}).item() == doctest::Approx(std::log(2.0)));
}

TEST_CASE("frobenius norm gradient at zero is zero") {
  Tensor z = Tensor::zeros({2, 3}, true);
  frobenius_norm(z).backward();
  for (double v : z.grad()) CHECK(v == 0.0);
}

TEST_CASE("shape mismatches are validation errors") {
  CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), ValidationError);
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ValidationError);
  CHECK_THROWS_AS(mse(Tensor::zeros({2}), Tensor::zeros({1, 2})), ValidationError);
}

TEST_CASE("no-grad mode records no graph") {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  NoGradGuard ng;
  Tensor c = mul(a, a);
  CHECK_FALSE(c.requires_grad());
  CHECK(c.node()->parents.empty());
}

TEST_CASE("gradients accumulate over shared subexpressions") {
  Tensor a = Tensor::from({1}, {3.0}, true);
  Tensor y = add(mul(a, a), a);  // y = a^2 + a
  y.backward();
  CHECK(a.grad()[0] == doctest::Approx(7.0));
}
