#include <doctest.h>

#include "support.hpp"

using namespace testsupport;
using polyvit::Var;

namespace {
template <typename Ctx>
typename Ctx::V to_scalar(Ctx& ctx, typename Ctx::V v) {
  // Weighted sum so gradients of multi-output ops are generic, not uniform.
  std::vector<double> w(polyvit::shape_numel(Ctx::value_of(v).shape()));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.25 + 0.5 * double(i % 7);
  Tensor<double> weights(Ctx::value_of(v).shape(), std::move(w));
  if constexpr (std::is_same_v<typename Ctx::V, Tensor<double>>) {
    return polyvit::kernels::sum_all(polyvit::kernels::mul(v, weights));
  } else {
    auto wv = ctx.constant(weights);
    return v.tape->sum_all(v.tape->mul(v, wv));
  }
}
}  // namespace

TEST_CASE("matmul matches the worked 2x2 product") {
  Tensor<double> a({2, 2}, {1, 2, 3, 4});
  Tensor<double> b({2, 2}, {5, 6, 7, 8});
  const auto c = polyvit::kernels::matmul(a, b);
  CHECK(c[0] == doctest::Approx(19));
  CHECK(c[1] == doctest::Approx(22));
  CHECK(c[2] == doctest::Approx(43));
  CHECK(c[3] == doctest::Approx(50));
}

TEST_CASE("matmul shape mismatch names the shapes") {
  Tensor<double> a({2, 3}, std::vector<double>(6, 1.0));
  Tensor<double> b({2, 2}, std::vector<double>(4, 1.0));
  CHECK_THROWS_WITH_AS(polyvit::kernels::matmul(a, b),
                       doctest::Contains("inner extents"), std::invalid_argument);
}

TEST_CASE("layer norm reproduces the unit worked example") {
  Tensor<double> x({1, 3}, {1, 2, 3});
  Tensor<double> gamma({3}, {1, 1, 1});
  Tensor<double> beta({3}, {0, 0, 0});
  const auto r = polyvit::kernels::layer_norm(x, gamma, beta, 1e-6);
  CHECK(r.out[0] == doctest::Approx(-1.224745).epsilon(1e-4));
  CHECK(r.out[1] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(r.out[2] == doctest::Approx(1.224745).epsilon(1e-4));
}

TEST_CASE("layer norm uses population variance") {
  // With sample variance (divide by n-1) the first output would be -1.0.
  Tensor<double> x({1, 2}, {0, 2});
  Tensor<double> gamma({2}, {1, 1});
  Tensor<double> beta({2}, {0, 0});
  const auto r = polyvit::kernels::layer_norm(x, gamma, beta, 0.0);
  CHECK(r.out[0] == doctest::Approx(-1.0).epsilon(1e-9));
}

TEST_CASE("gelu worked values") {
  Tensor<double> x({3}, {0.0, 1.0, -10.0});
  const auto y = polyvit::kernels::gelu(x.reshaped({1, 3}));
  CHECK(y[0] == doctest::Approx(0.0));
  CHECK(y[1] == doctest::Approx(0.841345).epsilon(1e-5));
  CHECK(std::abs(y[2]) < 1e-9);
}

TEST_CASE("softmax is shift invariant and stable at extreme logits") {
  Tensor<double> big({1, 2}, {1000.0, 1000.0});
  const auto s = polyvit::kernels::softmax_rows(big);
  CHECK(s[0] == doctest::Approx(0.5));
  CHECK(s[1] == doctest::Approx(0.5));
  Tensor<double> shifted({1, 3}, {1.0, 2.0, 3.0});
  Tensor<double> base({1, 3}, {-1.0, 0.0, 1.0});
  CHECK(polyvit::max_abs_diff(polyvit::kernels::softmax_rows(shifted),
                              polyvit::kernels::softmax_rows(base)) < 1e-12);
}

TEST_CASE("cross entropy of uniform logits is log of class count") {
  Tensor<double> logits({10}, std::vector<double>(10, 0.7));
  std::vector<double> onehot(10, 0.0);
  onehot[3] = 1.0;
  const auto r =
      polyvit::kernels::softmax_cross_entropy(logits, Tensor<double>({10}, onehot));
  CHECK(r.loss[0] == doctest::Approx(2.302585).epsilon(1e-5));
}

TEST_CASE("binary cross entropy at zero logits is log two per class") {
  Tensor<double> logits({4}, {0, 0, 0, 0});
  Tensor<double> target({4}, {1, 0, 1, 0});
  const auto l = polyvit::kernels::sigmoid_bce_mean(logits, target);
  CHECK(l[0] == doctest::Approx(0.693147).epsilon(1e-5));
}

TEST_CASE("binary cross entropy is finite at extreme logits") {
  Tensor<double> logits({2}, {500.0, -500.0});
  Tensor<double> target({2}, {0.0, 1.0});
  const auto l = polyvit::kernels::sigmoid_bce_mean(logits, target);
  CHECK(std::isfinite(l[0]));
  CHECK(l[0] == doctest::Approx(500.0).epsilon(1e-6));
}

TEST_CASE("backward of a sum is ones") {
  GradTape<double> tape;
  GradContext<double> ctx{&tape};
  Tensor<double> x({2, 3}, {1, -2, 3, 4, -5, 6});
  auto v = ctx.param(x.with_requires_grad(true));
  tape.backward(tape.sum_all(v));
  const auto g = tape.grad(v);
  for (std::size_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 1.0);
}

TEST_CASE("backward of sum of squares is twice the input") {
  GradTape<double> tape;
  GradContext<double> ctx{&tape};
  Tensor<double> x({4}, {1.5, -2.0, 0.0, 3.0});
  auto v = ctx.param(x.reshaped({1, 4}).with_requires_grad(true));
  tape.backward(tape.sum_all(tape.mul(v, v)));
  const auto g = tape.grad(v);
  for (std::size_t i = 0; i < 4; ++i) CHECK(g[i] == doctest::Approx(2 * x[i]));
}

TEST_CASE("gradient of a tensor off the loss path is exactly zero") {
  GradTape<double> tape;
  GradContext<double> ctx{&tape};
  Tensor<double> x({1, 2}, {1, 2});
  Tensor<double> y({1, 2}, {3, 4});
  auto vx = ctx.param(x.with_requires_grad(true));
  auto vy = ctx.param(y.with_requires_grad(true));
  tape.backward(tape.sum_all(vx));
  const auto g = tape.grad(vy);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
}

TEST_CASE("a parameter used twice accumulates one gradient") {
  GradTape<double> tape;
  GradContext<double> ctx{&tape};
  Tensor<double> a({1, 2}, {2, 3});
  a = a.with_requires_grad(true);
  Tensor<double> alias = a;  // same buffer, second binding
  auto v1 = ctx.param(a);
  auto v2 = ctx.param(alias);
  CHECK(v1.id == v2.id);
  // loss = sum(a) + sum(2a) => grad 3 everywhere
  tape.backward(tape.sum_all(tape.add(v1, tape.scale(v2, 2.0))));
  const auto g = tape.grad(v1);
  CHECK(g[0] == doctest::Approx(3.0));
  CHECK(g[1] == doctest::Approx(3.0));
}

TEST_CASE("repeated backward over one tape is bit identical") {
  Rng rng(21);
  GradTape<double> tape;
  GradContext<double> ctx{&tape};
  auto x = random_tensor({3, 3}, rng).with_requires_grad(true);
  auto v = ctx.param(x);
  auto loss = tape.sum_all(tape.gelu(tape.matmul(v, tape.transpose(v))));
  tape.backward(loss);
  const auto g1 = tape.grad(v);
  tape.backward(loss);
  const auto g2 = tape.grad(v);
  CHECK(polyvit::same_values(g1, g2));
}

TEST_CASE("recording and value-only contexts agree bitwise") {
  Rng rng(31);
  auto x = random_tensor({4, 6}, rng);
  auto w = random_tensor({6, 6}, rng);
  auto gamma = random_tensor({6}, rng, 0.5, 1.5);
  auto beta = random_tensor({6}, rng, -0.1, 0.1);

  auto run = [&](auto& ctx) {
    auto vx = ctx.param(x);
    auto vw = ctx.param(w);
    auto h = ctx.gelu(ctx.matmul(vx, vw));
    auto n = ctx.layer_norm(h, ctx.param(gamma), ctx.param(beta), 1e-6);
    return ctx.softmax_rows(n);
  };

  GradTape<double> tape;
  GradContext<double> gctx{&tape};
  EvalContext<double> ectx;
  const auto& taped = run(gctx).value();
  const auto direct = run(ectx);
  CHECK(polyvit::same_values(taped, direct));
}

TEST_CASE("finite differences confirm every op backward rule") {
  Rng rng(1234);
  const double tol = 1e-6;

  SUBCASE("matmul both sides") {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    CHECK(max_grad_rel_err({a, b}, [](auto& ctx, const auto& v) {
            return to_scalar(ctx, ctx.matmul(v[0], v[1]));
          }) < tol);
  }

  SUBCASE("transpose inside a product") {
    auto a = random_tensor({3, 4}, rng);
    CHECK(max_grad_rel_err({a}, [](auto& ctx, const auto& v) {
            return to_scalar(ctx, ctx.matmul(v[0], ctx.transpose(v[0])));
          }) < tol);
  }

  SUBCASE("row broadcast add") {
    auto m = random_tensor({3, 5}, rng);
    auto b = random_tensor({5}, rng);
    CHECK(max_grad_rel_err({m, b}, [](auto& ctx, const auto& v) {
            return to_scalar(ctx, ctx.add_rowvec(v[0], v[1]));
          }) < tol);
  }

  SUBCASE("layer norm including scale and shift") {
    auto x = random_tensor({4, 6}, rng);
    auto g = random_tensor({6}, rng, 0.5, 1.5);
    auto b = random_tensor({6}, rng, -0.2, 0.2);
    CHECK(max_grad_rel_err({x, g, b}, [](auto& ctx, const auto& v) {
            return to_scalar(ctx, ctx.layer_norm(v[0], v[1], v[2], 1e-6));
          }) < tol);
  }

  SUBCASE("gelu") {
    auto x = random_tensor({3, 7}, rng, -3.0, 3.0);
    CHECK(max_grad_rel_err({x}, [](auto& ctx, const auto& v) {
            return to_scalar(ctx, ctx.gelu(v[0]));
          }) < tol);
  }

  SUBCASE("softmax rows") {
    auto x = random_tensor({3, 5}, rng, -2.0, 2.0);
    CHECK(max_grad_rel_err({x}, [](auto& ctx, const auto& v) {
            return to_scalar(ctx, ctx.softmax_rows(v[0]));
          }) < 1e-5);
  }

  SUBCASE("concat rows then slice") {
    auto a = random_tensor({2, 3}, rng);
    auto b = random_tensor({3, 3}, rng);
    CHECK(max_grad_rel_err({a, b}, [](auto& ctx, const auto& v) {
            auto cat = ctx.concat_rows({v[0], v[1]});
            return to_scalar(ctx, ctx.slice_rows(cat, 1, 3));
          }) < tol);
  }

  SUBCASE("concat cols") {
    auto a = random_tensor({3, 2}, rng);
    auto b = random_tensor({3, 4}, rng);
    CHECK(max_grad_rel_err({a, b}, [](auto& ctx, const auto& v) {
            return to_scalar(ctx, ctx.concat_cols({v[0], v[1]}));
          }) < tol);
  }

  SUBCASE("softmax cross entropy with a soft target") {
    auto logits = random_tensor({6}, rng, -2.0, 2.0);
    Tensor<double> target({6}, {0.3, 0.0, 0.7, 0.0, 0.0, 0.0});
    CHECK(max_grad_rel_err({logits}, [target](auto& ctx, const auto& v) {
            return ctx.softmax_cross_entropy(v[0], target);
          }) < tol);
  }

  SUBCASE("sigmoid binary cross entropy") {
    auto logits = random_tensor({5}, rng, -3.0, 3.0);
    Tensor<double> target({5}, {1, 0, 0, 1, 1});
    CHECK(max_grad_rel_err({logits}, [target](auto& ctx, const auto& v) {
            return ctx.sigmoid_bce_mean(v[0], target);
          }) < tol);
  }

  SUBCASE("a full attention shaped chain") {
    auto x = random_tensor({3, 4}, rng);
    auto wq = random_tensor({4, 4}, rng, -0.5, 0.5);
    auto wv = random_tensor({4, 4}, rng, -0.5, 0.5);
    CHECK(max_grad_rel_err({x, wq, wv}, [](auto& ctx, const auto& v) {
            auto q = ctx.matmul(v[0], v[1]);
            auto attn = ctx.softmax_rows(ctx.scale(ctx.matmul(q, ctx.transpose(q)), 0.5));
            return to_scalar(ctx, ctx.matmul(attn, ctx.matmul(v[0], v[2])));
          }) < 1e-5);
  }
}

TEST_CASE("tensor copies alias storage and ops allocate fresh buffers") {
  Tensor<double> a({2}, {1, 2});
  Tensor<double> b = a;
  CHECK(a.data_id() == b.data_id());
  const auto c = polyvit::kernels::scale(a, 2.0);
  CHECK(c.data_id() != a.data_id());
  CHECK(a[0] == 1.0);
}
