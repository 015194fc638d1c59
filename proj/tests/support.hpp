#pragma once

// Shared helpers for the unit suite: seeded random tensors and the
// finite-difference gradient harness the op tests are judged against.

#include <vector>

#include "polyvit/autodiff.hpp"
#include "polyvit/rng.hpp"
#include "polyvit/tensor.hpp"

namespace testsupport {

using polyvit::EvalContext;
using polyvit::GradContext;
using polyvit::GradTape;
using polyvit::Rng;
using polyvit::Shape;
using polyvit::Tensor;

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
  std::vector<double> v(polyvit::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

inline double rel_err(double analytic, double numeric) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Central differences with step h against the tape gradient. `forward` is a
// generic callable (ctx, vars) -> scalar var, evaluated both through the
// recording context and the value-only context; both share the same kernels,
// so the finite differences probe exactly the function the tape saw.
template <typename Fn>
double max_grad_rel_err(std::vector<Tensor<double>> leaves, Fn&& forward,
                        double h = 1e-5) {
  GradTape<double> tape;
  GradContext<double> ctx{&tape};
  std::vector<polyvit::Var<double>> vars;
  for (auto& t : leaves) vars.push_back(ctx.param(t.with_requires_grad(true)));
  auto loss = forward(ctx, vars);
  tape.backward(loss);
  std::vector<Tensor<double>> grads;
  for (const auto& v : vars) grads.push_back(tape.grad(v));

  double worst = 0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    for (std::size_t i = 0; i < leaves[li].numel(); ++i) {
      auto eval_at = [&](double delta) {
        std::vector<Tensor<double>> probe = leaves;
        std::vector<double> vals(leaves[li].begin(), leaves[li].end());
        vals[i] += delta;
        probe[li] = Tensor<double>(leaves[li].shape(), std::move(vals));
        EvalContext<double> ectx;
        return forward(ectx, probe)[0];
      };
      const double fd = (eval_at(h) - eval_at(-h)) / (2 * h);
      worst = std::max(worst, rel_err(grads[li][i], fd));
    }
  }
  return worst;
}

}  // namespace testsupport
