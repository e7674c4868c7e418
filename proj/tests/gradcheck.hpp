#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ulab/ops.hpp"
#include "ulab/tensor.hpp"

namespace testutil {

inline std::string fmt_g(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.6e", v);
  return b;
}

struct GradReport {
  double max_rel = 0.0;
  std::string worst;
};

// Central differences with step h against backward(); |a-n| / max(|a|+|n|, floor).
// At most `per_tensor` coordinates per tensor, chosen by a fixed stride.
inline GradReport gradcheck(const std::function<ulab::Tensor()>& f, std::vector<ulab::Tensor> params,
                            double h = 1e-5, std::size_t per_tensor = 24, double floor = 1e-6) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  ulab::Tensor out = f();
  out.backward();
  GradReport rep;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    const std::size_t n = p.size();
    const std::size_t stride = std::max<std::size_t>(1, n / per_tensor);
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = p.data()[i];
      double fp, fm;
      {
        ulab::NoGradGuard ng;
        p.data()[i] = orig + h;
        fp = f().item();
        p.data()[i] = orig - h;
        fm = f().item();
        p.data()[i] = orig;
      }
      const double num = (fp - fm) / (2 * h);
      const double rel = std::abs(analytic[i] - num) / std::max(std::abs(analytic[i]) + std::abs(num), floor);
      if (rel > rep.max_rel) {
        rep.max_rel = rel;
        rep.worst = "param " + std::to_string(pi) + "[" + std::to_string(i) + "] analytic " +
                    fmt_g(analytic[i]) + " numeric " + fmt_g(num);
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return rep;
}

inline ulab::Tensor randn(ulab::Shape shape, std::mt19937_64& g, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  std::vector<double> v(ulab::numel(shape));
  for (auto& x : v) x = nd(g);
  return ulab::Tensor::from(std::move(shape), std::move(v));
}

// sum(x * w) with a fixed random w, so every output coordinate matters.
inline ulab::Tensor probe(const ulab::Tensor& x, std::uint64_t seed = 99) {
  std::mt19937_64 g(seed);
  return ulab::sum(ulab::mul(x, randn(x.shape(), g)));
}

}  // namespace testutil
