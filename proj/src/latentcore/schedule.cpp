// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "ulab/errors.hpp"
#include "ulab/latentcore.hpp"

namespace ulab::latentcore {

NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end) {
  require(steps >= 2, "noise schedule needs at least 2 steps");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "noise schedule requires 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  double bar = 1.0;
  for (std::size_t t = 0; t < steps; ++t) {
    const double beta = beta_start + (beta_end - beta_start) * static_cast<double>(t) / static_cast<double>(steps - 1);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    bar *= 1.0 - beta;
    s.alpha_bars.push_back(bar);
  }
  return s;
}

Tensor add_noise(const Tensor& z0, std::size_t t, const Tensor& eps, const NoiseSchedule& schedule) {
  require(z0.shape() == eps.shape(), "add_noise: noise shape " + shape_str(eps.shape()) + " differs from latent " +
                                         shape_str(z0.shape()));
  require(t < schedule.steps(), "add_noise: timestep out of range");
  const double ab = schedule.alpha_bars[t];
  return add(scale(z0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

Tensor forward_step(const Tensor& x_prev, std::size_t t, const Tensor& eps, const NoiseSchedule& schedule) {
  require(x_prev.shape() == eps.shape(), "forward_step: shape mismatch");
  require(t < schedule.steps(), "forward_step: timestep out of range");
  const double a = schedule.alphas[t];
  return add(scale(x_prev, std::sqrt(a)), scale(eps, std::sqrt(1.0 - a)));
}

Tensor ddpm_loss(const Tensor& eps_hat, const Tensor& eps) {
  require(eps_hat.shape() == eps.shape(), "ddpm_loss: shape mismatch " + shape_str(eps_hat.shape()) + " vs " +
                                              shape_str(eps.shape()));
  return mse(eps_hat, eps);
}

}  // namespace ulab::latentcore
