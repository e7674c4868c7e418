// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ulab/ops.hpp"
#include "ulab/rng.hpp"
#include "ulab/tensor.hpp"

namespace ulab {

// Ordered, named collection of parameter tensors owned by a model.
class ParamSet {
 public:
  Tensor add(const std::string& name, Shape shape, double init_std, Rng& rng);
  Tensor add_constant(const std::string& name, Shape shape, double value);

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t count() const;  // total scalar parameters

  std::vector<Tensor> tensors() const;
  std::vector<std::string> names() const;
  // Values only; names and shapes must match.
  void copy_values_from(const ParamSet& other);
  void set_requires_grad(bool on);
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

struct Linear {
  Tensor weight, bias;
  Linear() = default;
  Linear(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

struct Conv2d {
  Tensor weight, bias;
  std::size_t stride = 1, pad = 0;
  Conv2d() = default;
  Conv2d(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
         std::size_t stride, std::size_t pad, Rng& rng);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }
};

struct LayerNorm {
  Tensor gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamSet& ps, const std::string& name, std::size_t d);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct GroupNorm {
  Tensor gamma, beta;
  std::size_t groups = 1;
  GroupNorm() = default;
  GroupNorm(ParamSet& ps, const std::string& name, std::size_t channels, std::size_t groups);
  Tensor operator()(const Tensor& x) const { return group_norm(x, groups, gamma, beta); }
};

}  // namespace ulab
