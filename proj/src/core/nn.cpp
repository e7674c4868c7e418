// SPDX-License-Identifier: Apache-2.0
#include "ulab/nn.hpp"

#include <algorithm>
#include <cmath>

#include "ulab/errors.hpp"

namespace ulab {

Tensor ParamSet::add(const std::string& name, Shape shape, double init_std, Rng& rng) {
  require(!contains(name), "duplicate parameter name " + name);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = init_std * rng.normal();
  Tensor t = Tensor::from(std::move(shape), std::move(v), true);
  entries_.emplace_back(name, t);
  return t;
}

Tensor ParamSet::add_constant(const std::string& name, Shape shape, double value) {
  require(!contains(name), "duplicate parameter name " + name);
  Tensor t = Tensor::full(std::move(shape), value, true);
  entries_.emplace_back(name, t);
  return t;
}

Tensor ParamSet::get(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw ValidationError("unknown parameter " + name);
}

bool ParamSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::size_t ParamSet::count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.first);
  return out;
}

void ParamSet::copy_values_from(const ParamSet& other) {
  require(entries_.size() == other.entries_.size(), "parameter set size mismatch");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& [name, dst] = entries_[i];
    const auto& [oname, src] = other.entries_[i];
    require(name == oname && dst.shape() == src.shape(), "parameter mismatch at " + name);
    Tensor d = dst;
    std::copy(src.values().begin(), src.values().end(), d.data().begin());
  }
}

void ParamSet::set_requires_grad(bool on) {
  for (auto& e : entries_) e.second.set_requires_grad(on);
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

Linear::Linear(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  weight = ps.add(name + ".weight", {out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  if (with_bias) bias = ps.add_constant(name + ".bias", {out}, 0.0);
}

Conv2d::Conv2d(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
               std::size_t stride_, std::size_t pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
  weight = ps.add(name + ".weight", {out, in, kernel, kernel},
                  1.0 / std::sqrt(static_cast<double>(in * kernel * kernel)), rng);
  bias = ps.add_constant(name + ".bias", {out}, 0.0);
}

LayerNorm::LayerNorm(ParamSet& ps, const std::string& name, std::size_t d) {
  gamma = ps.add_constant(name + ".gamma", {d}, 1.0);
  beta = ps.add_constant(name + ".beta", {d}, 0.0);
}

GroupNorm::GroupNorm(ParamSet& ps, const std::string& name, std::size_t channels, std::size_t groups_)
    : groups(groups_) {
  gamma = ps.add_constant(name + ".gamma", {channels}, 1.0);
  beta = ps.add_constant(name + ".beta", {channels}, 0.0);
}

}  // namespace ulab
