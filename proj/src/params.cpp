// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mim4d/params.hpp"

#include <cmath>
#include <stdexcept>

namespace mim4d {

void ParameterSet::add(const std::string& name, Tensor value) {
  if (!tensors_.emplace(name, std::move(value)).second) throw std::invalid_argument("duplicate parameter " + name);
}

Tensor& ParameterSet::at(const std::string& name) {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

std::int64_t ParameterSet::numel() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.numel();
  return n;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet out;
  for (const auto& [name, t] : tensors_) out.add(name, Tensor(t.shape(), 0.0));
  return out;
}

void ParameterSet::accumulate(const ParameterSet& other, double scale) {
  for (auto& [name, t] : tensors_) {
    const Tensor& o = other.at(name);
    if (o.shape() != t.shape()) throw ShapeError("accumulate: shape mismatch for " + name);
    auto& dst = t.storage();
    const auto& src = o.storage();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
  }
}

double ParameterSet::squared_norm() const {
  double acc = 0.0;
  for (const auto& [_, t] : tensors_)
    for (double v : t.storage()) acc += v * v;
  return acc;
}

BoundParams::BoundParams(diff::Tape& tape, const ParameterSet& params, bool requires_grad) : tape_(&tape) {
  for (const auto& [name, t] : params.items()) vars_.emplace(name, tape.leaf(t, requires_grad));
}

const diff::Var& BoundParams::operator[](const std::string& name) const {
  const auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("parameter not bound: " + name);
  return it->second;
}

ParameterSet BoundParams::gradients(const diff::Gradients& grads) const {
  ParameterSet out;
  for (const auto& [name, var] : vars_) out.add(name, grads[var]);
  return out;
}

Tensor xavier_uniform(const Shape& shape, std::int64_t fan_in, std::int64_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return diff::random_tensor(shape, rng, -bound, bound);
}

void AdamW::step(ParameterSet& params, const ParameterSet& grads) {
  if (m.size() == 0) {
    m = params.zeros_like();
    v = params.zeros_like();
  }
  ++step_count;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (auto& [name, p] : params.items()) {
    auto& pv = p.storage();
    const auto& gv = grads.at(name).storage();
    auto& mv = m.at(name).storage();
    auto& vv = v.at(name).storage();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      mv[i] = beta1 * mv[i] + (1.0 - beta1) * gv[i];
      vv[i] = beta2 * vv[i] + (1.0 - beta2) * gv[i] * gv[i];
      const double mhat = mv[i] / bc1, vhat = vv[i] / bc2;
      pv[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * pv[i]);
    }
  }
}

}  // namespace mim4d
