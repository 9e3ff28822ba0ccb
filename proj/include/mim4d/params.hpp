// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "mim4d/diff.hpp"
#include "mim4d/tensor.hpp"

namespace mim4d {

/// Named learnable tensors, iterated in name order.
class ParameterSet {
 public:
  void add(const std::string& name, Tensor value);
  bool has(const std::string& name) const { return tensors_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  const std::map<std::string, Tensor>& items() const { return tensors_; }
  std::map<std::string, Tensor>& items() { return tensors_; }
  std::size_t size() const { return tensors_.size(); }
  std::int64_t numel() const;

  /// A set with the same names and shapes, all zero.
  ParameterSet zeros_like() const;
  void accumulate(const ParameterSet& other, double scale = 1.0);
  double squared_norm() const;

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  std::map<std::string, Tensor> tensors_;
};

/// Parameters recorded as leaves on one tape.
class BoundParams {
 public:
  BoundParams() = default;
  BoundParams(diff::Tape& tape, const ParameterSet& params, bool requires_grad = true);
  /// Binds existing tape values under the given names.
  BoundParams(diff::Tape& tape, std::map<std::string, diff::Var> vars) : tape_(&tape), vars_(std::move(vars)) {}

  const diff::Var& operator[](const std::string& name) const;
  bool has(const std::string& name) const { return vars_.count(name) != 0; }
  diff::Tape& tape() const { return *tape_; }

  /// Gradients for every bound parameter (zero where unused).
  ParameterSet gradients(const diff::Gradients& grads) const;

 private:
  diff::Tape* tape_ = nullptr;
  std::map<std::string, diff::Var> vars_;
};

/// Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
Tensor xavier_uniform(const Shape& shape, std::int64_t fan_in, std::int64_t fan_out, std::mt19937_64& rng);

/// Decoupled-weight-decay adaptive-moment optimizer.
struct AdamW {
  double lr = 2e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  std::int64_t step_count = 0;
  ParameterSet m, v;

  void step(ParameterSet& params, const ParameterSet& grads);
};

}  // namespace mim4d
