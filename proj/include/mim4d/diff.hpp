// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode differentiation over dense tensors.
//
// A Tape owns every intermediate value of a forward pass. Operations take and
// return Var handles; an operation is recorded with a gradient rule whenever any
// input requires a gradient. backward() replays the tape in reverse order.
// Every recorded value is checked for NaN/Inf and the offending operation named.

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mim4d/tensor.hpp"

namespace mim4d::diff {

using NodeId = std::int64_t;

class Tape;
class Var;
class Gradients;
Gradients backward(const Tape& tape, const Var& loss);

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  NodeId id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::int64_t dim(int axis) const { return value().dim(axis); }
  std::int64_t numel() const { return value().numel(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  NodeId id_ = -1;
};

/// grads[i] is the gradient buffer of input i, or nullptr if that input does not
/// require a gradient. Rules accumulate (+=) into the buffers.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grads)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var param(Tensor value) { return leaf(std::move(value), true); }

  Var record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn rule);

  const Tensor& value(NodeId id) const;
  bool requires_grad(NodeId id) const;
  const char* op_name(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Gradients;
  friend Gradients backward(const Tape& tape, const Var& loss);

  struct Node {
    const char* op;
    Tensor value;
    bool requires_grad;
    std::vector<NodeId> inputs;
    BackwardFn rule;
  };
  std::deque<Node> nodes_;  // references to values stay valid while recording
};

/// Gradient map keyed by node id; nodes the loss does not depend on read as zero.
class Gradients {
 public:
  Gradients() = default;
  Gradients(const Tape* tape, std::vector<Tensor> grads) : tape_(tape), grads_(std::move(grads)) {}

  Tensor operator[](const Var& v) const { return at(v.id()); }
  Tensor at(NodeId id) const;
  bool has(NodeId id) const;

 private:
  const Tape* tape_ = nullptr;
  std::vector<Tensor> grads_;
};

Gradients backward(const Tape& tape, const Var& loss);

// ---- forward operations -------------------------------------------------
// Elementwise binary ops broadcast with numpy rules.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var abs(const Var& a);
Var clamp_min(const Var& a, double lo);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

/// x: (Cin, H, W), weight: (Cout, Cin, k, k), bias: (Cout). Zero padding.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);

Var softmax(const Var& a, int axis);
Var concat(std::span<const Var> parts, int axis);
Var reshape(const Var& a, Shape shape);
Var slice(const Var& a, int axis, std::int64_t begin, std::int64_t end);
Var reduce_sum(const Var& a);
Var reduce_sum(const Var& a, int axis);
Var reduce_mean(const Var& a);
Var reduce_mean(const Var& a, int axis);

/// Exclusive cumulative product along `axis`: out[..., j, ...] = prod_{k<j} a[..., k, ...].
Var exclusive_cumprod(const Var& a, int axis);

/// field: (C, H, W); coords: (P, 2) as (x, y) in cell-index units, cell centers at
/// integers. Returns (P, C). Corners outside the grid contribute zero.
Var bilinear_sample_2d(const Var& field, const Var& coords);

/// field: (C, Z, H, W); coords: (P, 3) as (x, y, z) in cell-index units.
/// Returns (P, C). Corners outside the grid contribute zero.
Var trilinear_sample_3d(const Var& field, const Var& coords);

/// src: (P, C). Row p is added to output row index[p]; negative indices are dropped.
Var scatter_add(const Var& src, std::span<const std::int64_t> index, std::int64_t rows);

// ---- gradient checking --------------------------------------------------

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
  /// Elements where one-sided differences disagree: the point sits on a kink.
  std::int64_t kinks = 0;
  /// Location and values of the element with the largest error.
  std::int64_t worst_input = -1, worst_element = -1;
  double worst_analytic = 0.0, worst_numeric = 0.0;
};

/// Builds the op on a fresh tape from `inputs` (all leaves requiring grad),
/// contracts its output against a fixed random cotangent and compares the
/// analytic gradient of every input element with a central difference.
/// Relative error: |analytic - numeric| / max(|analytic|, |numeric|, floor), where
/// floor = max(1e-8, 1e-6 * largest analytic magnitude) absorbs rounding noise on
/// elements that are negligible next to the rest of the gradient.
using OpInstance = std::function<Var(Tape&, std::span<const Var>)>;
GradcheckResult gradcheck(const OpInstance& op, std::vector<Tensor> inputs, double perturbation = 1e-6,
                          std::uint64_t cotangent_seed = 7);

/// Tensor of the given shape with entries uniform in [lo, hi).
Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);

}  // namespace mim4d::diff
