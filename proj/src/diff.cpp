// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mim4d/diff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mim4d::diff {

// ---- Var / Tape ------------------------------------------------------------

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("use of an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NonFiniteError("non-finite value in leaf tensor");
  nodes_.push_back(Node{"leaf", std::move(value), requires_grad, {}, nullptr});
  return Var(this, static_cast<NodeId>(nodes_.size()) - 1);
}

Var Tape::record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn rule) {
  if (!value.all_finite()) throw NonFiniteError(std::string("non-finite output from ") + op);
  bool needs_grad = false;
  std::vector<NodeId> ids;
  ids.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tape() != this) throw std::logic_error(std::string(op) + ": input recorded on another tape");
    ids.push_back(in.id());
    needs_grad = needs_grad || requires_grad(in.id());
  }
  nodes_.push_back(Node{op, std::move(value), needs_grad, std::move(ids), needs_grad ? std::move(rule) : nullptr});
  return Var(this, static_cast<NodeId>(nodes_.size()) - 1);
}

const Tensor& Tape::value(NodeId id) const {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) throw std::out_of_range("node not on tape");
  return nodes_[static_cast<std::size_t>(id)].value;
}

bool Tape::requires_grad(NodeId id) const {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) throw std::out_of_range("node not on tape");
  return nodes_[static_cast<std::size_t>(id)].requires_grad;
}

const char* Tape::op_name(NodeId id) const {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) throw std::out_of_range("node not on tape");
  return nodes_[static_cast<std::size_t>(id)].op;
}

Tensor Gradients::at(NodeId id) const {
  if (!tape_) throw std::logic_error("empty gradient map");
  if (has(id)) return grads_[static_cast<std::size_t>(id)];
  return Tensor(tape_->value(id).shape(), 0.0);
}

bool Gradients::has(NodeId id) const {
  return id >= 0 && id < static_cast<NodeId>(grads_.size()) && !grads_[static_cast<std::size_t>(id)].empty();
}

Gradients backward(const Tape& tape, const Var& loss) {
  if (loss.tape() != &tape) throw std::invalid_argument("loss node not on tape");
  if (loss.id() < 0 || loss.id() >= static_cast<NodeId>(tape.size())) {
    throw std::out_of_range("loss node not on tape");
  }
  const Tensor& lv = tape.value(loss.id());
  if (lv.numel() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_string(lv.shape()));

  std::vector<Tensor> grads(tape.size());
  grads[static_cast<std::size_t>(loss.id())] = Tensor(lv.shape(), 1.0);
  std::vector<Tensor*> slots;
  for (NodeId id = loss.id(); id >= 0; --id) {
    const auto& node = tape.nodes_[static_cast<std::size_t>(id)];
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty() || !node.rule) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const auto in = node.inputs[i];
      if (!tape.requires_grad(in)) continue;
      auto& gi = grads[static_cast<std::size_t>(in)];
      if (gi.empty()) gi = Tensor(tape.value(in).shape(), 0.0);
      slots[i] = &gi;
    }
    node.rule(g, slots);
  }
  return Gradients(&tape, std::move(grads));
}

// ---- helpers ---------------------------------------------------------------

namespace {

Tape& tape_of(const Var& a) {
  if (!a.tape()) throw std::logic_error("use of an unbound Var");
  return *a.tape();
}

void same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw std::logic_error("operands recorded on different tapes");
}

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return a;
}

struct AxisSplit {
  std::int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.n = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> sa, sb;  // strides aligned to `out`, 0 on broadcast axes
  enum class Kind { kSame, kScalarB, kScalarA, kGeneral } kind = Kind::kGeneral;
};

std::vector<std::int64_t> contiguous_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i) + 1] * s[static_cast<std::size_t>(i) + 1];
  }
  return st;
}

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.kind = Broadcast::Kind::kSame;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  bc.out.assign(r, 1);
  bc.sa.assign(r, 0);
  bc.sb.assign(r, 0);
  const auto sta = contiguous_strides(a), stb = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ia = i + a.size(), ib = i + b.size();
    const std::int64_t ea = ia >= r ? a[ia - r] : 1;
    const std::int64_t eb = ib >= r ? b[ib - r] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    bc.out[i] = std::max(ea, eb);
    if (ia >= r && ea != 1) bc.sa[i] = sta[ia - r];
    if (ib >= r && eb != 1) bc.sb[i] = stb[ib - r];
  }
  if (shape_numel(b) == 1 && shape_numel(a) == shape_numel(bc.out)) {
    bc.kind = Broadcast::Kind::kScalarB;
  } else if (shape_numel(a) == 1 && shape_numel(b) == shape_numel(bc.out)) {
    bc.kind = Broadcast::Kind::kScalarA;
  }
  return bc;
}

template <class F>
void for_each_pair(const Broadcast& bc, F&& f) {
  const std::int64_t total = shape_numel(bc.out);
  switch (bc.kind) {
    case Broadcast::Kind::kSame:
      for (std::int64_t i = 0; i < total; ++i) f(i, i, i);
      return;
    case Broadcast::Kind::kScalarB:
      for (std::int64_t i = 0; i < total; ++i) f(i, i, std::int64_t{0});
      return;
    case Broadcast::Kind::kScalarA:
      for (std::int64_t i = 0; i < total; ++i) f(i, std::int64_t{0}, i);
      return;
    case Broadcast::Kind::kGeneral:
      break;
  }
  const std::size_t r = bc.out.size();
  if (total == 0) return;
  const std::int64_t inner = bc.out[r - 1];
  const std::int64_t da = bc.sa[r - 1], db = bc.sb[r - 1];
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t base = 0; base < total; base += inner) {
    for (std::int64_t j = 0; j < inner; ++j) f(base + j, oa + j * da, ob + j * db);
    // advance the leading multi-index
    for (int d = static_cast<int>(r) - 2; d >= 0; --d) {
      const auto ud = static_cast<std::size_t>(d);
      ++idx[ud];
      oa += bc.sa[ud];
      ob += bc.sb[ud];
      if (idx[ud] < bc.out[ud]) break;
      oa -= bc.sa[ud] * idx[ud];
      ob -= bc.sb[ud] * idx[ud];
      idx[ud] = 0;
    }
  }
}

template <class Fwd, class DA, class DB>
Var binary(const char* op, const Var& a, const Var& b, Fwd fwd, DA da, DB db) {
  same_tape(a, b);
  auto bc = broadcast(a.shape(), b.shape(), op);
  const auto& av = a.value().storage();
  const auto& bv = b.value().storage();
  Tensor out(bc.out);
  auto& ov = out.storage();
  for_each_pair(bc, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
    ov[static_cast<std::size_t>(i)] = fwd(av[static_cast<std::size_t>(ia)], bv[static_cast<std::size_t>(ib)]);
  });
  return tape_of(a).record(op, std::move(out), {a, b},
                           [a, b, bc, da, db](const Tensor& g, std::span<Tensor* const> grads) {
                             const auto& av = a.value().storage();
                             const auto& bv = b.value().storage();
                             const auto& gv = g.storage();
                             Tensor* ga = grads[0];
                             Tensor* gb = grads[1];
                             for_each_pair(bc, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                               const double x = av[static_cast<std::size_t>(ia)];
                               const double y = bv[static_cast<std::size_t>(ib)];
                               const double gi = gv[static_cast<std::size_t>(i)];
                               if (ga) (*ga)[ia] += gi * da(x, y);
                               if (gb) (*gb)[ib] += gi * db(x, y);
                             });
                           });
}

template <class Fwd, class Deriv>
Var unary(const char* op, const Var& a, Fwd fwd, Deriv deriv) {
  const auto& av = a.value().storage();
  Tensor out(a.shape());
  auto& ov = out.storage();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i]);
  return tape_of(a).record(op, std::move(out), {a}, [a, deriv](const Tensor& g, std::span<Tensor* const> grads) {
    const auto& av = a.value().storage();
    const auto& gv = g.storage();
    auto& ga = grads[0]->storage();
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += gv[i] * deriv(av[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---- elementwise -------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Var add_scalar(const Var& a, double c) {
  return unary(
      "add_scalar", a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Var mul_scalar(const Var& a, double c) {
  return unary(
      "mul_scalar", a, [c](double x) { return x * c; }, [c](double) { return c; });
}

Var relu(const Var& a) {
  // Subgradient at exactly zero is zero.
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary("sigmoid", a, stable_sigmoid, [](double x) {
    const double s = stable_sigmoid(x);
    return s * (1.0 - s);
  });
}

Var exp(const Var& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var abs(const Var& a) {
  return unary(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var clamp_min(const Var& a, double lo) {
  return unary(
      "clamp_min", a, [lo](double x) { return x > lo ? x : lo; }, [lo](double x) { return x > lo ? 1.0 : 0.0; });
}

// ---- linear algebra ----------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  same_tape(a, b);
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto& av = a.value().storage();
  const auto& bv = b.value().storage();
  Tensor out(Shape{m, n});
  auto& ov = out.storage();
  for (std::int64_t i = 0; i < m; ++i) {
    double* orow = ov.data() + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double x = av[static_cast<std::size_t>(i * k + p)];
      if (x == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::int64_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  }
  return tape_of(a).record("matmul", std::move(out), {a, b},
                           [a, b, m, k, n](const Tensor& g, std::span<Tensor* const> grads) {
                             const auto& av = a.value().storage();
                             const auto& bv = b.value().storage();
                             const auto& gv = g.storage();
                             if (Tensor* ga = grads[0]) {
                               auto& gav = ga->storage();
                               for (std::int64_t i = 0; i < m; ++i) {
                                 const double* grow = gv.data() + i * n;
                                 for (std::int64_t p = 0; p < k; ++p) {
                                   const double* brow = bv.data() + p * n;
                                   double acc = 0.0;
                                   for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                   gav[static_cast<std::size_t>(i * k + p)] += acc;
                                 }
                               }
                             }
                             if (Tensor* gb = grads[1]) {
                               auto& gbv = gb->storage();
                               for (std::int64_t i = 0; i < m; ++i) {
                                 const double* grow = gv.data() + i * n;
                                 for (std::int64_t p = 0; p < k; ++p) {
                                   const double x = av[static_cast<std::size_t>(i * k + p)];
                                   if (x == 0.0) continue;
                                   double* gbrow = gbv.data() + p * n;
                                   for (std::int64_t j = 0; j < n; ++j) gbrow[j] += x * grow[j];
                                 }
                               }
                             }
                           });
}

Var transpose(const Var& a) {
  if (a.value().rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_string(a.shape()));
  const std::int64_t m = a.dim(0), n = a.dim(1);
  const auto& av = a.value().storage();
  Tensor out(Shape{n, m});
  auto& ov = out.storage();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) ov[static_cast<std::size_t>(j * m + i)] = av[static_cast<std::size_t>(i * n + j)];
  return tape_of(a).record("transpose", std::move(out), {a}, [m, n](const Tensor& g, std::span<Tensor* const> grads) {
    const auto& gv = g.storage();
    auto& ga = grads[0]->storage();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) ga[static_cast<std::size_t>(i * n + j)] += gv[static_cast<std::size_t>(j * m + i)];
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
  same_tape(x, weight);
  same_tape(x, bias);
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs.size() != 3 || ws.size() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || bias.shape() != Shape{ws[0]}) {
    throw ShapeError("conv2d: incompatible shapes x" + shape_string(xs) + " w" + shape_string(ws) + " b" +
                     shape_string(bias.shape()));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const std::int64_t cin = xs[0], h = xs[1], w = xs[2], cout = ws[0], k = ws[2];
  const std::int64_t ho = (h + 2 * padding - k) / stride + 1;
  const std::int64_t wo = (w + 2 * padding - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: kernel larger than padded input");

  const auto& xv = x.value().storage();
  const auto& wv = weight.value().storage();
  const auto& bv = bias.value().storage();
  Tensor out(Shape{cout, ho, wo});
  auto& ov = out.storage();
  for (std::int64_t co = 0; co < cout; ++co) {
    double* oplane = ov.data() + co * ho * wo;
    std::fill(oplane, oplane + ho * wo, bv[static_cast<std::size_t>(co)]);
    for (std::int64_t ci = 0; ci < cin; ++ci) {
      const double* xplane = xv.data() + ci * h * w;
      for (std::int64_t ky = 0; ky < k; ++ky) {
        for (std::int64_t kx = 0; kx < k; ++kx) {
          const double wk = wv[static_cast<std::size_t>(((co * cin + ci) * k + ky) * k + kx)];
          if (wk == 0.0) continue;
          for (std::int64_t oy = 0; oy < ho; ++oy) {
            const std::int64_t iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= h) continue;
            for (std::int64_t ox = 0; ox < wo; ++ox) {
              const std::int64_t ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= w) continue;
              oplane[oy * wo + ox] += wk * xplane[iy * w + ix];
            }
          }
        }
      }
    }
  }
  return tape_of(x).record(
      "conv2d", std::move(out), {x, weight, bias},
      [x, weight, cin, h, w, cout, k, ho, wo, stride, padding](const Tensor& g, std::span<Tensor* const> grads) {
        const auto& xv = x.value().storage();
        const auto& wv = weight.value().storage();
        const auto& gv = g.storage();
        Tensor* gx = grads[0];
        Tensor* gw = grads[1];
        Tensor* gb = grads[2];
        for (std::int64_t co = 0; co < cout; ++co) {
          const double* gplane = gv.data() + co * ho * wo;
          if (gb) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < ho * wo; ++i) acc += gplane[i];
            (*gb)[co] += acc;
          }
          for (std::int64_t ci = 0; ci < cin; ++ci) {
            const double* xplane = xv.data() + ci * h * w;
            for (std::int64_t ky = 0; ky < k; ++ky) {
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const std::size_t widx = static_cast<std::size_t>(((co * cin + ci) * k + ky) * k + kx);
                const double wk = wv[widx];
                double acc = 0.0;
                for (std::int64_t oy = 0; oy < ho; ++oy) {
                  const std::int64_t iy = oy * stride - padding + ky;
                  if (iy < 0 || iy >= h) continue;
                  for (std::int64_t ox = 0; ox < wo; ++ox) {
                    const std::int64_t ix = ox * stride - padding + kx;
                    if (ix < 0 || ix >= w) continue;
                    const double go = gplane[oy * wo + ox];
                    acc += go * xplane[iy * w + ix];
                    if (gx) (*gx)[ci * h * w + iy * w + ix] += go * wk;
                  }
                }
                if (gw) (*gw)[static_cast<std::int64_t>(widx)] += acc;
              }
            }
          }
        }
      });
}

// ---- structural --------------------------------------------------------------

Var softmax(const Var& a, int axis) {
  const int ax = normalize_axis(axis, a.value().rank());
  const auto sp = split_at(a.shape(), ax);
  const auto& av = a.value().storage();
  Tensor out(a.shape());
  auto& ov = out.storage();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const std::int64_t base = o * sp.n * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < sp.n; ++j) mx = std::max(mx, av[static_cast<std::size_t>(base + j * sp.inner)]);
      double sum = 0.0;
      for (std::int64_t j = 0; j < sp.n; ++j) {
        const auto idx = static_cast<std::size_t>(base + j * sp.inner);
        ov[idx] = std::exp(av[idx] - mx);
        sum += ov[idx];
      }
      for (std::int64_t j = 0; j < sp.n; ++j) ov[static_cast<std::size_t>(base + j * sp.inner)] /= sum;
    }
  }
  Tensor y = out;
  return tape_of(a).record("softmax", std::move(out), {a},
                           [y = std::move(y), sp](const Tensor& g, std::span<Tensor* const> grads) {
                             const auto& yv = y.storage();
                             const auto& gv = g.storage();
                             auto& ga = grads[0]->storage();
                             for (std::int64_t o = 0; o < sp.outer; ++o) {
                               for (std::int64_t i = 0; i < sp.inner; ++i) {
                                 const std::int64_t base = o * sp.n * sp.inner + i;
                                 double dot = 0.0;
                                 for (std::int64_t j = 0; j < sp.n; ++j) {
                                   const auto idx = static_cast<std::size_t>(base + j * sp.inner);
                                   dot += gv[idx] * yv[idx];
                                 }
                                 for (std::int64_t j = 0; j < sp.n; ++j) {
                                   const auto idx = static_cast<std::size_t>(base + j * sp.inner);
                                   ga[idx] += yv[idx] * (gv[idx] - dot);
                                 }
                               }
                             }
                           });
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int rank = parts[0].value().rank();
  const int ax = normalize_axis(axis, rank);
  Shape out_shape = parts[0].shape();
  std::vector<std::int64_t> widths;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    same_tape(parts[0], p);
    const auto& s = p.shape();
    if (static_cast<int>(s.size()) != rank) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != ax && s[static_cast<std::size_t>(d)] != out_shape[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat: shape mismatch " + shape_string(s) + " vs " + shape_string(out_shape));
      }
    }
    widths.push_back(s[static_cast<std::size_t>(ax)]);
    total += s[static_cast<std::size_t>(ax)];
  }
  out_shape[static_cast<std::size_t>(ax)] = total;
  const auto sp = split_at(out_shape, ax);
  Tensor out(out_shape);
  auto& ov = out.storage();
  std::int64_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& pv = parts[pi].value().storage();
    const std::int64_t chunk = widths[pi] * sp.inner;
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pv.data() + o * chunk, chunk, ov.data() + o * total * sp.inner + offset * sp.inner);
    }
    offset += widths[pi];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record("concat", std::move(out), inputs,
                                  [widths, sp, total](const Tensor& g, std::span<Tensor* const> grads) {
                                    const auto& gv = g.storage();
                                    std::int64_t offset = 0;
                                    for (std::size_t pi = 0; pi < widths.size(); ++pi) {
                                      const std::int64_t chunk = widths[pi] * sp.inner;
                                      if (Tensor* gp = grads[pi]) {
                                        auto& gpv = gp->storage();
                                        for (std::int64_t o = 0; o < sp.outer; ++o) {
                                          const double* src = gv.data() + o * total * sp.inner + offset * sp.inner;
                                          double* dst = gpv.data() + o * chunk;
                                          for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
                                        }
                                      }
                                      offset += widths[pi];
                                    }
                                  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return tape_of(a).record("reshape", std::move(out), {a}, [](const Tensor& g, std::span<Tensor* const> grads) {
    auto& ga = grads[0]->storage();
    const auto& gv = g.storage();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gv[i];
  });
}

Var slice(const Var& a, int axis, std::int64_t begin, std::int64_t end) {
  const int ax = normalize_axis(axis, a.value().rank());
  const auto sp = split_at(a.shape(), ax);
  if (begin < 0 || end > sp.n || begin >= end) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for extent " +
                     std::to_string(sp.n));
  }
  Shape out_shape = a.shape();
  const std::int64_t width = end - begin;
  out_shape[static_cast<std::size_t>(ax)] = width;
  const auto& av = a.value().storage();
  Tensor out(out_shape);
  auto& ov = out.storage();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    std::copy_n(av.data() + (o * sp.n + begin) * sp.inner, width * sp.inner, ov.data() + o * width * sp.inner);
  }
  return tape_of(a).record("slice", std::move(out), {a},
                           [sp, begin, width](const Tensor& g, std::span<Tensor* const> grads) {
                             const auto& gv = g.storage();
                             auto& ga = grads[0]->storage();
                             for (std::int64_t o = 0; o < sp.outer; ++o) {
                               const double* src = gv.data() + o * width * sp.inner;
                               double* dst = ga.data() + (o * sp.n + begin) * sp.inner;
                               for (std::int64_t i = 0; i < width * sp.inner; ++i) dst[i] += src[i];
                             }
                           });
}

Var reduce_sum(const Var& a) {
  double acc = 0.0;
  for (double v : a.value().storage()) acc += v;
  return tape_of(a).record("reduce_sum", Tensor::scalar(acc), {a},
                           [](const Tensor& g, std::span<Tensor* const> grads) {
                             const double gi = g[0];
                             for (double& v : grads[0]->storage()) v += gi;
                           });
}

Var reduce_sum(const Var& a, int axis) {
  const int ax = normalize_axis(axis, a.value().rank());
  const auto sp = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + ax);
  const auto& av = a.value().storage();
  Tensor out(out_shape);
  auto& ov = out.storage();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t j = 0; j < sp.n; ++j)
      for (std::int64_t i = 0; i < sp.inner; ++i)
        ov[static_cast<std::size_t>(o * sp.inner + i)] += av[static_cast<std::size_t>((o * sp.n + j) * sp.inner + i)];
  return tape_of(a).record("reduce_sum_axis", std::move(out), {a},
                           [sp](const Tensor& g, std::span<Tensor* const> grads) {
                             const auto& gv = g.storage();
                             auto& ga = grads[0]->storage();
                             for (std::int64_t o = 0; o < sp.outer; ++o)
                               for (std::int64_t j = 0; j < sp.n; ++j)
                                 for (std::int64_t i = 0; i < sp.inner; ++i)
                                   ga[static_cast<std::size_t>((o * sp.n + j) * sp.inner + i)] +=
                                       gv[static_cast<std::size_t>(o * sp.inner + i)];
                           });
}

Var reduce_mean(const Var& a) {
  const std::int64_t n = a.numel();
  if (n == 0) throw ShapeError("reduce_mean of an empty tensor");
  return mul_scalar(reduce_sum(a), 1.0 / static_cast<double>(n));
}

Var reduce_mean(const Var& a, int axis) {
  const int ax = normalize_axis(axis, a.value().rank());
  const std::int64_t n = a.dim(ax);
  if (n == 0) throw ShapeError("reduce_mean over an empty axis");
  return mul_scalar(reduce_sum(a, ax), 1.0 / static_cast<double>(n));
}

Var exclusive_cumprod(const Var& a, int axis) {
  const int ax = normalize_axis(axis, a.value().rank());
  const auto sp = split_at(a.shape(), ax);
  const auto& av = a.value().storage();
  Tensor out(a.shape());
  auto& ov = out.storage();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const std::int64_t base = o * sp.n * sp.inner + i;
      double run = 1.0;
      for (std::int64_t j = 0; j < sp.n; ++j) {
        const auto idx = static_cast<std::size_t>(base + j * sp.inner);
        ov[idx] = run;
        run *= av[idx];
      }
    }
  }
  // O(n^2) per line: the ratio form out_j / a_k breaks when some a_k == 0.
  return tape_of(a).record("exclusive_cumprod", std::move(out), {a},
                           [a, sp](const Tensor& g, std::span<Tensor* const> grads) {
                             const auto& av = a.value().storage();
                             const auto& gv = g.storage();
                             auto& ga = grads[0]->storage();
                             for (std::int64_t o = 0; o < sp.outer; ++o) {
                               for (std::int64_t i = 0; i < sp.inner; ++i) {
                                 const std::int64_t base = o * sp.n * sp.inner + i;
                                 auto at = [&](std::int64_t j) { return static_cast<std::size_t>(base + j * sp.inner); };
                                 double prefix = 1.0;  // prod_{l<k} a_l
                                 for (std::int64_t k = 0; k < sp.n; ++k) {
                                   double partial = prefix;  // prod_{l<j, l!=k} a_l for j = k+1
                                   double acc = 0.0;
                                   for (std::int64_t j = k + 1; j < sp.n; ++j) {
                                     acc += gv[at(j)] * partial;
                                     partial *= av[at(j)];
                                   }
                                   ga[at(k)] += acc;
                                   prefix *= av[at(k)];
                                 }
                               }
                             }
                           });
}

// ---- sampling ------------------------------------------------------------------

namespace {

// Coordinates this far outside the grid touch no corner; clamp before flooring
// so huge values cannot overflow the integer cast.
inline bool far_outside(double c, std::int64_t extent) { return c < -1.0 || c > static_cast<double>(extent); }

}  // namespace

Var bilinear_sample_2d(const Var& field, const Var& coords) {
  same_tape(field, coords);
  const auto& fs = field.shape();
  const auto& cs = coords.shape();
  if (fs.size() != 3 || cs.size() != 2 || cs[1] != 2) {
    throw ShapeError("bilinear_sample_2d: field " + shape_string(fs) + " coords " + shape_string(cs));
  }
  const std::int64_t c = fs[0], h = fs[1], w = fs[2], p = cs[0];
  const auto& fv = field.value().storage();
  const auto& cv = coords.value().storage();
  Tensor out(Shape{p, c});
  auto& ov = out.storage();
  for (std::int64_t i = 0; i < p; ++i) {
    const double x = cv[static_cast<std::size_t>(2 * i)], y = cv[static_cast<std::size_t>(2 * i + 1)];
    if (far_outside(x, w) || far_outside(y, h)) continue;
    const auto x0 = static_cast<std::int64_t>(std::floor(x));
    const auto y0 = static_cast<std::int64_t>(std::floor(y));
    const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
    for (int dy = 0; dy < 2; ++dy) {
      const std::int64_t yy = y0 + dy;
      if (yy < 0 || yy >= h) continue;
      const double wy = dy ? fy : 1.0 - fy;
      for (int dx = 0; dx < 2; ++dx) {
        const std::int64_t xx = x0 + dx;
        if (xx < 0 || xx >= w) continue;
        const double wt = wy * (dx ? fx : 1.0 - fx);
        for (std::int64_t ch = 0; ch < c; ++ch) ov[static_cast<std::size_t>(i * c + ch)] += wt * fv[static_cast<std::size_t>((ch * h + yy) * w + xx)];
      }
    }
  }
  return tape_of(field).record(
      "bilinear_sample_2d", std::move(out), {field, coords},
      [field, coords, c, h, w, p](const Tensor& g, std::span<Tensor* const> grads) {
        const auto& fv = field.value().storage();
        const auto& cv = coords.value().storage();
        const auto& gv = g.storage();
        Tensor* gf = grads[0];
        Tensor* gc = grads[1];
        for (std::int64_t i = 0; i < p; ++i) {
          const double x = cv[static_cast<std::size_t>(2 * i)], y = cv[static_cast<std::size_t>(2 * i + 1)];
          if (far_outside(x, w) || far_outside(y, h)) continue;
          const auto x0 = static_cast<std::int64_t>(std::floor(x));
          const auto y0 = static_cast<std::int64_t>(std::floor(y));
          const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
          double gx = 0.0, gy = 0.0;
          for (int dy = 0; dy < 2; ++dy) {
            const std::int64_t yy = y0 + dy;
            if (yy < 0 || yy >= h) continue;
            const double wy = dy ? fy : 1.0 - fy;
            const double dwy = dy ? 1.0 : -1.0;
            for (int dx = 0; dx < 2; ++dx) {
              const std::int64_t xx = x0 + dx;
              if (xx < 0 || xx >= w) continue;
              const double wx = dx ? fx : 1.0 - fx;
              const double dwx = dx ? 1.0 : -1.0;
              for (std::int64_t ch = 0; ch < c; ++ch) {
                const double go = gv[static_cast<std::size_t>(i * c + ch)];
                const auto fidx = static_cast<std::size_t>((ch * h + yy) * w + xx);
                if (gf) gf->storage()[fidx] += go * wx * wy;
                gx += go * fv[fidx] * dwx * wy;
                gy += go * fv[fidx] * wx * dwy;
              }
            }
          }
          if (gc) {
            (*gc)[2 * i] += gx;
            (*gc)[2 * i + 1] += gy;
          }
        }
      });
}

Var trilinear_sample_3d(const Var& field, const Var& coords) {
  same_tape(field, coords);
  const auto& fs = field.shape();
  const auto& cs = coords.shape();
  if (fs.size() != 4 || cs.size() != 2 || cs[1] != 3) {
    throw ShapeError("trilinear_sample_3d: field " + shape_string(fs) + " coords " + shape_string(cs));
  }
  const std::int64_t c = fs[0], d = fs[1], h = fs[2], w = fs[3], p = cs[0];
  const auto& fv = field.value().storage();
  const auto& cv = coords.value().storage();
  Tensor out(Shape{p, c});
  auto& ov = out.storage();
  const std::int64_t plane = d * h * w;
  for (std::int64_t i = 0; i < p; ++i) {
    const double x = cv[static_cast<std::size_t>(3 * i)], y = cv[static_cast<std::size_t>(3 * i + 1)],
                 z = cv[static_cast<std::size_t>(3 * i + 2)];
    if (far_outside(x, w) || far_outside(y, h) || far_outside(z, d)) continue;
    const auto x0 = static_cast<std::int64_t>(std::floor(x));
    const auto y0 = static_cast<std::int64_t>(std::floor(y));
    const auto z0 = static_cast<std::int64_t>(std::floor(z));
    const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0), fz = z - static_cast<double>(z0);
    double* orow = ov.data() + i * c;
    for (int dz = 0; dz < 2; ++dz) {
      const std::int64_t zz = z0 + dz;
      if (zz < 0 || zz >= d) continue;
      const double wz = dz ? fz : 1.0 - fz;
      for (int dy = 0; dy < 2; ++dy) {
        const std::int64_t yy = y0 + dy;
        if (yy < 0 || yy >= h) continue;
        const double wy = dy ? fy : 1.0 - fy;
        for (int dx = 0; dx < 2; ++dx) {
          const std::int64_t xx = x0 + dx;
          if (xx < 0 || xx >= w) continue;
          const double wt = wz * wy * (dx ? fx : 1.0 - fx);
          const double* fcol = fv.data() + (zz * h + yy) * w + xx;
          for (std::int64_t ch = 0; ch < c; ++ch) orow[ch] += wt * fcol[ch * plane];
        }
      }
    }
  }
  return tape_of(field).record(
      "trilinear_sample_3d", std::move(out), {field, coords},
      [field, coords, c, d, h, w, p, plane](const Tensor& g, std::span<Tensor* const> grads) {
        const auto& fv = field.value().storage();
        const auto& cv = coords.value().storage();
        const auto& gv = g.storage();
        Tensor* gf = grads[0];
        Tensor* gc = grads[1];
        for (std::int64_t i = 0; i < p; ++i) {
          const double x = cv[static_cast<std::size_t>(3 * i)], y = cv[static_cast<std::size_t>(3 * i + 1)],
                       z = cv[static_cast<std::size_t>(3 * i + 2)];
          if (far_outside(x, w) || far_outside(y, h) || far_outside(z, d)) continue;
          const auto x0 = static_cast<std::int64_t>(std::floor(x));
          const auto y0 = static_cast<std::int64_t>(std::floor(y));
          const auto z0 = static_cast<std::int64_t>(std::floor(z));
          const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0),
                       fz = z - static_cast<double>(z0);
          const double* grow = gv.data() + i * c;
          double gx = 0.0, gy = 0.0, gz = 0.0;
          for (int dz = 0; dz < 2; ++dz) {
            const std::int64_t zz = z0 + dz;
            if (zz < 0 || zz >= d) continue;
            const double wz = dz ? fz : 1.0 - fz, dwz = dz ? 1.0 : -1.0;
            for (int dy = 0; dy < 2; ++dy) {
              const std::int64_t yy = y0 + dy;
              if (yy < 0 || yy >= h) continue;
              const double wy = dy ? fy : 1.0 - fy, dwy = dy ? 1.0 : -1.0;
              for (int dx = 0; dx < 2; ++dx) {
                const std::int64_t xx = x0 + dx;
                if (xx < 0 || xx >= w) continue;
                const double wx = dx ? fx : 1.0 - fx, dwx = dx ? 1.0 : -1.0;
                const std::int64_t off = (zz * h + yy) * w + xx;
                double dot = 0.0;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                  const auto fidx = static_cast<std::size_t>(off + ch * plane);
                  dot += grow[ch] * fv[fidx];
                  if (gf) gf->storage()[fidx] += grow[ch] * wx * wy * wz;
                }
                gx += dot * dwx * wy * wz;
                gy += dot * wx * dwy * wz;
                gz += dot * wx * wy * dwz;
              }
            }
          }
          if (gc) {
            (*gc)[3 * i] += gx;
            (*gc)[3 * i + 1] += gy;
            (*gc)[3 * i + 2] += gz;
          }
        }
      });
}

Var scatter_add(const Var& src, std::span<const std::int64_t> index, std::int64_t rows) {
  const auto& ss = src.shape();
  if (ss.size() != 2 || static_cast<std::int64_t>(index.size()) != ss[0]) {
    throw ShapeError("scatter_add: src " + shape_string(ss) + " with " + std::to_string(index.size()) + " indices");
  }
  const std::int64_t p = ss[0], c = ss[1];
  std::vector<std::int64_t> idx(index.begin(), index.end());
  for (auto r : idx) {
    if (r >= rows) throw ShapeError("scatter_add: index " + std::to_string(r) + " >= rows " + std::to_string(rows));
  }
  const auto& sv = src.value().storage();
  Tensor out(Shape{rows, c});
  auto& ov = out.storage();
  for (std::int64_t i = 0; i < p; ++i) {
    const auto r = idx[static_cast<std::size_t>(i)];
    if (r < 0) continue;
    for (std::int64_t ch = 0; ch < c; ++ch) ov[static_cast<std::size_t>(r * c + ch)] += sv[static_cast<std::size_t>(i * c + ch)];
  }
  return tape_of(src).record("scatter_add", std::move(out), {src},
                             [idx = std::move(idx), c](const Tensor& g, std::span<Tensor* const> grads) {
                               const auto& gv = g.storage();
                               auto& gs = grads[0]->storage();
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 const auto r = idx[i];
                                 if (r < 0) continue;
                                 for (std::int64_t ch = 0; ch < c; ++ch)
                                   gs[i * static_cast<std::size_t>(c) + static_cast<std::size_t>(ch)] +=
                                       gv[static_cast<std::size_t>(r * c + ch)];
                               }
                             });
}

// ---- gradient checking ---------------------------------------------------------

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(shape);
  for (double& v : t.storage()) v = dist(rng);
  return t;
}

GradcheckResult gradcheck(const OpInstance& op, std::vector<Tensor> inputs, double perturbation,
                          std::uint64_t cotangent_seed) {
  if (perturbation < 1e-7 || perturbation > 1e-4) {
    throw std::invalid_argument("gradcheck perturbation must lie in [1e-7, 1e-4]");
  }
  Tensor cotangent;
  auto contract = [&](Tape& tape, const Var& out) {
    if (cotangent.empty()) {
      std::mt19937_64 rng(cotangent_seed);
      cotangent = random_tensor(out.shape(), rng, 0.5, 1.5);
    }
    return reduce_sum(mul(out, tape.constant(cotangent)));
  };

  Tensor analytic_flat;
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.param(t));
    const Var loss = contract(tape, op(tape, leaves));
    const auto grads = backward(tape, loss);
    for (const auto& l : leaves) analytic.push_back(grads[l]);
  }

  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.constant(t));
    return contract(tape, op(tape, leaves)).value().item();
  };

  double scale = 0.0;
  for (const auto& g : analytic)
    for (double v : g.storage()) scale = std::max(scale, std::fabs(v));
  const double floor = std::max(1e-8, 1e-6 * scale);

  GradcheckResult result;
  const double f0 = evaluate();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& data = inputs[i].storage();
    for (std::size_t e = 0; e < data.size(); ++e) {
      const double saved = data[e];
      data[e] = saved + perturbation;
      const double fp = evaluate();
      data[e] = saved - perturbation;
      const double fm = evaluate();
      data[e] = saved;
      const double numeric = (fp - fm) / (2.0 * perturbation);
      const double fwd = (fp - f0) / perturbation, bwd = (f0 - fm) / perturbation;
      const double a = analytic[i][static_cast<std::int64_t>(e)];
      const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), floor});
      if (std::fabs(fwd - bwd) > 1e-4 * std::max({std::fabs(fwd), std::fabs(bwd), 1e-2}) && rel > 1e-6) {
        ++result.kinks;
        continue;
      }
      if (rel > result.max_rel_error || result.worst_input < 0) {
        result.max_rel_error = rel;
        result.worst_input = static_cast<std::int64_t>(i);
        result.worst_element = static_cast<std::int64_t>(e);
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
      ++result.checked;
    }
  }
  return result;
}

}  // namespace mim4d::diff
