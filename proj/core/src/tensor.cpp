#include "tfl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace tfl {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

static void check_shape(const Shape& s) {
  for (int64_t d : s) {
    if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(s));
  }
}

Tensor::Tensor(Shape shape, double fill) {
  check_shape(shape);
  impl_ = std::make_shared<TensorImpl>();
  impl_->data.assign(static_cast<size_t>(shape_numel(shape)), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

const Shape& Tensor::shape() const { return impl_->shape; }
int64_t Tensor::rank() const { return static_cast<int64_t>(impl_->shape.size()); }

int64_t Tensor::dim(int64_t i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) throw ContractError("dim index out of range");
  return impl_->shape[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(impl_->data.size()); }

const std::vector<double>& Tensor::data() const { return impl_->data; }
std::vector<double>& Tensor::mutable_data() { return impl_->data; }

double Tensor::value() const {
  if (numel() != 1) throw ContractError("value() requires a scalar tensor, shape is " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  if (static_cast<int64_t>(idx.size()) != rank())
    throw ContractError("at() index rank mismatch");
  int64_t flat = 0;
  size_t i = 0;
  for (int64_t v : idx) {
    if (v < 0 || v >= impl_->shape[i]) throw ContractError("at() index out of bounds");
    flat = flat * impl_->shape[i] + v;
    ++i;
  }
  return impl_->data[static_cast<size_t>(flat)];
}

Tensor& Tensor::set_requires_grad(bool v) {
  impl_->requires_grad = v;
  if (!v) impl_->grad.clear();
  return *this;
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
bool Tensor::on_tape() const { return impl_->node != nullptr; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) throw ContractError("tensor has no gradient buffer");
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::clone() const {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->data;
  return t;
}

namespace autograd {

bool needs_tape(const std::vector<Tensor>& inputs) {
  for (const Tensor& t : inputs)
    if (t.defined() && (t.requires_grad() || t.on_tape())) return true;
  return false;
}

Tensor make_op(OpKind kind, Shape out_shape, std::vector<double> out_data,
               std::vector<Tensor> inputs,
               std::function<void(const std::vector<double>& out_grad)> backward_fn) {
  Tensor out(std::move(out_shape), std::move(out_data));
  if (needs_tape(inputs)) {
    auto node = std::make_shared<TapeNode>();
    node->kind = kind;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
    out.impl()->node = std::move(node);
  }
  return out;
}

double* grad_slot(Tensor& t) {
  if (!t.defined()) return nullptr;
  TensorImpl* im = t.impl();
  if (!im->requires_grad && !im->node) return nullptr;
  if (im->grad.empty()) im->grad.assign(im->data.size(), 0.0);
  return im->grad.data();
}

} // namespace autograd

void backward(const Tensor& loss, double seed) {
  if (!loss.defined()) throw ContractError("backward() on undefined tensor");
  TensorImpl* root = loss.impl();
  if (loss.numel() != 1) throw ContractError("backward() requires a scalar loss, shape is " + shape_str(loss.shape()));
  if (!root->node && !root->requires_grad)
    throw ContractError("backward() loss is not on the tape");

  // Iterative DFS postorder; reversed it is a valid topological order with
  // every consumer ahead of its producers.
  std::vector<TensorImpl*> postorder;
  std::unordered_set<TensorImpl*> visited;
  struct Frame {
    TensorImpl* impl;
    size_t next_child = 0;
  };
  std::vector<Frame> stack;
  if (visited.insert(root).second) stack.push_back({root});
  while (!stack.empty()) {
    Frame& fr = stack.back();
    TapeNode* node = fr.impl->node.get();
    size_t n_children = node ? node->inputs.size() : 0;
    if (fr.next_child < n_children) {
      Tensor& child = node->inputs[fr.next_child++];
      if (child.defined() && visited.insert(child.impl()).second)
        stack.push_back({child.impl()});
    } else {
      postorder.push_back(fr.impl);
      stack.pop_back();
    }
  }

  // Interior gradients are scratch per backward pass; leaf gradients persist
  // and accumulate.
  for (TensorImpl* im : postorder) {
    if (im->node) im->grad.assign(im->data.size(), 0.0);
  }
  {
    Tensor l = loss;
    double* g = autograd::grad_slot(l);
    g[0] += seed;
  }
  for (auto it = postorder.rbegin(); it != postorder.rend(); ++it) {
    TensorImpl* im = *it;
    if (im->node && !im->grad.empty()) im->node->backward(im->grad);
  }
}

// ---- shape helpers ----

static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  Tensor ac = a, bc = b;
  return autograd::make_op(OpKind::add, a.shape(), std::move(out), {a, b},
                           [ac, bc](const std::vector<double>& g) mutable {
                             if (double* ga = autograd::grad_slot(ac))
                               for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                             if (double* gb = autograd::grad_slot(bc))
                               for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                           });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  Tensor ac = a, bc = b;
  return autograd::make_op(OpKind::sub, a.shape(), std::move(out), {a, b},
                           [ac, bc](const std::vector<double>& g) mutable {
                             if (double* ga = autograd::grad_slot(ac))
                               for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                             if (double* gb = autograd::grad_slot(bc))
                               for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  Tensor ac = a, bc = b;
  return autograd::make_op(OpKind::mul, a.shape(), std::move(out), {a, b},
                           [ac, bc](const std::vector<double>& g) mutable {
                             const auto& av2 = ac.data();
                             const auto& bv2 = bc.data();
                             if (double* ga = autograd::grad_slot(ac))
                               for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
                             if (double* gb = autograd::grad_slot(bc))
                               for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
                           });
}

Tensor scale(const Tensor& a, double c) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
  Tensor ac = a;
  return autograd::make_op(OpKind::scale, a.shape(), std::move(out), {a},
                           [ac, c](const std::vector<double>& g) mutable {
                             if (double* ga = autograd::grad_slot(ac))
                               for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
                           });
}

Tensor tanh(const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = std::tanh(av[i]);
  Tensor ac = a;
  std::vector<double> saved = out;
  return autograd::make_op(OpKind::tanh_op, a.shape(), std::move(out), {a},
                           [ac, saved = std::move(saved)](const std::vector<double>& g) mutable {
                             if (double* ga = autograd::grad_slot(ac))
                               for (size_t i = 0; i < g.size(); ++i)
                                 ga[i] += g[i] * (1.0 - saved[i] * saved[i]);
                           });
}

Tensor relu(const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  Tensor ac = a;
  return autograd::make_op(OpKind::relu_op, a.shape(), std::move(out), {a},
                           [ac](const std::vector<double>& g) mutable {
                             const auto& av2 = ac.data();
                             if (double* ga = autograd::grad_slot(ac))
                               for (size_t i = 0; i < g.size(); ++i)
                                 if (av2[i] > 0.0) ga[i] += g[i];
                           });
}

// ---- softmax ----

Tensor softmax(const Tensor& a, int64_t axis) {
  int64_t r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of range");
  const Shape& s = a.shape();
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < r; ++i) inner *= s[static_cast<size_t>(i)];
  int64_t len = s[static_cast<size_t>(axis)];

  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      int64_t base = o * len * inner + in;
      double mx = av[static_cast<size_t>(base)];
      for (int64_t k = 1; k < len; ++k)
        mx = std::max(mx, av[static_cast<size_t>(base + k * inner)]);
      double denom = 0.0;
      for (int64_t k = 0; k < len; ++k) {
        double e = std::exp(av[static_cast<size_t>(base + k * inner)] - mx);
        out[static_cast<size_t>(base + k * inner)] = e;
        denom += e;
      }
      for (int64_t k = 0; k < len; ++k)
        out[static_cast<size_t>(base + k * inner)] /= denom;
    }
  }

  Tensor ac = a;
  std::vector<double> y = out;
  return autograd::make_op(
      OpKind::softmax_op, a.shape(), std::move(out), {a},
      [ac, y = std::move(y), outer, inner, len](const std::vector<double>& g) mutable {
        double* ga = autograd::grad_slot(ac);
        if (!ga) return;
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t in = 0; in < inner; ++in) {
            int64_t base = o * len * inner + in;
            double dot = 0.0;
            for (int64_t k = 0; k < len; ++k) {
              size_t i = static_cast<size_t>(base + k * inner);
              dot += g[i] * y[i];
            }
            for (int64_t k = 0; k < len; ++k) {
              size_t i = static_cast<size_t>(base + k * inner);
              ga[i] += (g[i] - dot) * y[i];
            }
          }
        }
      });
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: rank-2 operands required");
  int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t kk = 0; kk < k; ++kk) {
      double aik = av[static_cast<size_t>(i * k + kk)];
      const double* brow = &bv[static_cast<size_t>(kk * n)];
      double* orow = &out[static_cast<size_t>(i * n)];
      for (int64_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  Tensor ac = a, bc = b;
  return autograd::make_op(
      OpKind::matmul_op, Shape{m, n}, std::move(out), {a, b},
      [ac, bc, m, k, n](const std::vector<double>& g) mutable {
        const auto& av2 = ac.data();
        const auto& bv2 = bc.data();
        if (double* ga = autograd::grad_slot(ac)) {
          // dA = g @ B^T
          for (int64_t i = 0; i < m; ++i)
            for (int64_t kk = 0; kk < k; ++kk) {
              double acc = 0.0;
              const double* grow = &g[static_cast<size_t>(i * n)];
              const double* brow = &bv2[static_cast<size_t>(kk * n)];
              for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              ga[i * k + kk] += acc;
            }
        }
        if (double* gb = autograd::grad_slot(bc)) {
          // dB = A^T @ g
          for (int64_t kk = 0; kk < k; ++kk)
            for (int64_t i = 0; i < m; ++i) {
              double aik = av2[static_cast<size_t>(i * k + kk)];
              const double* grow = &g[static_cast<size_t>(i * n)];
              double* gbrow = &gb[kk * n];
              for (int64_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
            }
        }
      });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul_nt: rank-2 operands required");
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (k != b.dim(1))
    throw ShapeError("matmul_nt: last dims differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      const double* arow = &av[static_cast<size_t>(i * k)];
      const double* brow = &bv[static_cast<size_t>(j * k)];
      for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      out[static_cast<size_t>(i * n + j)] = acc;
    }
  Tensor ac = a, bc = b;
  return autograd::make_op(
      OpKind::matmul_nt_op, Shape{m, n}, std::move(out), {a, b},
      [ac, bc, m, k, n](const std::vector<double>& g) mutable {
        const auto& av2 = ac.data();
        const auto& bv2 = bc.data();
        if (double* ga = autograd::grad_slot(ac)) {
          // dA = g @ B
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) {
              double gij = g[static_cast<size_t>(i * n + j)];
              const double* brow = &bv2[static_cast<size_t>(j * k)];
              double* garow = &ga[i * k];
              for (int64_t kk = 0; kk < k; ++kk) garow[kk] += gij * brow[kk];
            }
        }
        if (double* gb = autograd::grad_slot(bc)) {
          // dB = g^T @ A
          for (int64_t j = 0; j < n; ++j)
            for (int64_t i = 0; i < m; ++i) {
              double gij = g[static_cast<size_t>(i * n + j)];
              const double* arow = &av2[static_cast<size_t>(i * k)];
              double* gbrow = &gb[j * k];
              for (int64_t kk = 0; kk < k; ++kk) gbrow[kk] += gij * arow[kk];
            }
        }
      });
}

// ---- concat / reshape ----

Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  int64_t r = parts[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
  Shape out_shape = parts[0].shape();
  int64_t axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int64_t i = 0; i < r; ++i)
      if (i != axis && p.dim(i) != out_shape[static_cast<size_t>(i)])
        throw ShapeError("concat: non-axis dims differ, " + shape_str(p.shape()) +
                         " vs " + shape_str(parts[0].shape()));
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<size_t>(i)];

  std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
  int64_t out_stride = axis_total * inner;
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    int64_t chunk = p.dim(axis) * inner;
    const auto& pv = p.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(&out[static_cast<size_t>(o * out_stride + offset)],
                  &pv[static_cast<size_t>(o * chunk)],
                  static_cast<size_t>(chunk) * sizeof(double));
    offset += chunk;
  }

  std::vector<Tensor> inputs = parts;
  std::vector<Tensor> captured = parts;
  return autograd::make_op(
      OpKind::concat_op, out_shape, std::move(out), std::move(inputs),
      [captured, outer, inner, out_stride, axis](const std::vector<double>& g) mutable {
        int64_t offset2 = 0;
        for (Tensor& p : captured) {
          int64_t chunk = p.dim(axis) * inner;
          if (double* gp = autograd::grad_slot(p)) {
            for (int64_t o = 0; o < outer; ++o) {
              const double* src = &g[static_cast<size_t>(o * out_stride + offset2)];
              double* dst = &gp[o * chunk];
              for (int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
            }
          }
          offset2 += chunk;
        }
      });
}

Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t count) {
  int64_t r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("slice: axis out of range");
  int64_t len = a.dim(axis);
  if (start < 0 || count < 1 || start + count > len)
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") exceeds axis extent " +
                     std::to_string(len));
  const Shape& s = a.shape();
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < r; ++i) inner *= s[static_cast<size_t>(i)];

  Shape out_shape = s;
  out_shape[static_cast<size_t>(axis)] = count;
  const auto& av = a.data();
  std::vector<double> out(static_cast<size_t>(outer * count * inner));
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(&out[static_cast<size_t>(o * count * inner)],
                &av[static_cast<size_t>((o * len + start) * inner)],
                static_cast<size_t>(count * inner) * sizeof(double));

  Tensor ac = a;
  return autograd::make_op(
      OpKind::slice_op, std::move(out_shape), std::move(out), {a},
      [ac, outer, inner, len, start, count](const std::vector<double>& g) mutable {
        if (double* ga = autograd::grad_slot(ac)) {
          for (int64_t o = 0; o < outer; ++o) {
            const double* src = &g[static_cast<size_t>(o * count * inner)];
            double* dst = &ga[(o * len + start) * inner];
            for (int64_t i = 0; i < count * inner; ++i) dst[i] += src[i];
          }
        }
      });
}

Tensor reshape(const Tensor& a, Shape new_shape) {
  check_shape(new_shape);
  if (shape_numel(new_shape) != a.numel())
    throw ShapeError("reshape: element count mismatch, " + shape_str(a.shape()) +
                     " -> " + shape_str(new_shape));
  Tensor ac = a;
  return autograd::make_op(OpKind::reshape_op, std::move(new_shape),
                           std::vector<double>(a.data()), {a},
                           [ac](const std::vector<double>& g) mutable {
                             if (double* ga = autograd::grad_slot(ac))
                               for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           });
}

Tensor flatten(const Tensor& a) { return reshape(a, Shape{a.numel()}); }

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor ac = a;
  return autograd::make_op(OpKind::sum_op, Shape{1}, {acc}, {a},
                           [ac](const std::vector<double>& g) mutable {
                             if (double* ga = autograd::grad_slot(ac)) {
                               size_t n = ac.data().size();
                               for (size_t i = 0; i < n; ++i) ga[i] += g[0];
                             }
                           });
}

Tensor mean(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  double inv = 1.0 / static_cast<double>(a.numel());
  Tensor ac = a;
  return autograd::make_op(OpKind::mean_op, Shape{1}, {acc * inv}, {a},
                           [ac, inv](const std::vector<double>& g) mutable {
                             if (double* ga = autograd::grad_slot(ac)) {
                               size_t n = ac.data().size();
                               for (size_t i = 0; i < n; ++i) ga[i] += g[0] * inv;
                             }
                           });
}

// ---- conv2d ----

namespace {

struct ConvGeom {
  int64_t h, w, cin, hk, wk, cout;
  int64_t sy, sx;
  int64_t oh, ow;
  int64_t pad_top, pad_left;
};

ConvGeom conv_geometry(const Tensor& input, const Tensor& kernels, int64_t sy, int64_t sx,
                       Padding padding) {
  if (input.rank() != 3) throw ShapeError("conv2d: input must be H x W x C, got " + shape_str(input.shape()));
  if (kernels.rank() != 4)
    throw ShapeError("conv2d: kernels must be Hk x Wk x C x C', got " + shape_str(kernels.shape()));
  if (sy < 1 || sx < 1) throw ContractError("conv2d: stride components must be >= 1");
  ConvGeom g;
  g.h = input.dim(0);
  g.w = input.dim(1);
  g.cin = input.dim(2);
  g.hk = kernels.dim(0);
  g.wk = kernels.dim(1);
  if (kernels.dim(2) != g.cin)
    throw ShapeError("conv2d: input has " + std::to_string(g.cin) +
                     " channels but kernels expect " + std::to_string(kernels.dim(2)));
  g.cout = kernels.dim(3);
  g.sy = sy;
  g.sx = sx;
  if (padding == Padding::valid) {
    if (g.hk > g.h || g.wk > g.w)
      throw ShapeError("conv2d: kernel " + shape_str(kernels.shape()) +
                       " larger than input " + shape_str(input.shape()));
    g.oh = (g.h - g.hk) / sy + 1;
    g.ow = (g.w - g.wk) / sx + 1;
    g.pad_top = 0;
    g.pad_left = 0;
  } else {
    g.oh = (g.h + sy - 1) / sy;
    g.ow = (g.w + sx - 1) / sx;
    int64_t pad_h = std::max<int64_t>(0, (g.oh - 1) * sy + g.hk - g.h);
    int64_t pad_w = std::max<int64_t>(0, (g.ow - 1) * sx + g.wk - g.w);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
  }
  return g;
}

} // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              int64_t stride_y, int64_t stride_x, Padding padding) {
  ConvGeom g = conv_geometry(input, kernels, stride_y, stride_x, padding);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout))
    throw ShapeError("conv2d: bias must have one entry per output channel");

  const auto& in = input.data();
  const auto& kn = kernels.data();
  std::vector<double> out(static_cast<size_t>(g.oh * g.ow * g.cout), 0.0);

  for (int64_t oy = 0; oy < g.oh; ++oy) {
    for (int64_t ox = 0; ox < g.ow; ++ox) {
      double* orow = &out[static_cast<size_t>((oy * g.ow + ox) * g.cout)];
      if (bias.defined()) {
        const auto& bv = bias.data();
        for (int64_t co = 0; co < g.cout; ++co) orow[co] = bv[static_cast<size_t>(co)];
      }
      for (int64_t kh = 0; kh < g.hk; ++kh) {
        int64_t iy = oy * g.sy - g.pad_top + kh;
        if (iy < 0 || iy >= g.h) continue;
        for (int64_t kw = 0; kw < g.wk; ++kw) {
          int64_t ix = ox * g.sx - g.pad_left + kw;
          if (ix < 0 || ix >= g.w) continue;
          const double* irow = &in[static_cast<size_t>((iy * g.w + ix) * g.cin)];
          const double* krow = &kn[static_cast<size_t>(((kh * g.wk + kw) * g.cin) * g.cout)];
          for (int64_t c = 0; c < g.cin; ++c) {
            double a = irow[c];
            if (a == 0.0) continue;
            const double* kc = &krow[c * g.cout];
            for (int64_t co = 0; co < g.cout; ++co) orow[co] += a * kc[co];
          }
        }
      }
    }
  }

  Tensor ic = input, kc2 = kernels, bc = bias;
  return autograd::make_op(
      OpKind::conv2d_op, Shape{g.oh, g.ow, g.cout}, std::move(out),
      bias.defined() ? std::vector<Tensor>{input, kernels, bias}
                     : std::vector<Tensor>{input, kernels},
      [ic, kc2, bc, g](const std::vector<double>& gout) mutable {
        const auto& in = ic.data();
        const auto& kn = kc2.data();
        double* gi = autograd::grad_slot(ic);
        double* gk = autograd::grad_slot(kc2);
        double* gb = bc.defined() ? autograd::grad_slot(bc) : nullptr;
        for (int64_t oy = 0; oy < g.oh; ++oy) {
          for (int64_t ox = 0; ox < g.ow; ++ox) {
            const double* grow = &gout[static_cast<size_t>((oy * g.ow + ox) * g.cout)];
            if (gb)
              for (int64_t co = 0; co < g.cout; ++co) gb[co] += grow[co];
            if (!gi && !gk) continue;
            for (int64_t kh = 0; kh < g.hk; ++kh) {
              int64_t iy = oy * g.sy - g.pad_top + kh;
              if (iy < 0 || iy >= g.h) continue;
              for (int64_t kw = 0; kw < g.wk; ++kw) {
                int64_t ix = ox * g.sx - g.pad_left + kw;
                if (ix < 0 || ix >= g.w) continue;
                int64_t ibase = (iy * g.w + ix) * g.cin;
                int64_t kbase = (kh * g.wk + kw) * g.cin * g.cout;
                for (int64_t c = 0; c < g.cin; ++c) {
                  const double* kc = &kn[static_cast<size_t>(kbase + c * g.cout)];
                  if (gi) {
                    double acc = 0.0;
                    for (int64_t co = 0; co < g.cout; ++co) acc += grow[co] * kc[co];
                    gi[ibase + c] += acc;
                  }
                  if (gk) {
                    double a = in[static_cast<size_t>(ibase + c)];
                    if (a != 0.0) {
                      double* gkc = &gk[kbase + c * g.cout];
                      for (int64_t co = 0; co < g.cout; ++co) gkc[co] += a * grow[co];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

// ---- affine ----

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw ShapeError("affine: weight must be rank-2");
  int64_t in_dim = w.dim(0), out_dim = w.dim(1);
  bool vec = x.rank() == 1;
  if (!vec && x.rank() != 2) throw ShapeError("affine: input must be rank 1 or 2");
  int64_t rows = vec ? 1 : x.dim(0);
  if ((vec ? x.dim(0) : x.dim(1)) != in_dim)
    throw ShapeError("affine: input width " + shape_str(x.shape()) +
                     " does not match weight " + shape_str(w.shape()));
  if (b.defined() && (b.rank() != 1 || b.dim(0) != out_dim))
    throw ShapeError("affine: bias must be rank-1 of output width");

  const auto& xv = x.data();
  const auto& wv = w.data();
  std::vector<double> out(static_cast<size_t>(rows * out_dim), 0.0);
  for (int64_t i = 0; i < rows; ++i) {
    double* orow = &out[static_cast<size_t>(i * out_dim)];
    if (b.defined()) {
      const auto& bv = b.data();
      for (int64_t j = 0; j < out_dim; ++j) orow[j] = bv[static_cast<size_t>(j)];
    }
    for (int64_t k = 0; k < in_dim; ++k) {
      double xik = xv[static_cast<size_t>(i * in_dim + k)];
      if (xik == 0.0) continue;
      const double* wrow = &wv[static_cast<size_t>(k * out_dim)];
      for (int64_t j = 0; j < out_dim; ++j) orow[j] += xik * wrow[j];
    }
  }

  Shape out_shape = vec ? Shape{out_dim} : Shape{rows, out_dim};
  Tensor xc = x, wc = w, bc = b;
  return autograd::make_op(
      OpKind::affine_op, std::move(out_shape), std::move(out),
      b.defined() ? std::vector<Tensor>{x, w, b} : std::vector<Tensor>{x, w},
      [xc, wc, bc, rows, in_dim, out_dim](const std::vector<double>& g) mutable {
        const auto& xv2 = xc.data();
        const auto& wv2 = wc.data();
        if (double* gx = autograd::grad_slot(xc)) {
          for (int64_t i = 0; i < rows; ++i)
            for (int64_t k = 0; k < in_dim; ++k) {
              const double* grow = &g[static_cast<size_t>(i * out_dim)];
              const double* wrow = &wv2[static_cast<size_t>(k * out_dim)];
              double acc = 0.0;
              for (int64_t j = 0; j < out_dim; ++j) acc += grow[j] * wrow[j];
              gx[i * in_dim + k] += acc;
            }
        }
        if (double* gw = autograd::grad_slot(wc)) {
          for (int64_t i = 0; i < rows; ++i)
            for (int64_t k = 0; k < in_dim; ++k) {
              double xik = xv2[static_cast<size_t>(i * in_dim + k)];
              if (xik == 0.0) continue;
              const double* grow = &g[static_cast<size_t>(i * out_dim)];
              double* gwrow = &gw[k * out_dim];
              for (int64_t j = 0; j < out_dim; ++j) gwrow[j] += xik * grow[j];
            }
        }
        if (bc.defined()) {
          if (double* gb = autograd::grad_slot(bc)) {
            for (int64_t i = 0; i < rows; ++i) {
              const double* grow = &g[static_cast<size_t>(i * out_dim)];
              for (int64_t j = 0; j < out_dim; ++j) gb[j] += grow[j];
            }
          }
        }
      });
}

// ---- patches ----

Tensor extract_patches(const Tensor& x, int64_t patch) {
  if (x.rank() != 3) throw ShapeError("extract_patches: input must be H x L x D");
  int64_t h = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (patch < 1 || h % patch != 0 || l % patch != 0)
    throw ConfigError("extract_patches: patch size " + std::to_string(patch) +
                      " must divide spatial dims " + shape_str(x.shape()));
  int64_t ph = h / patch, pl = l / patch;
  int64_t tokens = ph * pl;
  int64_t tok_len = patch * patch * d;

  const auto& xv = x.data();
  std::vector<double> out(static_cast<size_t>(tokens * tok_len));
  auto src_index = [&](int64_t t, int64_t e) {
    int64_t pr = t / pl, pc = t % pl;
    int64_t dy = e / (patch * d), rem = e % (patch * d);
    int64_t dx = rem / d, c = rem % d;
    return ((pr * patch + dy) * l + (pc * patch + dx)) * d + c;
  };
  for (int64_t t = 0; t < tokens; ++t)
    for (int64_t e = 0; e < tok_len; ++e)
      out[static_cast<size_t>(t * tok_len + e)] = xv[static_cast<size_t>(src_index(t, e))];

  Tensor xc = x;
  return autograd::make_op(
      OpKind::patches_op, Shape{tokens, tok_len}, std::move(out), {x},
      [xc, tokens, tok_len, pl, patch, d, l](const std::vector<double>& g) mutable {
        double* gx = autograd::grad_slot(xc);
        if (!gx) return;
        for (int64_t t = 0; t < tokens; ++t) {
          int64_t pr = t / pl, pc = t % pl;
          for (int64_t e = 0; e < tok_len; ++e) {
            int64_t dy = e / (patch * d), rem = e % (patch * d);
            int64_t dx = rem / d, c = rem % d;
            int64_t src = ((pr * patch + dy) * l + (pc * patch + dx)) * d + c;
            gx[src] += g[static_cast<size_t>(t * tok_len + e)];
          }
        }
      });
}

// ---- layer norm ----

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() != 2) throw ShapeError("layer_norm: input must be T x d");
  int64_t rows = x.dim(0), d = x.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d)
    throw ShapeError("layer_norm: gain/bias must be rank-1 of width d");

  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(static_cast<size_t>(rows));
  for (int64_t i = 0; i < rows; ++i) {
    const double* row = &xv[static_cast<size_t>(i * d)];
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = is;
    for (int64_t j = 0; j < d; ++j) {
      double xh = (row[j] - mu) * is;
      xhat[static_cast<size_t>(i * d + j)] = xh;
      out[static_cast<size_t>(i * d + j)] = gv[static_cast<size_t>(j)] * xh + bv[static_cast<size_t>(j)];
    }
  }

  Tensor xc = x, gc = gamma, bc = beta;
  return autograd::make_op(
      OpKind::layer_norm_op, x.shape(), std::move(out), {x, gamma, beta},
      [xc, gc, bc, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
       d](const std::vector<double>& g) mutable {
        const auto& gv2 = gc.data();
        double* gx = autograd::grad_slot(xc);
        double* gg = autograd::grad_slot(gc);
        double* gb = autograd::grad_slot(bc);
        for (int64_t i = 0; i < rows; ++i) {
          const double* grow = &g[static_cast<size_t>(i * d)];
          const double* xh = &xhat[static_cast<size_t>(i * d)];
          if (gg || gb) {
            for (int64_t j = 0; j < d; ++j) {
              if (gg) gg[j] += grow[j] * xh[j];
              if (gb) gb[j] += grow[j];
            }
          }
          if (gx) {
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (int64_t j = 0; j < d; ++j) {
              double dxh = grow[j] * gv2[static_cast<size_t>(j)];
              mean_dxhat += dxh;
              mean_dxhat_xhat += dxh * xh[j];
            }
            mean_dxhat /= static_cast<double>(d);
            mean_dxhat_xhat /= static_cast<double>(d);
            double is = inv_std[static_cast<size_t>(i)];
            for (int64_t j = 0; j < d; ++j) {
              double dxh = grow[j] * gv2[static_cast<size_t>(j)];
              gx[i * d + j] += is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
            }
          }
        }
      });
}

// ---- dropout ----

Tensor dropout(const Tensor& x, double rate, bool training, RngStream& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) {
    // Identity that still participates in the tape.
    Tensor xc = x;
    return autograd::make_op(OpKind::dropout_op, x.shape(), std::vector<double>(x.data()), {x},
                             [xc](const std::vector<double>& g) mutable {
                               if (double* gx = autograd::grad_slot(xc))
                                 for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                             });
  }
  double keep_scale = 1.0 / (1.0 - rate);
  const auto& xv = x.data();
  std::vector<double> mask(xv.size());
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  Tensor xc = x;
  return autograd::make_op(OpKind::dropout_op, x.shape(), std::move(out), {x},
                           [xc, mask = std::move(mask)](const std::vector<double>& g) mutable {
                             if (double* gx = autograd::grad_slot(xc))
                               for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                           });
}

// ---- gradient check ----

double gradient_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                      double h) {
  Tensor xg = x.clone();
  xg.set_requires_grad(true);
  Tensor y = f(xg);
  if (y.numel() != 1) throw ContractError("gradient_check: f must be scalar-valued");
  if (!std::isfinite(y.value())) throw NumericError("gradient_check: non-finite function value");
  backward(y);
  std::vector<double> analytic(static_cast<size_t>(x.numel()), 0.0);
  if (xg.has_grad()) analytic = xg.grad();

  double max_err = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    Tensor xp = x.clone();
    Tensor xm = x.clone();
    xp.mutable_data()[static_cast<size_t>(i)] += h;
    xm.mutable_data()[static_cast<size_t>(i)] -= h;
    double fp = f(xp).value();
    double fm = f(xm).value();
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("gradient_check: non-finite function value during differencing");
    double numeric = (fp - fm) / (2.0 * h);
    double a = analytic[static_cast<size_t>(i)];
    double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

double gradient_check_sampled(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                              double h, int64_t n_coords, RngStream& rng) {
  Tensor xg = x.clone();
  xg.set_requires_grad(true);
  Tensor y = f(xg);
  if (y.numel() != 1) throw ContractError("gradient_check: f must be scalar-valued");
  if (!std::isfinite(y.value())) throw NumericError("gradient_check: non-finite function value");
  backward(y);
  std::vector<double> analytic(static_cast<size_t>(x.numel()), 0.0);
  if (xg.has_grad()) analytic = xg.grad();

  double max_err = 0.0;
  for (int64_t k = 0; k < n_coords; ++k) {
    int64_t i = rng.uniform_int(0, x.numel() - 1);
    Tensor xp = x.clone();
    Tensor xm = x.clone();
    xp.mutable_data()[static_cast<size_t>(i)] += h;
    xm.mutable_data()[static_cast<size_t>(i)] -= h;
    double fp = f(xp).value();
    double fm = f(xm).value();
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("gradient_check: non-finite function value during differencing");
    double numeric = (fp - fm) / (2.0 * h);
    double a = analytic[static_cast<size_t>(i)];
    double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

} // namespace tfl
