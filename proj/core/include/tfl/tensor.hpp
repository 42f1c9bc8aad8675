#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "tfl/error.hpp"
#include "tfl/rng.hpp"

namespace tfl {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

enum class OpKind {
  add,
  sub,
  mul,
  scale,
  tanh_op,
  relu_op,
  softmax_op,
  matmul_op,
  matmul_nt_op,
  concat_op,
  slice_op,
  reshape_op,
  sum_op,
  mean_op,
  conv2d_op,
  affine_op,
  patches_op,
  layer_norm_op,
  dropout_op,
  luong_attn_op,
  bahdanau_attn_op,
  wing_loss_op,
  mae_op,
  mse_op,
};

struct TensorImpl;

/// Dense n-dimensional float64 tensor with reverse-mode autodiff.
///
/// A Tensor is a cheap shared handle. Tensors produced by ops are linked to the
/// tape that created them; leaves opt into gradients with set_requires_grad().
/// Data buffers are treated as immutable once an op has consumed them, except
/// for leaf parameter updates between iterations and grad accumulation.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);
  static Tensor scalar(double v);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t rank() const;
  int64_t dim(int64_t i) const;
  int64_t numel() const;

  const std::vector<double>& data() const;
  std::vector<double>& mutable_data();

  /// The single element of a scalar tensor.
  double value() const;
  double at(std::initializer_list<int64_t> idx) const;

  Tensor& set_requires_grad(bool v = true);
  bool requires_grad() const;
  bool on_tape() const;

  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();

  /// Deep copy of the data as a fresh leaf (no tape link, no grad).
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }

private:
  friend class AutogradAccess;
  std::shared_ptr<TensorImpl> impl_;
};

struct TapeNode {
  OpKind kind;
  std::vector<Tensor> inputs;
  /// Accumulates input gradients given the output gradient buffer.
  std::function<void(const std::vector<double>& out_grad)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad; // empty until first accumulation
  std::shared_ptr<TapeNode> node;
};

namespace autograd {

/// True if an op consuming these inputs must register a tape node.
bool needs_tape(const std::vector<Tensor>& inputs);

/// Wraps op output data in a Tensor, attaching a tape node when needed.
Tensor make_op(OpKind kind, Shape out_shape, std::vector<double> out_data,
               std::vector<Tensor> inputs,
               std::function<void(const std::vector<double>& out_grad)> backward_fn);

/// Gradient accumulation buffer for `t`, or nullptr if `t` takes no gradient.
double* grad_slot(Tensor& t);

} // namespace autograd

/// Runs reverse-mode accumulation from a scalar loss. Leaf gradients
/// accumulate across repeated calls; interior gradients are recomputed.
/// `seed` is the initial dLoss/dLoss value.
void backward(const Tensor& loss, double seed = 1.0);

// ---- primitive ops ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);

/// Numerically stable softmax along `axis` (negative counts from the back).
/// Slices along the axis are positive and sum to 1.
Tensor softmax(const Tensor& a, int64_t axis = -1);

Tensor matmul(const Tensor& a, const Tensor& b);
/// a @ b^T for 2-D operands sharing their last dim.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor concat(const std::vector<Tensor>& parts, int64_t axis);
/// Contiguous sub-range [start, start+count) along `axis`.
Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t count);
Tensor reshape(const Tensor& a, Shape new_shape);
Tensor flatten(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

enum class Padding { valid, same };

/// 2-D convolution over an H x W x C input with Hk x Wk x C x C' kernels and an
/// optional per-output-channel bias (pass an undefined Tensor for none).
/// `same` padding keeps ceil(H/stride) output rows, zero-padded symmetrically.
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              int64_t stride_y, int64_t stride_x, Padding padding);

/// x @ w + b for rank-1 or rank-2 x; b broadcasts over rows (undefined = none).
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);

/// Reshapes H x L x D into (H*L/P^2) x (P^2*D) row-major patch tokens.
Tensor extract_patches(const Tensor& x, int64_t patch);

/// Per-row layer normalization of a T x d tensor with learned gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// Inverted dropout: zeroes each element with probability `rate` and scales
/// survivors by 1/(1-rate) in training mode; identity in eval mode.
Tensor dropout(const Tensor& x, double rate, bool training, RngStream& rng);

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued function f at x.
double gradient_check(const std::function<Tensor(const Tensor&)>& f,
                      const Tensor& x, double h = 1e-5);

/// Same check restricted to `n_coords` randomly chosen coordinates.
double gradient_check_sampled(const std::function<Tensor(const Tensor&)>& f,
                              const Tensor& x, double h, int64_t n_coords,
                              RngStream& rng);

} // namespace tfl
