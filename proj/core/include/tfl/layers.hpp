#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "tfl/tensor.hpp"

namespace tfl {

// ---- layer ops ----
//
// Channel-wise self-attention treats the D channel values at each spatial site
// as D scalar tokens with query = key = value = the channel value itself, and
// runs attention independently per site. Neither variant has trainable weights.

/// score(i, j) = x_i * x_j.
Tensor luong_channel_attention(const Tensor& x);

/// score(i, j) = x_j * tanh(x_i + x_j).
Tensor bahdanau_channel_attention(const Tensor& x);

/// Aggregated-transform residual block: the input's channels are split into
/// `path_kernels.size()` groups, each group convolved by its own k x k kernel
/// (stride 1, same padding), the group outputs concatenated and added to x.
/// Equivalent to x + grouped_conv(x).
Tensor resnext_block(const Tensor& x, const std::vector<Tensor>& path_kernels,
                     const std::vector<Tensor>& path_biases);

/// Patch embedding: H x L x D -> (HL/P^2) x dm via flattened P x P patches
/// projected by wp, plus a learned positional embedding per patch index.
Tensor patch_encode(const Tensor& x, int64_t patch, const Tensor& wp, const Tensor& pos);

/// Scaled dot-product multi-head self-attention; one projection triple per
/// head, head outputs concatenated and projected by wo. No biases.
Tensor multi_head_attention(const Tensor& x, const std::vector<Tensor>& wq,
                            const std::vector<Tensor>& wk, const std::vector<Tensor>& wv,
                            const Tensor& wo);

struct TransformerParams {
  Tensor ln1_gamma, ln1_beta;
  std::vector<Tensor> wq, wk, wv;
  Tensor wo;
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1_w, fc1_b; // dm -> 4*dm, relu
  Tensor fc2_w, fc2_b; // 4*dm -> dm
};

/// Pre-norm transformer block: x + MHA(norm(x)), then + FFN(norm(.)).
Tensor transformer_block(const Tensor& x, const TransformerParams& p);

// ---- layer objects ----

struct ForwardCtx {
  bool training = false;
  RngStream* rng = nullptr; // required when training with dropout
  std::map<std::string, Tensor>* record = nullptr;

  void note(const std::string& name, const Tensor& t) {
    if (record) (*record)[name] = t;
  }
};

using ParamVisitor = std::function<void(const std::string& name, Tensor& value)>;

/// A named, parameterized stage of a model. Forward is pure given
/// (params, input, ctx) and registers tape nodes for training.
class Layer {
public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  const std::string& name() const { return name_; }
  virtual Tensor forward(const Tensor& x, ForwardCtx& ctx) const = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual void visit_params(const ParamVisitor& fn) = 0;

protected:
  std::string name_;
};

class Conv2dLayer : public Layer {
public:
  Conv2dLayer(std::string name, Tensor kernel, Tensor bias, int64_t stride, Padding padding,
              bool relu_after);
  Tensor forward(const Tensor& x, ForwardCtx& ctx) const override;
  Shape output_shape(const Shape& in) const override;
  void visit_params(const ParamVisitor& fn) override;

  Tensor kernel, bias;

private:
  int64_t stride_;
  Padding padding_;
  bool relu_;
};

class ResNeXtLayer : public Layer {
public:
  ResNeXtLayer(std::string name, std::vector<Tensor> path_kernels, std::vector<Tensor> path_biases);
  Tensor forward(const Tensor& x, ForwardCtx& ctx) const override;
  Shape output_shape(const Shape& in) const override;
  void visit_params(const ParamVisitor& fn) override;

  std::vector<Tensor> path_kernels, path_biases;
};

class ChannelAttentionLayer : public Layer {
public:
  enum class Score { luong, bahdanau };
  ChannelAttentionLayer(std::string name, Score score);
  Tensor forward(const Tensor& x, ForwardCtx& ctx) const override;
  Shape output_shape(const Shape& in) const override;
  void visit_params(const ParamVisitor& fn) override;

private:
  Score score_;
};

class PatchEncoderLayer : public Layer {
public:
  PatchEncoderLayer(std::string name, int64_t patch, Tensor wp, Tensor pos);
  Tensor forward(const Tensor& x, ForwardCtx& ctx) const override;
  Shape output_shape(const Shape& in) const override;
  void visit_params(const ParamVisitor& fn) override;

  Tensor wp, pos;

private:
  int64_t patch_;
};

class TransformerLayer : public Layer {
public:
  TransformerLayer(std::string name, TransformerParams params);
  Tensor forward(const Tensor& x, ForwardCtx& ctx) const override;
  Shape output_shape(const Shape& in) const override;
  void visit_params(const ParamVisitor& fn) override;

  TransformerParams params;
};

class DenseLayer : public Layer {
public:
  DenseLayer(std::string name, Tensor w, Tensor b, bool relu_after);
  Tensor forward(const Tensor& x, ForwardCtx& ctx) const override;
  Shape output_shape(const Shape& in) const override;
  void visit_params(const ParamVisitor& fn) override;

  Tensor w, b;

private:
  bool relu_;
};

class DropoutLayer : public Layer {
public:
  DropoutLayer(std::string name, double rate);
  Tensor forward(const Tensor& x, ForwardCtx& ctx) const override;
  Shape output_shape(const Shape& in) const override;
  void visit_params(const ParamVisitor& fn) override;

  double rate;
};

} // namespace tfl
