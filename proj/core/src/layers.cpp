#include "tfl/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tfl {

namespace {

// Shared backward mass for both channel attentions. With per-row softmax
// weights a and out_i = sum_j a_ij x_j, dL/ds_ij = a_ij g_i (x_j - out_i).
struct SiteAttnSaved {
  std::vector<double> alpha; // sites x D x D
  std::vector<double> out;   // sites x D
};

} // namespace

Tensor luong_channel_attention(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("luong_channel_attention: input must be H x W x D");
  int64_t sites = x.dim(0) * x.dim(1);
  int64_t d = x.dim(2);
  const auto& xv = x.data();

  auto saved = std::make_shared<SiteAttnSaved>();
  saved->alpha.resize(static_cast<size_t>(sites * d * d));
  saved->out.resize(static_cast<size_t>(sites * d));

  for (int64_t s = 0; s < sites; ++s) {
    const double* v = &xv[static_cast<size_t>(s * d)];
    double* a = &saved->alpha[static_cast<size_t>(s * d * d)];
    double* o = &saved->out[static_cast<size_t>(s * d)];
    for (int64_t i = 0; i < d; ++i) {
      double* arow = &a[i * d];
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < d; ++j) {
        arow[j] = v[i] * v[j];
        mx = std::max(mx, arow[j]);
      }
      double denom = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        arow[j] = std::exp(arow[j] - mx);
        denom += arow[j];
      }
      double acc = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        arow[j] /= denom;
        acc += arow[j] * v[j];
      }
      o[i] = acc;
    }
  }

  std::vector<double> out(saved->out);
  Tensor xc = x;
  return autograd::make_op(
      OpKind::luong_attn_op, x.shape(), std::move(out), {x},
      [xc, saved, sites, d](const std::vector<double>& g) mutable {
        double* gx = autograd::grad_slot(xc);
        if (!gx) return;
        const auto& xv2 = xc.data();
        for (int64_t s = 0; s < sites; ++s) {
          const double* v = &xv2[static_cast<size_t>(s * d)];
          const double* a = &saved->alpha[static_cast<size_t>(s * d * d)];
          const double* o = &saved->out[static_cast<size_t>(s * d)];
          const double* gr = &g[static_cast<size_t>(s * d)];
          double* gxs = &gx[s * d];
          for (int64_t i = 0; i < d; ++i) {
            const double* arow = &a[i * d];
            double gi = gr[i];
            if (gi == 0.0) continue;
            for (int64_t j = 0; j < d; ++j) {
              double aij = arow[j];
              // value path
              gxs[j] += aij * gi;
              // score path: s_ij = x_i x_j
              double ds = aij * gi * (v[j] - o[i]);
              gxs[i] += ds * v[j];
              gxs[j] += ds * v[i];
            }
          }
        }
      });
}

Tensor bahdanau_channel_attention(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("bahdanau_channel_attention: input must be H x W x D");
  int64_t sites = x.dim(0) * x.dim(1);
  int64_t d = x.dim(2);
  const auto& xv = x.data();

  auto saved = std::make_shared<SiteAttnSaved>();
  saved->alpha.resize(static_cast<size_t>(sites * d * d));
  saved->out.resize(static_cast<size_t>(sites * d));

  for (int64_t s = 0; s < sites; ++s) {
    const double* v = &xv[static_cast<size_t>(s * d)];
    double* a = &saved->alpha[static_cast<size_t>(s * d * d)];
    double* o = &saved->out[static_cast<size_t>(s * d)];
    for (int64_t i = 0; i < d; ++i) {
      double* arow = &a[i * d];
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < d; ++j) {
        arow[j] = v[j] * std::tanh(v[i] + v[j]);
        mx = std::max(mx, arow[j]);
      }
      double denom = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        arow[j] = std::exp(arow[j] - mx);
        denom += arow[j];
      }
      double acc = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        arow[j] /= denom;
        acc += arow[j] * v[j];
      }
      o[i] = acc;
    }
  }

  std::vector<double> out(saved->out);
  Tensor xc = x;
  return autograd::make_op(
      OpKind::bahdanau_attn_op, x.shape(), std::move(out), {x},
      [xc, saved, sites, d](const std::vector<double>& g) mutable {
        double* gx = autograd::grad_slot(xc);
        if (!gx) return;
        const auto& xv2 = xc.data();
        for (int64_t s = 0; s < sites; ++s) {
          const double* v = &xv2[static_cast<size_t>(s * d)];
          const double* a = &saved->alpha[static_cast<size_t>(s * d * d)];
          const double* o = &saved->out[static_cast<size_t>(s * d)];
          const double* gr = &g[static_cast<size_t>(s * d)];
          double* gxs = &gx[s * d];
          for (int64_t i = 0; i < d; ++i) {
            const double* arow = &a[i * d];
            double gi = gr[i];
            if (gi == 0.0) continue;
            for (int64_t j = 0; j < d; ++j) {
              double aij = arow[j];
              gxs[j] += aij * gi;
              double ds = aij * gi * (v[j] - o[i]);
              double t = std::tanh(v[i] + v[j]);
              double sech2 = 1.0 - t * t;
              gxs[i] += ds * v[j] * sech2;
              gxs[j] += ds * (t + v[j] * sech2);
            }
          }
        }
      });
}

Tensor resnext_block(const Tensor& x, const std::vector<Tensor>& path_kernels,
                     const std::vector<Tensor>& path_biases) {
  if (x.rank() != 3) throw ShapeError("resnext_block: input must be H x W x D");
  int64_t cardinality = static_cast<int64_t>(path_kernels.size());
  if (cardinality < 1) throw ConfigError("resnext_block: at least one path required");
  if (path_biases.size() != path_kernels.size())
    throw ConfigError("resnext_block: one bias per path required");
  int64_t d = x.dim(2);
  if (d % cardinality != 0)
    throw ConfigError("resnext_block: " + std::to_string(d) + " channels not divisible by cardinality " +
                      std::to_string(cardinality));
  int64_t group = d / cardinality;

  if (cardinality == 1) return add(x, conv2d(x, path_kernels[0], path_biases[0], 1, 1, Padding::same));

  std::vector<Tensor> parts;
  parts.reserve(path_kernels.size());
  for (int64_t p = 0; p < cardinality; ++p) {
    Tensor xg = slice(x, 2, p * group, group);
    parts.push_back(conv2d(xg, path_kernels[static_cast<size_t>(p)],
                           path_biases[static_cast<size_t>(p)], 1, 1, Padding::same));
  }
  return add(x, concat(parts, 2));
}

Tensor patch_encode(const Tensor& x, int64_t patch, const Tensor& wp, const Tensor& pos) {
  Tensor tokens = extract_patches(x, patch);
  Tensor projected = affine(tokens, wp, Tensor());
  return add(projected, pos);
}

Tensor multi_head_attention(const Tensor& x, const std::vector<Tensor>& wq,
                            const std::vector<Tensor>& wk, const std::vector<Tensor>& wv,
                            const Tensor& wo) {
  if (x.rank() != 2) throw ShapeError("multi_head_attention: input must be T x dm");
  size_t heads = wq.size();
  if (heads == 0 || wk.size() != heads || wv.size() != heads)
    throw ConfigError("multi_head_attention: projection triple required per head");
  int64_t dh = wq[0].dim(1);
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> head_outs;
  head_outs.reserve(heads);
  for (size_t j = 0; j < heads; ++j) {
    Tensor q = matmul(x, wq[j]);
    Tensor k = matmul(x, wk[j]);
    Tensor v = matmul(x, wv[j]);
    Tensor weights = softmax(scale(matmul_nt(q, k), inv_sqrt), -1);
    head_outs.push_back(matmul(weights, v));
  }
  return matmul(concat(head_outs, 1), wo);
}

Tensor transformer_block(const Tensor& x, const TransformerParams& p) {
  Tensor h = add(x, multi_head_attention(layer_norm(x, p.ln1_gamma, p.ln1_beta), p.wq, p.wk,
                                         p.wv, p.wo));
  Tensor z = layer_norm(h, p.ln2_gamma, p.ln2_beta);
  Tensor ffn = affine(relu(affine(z, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b);
  return add(h, ffn);
}

// ---- Conv2dLayer ----

Conv2dLayer::Conv2dLayer(std::string name, Tensor kernel_, Tensor bias_, int64_t stride,
                         Padding padding, bool relu_after)
    : Layer(std::move(name)), kernel(std::move(kernel_)), bias(std::move(bias_)),
      stride_(stride), padding_(padding), relu_(relu_after) {}

Tensor Conv2dLayer::forward(const Tensor& x, ForwardCtx& ctx) const {
  Tensor y = conv2d(x, kernel, bias, stride_, stride_, padding_);
  if (relu_) y = relu(y);
  ctx.note(name_, y);
  return y;
}

Shape Conv2dLayer::output_shape(const Shape& in) const {
  if (in.size() != 3) throw ShapeError(name_ + ": input must be H x W x C");
  int64_t h = in[0], w = in[1];
  int64_t oh, ow;
  if (padding_ == Padding::same) {
    oh = (h + stride_ - 1) / stride_;
    ow = (w + stride_ - 1) / stride_;
  } else {
    oh = (h - kernel.dim(0)) / stride_ + 1;
    ow = (w - kernel.dim(1)) / stride_ + 1;
  }
  if (in[2] != kernel.dim(2))
    throw ConfigError(name_ + ": expects " + std::to_string(kernel.dim(2)) +
                      " input channels, got " + std::to_string(in[2]));
  return {oh, ow, kernel.dim(3)};
}

void Conv2dLayer::visit_params(const ParamVisitor& fn) {
  fn(name_ + ".kernel", kernel);
  fn(name_ + ".bias", bias);
}

// ---- ResNeXtLayer ----

ResNeXtLayer::ResNeXtLayer(std::string name, std::vector<Tensor> kernels, std::vector<Tensor> biases)
    : Layer(std::move(name)), path_kernels(std::move(kernels)), path_biases(std::move(biases)) {}

Tensor ResNeXtLayer::forward(const Tensor& x, ForwardCtx& ctx) const {
  Tensor y = resnext_block(x, path_kernels, path_biases);
  ctx.note(name_, y);
  return y;
}

Shape ResNeXtLayer::output_shape(const Shape& in) const {
  if (in.size() != 3) throw ShapeError(name_ + ": input must be H x W x D");
  int64_t c = static_cast<int64_t>(path_kernels.size());
  if (in[2] % c != 0)
    throw ConfigError(name_ + ": " + std::to_string(in[2]) +
                      " channels not divisible by cardinality " + std::to_string(c));
  if (path_kernels[0].dim(2) != in[2] / c)
    throw ConfigError(name_ + ": path kernels sized for " +
                      std::to_string(path_kernels[0].dim(2) * c) + " channels, got " +
                      std::to_string(in[2]));
  return in;
}

void ResNeXtLayer::visit_params(const ParamVisitor& fn) {
  for (size_t p = 0; p < path_kernels.size(); ++p) {
    fn(name_ + ".path" + std::to_string(p) + ".kernel", path_kernels[p]);
    fn(name_ + ".path" + std::to_string(p) + ".bias", path_biases[p]);
  }
}

// ---- ChannelAttentionLayer ----

ChannelAttentionLayer::ChannelAttentionLayer(std::string name, Score score)
    : Layer(std::move(name)), score_(score) {}

Tensor ChannelAttentionLayer::forward(const Tensor& x, ForwardCtx& ctx) const {
  Tensor y = score_ == Score::luong ? luong_channel_attention(x) : bahdanau_channel_attention(x);
  ctx.note(name_, y);
  return y;
}

Shape ChannelAttentionLayer::output_shape(const Shape& in) const {
  if (in.size() != 3) throw ShapeError(name_ + ": input must be H x W x D");
  return in;
}

void ChannelAttentionLayer::visit_params(const ParamVisitor&) {}

// ---- PatchEncoderLayer ----

PatchEncoderLayer::PatchEncoderLayer(std::string name, int64_t patch, Tensor wp_, Tensor pos_)
    : Layer(std::move(name)), wp(std::move(wp_)), pos(std::move(pos_)), patch_(patch) {}

Tensor PatchEncoderLayer::forward(const Tensor& x, ForwardCtx& ctx) const {
  Tensor y = patch_encode(x, patch_, wp, pos);
  ctx.note(name_, y);
  return y;
}

Shape PatchEncoderLayer::output_shape(const Shape& in) const {
  if (in.size() != 3) throw ShapeError(name_ + ": input must be H x L x D");
  if (in[0] % patch_ != 0 || in[1] % patch_ != 0)
    throw ConfigError(name_ + ": patch size " + std::to_string(patch_) +
                      " does not divide spatial dims " + shape_str(in));
  int64_t tokens = (in[0] / patch_) * (in[1] / patch_);
  if (in[2] * patch_ * patch_ != wp.dim(0))
    throw ConfigError(name_ + ": projection sized for " + std::to_string(wp.dim(0)) +
                      "-wide patches, got " + std::to_string(in[2] * patch_ * patch_));
  if (tokens != pos.dim(0))
    throw ConfigError(name_ + ": positional table sized for " + std::to_string(pos.dim(0)) +
                      " tokens, got " + std::to_string(tokens));
  return {tokens, wp.dim(1)};
}

void PatchEncoderLayer::visit_params(const ParamVisitor& fn) {
  fn(name_ + ".wp", wp);
  fn(name_ + ".pos", pos);
}

// ---- TransformerLayer ----

TransformerLayer::TransformerLayer(std::string name, TransformerParams p)
    : Layer(std::move(name)), params(std::move(p)) {}

Tensor TransformerLayer::forward(const Tensor& x, ForwardCtx& ctx) const {
  Tensor y = transformer_block(x, params);
  ctx.note(name_, y);
  return y;
}

Shape TransformerLayer::output_shape(const Shape& in) const {
  if (in.size() != 2) throw ShapeError(name_ + ": input must be T x dm");
  int64_t dm = params.wo.dim(1);
  if (in[1] != dm)
    throw ConfigError(name_ + ": model dim " + std::to_string(dm) + ", got " +
                      std::to_string(in[1]));
  return in;
}

void TransformerLayer::visit_params(const ParamVisitor& fn) {
  fn(name_ + ".ln1.gamma", params.ln1_gamma);
  fn(name_ + ".ln1.beta", params.ln1_beta);
  for (size_t j = 0; j < params.wq.size(); ++j) {
    fn(name_ + ".wq" + std::to_string(j), params.wq[j]);
    fn(name_ + ".wk" + std::to_string(j), params.wk[j]);
    fn(name_ + ".wv" + std::to_string(j), params.wv[j]);
  }
  fn(name_ + ".wo", params.wo);
  fn(name_ + ".ln2.gamma", params.ln2_gamma);
  fn(name_ + ".ln2.beta", params.ln2_beta);
  fn(name_ + ".fc1.w", params.fc1_w);
  fn(name_ + ".fc1.b", params.fc1_b);
  fn(name_ + ".fc2.w", params.fc2_w);
  fn(name_ + ".fc2.b", params.fc2_b);
}

// ---- DenseLayer ----

DenseLayer::DenseLayer(std::string name, Tensor w_, Tensor b_, bool relu_after)
    : Layer(std::move(name)), w(std::move(w_)), b(std::move(b_)), relu_(relu_after) {}

Tensor DenseLayer::forward(const Tensor& x, ForwardCtx& ctx) const {
  Tensor y = affine(x, w, b);
  if (relu_) y = relu(y);
  ctx.note(name_, y);
  return y;
}

Shape DenseLayer::output_shape(const Shape& in) const {
  if (in.size() == 1) {
    if (in[0] != w.dim(0))
      throw ConfigError(name_ + ": expects width " + std::to_string(w.dim(0)) + ", got " +
                        std::to_string(in[0]));
    return {w.dim(1)};
  }
  if (in.size() == 2) {
    if (in[1] != w.dim(0))
      throw ConfigError(name_ + ": expects width " + std::to_string(w.dim(0)) + ", got " +
                        std::to_string(in[1]));
    return {in[0], w.dim(1)};
  }
  throw ShapeError(name_ + ": input must be rank 1 or 2");
}

void DenseLayer::visit_params(const ParamVisitor& fn) {
  fn(name_ + ".w", w);
  fn(name_ + ".b", b);
}

// ---- DropoutLayer ----

DropoutLayer::DropoutLayer(std::string name, double rate_) : Layer(std::move(name)), rate(rate_) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError(name_ + ": dropout rate must be in [0, 1), got " + std::to_string(rate));
}

Tensor DropoutLayer::forward(const Tensor& x, ForwardCtx& ctx) const {
  if (ctx.training && rate > 0.0 && !ctx.rng)
    throw ContractError(name_ + ": training-mode dropout requires a ForwardCtx rng");
  static RngStream unused(0);
  Tensor y = dropout(x, rate, ctx.training, ctx.rng ? *ctx.rng : unused);
  ctx.note(name_, y);
  return y;
}

Shape DropoutLayer::output_shape(const Shape& in) const { return in; }

void DropoutLayer::visit_params(const ParamVisitor&) {}

} // namespace tfl
