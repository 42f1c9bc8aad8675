#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tfl/layers.hpp"

using namespace tfl;

namespace {

Tensor randn(Shape s, RngStream& rng, double stddev = 1.0) {
  std::vector<double> v(static_cast<size_t>(shape_numel(s)));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(s), std::move(v));
}

// Reference channel attention evaluated straight from the definitions, one
// spatial site at a time.
std::vector<double> site_attention_ref(const std::vector<double>& x, int64_t d, bool bahdanau) {
  std::vector<double> out(x.size());
  int64_t sites = static_cast<int64_t>(x.size()) / d;
  for (int64_t s = 0; s < sites; ++s) {
    const double* v = &x[static_cast<size_t>(s * d)];
    for (int64_t i = 0; i < d; ++i) {
      std::vector<double> e(static_cast<size_t>(d));
      double denom = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        double score = bahdanau ? v[j] * std::tanh(v[i] + v[j]) : v[i] * v[j];
        e[static_cast<size_t>(j)] = std::exp(score);
        denom += e[static_cast<size_t>(j)];
      }
      double acc = 0.0;
      for (int64_t j = 0; j < d; ++j) acc += e[static_cast<size_t>(j)] / denom * v[j];
      out[static_cast<size_t>(s * d + i)] = acc;
    }
  }
  return out;
}

} // namespace

TEST_CASE("luong channel attention matches the two-channel hand computation") {
  // One site, x = [0, 1]: scores for token 0 are [0, 0] so out_0 = 0.5;
  // for token 1 they are [0, 1] so out_1 = e/(1+e) = sigmoid(1).
  Tensor x({1, 1, 2}, {0.0, 1.0});
  Tensor y = luong_channel_attention(x);
  CHECK(y.at({0, 0, 0}) == doctest::Approx(0.5));
  CHECK(y.at({0, 0, 1}) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
  CHECK(y.at({0, 0, 1}) == doctest::Approx(0.731058578630).epsilon(1e-9));
}

TEST_CASE("bahdanau channel attention matches the two-channel hand computation") {
  Tensor x({1, 1, 2}, {0.0, 1.0});
  Tensor y = bahdanau_channel_attention(x);
  auto want = site_attention_ref(x.data(), 2, true);
  CHECK(y.at({0, 0, 0}) == doctest::Approx(want[0]).epsilon(1e-12));
  CHECK(y.at({0, 0, 1}) == doctest::Approx(want[1]).epsilon(1e-12));
  // Frozen values from the same definition evaluated independently.
  CHECK(y.at({0, 0, 0}) == doctest::Approx(0.681690).epsilon(1e-5));
  CHECK(y.at({0, 0, 1}) == doctest::Approx(0.723937).epsilon(1e-5));
}

TEST_CASE("channel attentions match the per-site reference on random input") {
  RngStream rng(7);
  Tensor x = randn({3, 4, 5}, rng);
  auto lw = site_attention_ref(x.data(), 5, false);
  auto bw = site_attention_ref(x.data(), 5, true);
  Tensor ly = luong_channel_attention(x);
  Tensor by = bahdanau_channel_attention(x);
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(ly.data()[i] == doctest::Approx(lw[static_cast<size_t>(i)]).epsilon(1e-12));
    CHECK(by.data()[i] == doctest::Approx(bw[static_cast<size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("channel attention sites are independent") {
  RngStream rng(17);
  Tensor two = randn({1, 2, 3}, rng);
  Tensor site0(Shape{1, 1, 3}, {two.at({0, 0, 0}), two.at({0, 0, 1}), two.at({0, 0, 2})});
  Tensor both = luong_channel_attention(two);
  Tensor alone = luong_channel_attention(site0);
  for (int64_t c = 0; c < 3; ++c)
    CHECK(both.at({0, 0, c}) == doctest::Approx(alone.at({0, 0, c})).epsilon(1e-12));
}

TEST_CASE("channel attention gradient checks") {
  RngStream rng(27);
  Tensor x = randn({2, 2, 4}, rng);
  Tensor w = randn({2 * 2 * 4}, rng);
  auto head = [&](const Tensor& t) { return sum(mul(flatten(t), w)); };

  double el = gradient_check([&](const Tensor& t) { return head(luong_channel_attention(t)); }, x);
  CHECK(el < 1e-6);
  double eb = gradient_check([&](const Tensor& t) { return head(bahdanau_channel_attention(t)); }, x);
  CHECK(eb < 1e-6);
}

TEST_CASE("resnext block with zero weights is the identity") {
  RngStream rng(37);
  Tensor x = randn({3, 3, 4}, rng);
  std::vector<Tensor> ks, bs;
  for (int p = 0; p < 2; ++p) {
    ks.push_back(Tensor({3, 3, 2, 2}, 0.0));
    bs.push_back(Tensor({2}, 0.0));
  }
  Tensor y = resnext_block(x, ks, bs);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("resnext block with one path is x + conv(x)") {
  RngStream rng(47);
  Tensor x = randn({4, 4, 3}, rng);
  Tensor k = randn({3, 3, 3, 3}, rng);
  Tensor b = randn({3}, rng);
  Tensor y = resnext_block(x, {k}, {b});
  Tensor want = add(x, conv2d(x, k, b, 1, 1, Padding::same));
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
}

TEST_CASE("resnext block equals grouped convolution plus input") {
  RngStream rng(57);
  int64_t d = 4, c = 2, g = d / c;
  Tensor x = randn({3, 5, d}, rng);
  std::vector<Tensor> ks, bs;
  for (int64_t p = 0; p < c; ++p) {
    ks.push_back(randn({3, 3, g, g}, rng));
    bs.push_back(randn({g}, rng));
  }
  Tensor y = resnext_block(x, ks, bs);

  // Oracle: run each group through conv2d on a manually copied slice.
  for (int64_t p = 0; p < c; ++p) {
    std::vector<double> part(static_cast<size_t>(3 * 5 * g));
    for (int64_t i = 0; i < 3 * 5; ++i)
      for (int64_t j = 0; j < g; ++j)
        part[static_cast<size_t>(i * g + j)] = x.data()[static_cast<size_t>(i * d + p * g + j)];
    Tensor xg({3, 5, g}, part);
    Tensor want = conv2d(xg, ks[static_cast<size_t>(p)], bs[static_cast<size_t>(p)], 1, 1,
                         Padding::same);
    for (int64_t i = 0; i < 3 * 5; ++i)
      for (int64_t j = 0; j < g; ++j) {
        double got = y.data()[static_cast<size_t>(i * d + p * g + j)];
        double x0 = x.data()[static_cast<size_t>(i * d + p * g + j)];
        CHECK(got == doctest::Approx(x0 + want.data()[static_cast<size_t>(i * g + j)]).epsilon(1e-12));
      }
  }
}

TEST_CASE("resnext block rejects indivisible cardinality") {
  Tensor x({2, 2, 3}, 0.0);
  std::vector<Tensor> ks = {Tensor({3, 3, 1, 1}, 0.0), Tensor({3, 3, 1, 1}, 0.0)};
  std::vector<Tensor> bs = {Tensor({1}, 0.0), Tensor({1}, 0.0)};
  CHECK_THROWS_AS(resnext_block(x, ks, bs), ConfigError);
}

TEST_CASE("resnext block gradient check") {
  RngStream rng(67);
  Tensor x = randn({3, 3, 4}, rng);
  std::vector<Tensor> ks = {randn({3, 3, 2, 2}, rng), randn({3, 3, 2, 2}, rng)};
  std::vector<Tensor> bs = {randn({2}, rng), randn({2}, rng)};
  Tensor w = randn({3 * 3 * 4}, rng);
  auto head = [&](const Tensor& t) { return sum(mul(flatten(t), w)); };

  double ex = gradient_check([&](const Tensor& t) { return head(resnext_block(t, ks, bs)); }, x);
  CHECK(ex < 1e-6);
  double ek = gradient_check(
      [&](const Tensor& t) { return head(resnext_block(x, {t, ks[1]}, bs)); }, ks[0]);
  CHECK(ek < 1e-6);
}

TEST_CASE("patch_encode projects tokens and adds positions") {
  RngStream rng(77);
  Tensor x = randn({4, 4, 2}, rng);
  Tensor wp = randn({8, 3}, rng);
  Tensor pos = randn({4, 3}, rng);
  Tensor y = patch_encode(x, 2, wp, pos);
  CHECK(y.shape() == Shape{4, 3});
  Tensor want = add(affine(extract_patches(x, 2), wp, Tensor()), pos);
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));

  double err = gradient_check([&](const Tensor& t) { return sum(mul(patch_encode(x, 2, wp, t), patch_encode(x, 2, wp, t))); }, pos);
  CHECK(err < 1e-6);
}

TEST_CASE("multi_head_attention with one head reduces to scaled dot attention") {
  RngStream rng(87);
  int64_t t = 3, dm = 4, dh = 4;
  Tensor x = randn({t, dm}, rng);
  Tensor wq = randn({dm, dh}, rng);
  Tensor wk = randn({dm, dh}, rng);
  Tensor wv = randn({dm, dh}, rng);
  Tensor wo = randn({dh, dm}, rng);
  Tensor y = multi_head_attention(x, {wq}, {wk}, {wv}, wo);
  CHECK(y.shape() == Shape{t, dm});

  Tensor q = matmul(x, wq), k = matmul(x, wk), v = matmul(x, wv);
  Tensor attn = softmax(scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh))), -1);
  Tensor want = matmul(matmul(attn, v), wo);
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
}

TEST_CASE("multi_head_attention gradient check") {
  RngStream rng(97);
  int64_t t = 3, dm = 4, heads = 2, dh = 2;
  Tensor x = randn({t, dm}, rng);
  std::vector<Tensor> wq, wk, wv;
  for (int64_t j = 0; j < heads; ++j) {
    wq.push_back(randn({dm, dh}, rng));
    wk.push_back(randn({dm, dh}, rng));
    wv.push_back(randn({dm, dh}, rng));
  }
  Tensor wo = randn({heads * dh, dm}, rng);
  Tensor w = randn({t * dm}, rng);
  auto head = [&](const Tensor& y) { return sum(mul(flatten(y), w)); };

  double ex = gradient_check(
      [&](const Tensor& t2) { return head(multi_head_attention(t2, wq, wk, wv, wo)); }, x);
  CHECK(ex < 1e-6);
  double eq = gradient_check(
      [&](const Tensor& t2) { return head(multi_head_attention(x, {t2, wq[1]}, wk, wv, wo)); },
      wq[0]);
  CHECK(eq < 1e-6);
  double eo = gradient_check(
      [&](const Tensor& t2) { return head(multi_head_attention(x, wq, wk, wv, t2)); }, wo);
  CHECK(eo < 1e-6);
}

namespace {

TransformerParams make_params(int64_t dm, int64_t heads, RngStream& rng) {
  TransformerParams p;
  int64_t dh = dm / heads;
  p.ln1_gamma = Tensor({dm}, 1.0);
  p.ln1_beta = Tensor({dm}, 0.0);
  for (int64_t j = 0; j < heads; ++j) {
    p.wq.push_back(randn({dm, dh}, rng, 0.5));
    p.wk.push_back(randn({dm, dh}, rng, 0.5));
    p.wv.push_back(randn({dm, dh}, rng, 0.5));
  }
  p.wo = randn({dm, dm}, rng, 0.5);
  p.ln2_gamma = Tensor({dm}, 1.0);
  p.ln2_beta = Tensor({dm}, 0.0);
  p.fc1_w = randn({dm, 4 * dm}, rng, 0.5);
  p.fc1_b = Tensor({4 * dm}, 0.0);
  p.fc2_w = randn({4 * dm, dm}, rng, 0.5);
  p.fc2_b = Tensor({dm}, 0.0);
  return p;
}

} // namespace

TEST_CASE("transformer block with zeroed output projections is the identity") {
  RngStream rng(107);
  int64_t dm = 4;
  TransformerParams p = make_params(dm, 2, rng);
  p.wo = Tensor({dm, dm}, 0.0);
  p.fc2_w = Tensor({4 * dm, dm}, 0.0);
  p.fc2_b = Tensor({dm}, 0.0);
  Tensor x = randn({3, dm}, rng);
  Tensor y = transformer_block(x, p);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
}

TEST_CASE("transformer block gradient check") {
  RngStream rng(117);
  int64_t dm = 4;
  TransformerParams p = make_params(dm, 2, rng);
  Tensor x = randn({3, dm}, rng);
  Tensor w = randn({3 * dm}, rng);
  auto head = [&](const Tensor& y) { return sum(mul(flatten(y), w)); };

  double ex = gradient_check([&](const Tensor& t) { return head(transformer_block(t, p)); }, x);
  CHECK(ex < 1e-5);
  double ew = gradient_check(
      [&](const Tensor& t) {
        TransformerParams q = p;
        q.fc1_w = t;
        return head(transformer_block(x, q));
      },
      p.fc1_w);
  CHECK(ew < 1e-5);
}

TEST_CASE("layer objects expose named params and forward correctly") {
  RngStream rng(127);
  Tensor k = randn({3, 3, 2, 4}, rng);
  Tensor b = randn({4}, rng);
  Conv2dLayer conv("stem0.conv", k, b, 1, Padding::same, true);

  std::vector<std::string> names;
  conv.visit_params([&](const std::string& n, Tensor&) { names.push_back(n); });
  CHECK(names == std::vector<std::string>{"stem0.conv.kernel", "stem0.conv.bias"});

  Tensor x = randn({4, 4, 2}, rng);
  ForwardCtx ctx;
  std::map<std::string, Tensor> rec;
  ctx.record = &rec;
  Tensor y = conv.forward(x, ctx);
  CHECK(y.shape() == conv.output_shape(x.shape()));
  CHECK(rec.count("stem0.conv") == 1);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] >= 0.0);

  Tensor want = relu(conv2d(x, k, b, 1, 1, Padding::same));
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
}

TEST_CASE("dropout layer demands an rng only when it matters") {
  DropoutLayer drop("head.drop", 0.1);
  Tensor x({4}, 1.0);
  ForwardCtx eval_ctx;
  Tensor y = drop.forward(x, eval_ctx);
  for (int64_t i = 0; i < 4; ++i) CHECK(y.data()[i] == 1.0);

  ForwardCtx train_ctx;
  train_ctx.training = true;
  CHECK_THROWS_AS(drop.forward(x, train_ctx), ContractError);

  RngStream rng(1);
  train_ctx.rng = &rng;
  Tensor y2 = drop.forward(x, train_ctx);
  CHECK(y2.numel() == 4);

  CHECK_THROWS_AS(DropoutLayer("bad", 1.0), ConfigError);
}
