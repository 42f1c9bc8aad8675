#include "tfl/model.hpp"

#include <cmath>
#include <set>
#include <sstream>

namespace tfl {

namespace {

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Weight initialization is keyed by parameter name so that build order and
// component count never shift any tensor's values.
struct Init {
  uint64_t seed;

  Tensor he(Shape s, int64_t fan_in, const std::string& name) const {
    RngStream rng(seed, fnv1a(name));
    double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<double> v(static_cast<size_t>(shape_numel(s)));
    for (auto& x : v) x = rng.normal(0.0, stddev);
    Tensor t(std::move(s), std::move(v));
    t.set_requires_grad();
    return t;
  }

  Tensor gauss(Shape s, double stddev, const std::string& name) const {
    RngStream rng(seed, fnv1a(name));
    std::vector<double> v(static_cast<size_t>(shape_numel(s)));
    for (auto& x : v) x = rng.normal(0.0, stddev);
    Tensor t(std::move(s), std::move(v));
    t.set_requires_grad();
    return t;
  }

  static Tensor fill(Shape s, double value) {
    Tensor t(std::move(s), value);
    t.set_requires_grad();
    return t;
  }
};

void require_positive(const char* what, int64_t v) {
  if (v < 1) throw ConfigError(std::string(what) + " must be at least 1, got " + std::to_string(v));
}

} // namespace

std::string to_string(StemKind k) {
  switch (k) {
    case StemKind::conv: return "conv";
    case StemKind::resnext: return "resnext";
    case StemKind::alt_conv_luong: return "alt_conv_luong";
    case StemKind::alt_conv_bahdanau: return "alt_conv_bahdanau";
    case StemKind::alt_conv_resnext: return "alt_conv_resnext";
  }
  throw LookupError("unhandled stem kind");
}

std::string to_string(BranchKind k) {
  switch (k) {
    case BranchKind::none: return "none";
    case BranchKind::luong: return "luong";
    case BranchKind::bahdanau: return "bahdanau";
    case BranchKind::vit: return "vit";
  }
  throw LookupError("unhandled branch kind");
}

StemKind stem_kind_from(const std::string& s) {
  if (s == "conv") return StemKind::conv;
  if (s == "resnext") return StemKind::resnext;
  if (s == "alt_conv_luong") return StemKind::alt_conv_luong;
  if (s == "alt_conv_bahdanau") return StemKind::alt_conv_bahdanau;
  if (s == "alt_conv_resnext") return StemKind::alt_conv_resnext;
  throw LookupError("unknown stem kind '" + s + "'");
}

BranchKind branch_kind_from(const std::string& s) {
  if (s == "none") return BranchKind::none;
  if (s == "luong") return BranchKind::luong;
  if (s == "bahdanau") return BranchKind::bahdanau;
  if (s == "vit") return BranchKind::vit;
  throw LookupError("unknown branch kind '" + s + "'");
}

ModelSpec catalog(const std::string& id) {
  if (id.size() != 3 || id[1] != '-')
    throw LookupError("unknown catalog id '" + id + "' (expected letter-digit, e.g. A-3)");
  ModelSpec spec;
  switch (id[0]) {
    case 'C': spec.stem.kind = StemKind::conv; break;
    case 'R': spec.stem.kind = StemKind::resnext; break;
    case 'L': spec.stem.kind = StemKind::alt_conv_luong; break;
    case 'B': spec.stem.kind = StemKind::alt_conv_bahdanau; break;
    case 'A': spec.stem.kind = StemKind::alt_conv_resnext; break;
    default: throw LookupError("unknown catalog id '" + id + "'");
  }
  switch (id[2]) {
    case '1': spec.branch.kind = BranchKind::none; break;
    case '2': spec.branch.kind = BranchKind::luong; break;
    case '3': spec.branch.kind = BranchKind::bahdanau; break;
    case '4': spec.branch.kind = BranchKind::vit; break;
    default: throw LookupError("unknown catalog id '" + id + "'");
  }
  return spec;
}

std::vector<std::string> catalog_ids() {
  std::vector<std::string> ids;
  for (char letter : {'C', 'R', 'L', 'B', 'A'})
    for (char digit : {'1', '2', '3', '4'}) ids.push_back(std::string{letter, '-', digit});
  return ids;
}

ModelSpec ablate_last_block(const ModelSpec& spec) {
  if (spec.stem.depth < 2)
    throw ContractError("cannot ablate a depth-" + std::to_string(spec.stem.depth) + " stem");
  ModelSpec out = spec;
  out.stem.depth -= 1;
  return out;
}

std::map<std::string, std::string> model_spec_to_config(const ModelSpec& spec) {
  auto num = [](auto v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  return {
      {"model.stem", to_string(spec.stem.kind)},
      {"model.stem_depth", num(spec.stem.depth)},
      {"model.stem_width", num(spec.stem.width)},
      {"model.stem_kernel", num(spec.stem.kernel)},
      {"model.cardinality", num(spec.stem.cardinality)},
      {"model.branch", to_string(spec.branch.kind)},
      {"model.branch_depth", num(spec.branch.depth)},
      {"model.patch", num(spec.branch.patch)},
      {"model.dm", num(spec.branch.dm)},
      {"model.heads", num(spec.branch.heads)},
      {"model.n_points", num(spec.head.n_points)},
      {"model.dropout", num(spec.head.dropout_rate)},
      {"model.ensemble_k", num(spec.ensemble_k)},
  };
}

ModelSpec model_spec_from_config(const std::map<std::string, std::string>& kv) {
  ModelSpec spec;
  auto to_int = [](const std::string& key, const std::string& v) {
    try {
      size_t pos = 0;
      int64_t n = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return n;
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
  };
  auto to_double = [](const std::string& key, const std::string& v) {
    try {
      size_t pos = 0;
      double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
  };
  for (const auto& [key, value] : kv) {
    if (key == "model.stem") spec.stem.kind = stem_kind_from(value);
    else if (key == "model.stem_depth") spec.stem.depth = to_int(key, value);
    else if (key == "model.stem_width") spec.stem.width = to_int(key, value);
    else if (key == "model.stem_kernel") spec.stem.kernel = to_int(key, value);
    else if (key == "model.cardinality") spec.stem.cardinality = to_int(key, value);
    else if (key == "model.branch") spec.branch.kind = branch_kind_from(value);
    else if (key == "model.branch_depth") spec.branch.depth = to_int(key, value);
    else if (key == "model.patch") spec.branch.patch = to_int(key, value);
    else if (key == "model.dm") spec.branch.dm = to_int(key, value);
    else if (key == "model.heads") spec.branch.heads = to_int(key, value);
    else if (key == "model.n_points") spec.head.n_points = to_int(key, value);
    else if (key == "model.dropout") spec.head.dropout_rate = to_double(key, value);
    else if (key == "model.ensemble_k") spec.ensemble_k = to_int(key, value);
    else throw ConfigError("unknown model key '" + key + "'");
  }
  return spec;
}

BuiltModel build_model(const ModelSpec& spec, const Shape& input_shape, uint64_t seed) {
  if (input_shape.size() != 3)
    throw ShapeError("model input must be H x W x C, got " + shape_str(input_shape));
  if (spec.ensemble_k != 1 && spec.ensemble_k != 3)
    throw ConfigError("ensemble_k must be 1 or 3, got " + std::to_string(spec.ensemble_k));
  require_positive("stem depth", spec.stem.depth);
  require_positive("stem width", spec.stem.width);
  require_positive("stem kernel", spec.stem.kernel);
  require_positive("cardinality", spec.stem.cardinality);
  if (spec.branch.kind != BranchKind::none) require_positive("branch depth", spec.branch.depth);
  require_positive("n_points", spec.head.n_points);
  if (spec.head.dropout_rate < 0.0 || spec.head.dropout_rate >= 1.0)
    throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(spec.head.dropout_rate));

  Init init{seed};
  BuiltModel m;
  m.spec_ = spec;
  m.input_shape_ = input_shape;

  auto add_conv = [&](std::vector<std::unique_ptr<Layer>>& dst, const std::string& name,
                      Shape& cur, int64_t k, int64_t cout, int64_t stride) {
    Tensor kernel = init.he({k, k, cur[2], cout}, k * k * cur[2], name + ".kernel");
    Tensor bias = Init::fill({cout}, 0.0);
    auto layer = std::make_unique<Conv2dLayer>(name, kernel, bias, stride, Padding::same, true);
    cur = layer->output_shape(cur);
    dst.push_back(std::move(layer));
  };

  Shape cur = input_shape;
  add_conv(m.root_, "root.conv0", cur, 3, 16, 2);
  add_conv(m.root_, "root.conv1", cur, 3, 64, 2);
  Shape root_out = cur;

  auto add_resnext = [&](std::vector<std::unique_ptr<Layer>>& dst, const std::string& name,
                         Shape& cur2) {
    int64_t d = cur2[2];
    int64_t c = spec.stem.cardinality;
    if (d % c != 0)
      throw ConfigError(name + ": " + std::to_string(d) + " channels not divisible by cardinality " +
                        std::to_string(c));
    int64_t g = d / c;
    int64_t k = spec.stem.kernel;
    std::vector<Tensor> ks, bs;
    for (int64_t p = 0; p < c; ++p) {
      ks.push_back(init.he({k, k, g, g}, k * k * g, name + ".path" + std::to_string(p) + ".kernel"));
      bs.push_back(Init::fill({g}, 0.0));
    }
    auto layer = std::make_unique<ResNeXtLayer>(name, std::move(ks), std::move(bs));
    cur2 = layer->output_shape(cur2);
    dst.push_back(std::move(layer));
  };

  auto add_attention = [&](std::vector<std::unique_ptr<Layer>>& dst, const std::string& name,
                           ChannelAttentionLayer::Score score, Shape& cur2) {
    auto layer = std::make_unique<ChannelAttentionLayer>(name, score);
    cur2 = layer->output_shape(cur2);
    dst.push_back(std::move(layer));
  };

  int64_t flat_total = 0;
  for (int64_t ci = 0; ci < spec.ensemble_k; ++ci) {
    std::string comp = "comp" + std::to_string(ci);
    std::vector<std::unique_ptr<Layer>> layers;
    Shape c = root_out;

    for (int64_t j = 0; j < spec.stem.depth; ++j) {
      std::string block = comp + ".stem" + std::to_string(j);
      switch (spec.stem.kind) {
        case StemKind::conv:
          add_conv(layers, block + ".conv", c, spec.stem.kernel, spec.stem.width, 1);
          break;
        case StemKind::resnext:
          add_resnext(layers, block + ".rx", c);
          break;
        case StemKind::alt_conv_luong:
          add_conv(layers, block + ".conv", c, spec.stem.kernel, spec.stem.width, 1);
          add_attention(layers, block + ".luong", ChannelAttentionLayer::Score::luong, c);
          break;
        case StemKind::alt_conv_bahdanau:
          add_conv(layers, block + ".conv", c, spec.stem.kernel, spec.stem.width, 1);
          add_attention(layers, block + ".bahdanau", ChannelAttentionLayer::Score::bahdanau, c);
          break;
        case StemKind::alt_conv_resnext:
          add_conv(layers, block + ".conv", c, spec.stem.kernel, spec.stem.width, 1);
          add_resnext(layers, block + ".rx", c);
          break;
      }
    }

    switch (spec.branch.kind) {
      case BranchKind::none: break;
      case BranchKind::luong:
        for (int64_t j = 0; j < spec.branch.depth; ++j)
          add_attention(layers, comp + ".branch" + std::to_string(j) + ".luong",
                        ChannelAttentionLayer::Score::luong, c);
        break;
      case BranchKind::bahdanau:
        for (int64_t j = 0; j < spec.branch.depth; ++j)
          add_attention(layers, comp + ".branch" + std::to_string(j) + ".bahdanau",
                        ChannelAttentionLayer::Score::bahdanau, c);
        break;
      case BranchKind::vit: {
        int64_t p = spec.branch.patch, dm = spec.branch.dm, heads = spec.branch.heads;
        require_positive("patch", p);
        require_positive("dm", dm);
        require_positive("heads", heads);
        std::string pname = comp + ".branch.patch";
        if (c[0] % p != 0 || c[1] % p != 0)
          throw ConfigError(pname + ": patch size " + std::to_string(p) +
                            " does not divide stem output " + shape_str(c));
        if (dm % heads != 0)
          throw ConfigError(comp + ".branch.xf: model dim " + std::to_string(dm) +
                            " not divisible by " + std::to_string(heads) + " heads");
        int64_t tokens = (c[0] / p) * (c[1] / p);
        int64_t tok_len = p * p * c[2];
        Tensor wp = init.he({tok_len, dm}, tok_len, pname + ".wp");
        Tensor pos = init.gauss({tokens, dm}, 0.02, pname + ".pos");
        auto patch_layer = std::make_unique<PatchEncoderLayer>(pname, p, wp, pos);
        c = patch_layer->output_shape(c);
        layers.push_back(std::move(patch_layer));

        int64_t dh = dm / heads;
        for (int64_t j = 0; j < spec.branch.depth; ++j) {
          std::string name = comp + ".branch" + std::to_string(j) + ".xf";
          TransformerParams tp;
          tp.ln1_gamma = Init::fill({dm}, 1.0);
          tp.ln1_beta = Init::fill({dm}, 0.0);
          for (int64_t hh = 0; hh < heads; ++hh) {
            std::string hs = std::to_string(hh);
            tp.wq.push_back(init.he({dm, dh}, dm, name + ".wq" + hs));
            tp.wk.push_back(init.he({dm, dh}, dm, name + ".wk" + hs));
            tp.wv.push_back(init.he({dm, dh}, dm, name + ".wv" + hs));
          }
          tp.wo = init.he({dm, dm}, dm, name + ".wo");
          tp.ln2_gamma = Init::fill({dm}, 1.0);
          tp.ln2_beta = Init::fill({dm}, 0.0);
          tp.fc1_w = init.he({dm, 4 * dm}, dm, name + ".fc1.w");
          tp.fc1_b = Init::fill({4 * dm}, 0.0);
          tp.fc2_w = init.he({4 * dm, dm}, 4 * dm, name + ".fc2.w");
          tp.fc2_b = Init::fill({dm}, 0.0);
          auto xf = std::make_unique<TransformerLayer>(name, std::move(tp));
          c = xf->output_shape(c);
          layers.push_back(std::move(xf));
        }
        break;
      }
    }

    flat_total += shape_numel(c);
    m.comps_.push_back(std::move(layers));
  }

  int64_t out_n = 2 * spec.head.n_points;
  m.head_drop_ = std::make_unique<DropoutLayer>("head.drop", spec.head.dropout_rate);
  Tensor hw = init.he({flat_total, out_n}, flat_total, "head.dense.w");
  Tensor hb = Init::fill({out_n}, 0.0);
  m.head_dense_ = std::make_unique<DenseLayer>("head.dense", hw, hb, false);
  return m;
}

BuiltModel build_ensemble(const ModelSpec& spec, const Shape& input_shape, uint64_t seed) {
  if (spec.ensemble_k != 3)
    throw ContractError("build_ensemble requires ensemble_k 3, got " +
                        std::to_string(spec.ensemble_k));
  return build_model(spec, input_shape, seed);
}

Tensor BuiltModel::forward(const Tensor& x, ForwardCtx& ctx) const {
  if (x.shape() != input_shape_)
    throw ShapeError("model input " + shape_str(x.shape()) + " does not match built shape " +
                     shape_str(input_shape_));
  Tensor r = x;
  for (const auto& l : root_) r = l->forward(r, ctx);

  std::vector<Tensor> feats;
  feats.reserve(comps_.size());
  for (size_t i = 0; i < comps_.size(); ++i) {
    Tensor c = r;
    for (const auto& l : comps_[i]) c = l->forward(c, ctx);
    Tensor f = flatten(c);
    ctx.note("comp" + std::to_string(i) + ".features", f);
    feats.push_back(f);
  }

  Tensor f = feats.size() == 1 ? feats[0] : concat(feats, 0);
  f = head_drop_->forward(f, ctx);
  Tensor y = head_dense_->forward(f, ctx);
  Tensor out = reshape(y, {2, spec_.head.n_points});
  ctx.note("head.out", out);
  return out;
}

void BuiltModel::visit_params(const ParamVisitor& fn) {
  for (const auto& l : root_) l->visit_params(fn);
  for (const auto& comp : comps_)
    for (const auto& l : comp) l->visit_params(fn);
  head_drop_->visit_params(fn);
  head_dense_->visit_params(fn);
}

std::vector<std::string> BuiltModel::layer_names() const {
  std::vector<std::string> names;
  for (const auto& l : root_) names.push_back(l->name());
  for (size_t i = 0; i < comps_.size(); ++i) {
    for (const auto& l : comps_[i]) names.push_back(l->name());
    names.push_back("comp" + std::to_string(i) + ".features");
  }
  names.push_back(head_drop_->name());
  names.push_back(head_dense_->name());
  names.push_back("head.out");
  return names;
}

int64_t param_count(BuiltModel& m) {
  int64_t total = 0;
  m.visit_params([&](const std::string&, Tensor& t) { total += t.numel(); });
  return total;
}

} // namespace tfl
