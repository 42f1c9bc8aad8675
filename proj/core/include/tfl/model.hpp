#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "tfl/layers.hpp"

namespace tfl {

enum class StemKind { conv, resnext, alt_conv_luong, alt_conv_bahdanau, alt_conv_resnext };
enum class BranchKind { none, luong, bahdanau, vit };

std::string to_string(StemKind k);
std::string to_string(BranchKind k);
StemKind stem_kind_from(const std::string& s);
BranchKind branch_kind_from(const std::string& s);

/// Declarative model description. The root is fixed (two 3x3 stride-2 convs,
/// 16 then 64 channels); everything else is chosen here.
struct ModelSpec {
  struct Stem {
    StemKind kind = StemKind::conv;
    int64_t depth = 3;  // blocks; alternating stems count conv+partner pairs
    int64_t width = 64; // channel width after the first stem conv (conv-bearing stems only)
    int64_t kernel = 3;
    int64_t cardinality = 4; // resnext paths
  } stem;

  struct Branch {
    BranchKind kind = BranchKind::none;
    int64_t depth = 2;
    int64_t patch = 2; // vit only
    int64_t dm = 32;
    int64_t heads = 4;
  } branch;

  struct Head {
    int64_t n_points = 6;
    double dropout_rate = 0.1;
  } head;

  int64_t ensemble_k = 1; // 1 or 3
};

/// Table row lookup: ids {C,R,L,B,A}-{1,2,3,4}. Letter picks the stem family,
/// digit picks the branch (1 none, 2 luong, 3 bahdanau, 4 vision transformer).
ModelSpec catalog(const std::string& id);
std::vector<std::string> catalog_ids();

/// Spec with the final stem block removed (alternating stems drop their final
/// conv+partner pair). Depth must be at least 2.
ModelSpec ablate_last_block(const ModelSpec& spec);

/// Flat dotted-key serialization under the `model.` prefix.
std::map<std::string, std::string> model_spec_to_config(const ModelSpec& spec);
ModelSpec model_spec_from_config(const std::map<std::string, std::string>& kv);

/// An executable model: shared root, one or more stem+branch components whose
/// flattened outputs are concatenated, and a dropout+dense head emitting 2 x N.
class BuiltModel {
public:
  Tensor forward(const Tensor& x, ForwardCtx& ctx) const;

  const Shape& input_shape() const { return input_shape_; }
  Shape output_shape() const { return {2, spec_.head.n_points}; }
  const ModelSpec& spec() const { return spec_; }

  /// Visits every trainable tensor as (dotted name, tensor), in layer order.
  void visit_params(const ParamVisitor& fn);

  /// All layer names in forward order (valid activation-record keys).
  std::vector<std::string> layer_names() const;

private:
  friend BuiltModel build_model(const ModelSpec&, const Shape&, uint64_t);

  ModelSpec spec_;
  Shape input_shape_;
  std::vector<std::unique_ptr<Layer>> root_;
  std::vector<std::vector<std::unique_ptr<Layer>>> comps_;
  std::unique_ptr<Layer> head_drop_;
  std::unique_ptr<Layer> head_dense_;
};

/// Assembles and He-initializes a model. Initialization is a pure function of
/// (seed, parameter name), so construction order never shifts weights.
BuiltModel build_model(const ModelSpec& spec, const Shape& input_shape, uint64_t seed = 0);

/// build_model for a 3-component ensemble; rejects any other ensemble_k.
BuiltModel build_ensemble(const ModelSpec& spec, const Shape& input_shape, uint64_t seed = 0);

/// Exact count of trainable scalars.
int64_t param_count(BuiltModel& m);

} // namespace tfl
