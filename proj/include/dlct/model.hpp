#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dlct/attention.hpp"
#include "dlct/data.hpp"
#include "dlct/geometry.hpp"
#include "dlct/rng.hpp"
#include "dlct/tensor.hpp"

namespace dlct {

// Encoder wiring. `dual` is the full two-stream model; the single-stream
// modes run one self-attention stack over the chosen features.
enum class FeatureMode { dual, grid_only, region_only, concat };
// Positional machinery inside attention: full (absolute encodings in the
// scores plus the relative-geometry bias), input-added encodings only, or
// nothing.
enum class AttentionMode { cra, pe_only, vanilla };
// Cross-level stage: alignment-graph masked, complete bipartite, or absent.
enum class GraphMode { aligned, complete, none };

std::string to_string(FeatureMode m);
std::string to_string(AttentionMode m);
std::string to_string(GraphMode m);
FeatureMode feature_mode_from(const std::string& s);
AttentionMode attention_mode_from(const std::string& s);
GraphMode graph_mode_from(const std::string& s);

struct ModelConfig {
  int d_model = 64;
  int heads = 4;
  int layers = 2;
  int d_ff = 256;
  int vocab_size = 22;
  int max_len = 16;
  GridLayout layout{4, 4};
  double dropout = 0.0;
  int d_region = 16;
  int d_grid = 16;
  int d_geom = kGeometryDim;
  FeatureMode feature_mode = FeatureMode::dual;
  AttentionMode attention_mode = AttentionMode::cra;
  GraphMode graph_mode = GraphMode::aligned;

  static ModelConfig desk(int vocab_size);
  static ModelConfig reference(int vocab_size);

  void validate() const;
  int64_t parameter_count() const;
  std::string canonical_string() const;  // stable serialization for manifests/hashes
  static ModelConfig from_canonical(const std::string& text);
};

// Named parameters in a stable creation order.
class ParamStore {
 public:
  Tensor create(const std::string& name, Shape shape, double init_scale, Rng* rng);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  int64_t total_elements() const;
  void zero_grads();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// Per-example constants reused across layers and training steps: positional
// encodings' raw material, relative-geometry features for every level pair,
// the alignment graph and its mask slices.
struct ExampleGeometry {
  int64_t n_regions = 0;
  int64_t n_grids = 0;
  Tensor gpe;  // [N_G, d_model]
  Tensor feats_rr, feats_gg, feats_rg, feats_gr;  // [Nq, Nk, d_geom]
  Tensor feats_uu;                                // union pairs (concat mode)
  GraphMask mask_rg, mask_gr;
  std::vector<BoundingBox> region_boxes;
};

// Recorded attention weights for the dump tooling.
struct AttentionTrace {
  struct Record {
    int layer = 0;
    std::string sublayer;  // dwsa_r | dwsa_g | lcca_r2g | lcca_g2r | dec_self | dec_cross
    AttentionWeights weights;
  };
  std::vector<Record> records;
};

struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;
  AttentionTrace* trace = nullptr;
};

class DlctModel {
 public:
  DlctModel(ModelConfig cfg, uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  ExampleGeometry build_geometry(const FeatureBundle& bundle) const;

  // Concatenated node representations [N_R + N_G, d_model] (single-stream
  // modes return just their block). Region rows come first.
  Tensor encode(const FeatureBundle& bundle, const ExampleGeometry& geom,
                const ForwardOptions& opts = {}) const;

  // Next-token logits for one BOS-prefixed sequence: [T, vocab].
  Tensor decode(const Tensor& encoder_nodes, const TokenSeq& tokens,
                const ForwardOptions& opts = {}) const;
  // Batched variant over equal-length prefixes: [B, T, vocab].
  Tensor decode_batch(const Tensor& encoder_nodes, const std::vector<TokenSeq>& prefixes,
                      const ForwardOptions& opts = {}) const;

  void save_params(const std::string& dir) const;
  void load_params(const std::string& dir);

 private:
  void build_params(uint64_t init_seed);

  ModelConfig cfg_;
  ParamStore params_;
  Tensor word_pe_;  // [max_len + 1, d_model] sinusoidal constant
};

}  // namespace dlct
