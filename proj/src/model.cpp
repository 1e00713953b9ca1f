#include "dlct/model.hpp"

#include <cmath>
#include <filesystem>
#include <stdexcept>

#include <json.hpp>

#include "dlct/ops.hpp"
#include "dlct/tensor_io.hpp"

namespace dlct {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(FeatureMode m) {
  switch (m) {
    case FeatureMode::dual: return "dual";
    case FeatureMode::grid_only: return "grid-only";
    case FeatureMode::region_only: return "region-only";
    case FeatureMode::concat: return "concat";
  }
  throw std::logic_error("bad feature mode");
}

std::string to_string(AttentionMode m) {
  switch (m) {
    case AttentionMode::cra: return "cra";
    case AttentionMode::pe_only: return "pe-only";
    case AttentionMode::vanilla: return "vanilla";
  }
  throw std::logic_error("bad attention mode");
}

std::string to_string(GraphMode m) {
  switch (m) {
    case GraphMode::aligned: return "aligned";
    case GraphMode::complete: return "complete";
    case GraphMode::none: return "none";
  }
  throw std::logic_error("bad graph mode");
}

FeatureMode feature_mode_from(const std::string& s) {
  if (s == "dual") return FeatureMode::dual;
  if (s == "grid-only") return FeatureMode::grid_only;
  if (s == "region-only") return FeatureMode::region_only;
  if (s == "concat") return FeatureMode::concat;
  throw std::invalid_argument("unknown feature mode: " + s);
}

AttentionMode attention_mode_from(const std::string& s) {
  if (s == "cra") return AttentionMode::cra;
  if (s == "pe-only") return AttentionMode::pe_only;
  if (s == "vanilla") return AttentionMode::vanilla;
  throw std::invalid_argument("unknown attention mode: " + s);
}

GraphMode graph_mode_from(const std::string& s) {
  if (s == "aligned") return GraphMode::aligned;
  if (s == "complete") return GraphMode::complete;
  if (s == "none") return GraphMode::none;
  throw std::invalid_argument("unknown graph mode: " + s);
}

ModelConfig ModelConfig::desk(int vocab_size) {
  ModelConfig cfg;
  cfg.vocab_size = vocab_size;
  return cfg;
}

ModelConfig ModelConfig::reference(int vocab_size) {
  ModelConfig cfg;
  cfg.d_model = 512;
  cfg.heads = 8;
  cfg.layers = 3;
  cfg.d_ff = 2048;
  cfg.vocab_size = vocab_size;
  cfg.max_len = 20;
  cfg.layout = GridLayout(7, 7);
  cfg.dropout = 0.1;
  cfg.d_region = 2048;
  cfg.d_grid = 2048;
  return cfg;
}

void ModelConfig::validate() const {
  if (d_model <= 0 || d_model % heads != 0) {
    throw std::invalid_argument("ModelConfig: d_model must be a positive multiple of heads");
  }
  if (d_model % 4 != 0) throw std::invalid_argument("ModelConfig: d_model must be divisible by 4");
  if (layers < 0) throw std::invalid_argument("ModelConfig: layers must be >= 0");
  if (vocab_size < 4) throw std::invalid_argument("ModelConfig: vocabulary too small");
  if (max_len < 1) throw std::invalid_argument("ModelConfig: max_len must be positive");
  if (d_geom % 8 != 0) throw std::invalid_argument("ModelConfig: d_geom must be divisible by 8");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("ModelConfig: dropout must be in [0, 1)");
  if (feature_mode != FeatureMode::dual && graph_mode != GraphMode::none) {
    throw std::invalid_argument("ModelConfig: cross-level graph settings require the dual feature mode");
  }
}

std::string ModelConfig::canonical_string() const {
  json j;
  j["d_model"] = d_model;
  j["heads"] = heads;
  j["layers"] = layers;
  j["d_ff"] = d_ff;
  j["vocab_size"] = vocab_size;
  j["max_len"] = max_len;
  j["grid"] = {layout.rows, layout.cols};
  j["dropout"] = dropout;
  j["d_region"] = d_region;
  j["d_grid"] = d_grid;
  j["d_geom"] = d_geom;
  j["feature_mode"] = to_string(feature_mode);
  j["attention_mode"] = to_string(attention_mode);
  j["graph_mode"] = to_string(graph_mode);
  return j.dump();
}

ModelConfig ModelConfig::from_canonical(const std::string& text) {
  json j = json::parse(text);
  ModelConfig cfg;
  cfg.d_model = j["d_model"].get<int>();
  cfg.heads = j["heads"].get<int>();
  cfg.layers = j["layers"].get<int>();
  cfg.d_ff = j["d_ff"].get<int>();
  cfg.vocab_size = j["vocab_size"].get<int>();
  cfg.max_len = j["max_len"].get<int>();
  cfg.layout = GridLayout(j["grid"][0].get<int>(), j["grid"][1].get<int>());
  cfg.dropout = j["dropout"].get<double>();
  cfg.d_region = j["d_region"].get<int>();
  cfg.d_grid = j["d_grid"].get<int>();
  cfg.d_geom = j["d_geom"].get<int>();
  cfg.feature_mode = feature_mode_from(j["feature_mode"].get<std::string>());
  cfg.attention_mode = attention_mode_from(j["attention_mode"].get<std::string>());
  cfg.graph_mode = graph_mode_from(j["graph_mode"].get<std::string>());
  cfg.validate();
  return cfg;
}

namespace {

enum class Init { xavier, zeros, ones };

// Enumerates every parameter of a wiring in stable creation order. Shared by
// construction and the analytic parameter count.
template <class Fn>
void for_each_param(const ModelConfig& cfg, Fn&& fn) {
  const int64_t d = cfg.d_model;
  const int64_t dff = cfg.d_ff;

  auto ln = [&](const std::string& prefix) {
    fn(prefix + ".g", Shape{d}, Init::ones);
    fn(prefix + ".b", Shape{d}, Init::zeros);
  };
  auto attn = [&](const std::string& prefix) {
    for (const char* w : {".wq", ".wk", ".wv", ".wo"}) fn(prefix + w, Shape{d, d}, Init::xavier);
  };
  auto ffn = [&](const std::string& prefix) {
    fn(prefix + ".w1", Shape{d, dff}, Init::xavier);
    fn(prefix + ".b1", Shape{dff}, Init::zeros);
    fn(prefix + ".w2", Shape{dff, d}, Init::xavier);
    fn(prefix + ".b2", Shape{d}, Init::zeros);
  };
  auto in_proj = [&](const std::string& stream, int64_t d_in) {
    fn("in_proj." + stream + ".w", Shape{d_in, d}, Init::xavier);
    fn("in_proj." + stream + ".b", Shape{d}, Init::zeros);
    ln("in_proj." + stream + ".ln");
  };

  const bool has_regions = cfg.feature_mode != FeatureMode::grid_only;
  const bool uses_pos = cfg.attention_mode != AttentionMode::vanilla;
  if (has_regions) in_proj("r", cfg.d_region);
  if (cfg.feature_mode != FeatureMode::region_only) in_proj("g", cfg.d_grid);
  if (uses_pos && has_regions) fn("rpe.w_emb", Shape{d, 4}, Init::xavier);
  if (cfg.attention_mode == AttentionMode::cra) fn("geom.w_g", Shape{cfg.d_geom, cfg.heads}, Init::xavier);

  std::vector<std::string> streams;
  switch (cfg.feature_mode) {
    case FeatureMode::dual: streams = {"r", "g"}; break;
    case FeatureMode::grid_only: streams = {"g"}; break;
    case FeatureMode::region_only: streams = {"r"}; break;
    case FeatureMode::concat: streams = {"u"}; break;
  }
  const bool lcca = cfg.feature_mode == FeatureMode::dual && cfg.graph_mode != GraphMode::none;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string lp = "enc.l" + std::to_string(l);
    for (const std::string& s : streams) {
      attn(lp + ".dwsa." + s + ".attn");
      ln(lp + ".dwsa." + s + ".ln1");
      ffn(lp + ".dwsa." + s + ".ffn");
      ln(lp + ".dwsa." + s + ".ln2");
    }
    if (lcca) {
      for (const std::string& s : streams) {
        attn(lp + ".lcca." + s + ".attn");
        ln(lp + ".lcca." + s + ".ln1");
        ffn(lp + ".lcca." + s + ".ffn");
        ln(lp + ".lcca." + s + ".ln2");
      }
    }
  }

  for (int l = 0; l < cfg.layers; ++l) {
    const std::string lp = "dec.l" + std::to_string(l);
    attn(lp + ".self");
    ln(lp + ".ln1");
    attn(lp + ".cross");
    ln(lp + ".ln2");
    ffn(lp + ".ffn");
    ln(lp + ".ln3");
  }
  fn("dec.embed", Shape{cfg.vocab_size, d}, Init::xavier);
  fn("dec.out.w", Shape{d, cfg.vocab_size}, Init::xavier);
  fn("dec.out.b", Shape{cfg.vocab_size}, Init::zeros);
}

}  // namespace

int64_t ModelConfig::parameter_count() const {
  validate();
  int64_t total = 0;
  for_each_param(*this, [&](const std::string&, const Shape& shape, Init) { total += shape_numel(shape); });
  return total;
}

Tensor ParamStore::create(const std::string& name, Shape shape, double init_scale, Rng* rng) {
  for (const auto& [n, _] : entries_) {
    if (n == name) throw std::logic_error("duplicate parameter name: " + name);
  }
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  if (rng && init_scale > 0.0) {
    for (auto& v : data) v = rng->uniform(-init_scale, init_scale);
  } else {
    for (auto& v : data) v = init_scale < 0.0 ? -init_scale : 0.0;
  }
  Tensor t = Tensor::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
  entries_.emplace_back(name, t);
  return t;
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("unknown parameter: " + name);
}

bool ParamStore::has(const std::string& name) const {
  for (const auto& [n, _] : entries_) {
    if (n == name) return true;
  }
  return false;
}

int64_t ParamStore::total_elements() const {
  int64_t total = 0;
  for (const auto& [_, t] : entries_) total += t.numel();
  return total;
}

void ParamStore::zero_grads() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

DlctModel::DlctModel(ModelConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  build_params(init_seed);
  std::vector<double> pe(static_cast<size_t>((cfg_.max_len + 1) * cfg_.d_model));
  for (int pos = 0; pos <= cfg_.max_len; ++pos) {
    sinusoid_embed(static_cast<double>(pos), cfg_.d_model, 10000.0, pe.data() + static_cast<size_t>(pos) * cfg_.d_model);
  }
  word_pe_ = Tensor::from_data({cfg_.max_len + 1, cfg_.d_model}, std::move(pe));
}

void DlctModel::build_params(uint64_t init_seed) {
  Rng rng(init_seed);
  for_each_param(cfg_, [&](const std::string& name, const Shape& shape, Init init) {
    switch (init) {
      case Init::xavier: {
        const double fan_in = static_cast<double>(shape.size() >= 2 ? shape[0] : shape_numel(shape));
        const double fan_out = static_cast<double>(shape.size() >= 2 ? shape[1] : shape_numel(shape));
        params_.create(name, shape, std::sqrt(6.0 / (fan_in + fan_out)), &rng);
        break;
      }
      case Init::zeros:
        params_.create(name, shape, 0.0, nullptr);
        break;
      case Init::ones:
        params_.create(name, shape, -1.0, nullptr);
        break;
    }
  });
}

ExampleGeometry DlctModel::build_geometry(const FeatureBundle& bundle) const {
  if (bundle.layout.rows != cfg_.layout.rows || bundle.layout.cols != cfg_.layout.cols) {
    throw std::invalid_argument("build_geometry: bundle grid layout does not match the model config");
  }
  ExampleGeometry g;
  g.n_regions = static_cast<int64_t>(bundle.boxes.size());
  g.n_grids = cfg_.layout.cells();
  g.region_boxes = bundle.boxes;
  g.gpe = grid_positional_encoding(cfg_.layout, cfg_.d_model);

  std::vector<BoundingBox> cells;
  for (int i = 0; i < cfg_.layout.rows; ++i) {
    for (int j = 0; j < cfg_.layout.cols; ++j) cells.push_back(cfg_.layout.cell_box(i, j));
  }

  const bool cra_mode = cfg_.attention_mode == AttentionMode::cra;
  switch (cfg_.feature_mode) {
    case FeatureMode::dual: {
      if (cra_mode) {
        g.feats_rr = relative_geometry_features(bundle.boxes, bundle.boxes, cfg_.d_geom);
        g.feats_gg = relative_geometry_features(cells, cells, cfg_.d_geom);
        if (cfg_.graph_mode != GraphMode::none) {
          g.feats_rg = relative_geometry_features(bundle.boxes, cells, cfg_.d_geom);
          g.feats_gr = relative_geometry_features(cells, bundle.boxes, cfg_.d_geom);
        }
      }
      if (cfg_.graph_mode != GraphMode::none) {
        const AlignmentGraph graph = cfg_.graph_mode == GraphMode::aligned
                                         ? build_alignment_graph(bundle.boxes, cfg_.layout)
                                         : AlignmentGraph::complete_bipartite(static_cast<int>(g.n_regions),
                                                                              static_cast<int>(g.n_grids));
        g.mask_rg.n_q = g.n_regions;
        g.mask_rg.n_k = g.n_grids;
        g.mask_rg.allow = graph.region_to_grid_mask();
        g.mask_gr.n_q = g.n_grids;
        g.mask_gr.n_k = g.n_regions;
        g.mask_gr.allow = graph.grid_to_region_mask();
      }
      break;
    }
    case FeatureMode::grid_only:
      if (cra_mode) g.feats_gg = relative_geometry_features(cells, cells, cfg_.d_geom);
      break;
    case FeatureMode::region_only:
      if (cra_mode) g.feats_rr = relative_geometry_features(bundle.boxes, bundle.boxes, cfg_.d_geom);
      break;
    case FeatureMode::concat: {
      if (cra_mode) {
        std::vector<BoundingBox> all = bundle.boxes;
        all.insert(all.end(), cells.begin(), cells.end());
        g.feats_uu = relative_geometry_features(all, all, cfg_.d_geom);
      }
      break;
    }
  }
  return g;
}

namespace {

// Row gate [N, 1] that is 1 where the mask row has a neighbour.
std::pair<Tensor, Tensor> row_gates(const GraphMask& mask) {
  std::vector<double> gate(static_cast<size_t>(mask.n_q));
  std::vector<double> inv(static_cast<size_t>(mask.n_q));
  for (int64_t i = 0; i < mask.n_q; ++i) {
    const bool empty = mask.row_empty(i);
    gate[static_cast<size_t>(i)] = empty ? 0.0 : 1.0;
    inv[static_cast<size_t>(i)] = empty ? 1.0 : 0.0;
  }
  return {Tensor::from_data({mask.n_q, 1}, std::move(gate)), Tensor::from_data({mask.n_q, 1}, std::move(inv))};
}

}  // namespace

Tensor DlctModel::encode(const FeatureBundle& bundle, const ExampleGeometry& geom,
                         const ForwardOptions& opts) const {
  if (bundle.regions.defined() && bundle.regions.shape()[1] != cfg_.d_region) {
    throw std::invalid_argument("encode: region feature width " + std::to_string(bundle.regions.shape()[1]) +
                                " does not match configured " + std::to_string(cfg_.d_region));
  }
  if (bundle.grids.defined() && bundle.grids.shape()[1] != cfg_.d_grid) {
    throw std::invalid_argument("encode: grid feature width does not match the config");
  }

  const AttnDropout drop{cfg_.dropout, opts.dropout_rng, opts.training};
  auto P = [&](const std::string& name) -> const Tensor& { return params_.get(name); };
  auto mh = [&](const std::string& prefix) {
    return MultiHeadParams{P(prefix + ".wq"), P(prefix + ".wk"), P(prefix + ".wv"), P(prefix + ".wo")};
  };
  auto ffn = [&](const Tensor& x, const std::string& prefix) {
    Tensor h = relu(add(matmul(x, P(prefix + ".w1")), P(prefix + ".b1")));
    if (drop.p > 0.0 && drop.training && drop.rng) h = dropout(h, drop.p, *drop.rng, true);
    return add(matmul(h, P(prefix + ".w2")), P(prefix + ".b2"));
  };
  auto record = [&](int layer, const std::string& tag, const AttentionOutput& out) {
    if (opts.trace && out.weights) {
      opts.trace->records.push_back({layer, tag, *out.weights});
    }
  };
  const bool want_trace = opts.trace != nullptr;

  // One self-attention + FFN block with post-norm residual wrapping.
  auto self_block = [&](Tensor h, const std::string& prefix, const Tensor& pos, const Tensor& omega,
                        int layer, const std::string& tag) {
    AttentionOutput attn = mhcra(h, h, h, pos, pos, omega, mh(prefix + ".attn"), cfg_.heads, nullptr,
                                 want_trace, drop);
    record(layer, tag, attn);
    Tensor a = layer_norm(add(h, attn.values), P(prefix + ".ln1.g"), P(prefix + ".ln1.b"));
    return layer_norm(add(a, ffn(a, prefix + ".ffn")), P(prefix + ".ln2.g"), P(prefix + ".ln2.b"));
  };

  // Cross-level block; queries with no neighbours pass through untouched.
  auto cross_block = [&](Tensor src, Tensor tgt, const std::string& prefix, const Tensor& pos_s,
                         const Tensor& pos_t, const Tensor& omega, const GraphMask& mask, int layer,
                         const std::string& tag) {
    AttentionOutput attn =
        mhlcca(src, tgt, pos_s, pos_t, omega, mask, mh(prefix + ".attn"), cfg_.heads, want_trace, drop);
    record(layer, tag, attn);
    if (!mask.any_row_empty()) {
      Tensor a = layer_norm(add(src, attn.values), P(prefix + ".ln1.g"), P(prefix + ".ln1.b"));
      return layer_norm(add(a, ffn(a, prefix + ".ffn")), P(prefix + ".ln2.g"), P(prefix + ".ln2.b"));
    }
    auto [gate, inv] = row_gates(mask);
    Tensor a = layer_norm(add(src, attn.values), P(prefix + ".ln1.g"), P(prefix + ".ln1.b"));
    a = add(mul(a, gate), mul(src, inv));
    Tensor h = layer_norm(add(a, ffn(a, prefix + ".ffn")), P(prefix + ".ln2.g"), P(prefix + ".ln2.b"));
    return add(mul(h, gate), mul(a, inv));
  };

  auto in_proj = [&](const Tensor& feats, const std::string& stream) {
    Tensor h = relu(add(matmul(feats, P("in_proj." + stream + ".w")), P("in_proj." + stream + ".b")));
    return layer_norm(h, P("in_proj." + stream + ".ln.g"), P("in_proj." + stream + ".ln.b"));
  };

  const bool cra_mode = cfg_.attention_mode == AttentionMode::cra;
  const bool pe_input = cfg_.attention_mode == AttentionMode::pe_only;
  Tensor w_g = cra_mode ? P("geom.w_g") : Tensor();

  Tensor rpe;
  if (cfg_.attention_mode != AttentionMode::vanilla && cfg_.feature_mode != FeatureMode::grid_only &&
      geom.n_regions > 0) {
    rpe = region_positional_encoding(geom.region_boxes, P("rpe.w_emb"));
  }

  switch (cfg_.feature_mode) {
    case FeatureMode::dual: {
      if (geom.n_regions == 0) throw std::invalid_argument("encode: dual mode requires at least one region");
      Tensor h_r = in_proj(bundle.regions, "r");
      Tensor h_g = in_proj(bundle.grids, "g");
      if (pe_input) {
        if (rpe.defined()) h_r = add(h_r, rpe);
        h_g = add(h_g, geom.gpe);
      }
      Tensor pos_r = cra_mode ? rpe : Tensor();
      Tensor pos_g = cra_mode ? geom.gpe : Tensor();
      Tensor om_rr, om_gg, om_rg, om_gr;
      if (cra_mode) {
        om_rr = relative_geometry_bias(geom.feats_rr, w_g);
        om_gg = relative_geometry_bias(geom.feats_gg, w_g);
        if (cfg_.graph_mode != GraphMode::none) {
          om_rg = relative_geometry_bias(geom.feats_rg, w_g);
          om_gr = relative_geometry_bias(geom.feats_gr, w_g);
        }
      }
      const bool lcca = cfg_.graph_mode != GraphMode::none;
      for (int l = 0; l < cfg_.layers; ++l) {
        const std::string lp = "enc.l" + std::to_string(l);
        Tensor c_r = self_block(h_r, lp + ".dwsa.r", pos_r, om_rr, l, "dwsa_r");
        Tensor c_g = self_block(h_g, lp + ".dwsa.g", pos_g, om_gg, l, "dwsa_g");
        if (lcca) {
          h_r = cross_block(c_r, c_g, lp + ".lcca.r", pos_r, pos_g, om_rg, geom.mask_rg, l, "lcca_r2g");
          h_g = cross_block(c_g, c_r, lp + ".lcca.g", pos_g, pos_r, om_gr, geom.mask_gr, l, "lcca_g2r");
        } else {
          h_r = c_r;
          h_g = c_g;
        }
      }
      const Tensor parts[] = {h_r, h_g};
      return concat(std::span<const Tensor>(parts, 2), 0);
    }
    case FeatureMode::grid_only: {
      Tensor h = in_proj(bundle.grids, "g");
      if (pe_input) h = add(h, geom.gpe);
      Tensor pos = cra_mode ? geom.gpe : Tensor();
      Tensor om = cra_mode ? relative_geometry_bias(geom.feats_gg, w_g) : Tensor();
      for (int l = 0; l < cfg_.layers; ++l) {
        h = self_block(h, "enc.l" + std::to_string(l) + ".dwsa.g", pos, om, l, "dwsa_g");
      }
      return h;
    }
    case FeatureMode::region_only: {
      if (geom.n_regions == 0) throw std::invalid_argument("encode: region-only mode requires regions");
      Tensor h = in_proj(bundle.regions, "r");
      if (pe_input && rpe.defined()) h = add(h, rpe);
      Tensor pos = cra_mode ? rpe : Tensor();
      Tensor om = cra_mode ? relative_geometry_bias(geom.feats_rr, w_g) : Tensor();
      for (int l = 0; l < cfg_.layers; ++l) {
        h = self_block(h, "enc.l" + std::to_string(l) + ".dwsa.r", pos, om, l, "dwsa_r");
      }
      return h;
    }
    case FeatureMode::concat: {
      if (geom.n_regions == 0) throw std::invalid_argument("encode: concat mode requires regions");
      const Tensor parts[] = {in_proj(bundle.regions, "r"), in_proj(bundle.grids, "g")};
      Tensor h = concat(std::span<const Tensor>(parts, 2), 0);
      Tensor pos;
      if (cfg_.attention_mode != AttentionMode::vanilla) {
        const Tensor pp[] = {rpe, geom.gpe};
        pos = concat(std::span<const Tensor>(pp, 2), 0);
      }
      if (pe_input) {
        h = add(h, pos);
        pos = Tensor();
      }
      Tensor om = cra_mode ? relative_geometry_bias(geom.feats_uu, w_g) : Tensor();
      for (int l = 0; l < cfg_.layers; ++l) {
        h = self_block(h, "enc.l" + std::to_string(l) + ".dwsa.u", pos, om, l, "dwsa_u");
      }
      return h;
    }
  }
  throw std::logic_error("encode: unreachable");
}

namespace {

Tensor slice_rows(const Tensor& t, int64_t n) {
  const int64_t d = t.shape()[1];
  std::vector<double> data(t.data().begin(), t.data().begin() + n * d);
  return Tensor::from_data({n, d}, std::move(data));
}

}  // namespace

Tensor DlctModel::decode_batch(const Tensor& encoder_nodes, const std::vector<TokenSeq>& prefixes,
                               const ForwardOptions& opts) const {
  if (prefixes.empty()) throw std::invalid_argument("decode: empty batch");
  const int64_t t_len = static_cast<int64_t>(prefixes[0].size());
  for (const TokenSeq& p : prefixes) {
    if (static_cast<int64_t>(p.size()) != t_len) throw std::invalid_argument("decode: ragged batch");
    if (p.empty() || p[0] != Vocab::kBos) throw std::invalid_argument("decode: sequences must begin with BOS");
  }
  if (t_len > cfg_.max_len) {
    throw std::invalid_argument("decode: sequence length " + std::to_string(t_len) + " exceeds max_len " +
                                std::to_string(cfg_.max_len));
  }
  const int64_t b = static_cast<int64_t>(prefixes.size());

  const AttnDropout drop{cfg_.dropout, opts.dropout_rng, opts.training};
  auto P = [&](const std::string& name) -> const Tensor& { return params_.get(name); };
  auto mh = [&](const std::string& prefix) {
    return MultiHeadParams{P(prefix + ".wq"), P(prefix + ".wk"), P(prefix + ".wv"), P(prefix + ".wo")};
  };
  auto ffn = [&](const Tensor& x, const std::string& prefix) {
    Tensor h = relu(add(matmul(x, P(prefix + ".w1")), P(prefix + ".b1")));
    if (drop.p > 0.0 && drop.training && drop.rng) h = dropout(h, drop.p, *drop.rng, true);
    return add(matmul(h, P(prefix + ".w2")), P(prefix + ".b2"));
  };

  std::vector<int64_t> flat_ids;
  flat_ids.reserve(static_cast<size_t>(b * t_len));
  for (const TokenSeq& p : prefixes) {
    for (int32_t id : p) {
      if (id < 0 || id >= cfg_.vocab_size) {
        throw std::out_of_range("decode: token id " + std::to_string(id) + " outside the vocabulary");
      }
      flat_ids.push_back(id);
    }
  }
  Tensor x = rows(P("dec.embed"), flat_ids);
  const bool batched = b > 1;
  if (batched) x = reshape(x, {b, t_len, cfg_.d_model});
  x = add(x, slice_rows(word_pe_, t_len));

  const GraphMask causal = GraphMask::causal(t_len);
  const bool want_trace = opts.trace != nullptr && !batched;
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string lp = "dec.l" + std::to_string(l);
    AttentionOutput self_attn =
        mhcra(x, x, x, {}, {}, {}, mh(lp + ".self"), cfg_.heads, &causal, want_trace, drop);
    if (want_trace) opts.trace->records.push_back({l, "dec_self", *self_attn.weights});
    Tensor a = layer_norm(add(x, self_attn.values), P(lp + ".ln1.g"), P(lp + ".ln1.b"));
    AttentionOutput cross = mhcra(a, encoder_nodes, encoder_nodes, {}, {}, {}, mh(lp + ".cross"),
                                  cfg_.heads, nullptr, want_trace, drop);
    if (want_trace) opts.trace->records.push_back({l, "dec_cross", *cross.weights});
    Tensor c = layer_norm(add(a, cross.values), P(lp + ".ln2.g"), P(lp + ".ln2.b"));
    x = layer_norm(add(c, ffn(c, lp + ".ffn")), P(lp + ".ln3.g"), P(lp + ".ln3.b"));
  }
  return add(matmul(x, P("dec.out.w")), P("dec.out.b"));
}

Tensor DlctModel::decode(const Tensor& encoder_nodes, const TokenSeq& tokens,
                         const ForwardOptions& opts) const {
  return decode_batch(encoder_nodes, {tokens}, opts);
}

void DlctModel::save_params(const std::string& dir) const {
  fs::create_directories(dir);
  for (const auto& [name, t] : params_.entries()) {
    save_tensor((fs::path(dir) / (name + ".dlt1")).string(), t);
  }
}

void DlctModel::load_params(const std::string& dir) {
  for (const auto& [name, entry] : params_.entries()) {
    Tensor t = entry;  // shared handle; leaf data is mutable
    Tensor loaded = load_tensor((fs::path(dir) / (name + ".dlt1")).string());
    if (loaded.shape() != t.shape()) {
      throw std::runtime_error("checkpoint tensor " + name + " has shape " + shape_str(loaded.shape()) +
                               ", expected " + shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    for (int64_t i = 0; i < t.numel(); ++i) dst[static_cast<size_t>(i)] = loaded.data()[static_cast<size_t>(i)];
  }
}

}  // namespace dlct
