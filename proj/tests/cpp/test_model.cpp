#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dlct/model.hpp"
#include "dlct/ops.hpp"
#include "test_util.hpp"

using namespace dlct;
using dlct::testing::max_abs_diff;
using dlct::testing::random_tensor;

namespace {

// Tiny wiring for finite-difference sweeps.
ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.d_ff = 16;
  cfg.vocab_size = 8;
  cfg.max_len = 6;
  cfg.layout = GridLayout(2, 2);
  cfg.d_region = 5;
  cfg.d_grid = 6;
  cfg.d_geom = 8;
  return cfg;
}

FeatureBundle random_bundle(const ModelConfig& cfg, Rng& rng, int n_regions) {
  FeatureBundle fb;
  fb.layout = cfg.layout;
  fb.regions = random_tensor({n_regions, cfg.d_region}, rng);
  fb.grids = random_tensor({cfg.layout.cells(), cfg.d_grid}, rng);
  for (int i = 0; i < n_regions; ++i) {
    const double x0 = rng.uniform(0.0, 0.6);
    const double y0 = rng.uniform(0.0, 0.6);
    fb.boxes.emplace_back(x0, y0, x0 + rng.uniform(0.1, 0.35), y0 + rng.uniform(0.1, 0.35));
  }
  return fb;
}

std::vector<Tensor> all_params(DlctModel& m) {
  std::vector<Tensor> out;
  for (const auto& [_, t] : m.params().entries()) out.push_back(t);
  return out;
}

}  // namespace

TEST_CASE("input projection contracts") {
  ModelConfig cfg = tiny_config();
  cfg.layers = 0;  // projection only
  DlctModel m(cfg, 7);
  Rng rng(1);
  FeatureBundle fb = random_bundle(cfg, rng, 3);
  ExampleGeometry geom = m.build_geometry(fb);
  Tensor nodes = m.encode(fb, geom);
  CHECK(nodes.shape() == Shape{3 + 4, cfg.d_model});

  // zero features with zero projection bias stay zero through relu+norm
  FeatureBundle zero = fb;
  zero.regions = Tensor::zeros({3, cfg.d_region});
  zero.grids = Tensor::zeros({cfg.layout.cells(), cfg.d_grid});
  Tensor znodes = m.encode(zero, m.build_geometry(zero));
  for (double v : znodes.data()) CHECK(v == 0.0);

  // feature width mismatch is rejected
  FeatureBundle bad = fb;
  bad.regions = Tensor::zeros({3, cfg.d_region + 1});
  CHECK_THROWS_AS(m.encode(bad, geom), std::invalid_argument);
}

TEST_CASE("desk config has a 4x4 grid and the expected parameter count") {
  ModelConfig desk = ModelConfig::desk(22);
  CHECK(desk.layout.cells() == 16);
  CHECK(desk.parameter_count() == 536086);
  DlctModel m(desk, 3);
  CHECK(m.params().total_elements() == desk.parameter_count());
  // analytic count is stable at the reference configuration (regression)
  CHECK(ModelConfig::reference(22).parameter_count() == 52529174);
}

TEST_CASE("singleton nodes attend to themselves with weight one") {
  ModelConfig cfg = tiny_config();
  cfg.layout = GridLayout(1, 1);
  DlctModel m(cfg, 5);
  Rng rng(2);
  FeatureBundle fb = random_bundle(cfg, rng, 1);
  ExampleGeometry geom = m.build_geometry(fb);
  AttentionTrace trace;
  ForwardOptions opts;
  opts.trace = &trace;
  m.encode(fb, geom, opts);
  bool saw_dwsa = false;
  for (const auto& rec : trace.records) {
    if (rec.sublayer == "dwsa_r" || rec.sublayer == "dwsa_g") {
      saw_dwsa = true;
      REQUIRE(rec.weights.n_q == 1);
      for (int64_t h = 0; h < rec.weights.heads; ++h) CHECK(rec.weights.at(h, 0, 0) == 1.0);
    }
  }
  CHECK(saw_dwsa);
}

TEST_CASE("the two streams have no hidden cross-talk") {
  // 2x2 grid with regions placed exactly on the cells makes both levels
  // interchangeable; swapping inputs together with the r/g parameter sets
  // must swap the output blocks (vanilla attention: no positional asymmetry).
  ModelConfig cfg = tiny_config();
  cfg.attention_mode = AttentionMode::vanilla;
  cfg.d_region = 6;
  cfg.d_grid = 6;
  DlctModel a(cfg, 11);
  DlctModel b(cfg, 11);
  // swap parameter contents between the r and g streams of b
  for (const auto& [name, t] : a.params().entries()) {
    std::string other = name;
    auto swap_tag = [&](const std::string& from, const std::string& to) {
      const size_t pos = other.find(from);
      if (pos != std::string::npos) other = other.substr(0, pos) + to + other.substr(pos + from.size());
    };
    if (name.find(".r.") != std::string::npos || name.find("in_proj.r") != std::string::npos) {
      swap_tag(".r.", ".g.");
    } else if (name.find(".g.") != std::string::npos || name.find("in_proj.g") != std::string::npos) {
      swap_tag(".g.", ".r.");
    }
    Tensor dst = b.params().get(other);
    auto d = dst.mutable_data();
    for (int64_t i = 0; i < t.numel(); ++i) d[static_cast<size_t>(i)] = t.data()[static_cast<size_t>(i)];
  }

  Rng rng(3);
  FeatureBundle fb;
  fb.layout = cfg.layout;
  fb.regions = random_tensor({4, 6}, rng);
  fb.grids = random_tensor({4, 6}, rng);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) fb.boxes.push_back(cfg.layout.cell_box(i, j));
  }
  FeatureBundle swapped = fb;
  swapped.regions = fb.grids;
  swapped.grids = fb.regions;

  Tensor out_a = a.encode(fb, a.build_geometry(fb));
  Tensor out_b = b.encode(swapped, b.build_geometry(swapped));
  // region block of a == grid block of b and vice versa
  for (int64_t i = 0; i < 4; ++i) {
    for (int64_t c = 0; c < cfg.d_model; ++c) {
      CHECK(out_a.data()[static_cast<size_t>(i * cfg.d_model + c)] ==
            doctest::Approx(out_b.data()[static_cast<size_t>((4 + i) * cfg.d_model + c)]).epsilon(1e-12));
      CHECK(out_a.data()[static_cast<size_t>((4 + i) * cfg.d_model + c)] ==
            doctest::Approx(out_b.data()[static_cast<size_t>(i * cfg.d_model + c)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("full encoder layer passes the finite-difference oracle") {
  ModelConfig cfg = tiny_config();
  DlctModel m(cfg, 13);
  Rng rng(4);
  FeatureBundle fb = random_bundle(cfg, rng, 3);
  ExampleGeometry geom = m.build_geometry(fb);
  Tensor mixer = random_tensor({3 + 4, cfg.d_model}, rng);
  auto f = [&]() { return sum_all(mul(m.encode(fb, geom), mixer)); };
  auto leaves = all_params(m);
  auto report = grad_check(f, std::span<const Tensor>(leaves.data(), leaves.size()), 1e-5, 1e-4);
  if (!report.pass) MESSAGE(report.worst);
  CHECK(report.pass);
}

TEST_CASE("decoder grad check through a 2-token decode") {
  ModelConfig cfg = tiny_config();
  DlctModel m(cfg, 17);
  Rng rng(5);
  FeatureBundle fb = random_bundle(cfg, rng, 2);
  ExampleGeometry geom = m.build_geometry(fb);
  Tensor mixer = random_tensor({2, cfg.vocab_size}, rng);
  TokenSeq tokens = {Vocab::kBos, 4};
  auto f = [&]() { return sum_all(mul(m.decode(m.encode(fb, geom), tokens), mixer)); };
  auto leaves = all_params(m);
  auto report = grad_check(f, std::span<const Tensor>(leaves.data(), leaves.size()), 1e-5, 1e-4);
  if (!report.pass) MESSAGE(report.worst);
  CHECK(report.pass);
}

TEST_CASE("decoder causality: future tokens never change earlier logits") {
  ModelConfig cfg = tiny_config();
  cfg.max_len = 8;
  DlctModel m(cfg, 19);
  Rng rng(6);
  FeatureBundle fb = random_bundle(cfg, rng, 3);
  Tensor enc = m.encode(fb, m.build_geometry(fb));
  TokenSeq tokens = {Vocab::kBos, 3, 4, 5, 6, 7, 3, 4};
  Tensor base = m.decode(enc, tokens);
  for (size_t mut = 1; mut < tokens.size(); ++mut) {
    for (int32_t replacement : {static_cast<int32_t>(5), static_cast<int32_t>(7)}) {
      TokenSeq changed = tokens;
      changed[mut] = replacement;
      Tensor out = m.decode(enc, changed);
      for (size_t t = 0; t + 1 <= mut; ++t) {
        for (int v = 0; v < cfg.vocab_size; ++v) {
          CHECK(out.data()[t * static_cast<size_t>(cfg.vocab_size) + static_cast<size_t>(v)] ==
                base.data()[t * static_cast<size_t>(cfg.vocab_size) + static_cast<size_t>(v)]);
        }
      }
    }
  }
  CHECK(base.shape() == Shape{8, cfg.vocab_size});
  CHECK_THROWS_AS(m.decode(enc, TokenSeq(12, Vocab::kBos)), std::invalid_argument);
  CHECK_THROWS_AS(m.decode(enc, TokenSeq{3, 4}), std::invalid_argument);  // must start with BOS
}

TEST_CASE("batched decode matches per-sequence decode") {
  ModelConfig cfg = tiny_config();
  DlctModel m(cfg, 23);
  Rng rng(7);
  FeatureBundle fb = random_bundle(cfg, rng, 2);
  Tensor enc = m.encode(fb, m.build_geometry(fb));
  std::vector<TokenSeq> prefixes = {{Vocab::kBos, 3, 4}, {Vocab::kBos, 5, 6}, {Vocab::kBos, 7, 7}};
  Tensor batched = m.decode_batch(enc, prefixes);
  REQUIRE(batched.shape() == Shape{3, 3, cfg.vocab_size});
  for (size_t b = 0; b < prefixes.size(); ++b) {
    Tensor single = m.decode(enc, prefixes[b]);
    for (int64_t i = 0; i < single.numel(); ++i) {
      CHECK(batched.data()[b * static_cast<size_t>(single.numel()) + static_cast<size_t>(i)] ==
            doctest::Approx(single.data()[static_cast<size_t>(i)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("region permutation equivariance of the encoder") {
  ModelConfig cfg = tiny_config();
  DlctModel m(cfg, 29);
  Rng rng(8);
  FeatureBundle fb = random_bundle(cfg, rng, 4);
  Tensor base = m.encode(fb, m.build_geometry(fb));

  const std::vector<int64_t> perm = {2, 0, 3, 1};
  FeatureBundle permuted = fb;
  std::vector<double> reg(static_cast<size_t>(4 * cfg.d_region));
  for (int64_t i = 0; i < 4; ++i) {
    for (int64_t c = 0; c < cfg.d_region; ++c) {
      reg[static_cast<size_t>(i * cfg.d_region + c)] =
          fb.regions.data()[static_cast<size_t>(perm[static_cast<size_t>(i)] * cfg.d_region + c)];
    }
  }
  permuted.regions = Tensor::from_data({4, cfg.d_region}, std::move(reg));
  permuted.boxes.clear();
  for (int64_t i = 0; i < 4; ++i) permuted.boxes.push_back(fb.boxes[static_cast<size_t>(perm[static_cast<size_t>(i)])]);

  Tensor out = m.encode(permuted, m.build_geometry(permuted));
  const int64_t d = cfg.d_model;
  for (int64_t i = 0; i < 4; ++i) {
    for (int64_t c = 0; c < d; ++c) {
      CHECK(out.data()[static_cast<size_t>(i * d + c)] ==
            doctest::Approx(base.data()[static_cast<size_t>(perm[static_cast<size_t>(i)] * d + c)]).epsilon(1e-11));
    }
  }
  // grid block is invariant under region permutation
  for (int64_t i = 4; i < 8; ++i) {
    for (int64_t c = 0; c < d; ++c) {
      CHECK(out.data()[static_cast<size_t>(i * d + c)] ==
            doctest::Approx(base.data()[static_cast<size_t>(i * d + c)]).epsilon(1e-11));
    }
  }
}

TEST_CASE("ablation wiring shares one code path") {
  ModelConfig aligned_cfg = tiny_config();
  ModelConfig complete_cfg = tiny_config();
  complete_cfg.graph_mode = GraphMode::complete;
  DlctModel aligned(aligned_cfg, 31);
  DlctModel complete(complete_cfg, 31);  // identical parameter enumeration and seed

  Rng rng(9);
  // boxes covering the whole canvas make the aligned graph complete
  FeatureBundle fb;
  fb.layout = aligned_cfg.layout;
  fb.regions = random_tensor({2, aligned_cfg.d_region}, rng);
  fb.grids = random_tensor({4, aligned_cfg.d_grid}, rng);
  fb.boxes.emplace_back(0.001, 0.001, 0.999, 0.999);
  fb.boxes.emplace_back(0.01, 0.02, 0.98, 0.97);
  Tensor out_aligned = aligned.encode(fb, aligned.build_geometry(fb));
  Tensor out_complete = complete.encode(fb, complete.build_geometry(fb));
  CHECK(max_abs_diff(out_aligned, out_complete) == 0.0);

  // removing the cross stage leaves the pure two-stream self-attention model
  ModelConfig no_lcca = tiny_config();
  no_lcca.graph_mode = GraphMode::none;
  DlctModel dwsa_only(no_lcca, 31);
  for (const auto& [name, _] : dwsa_only.params().entries()) {
    CHECK(name.find("lcca") == std::string::npos);
  }
  Tensor out_plain = dwsa_only.encode(fb, dwsa_only.build_geometry(fb));
  CHECK(out_plain.shape() == out_aligned.shape());

  // single-stream and concat variants run through the same encode entry
  for (FeatureMode fm : {FeatureMode::grid_only, FeatureMode::region_only, FeatureMode::concat}) {
    ModelConfig cfg = tiny_config();
    cfg.feature_mode = fm;
    cfg.graph_mode = GraphMode::none;
    for (AttentionMode am : {AttentionMode::cra, AttentionMode::pe_only, AttentionMode::vanilla}) {
      cfg.attention_mode = am;
      DlctModel m(cfg, 37);
      Tensor out = m.encode(fb, m.build_geometry(fb));
      const int64_t expect_rows = fm == FeatureMode::grid_only ? 4 : (fm == FeatureMode::region_only ? 2 : 6);
      CHECK(out.shape() == Shape{expect_rows, cfg.d_model});
    }
  }
  // inconsistent combinations are rejected
  ModelConfig bad = tiny_config();
  bad.feature_mode = FeatureMode::grid_only;
  bad.graph_mode = GraphMode::complete;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("encoding is deterministic and layers=0 degenerates to projections") {
  ModelConfig cfg = tiny_config();
  DlctModel m(cfg, 41);
  Rng rng(10);
  FeatureBundle fb = random_bundle(cfg, rng, 3);
  ExampleGeometry geom = m.build_geometry(fb);
  Tensor a = m.encode(fb, geom);
  Tensor b = m.encode(fb, geom);
  CHECK(max_abs_diff(a, b) == 0.0);
}

TEST_CASE("parameter save/load reproduces float32-rounded values") {
  ModelConfig cfg = tiny_config();
  DlctModel m(cfg, 43);
  auto dir = std::filesystem::temp_directory_path() / "dlct_model_params";
  std::filesystem::remove_all(dir);
  m.save_params(dir.string());
  DlctModel other(cfg, 44);
  other.load_params(dir.string());
  for (const auto& [name, t] : m.params().entries()) {
    const Tensor& o = other.params().get(name);
    for (int64_t i = 0; i < t.numel(); ++i) {
      CHECK(o.data()[static_cast<size_t>(i)] ==
            static_cast<double>(static_cast<float>(t.data()[static_cast<size_t>(i)])));
    }
  }
}

TEST_CASE("config canonical string round trips") {
  ModelConfig cfg = tiny_config();
  cfg.feature_mode = FeatureMode::dual;
  cfg.attention_mode = AttentionMode::pe_only;
  cfg.graph_mode = GraphMode::complete;
  ModelConfig back = ModelConfig::from_canonical(cfg.canonical_string());
  CHECK(back.canonical_string() == cfg.canonical_string());
  CHECK(back.d_model == cfg.d_model);
  CHECK(to_string(back.attention_mode) == "pe-only");
}
