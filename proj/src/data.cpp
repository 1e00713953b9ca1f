#include "dlct/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "dlct/tensor_io.hpp"

namespace dlct {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* shape_word(ObjShape s) {
  switch (s) {
    case ObjShape::circle: return "circle";
    case ObjShape::square: return "square";
    case ObjShape::triangle: return "triangle";
  }
  throw std::logic_error("bad shape");
}

const char* color_word(ObjColor c) {
  switch (c) {
    case ObjColor::red: return "red";
    case ObjColor::blue: return "blue";
    case ObjColor::green: return "green";
    case ObjColor::yellow: return "yellow";
  }
  throw std::logic_error("bad color");
}

const char* size_word(ObjSize s, bool synonym) {
  if (s == ObjSize::small) return synonym ? "little" : "small";
  return synonym ? "big" : "large";
}

double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

Vocab::Vocab()
    : Vocab(std::vector<std::string>{"<pad>", "<bos>", "<eos>", "a", "on", "background", "left", "right",
                                     "of", "above", "below", "red", "blue", "green", "yellow", "small",
                                     "large", "little", "big", "circle", "square", "triangle"}) {}

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.size() < 3 || words_[0] != "<pad>" || words_[1] != "<bos>" || words_[2] != "<eos>") {
    throw std::invalid_argument("Vocab: first three entries must be <pad>, <bos>, <eos>");
  }
}

int32_t Vocab::id(const std::string& word) const {
  for (size_t i = 0; i < words_.size(); ++i) {
    if (words_[i] == word) return static_cast<int32_t>(i);
  }
  return -1;
}

const std::string& Vocab::word(int32_t id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("Vocab: id out of range");
  return words_[static_cast<size_t>(id)];
}

std::string Vocab::text(const TokenSeq& tokens) const {
  std::string out;
  for (int32_t t : tokens) {
    if (t == kPad || t == kBos || t == kEos) continue;
    if (!out.empty()) out.push_back(' ');
    out += word(t);
  }
  return out;
}

int Dataset::max_caption_len() const {
  int m = 0;
  for (const auto* split : {&train, &val, &test}) {
    for (const TrainExample& ex : *split) {
      for (const TokenSeq& c : ex.captions) m = std::max(m, static_cast<int>(c.size()));
    }
  }
  return m;
}

SyntheticScene sample_scene(Rng& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    SyntheticScene scene;
    scene.background = static_cast<ObjColor>(rng.uniform_int(4));
    const int target = 1 + static_cast<int>(rng.uniform_int(6));
    bool ok = true;
    for (int i = 0; i < target && ok; ++i) {
      bool placed = false;
      for (int tries = 0; tries < 200; ++tries) {
        SceneObject obj;
        obj.shape = static_cast<ObjShape>(rng.uniform_int(3));
        // object colours come from the three non-background colours
        int c = static_cast<int>(rng.uniform_int(3));
        if (c >= static_cast<int>(scene.background)) ++c;
        obj.color = static_cast<ObjColor>(c);
        obj.size = static_cast<ObjSize>(rng.uniform_int(2));
        const double w = obj.size == ObjSize::small ? rng.uniform(0.08, 0.18) : rng.uniform(0.22, 0.38);
        const double h = obj.size == ObjSize::small ? rng.uniform(0.08, 0.18) : rng.uniform(0.22, 0.38);
        const double cx = rng.uniform(w / 2 + 0.01, 1.0 - w / 2 - 0.01);
        const double cy = rng.uniform(h / 2 + 0.01, 1.0 - h / 2 - 0.01);
        bool clash = false;
        for (const SceneObject& other : scene.objects) {
          const bool same_triple =
              other.shape == obj.shape && other.color == obj.color && other.size == obj.size;
          const double dx = other.box.cx() - cx;
          const double dy = other.box.cy() - cy;
          // margin keeps the >= 0.1 centre-distance invariant intact after
          // the float32 rounding of stored box corners
          if (same_triple || std::sqrt(dx * dx + dy * dy) < 0.101) {
            clash = true;
            break;
          }
        }
        if (clash) continue;
        obj.box = BoundingBox(f32(cx - w / 2), f32(cy - h / 2), f32(cx + w / 2), f32(cy + h / 2));
        scene.objects.push_back(obj);
        placed = true;
        break;
      }
      ok = placed;
    }
    if (ok) return scene;
  }
  throw std::runtime_error("sample_scene: rejection sampling failed to converge");
}

namespace {

std::vector<std::string> base_caption_words(const SyntheticScene& scene) {
  // salience order: larger area first; y grows downward, so smaller cy is "above"
  std::vector<size_t> order(scene.objects.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return scene.objects[a].box.area() > scene.objects[b].box.area();
  });

  const SceneObject& a = scene.objects[order[0]];
  std::vector<std::string> words = {"a", size_word(a.size, false), color_word(a.color), shape_word(a.shape)};
  if (scene.objects.size() > 1) {
    const SceneObject& b = scene.objects[order[1]];
    const double dx = a.box.cx() - b.box.cx();
    const double dy = a.box.cy() - b.box.cy();
    if (std::fabs(dx) >= std::fabs(dy)) {
      words.push_back(dx < 0 ? "left" : "right");
      words.push_back("of");
    } else {
      words.push_back(dy < 0 ? "above" : "below");
    }
    words.insert(words.end(), {"a", size_word(b.size, false), color_word(b.color), shape_word(b.shape)});
  }
  words.insert(words.end(), {"on", "a", color_word(scene.background), "background"});
  return words;
}

TokenSeq to_ids(const std::vector<std::string>& words, const Vocab& vocab) {
  TokenSeq out;
  out.reserve(words.size());
  for (const std::string& w : words) {
    const int32_t id = vocab.id(w);
    if (id < 0) throw std::logic_error("grammar produced a word outside the vocabulary: " + w);
    out.push_back(id);
  }
  return out;
}

}  // namespace

std::vector<TokenSeq> make_captions(const SyntheticScene& scene, const Vocab& vocab) {
  const std::vector<std::string> base = base_caption_words(scene);

  auto swap_sizes = [&](bool first_only) {
    std::vector<std::string> words = base;
    bool done = false;
    for (auto& w : words) {
      if (done && first_only) break;
      if (w == "small" || w == "large") {
        w = w == "small" ? "little" : "big";
        done = true;
      }
    }
    return words;
  };

  // Three verbatim copies plus two synonym variants keep the references
  // mutually close, so a caption matching one of them still scores high.
  std::vector<TokenSeq> refs;
  refs.push_back(to_ids(base, vocab));
  refs.push_back(refs[0]);
  refs.push_back(refs[0]);
  refs.push_back(to_ids(swap_sizes(true), vocab));
  refs.push_back(to_ids(swap_sizes(false), vocab));
  return refs;
}

FeatureBundle make_features(const SyntheticScene& scene, const GenConfig& cfg, Rng& rng) {
  if (cfg.d_region < 9 || cfg.d_grid < 14) {
    throw std::invalid_argument("make_features: d_region must be >= 9 and d_grid >= 14");
  }
  FeatureBundle fb;
  fb.layout = cfg.layout;
  const int64_t n_r = static_cast<int64_t>(scene.objects.size());
  std::vector<double> reg(static_cast<size_t>(n_r * cfg.d_region), 0.0);
  for (int64_t i = 0; i < n_r; ++i) {
    const SceneObject& o = scene.objects[static_cast<size_t>(i)];
    double* row = reg.data() + i * cfg.d_region;
    row[static_cast<int>(o.shape)] = 1.0;
    row[3 + static_cast<int>(o.color)] = 1.0;
    row[7 + static_cast<int>(o.size)] = 1.0;
    for (int d = 0; d < cfg.d_region; ++d) row[d] = f32(row[d] + rng.gaussian(0.0, cfg.noise_sigma));
    fb.boxes.push_back(o.box);
  }
  fb.regions = Tensor::from_data({n_r, cfg.d_region}, std::move(reg));

  const int64_t n_g = cfg.layout.cells();
  std::vector<double> grid(static_cast<size_t>(n_g * cfg.d_grid), 0.0);
  for (int i = 0; i < cfg.layout.rows; ++i) {
    for (int j = 0; j < cfg.layout.cols; ++j) {
      const BoundingBox cell = cfg.layout.cell_box(i, j);
      double* row = grid.data() + static_cast<int64_t>(i * cfg.layout.cols + j) * cfg.d_grid;
      double covered = 0.0;
      for (const SceneObject& o : scene.objects) {
        const double frac = o.box.overlap_area(cell) / cell.area();
        if (frac <= 0.0) continue;
        covered += frac;
        row[static_cast<int>(o.shape)] += frac;
        row[3 + static_cast<int>(o.color)] += frac;
        row[7 + static_cast<int>(o.size)] += frac;
      }
      covered = std::min(covered, 1.0);
      row[9 + static_cast<int>(scene.background)] = 1.0 - covered;
      row[13] = covered;
      for (int d = 0; d < cfg.d_grid; ++d) row[d] = f32(row[d]);
    }
  }
  fb.grids = Tensor::from_data({n_g, cfg.d_grid}, std::move(grid));
  return fb;
}

Dataset generate_corpus(const GenConfig& cfg) {
  if (cfg.n < 10) throw std::invalid_argument("generate_corpus: n must be >= 10");
  Dataset d;
  d.layout = cfg.layout;
  d.d_region = cfg.d_region;
  d.d_grid = cfg.d_grid;

  const Rng root(cfg.seed);
  const int n_train = cfg.n * 90 / 100;
  const int n_val = cfg.n * 5 / 100;
  for (int i = 0; i < cfg.n; ++i) {
    Rng ex_rng = root.derive(static_cast<uint64_t>(i));
    SyntheticScene scene = sample_scene(ex_rng);
    TrainExample ex;
    ex.features = make_features(scene, cfg, ex_rng);
    ex.captions = make_captions(scene, d.vocab);
    auto& split = i < n_train ? d.train : (i < n_train + n_val ? d.val : d.test);
    split.push_back(std::move(ex));
  }
  return d;
}

namespace {

constexpr char kSplitMagic[8] = {'D', 'L', 'C', 'T', 'D', 'S', '1', '\n'};

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("dataset: truncated integer field");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, double v) {
  float f = static_cast<float>(v);
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

double get_f32(std::istream& is) {
  const uint32_t bits = get_u32(is);
  float f;
  std::memcpy(&f, &bits, 4);
  return static_cast<double>(f);
}

void write_split(const std::string& path, const std::vector<TrainExample>& split) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("dataset: cannot open for write: " + path);
  os.write(kSplitMagic, 8);
  put_u32(os, static_cast<uint32_t>(split.size()));
  for (const TrainExample& ex : split) {
    const uint32_t n_r = static_cast<uint32_t>(ex.features.boxes.size());
    put_u32(os, n_r);
    for (const BoundingBox& b : ex.features.boxes) {
      put_f32(os, b.x_min);
      put_f32(os, b.y_min);
      put_f32(os, b.x_max);
      put_f32(os, b.y_max);
    }
    write_dlt1(os, ex.features.regions);
    write_dlt1(os, ex.features.grids);
    put_u32(os, static_cast<uint32_t>(ex.captions.size()));
    for (const TokenSeq& cap : ex.captions) {
      put_u32(os, static_cast<uint32_t>(cap.size()));
      for (int32_t t : cap) put_u32(os, static_cast<uint32_t>(t));
    }
  }
  if (!os) throw std::runtime_error("dataset: write failed: " + path);
}

std::vector<TrainExample> read_split(const std::string& path, const GridLayout& layout) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset: cannot open for read: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kSplitMagic, 8) != 0) {
    throw std::runtime_error("dataset: bad split-file magic in " + path);
  }
  const uint32_t count = get_u32(is);
  std::vector<TrainExample> split;
  split.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    try {
      TrainExample ex;
      ex.features.layout = layout;
      const uint32_t n_r = get_u32(is);
      for (uint32_t r = 0; r < n_r; ++r) {
        const double x0 = get_f32(is), y0 = get_f32(is), x1 = get_f32(is), y1 = get_f32(is);
        ex.features.boxes.emplace_back(x0, y0, x1, y1);
      }
      ex.features.regions = read_dlt1(is);
      ex.features.grids = read_dlt1(is);
      const uint32_t n_caps = get_u32(is);
      for (uint32_t c = 0; c < n_caps; ++c) {
        const uint32_t len = get_u32(is);
        TokenSeq cap(len);
        for (uint32_t t = 0; t < len; ++t) cap[t] = static_cast<int32_t>(get_u32(is));
        ex.captions.push_back(std::move(cap));
      }
      split.push_back(std::move(ex));
    } catch (const std::exception& e) {
      throw std::runtime_error("dataset: corrupt record for example " + std::to_string(i) + " in " + path +
                               ": " + e.what());
    }
  }
  return split;
}

}  // namespace

void write_dataset(const Dataset& d, const std::string& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "dlct-dataset-v1";
  manifest["grid"] = {d.layout.rows, d.layout.cols};
  manifest["d_region"] = d.d_region;
  manifest["d_grid"] = d.d_grid;
  manifest["counts"] = {{"train", d.train.size()}, {"val", d.val.size()}, {"test", d.test.size()}};
  manifest["max_caption_len"] = d.max_caption_len();
  manifest["vocab"] = d.vocab.words();
  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("dataset: cannot write manifest in " + dir);
  mf << manifest.dump(2) << '\n';
  write_split((fs::path(dir) / "train.bin").string(), d.train);
  write_split((fs::path(dir) / "val.bin").string(), d.val);
  write_split((fs::path(dir) / "test.bin").string(), d.test);
}

Dataset read_dataset(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("dataset: missing manifest.json in " + dir);
  json manifest = json::parse(mf, nullptr, /*allow_exceptions=*/true);
  if (manifest.value("format", "") != "dlct-dataset-v1") {
    throw std::runtime_error("dataset: unsupported manifest format in " + dir);
  }
  Dataset d;
  d.layout = GridLayout(manifest["grid"][0].get<int>(), manifest["grid"][1].get<int>());
  d.d_region = manifest["d_region"].get<int>();
  d.d_grid = manifest["d_grid"].get<int>();
  d.vocab = Vocab(manifest["vocab"].get<std::vector<std::string>>());
  d.train = read_split((fs::path(dir) / "train.bin").string(), d.layout);
  d.val = read_split((fs::path(dir) / "val.bin").string(), d.layout);
  d.test = read_split((fs::path(dir) / "test.bin").string(), d.layout);
  const auto& counts = manifest["counts"];
  if (d.train.size() != counts["train"].get<size_t>() || d.val.size() != counts["val"].get<size_t>() ||
      d.test.size() != counts["test"].get<size_t>()) {
    throw std::runtime_error("dataset: split sizes disagree with manifest in " + dir);
  }
  return d;
}

Dataset import_features(const std::string& src_dir, const GridLayout& layout) {
  Dataset d;
  d.layout = layout;

  WordInterner interner;
  interner.intern("<pad>");
  interner.intern("<bos>");
  interner.intern("<eos>");

  std::vector<TrainExample> all;
  for (int idx = 0;; ++idx) {
    const fs::path base = fs::path(src_dir) / std::to_string(idx);
    const std::string regions_path = base.string() + ".regions.dlt1";
    if (!fs::exists(regions_path)) break;
    TrainExample ex;
    ex.features.layout = layout;
    ex.features.regions = load_tensor(regions_path);
    ex.features.grids = load_tensor(base.string() + ".grids.dlt1");
    if (ex.features.grids.shape()[0] != layout.cells()) {
      throw std::runtime_error("import: grid tensor rows do not match the layout for example " +
                               std::to_string(idx));
    }
    Tensor boxes = load_tensor(base.string() + ".boxes.dlt1");
    if (boxes.rank() != 2 || boxes.shape()[1] != 4 || boxes.shape()[0] != ex.features.regions.shape()[0]) {
      throw std::runtime_error("import: boxes must be [N_R, 4] for example " + std::to_string(idx));
    }
    for (int64_t r = 0; r < boxes.shape()[0]; ++r) {
      const double* q = boxes.data().data() + r * 4;
      ex.features.boxes.emplace_back(q[0], q[1], q[2], q[3]);
    }
    std::ifstream caps(base.string() + ".captions.txt");
    if (!caps) throw std::runtime_error("import: missing captions for example " + std::to_string(idx));
    std::string line;
    while (std::getline(caps, line)) {
      const auto words = tokenize_words(line);
      if (words.empty()) continue;
      TokenSeq cap;
      for (const std::string& w : words) cap.push_back(interner.intern(w));
      ex.captions.push_back(std::move(cap));
    }
    if (ex.captions.empty()) throw std::runtime_error("import: example " + std::to_string(idx) + " has no captions");
    all.push_back(std::move(ex));
  }
  if (all.empty()) throw std::runtime_error("import: no examples found in " + src_dir);

  d.d_region = static_cast<int>(all[0].features.regions.shape()[1]);
  d.d_grid = static_cast<int>(all[0].features.grids.shape()[1]);
  d.vocab = Vocab(interner.words());
  const size_t n_train = all.size() * 90 / 100;
  const size_t n_val = all.size() * 5 / 100;
  for (size_t i = 0; i < all.size(); ++i) {
    auto& split = i < n_train ? d.train : (i < n_train + n_val ? d.val : d.test);
    split.push_back(std::move(all[i]));
  }
  return d;
}

std::vector<std::vector<TokenSeq>> references_of(const std::vector<TrainExample>& split) {
  std::vector<std::vector<TokenSeq>> refs;
  refs.reserve(split.size());
  for (const TrainExample& ex : split) refs.push_back(ex.captions);
  return refs;
}

}  // namespace dlct
