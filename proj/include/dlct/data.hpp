#pragma once

#include <string>
#include <vector>

#include "dlct/geometry.hpp"
#include "dlct/metrics.hpp"
#include "dlct/rng.hpp"
#include "dlct/tensor.hpp"

namespace dlct {

enum class ObjShape : int { circle = 0, square = 1, triangle = 2 };
enum class ObjColor : int { red = 0, blue = 1, green = 2, yellow = 3 };
enum class ObjSize : int { small = 0, large = 1 };

struct SceneObject {
  ObjShape shape{};
  ObjColor color{};
  ObjSize size{};
  BoundingBox box;
};

// 1..6 objects with pairwise centre distance >= 0.1, boxes inside the unit
// square, attribute triples unique within the scene, background colour
// distinct from every object colour.
struct SyntheticScene {
  std::vector<SceneObject> objects;
  ObjColor background{};
};

struct FeatureBundle {
  Tensor regions;  // [N_R, d_region]
  Tensor grids;    // [rows*cols, d_grid]
  std::vector<BoundingBox> boxes;
  GridLayout layout;
};

struct TrainExample {
  FeatureBundle features;
  std::vector<TokenSeq> captions;  // 5 references, token ids without BOS/EOS
};

// Fixed grammar vocabulary. Ids 0..2 are <pad>/<bos>/<eos>.
class Vocab {
 public:
  Vocab();  // the builtin grammar vocabulary
  explicit Vocab(std::vector<std::string> words);

  int32_t size() const { return static_cast<int32_t>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }
  int32_t id(const std::string& word) const;  // -1 if unknown
  const std::string& word(int32_t id) const;
  std::string text(const TokenSeq& tokens) const;

  static constexpr int32_t kPad = 0;
  static constexpr int32_t kBos = 1;
  static constexpr int32_t kEos = 2;

 private:
  std::vector<std::string> words_;
};

struct Dataset {
  GridLayout layout;
  int d_region = 16;
  int d_grid = 16;
  Vocab vocab;
  std::vector<TrainExample> train, val, test;

  int max_caption_len() const;
};

struct GenConfig {
  int n = 2000;
  uint64_t seed = 0;
  GridLayout layout{4, 4};
  int d_region = 16;
  int d_grid = 16;
  double noise_sigma = 0.05;
};

// Deterministic scene/caption sampling; exposed for property tests.
SyntheticScene sample_scene(Rng& rng);
std::vector<TokenSeq> make_captions(const SyntheticScene& scene, const Vocab& vocab);
FeatureBundle make_features(const SyntheticScene& scene, const GenConfig& cfg, Rng& rng);

// Deterministic corpus with a 90/5/5 split by index.
Dataset generate_corpus(const GenConfig& cfg);

// Container layout: <dir>/manifest.json plus train.bin/val.bin/test.bin.
void write_dataset(const Dataset& d, const std::string& dir);
Dataset read_dataset(const std::string& dir);

// Adapter for pre-extracted features: reads <idx>.regions.dlt1,
// <idx>.grids.dlt1, <idx>.boxes.dlt1 and <idx>.captions.txt from a directory
// (consecutive indices from 0) into the same container schema.
Dataset import_features(const std::string& src_dir, const GridLayout& layout);

// Reference token sequences per image for a split (shared corpus-stats and
// reward plumbing).
std::vector<std::vector<TokenSeq>> references_of(const std::vector<TrainExample>& split);

}  // namespace dlct
