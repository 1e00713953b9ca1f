#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace dlct {

// Caption token sequence (no BOS/EOS markers). Metrics depend only on the
// equality structure of the ids, never on their values.
using TokenSeq = std::vector<int32_t>;

// Deterministic tokenization: lowercase, strip punctuation, split on
// whitespace.
std::vector<std::string> tokenize_words(const std::string& text);

class WordInterner {
 public:
  int32_t intern(const std::string& word);
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::unordered_map<std::string, int32_t> ids_;
  std::vector<std::string> words_;
};

// Frozen document frequencies of 1..4-grams over a reference corpus, one
// document per image (the union of that image's references).
class CorpusStats {
 public:
  static CorpusStats build(const std::vector<std::vector<TokenSeq>>& refs_per_image);

  int image_count() const { return n_images_; }
  double log_ref_count() const { return log_ref_count_; }
  double df(uint64_t ngram_key) const;

 private:
  int n_images_ = 0;
  double log_ref_count_ = 0.0;
  std::unordered_map<uint64_t, int32_t> df_;
};

// Packs a 1..4-gram of small non-negative ids into one key (16 bits each,
// shifted by one so length is implicit). Requires ids < 65535.
uint64_t pack_ngram(const TokenSeq& tokens, size_t start, int n);

// Modified n-gram precision BLEU with brevity penalty, corpus-level
// aggregation. Returns a value in [0, 1].
double corpus_bleu(const std::vector<TokenSeq>& candidates,
                   const std::vector<std::vector<TokenSeq>>& references, int max_n = 4);
// Per-sentence variant with add-1 smoothing on zero counts for n >= 2.
// An empty candidate scores 0.
double sentence_bleu(const TokenSeq& candidate, const std::vector<TokenSeq>& references, int max_n = 4);

struct CiderRefTerms {
  double penalty = 0.0;               // Gaussian length penalty factor
  std::array<double, 4> cosine{};     // clipped tf-idf cosine per n, pre-penalty
};

// Per-reference similarity terms; cider_d is 10 x mean over n and references
// of penalty * cosine. Scores lie in [0, 10].
std::vector<CiderRefTerms> cider_d_terms(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
                                         const CorpusStats& stats);
double cider_d(const TokenSeq& candidate, const std::vector<TokenSeq>& references, const CorpusStats& stats);

inline constexpr double kCiderSigma = 6.0;

}  // namespace dlct
