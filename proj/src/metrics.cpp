#include "dlct/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

namespace dlct {

std::vector<std::string> tokenize_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const unsigned char u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

int32_t WordInterner::intern(const std::string& word) {
  auto it = ids_.find(word);
  if (it != ids_.end()) return it->second;
  const int32_t id = static_cast<int32_t>(words_.size());
  ids_.emplace(word, id);
  words_.push_back(word);
  return id;
}

uint64_t pack_ngram(const TokenSeq& tokens, size_t start, int n) {
  uint64_t key = 0;
  for (int i = 0; i < n; ++i) {
    const int32_t id = tokens[start + static_cast<size_t>(i)];
    if (id < 0 || id >= 65535) {
      throw std::invalid_argument("metric tokens must be small non-negative ids, got " + std::to_string(id));
    }
    key = (key << 16) | static_cast<uint64_t>(id + 1);
  }
  return key;
}

namespace {

constexpr int kMaxN = 4;

// N-gram counts in first-occurrence order; the accumulation order below is
// part of the metric's reproducibility contract (cosine of a sentence with
// itself is exactly 1 because numerator and norm sum identical products in
// identical order).
struct OrderedCounts {
  std::vector<std::pair<uint64_t, int32_t>> entries;
  std::unordered_map<uint64_t, size_t> index;

  void bump(uint64_t key) {
    auto [it, inserted] = index.try_emplace(key, entries.size());
    if (inserted) {
      entries.emplace_back(key, 1);
    } else {
      ++entries[it->second].second;
    }
  }
};

struct TfIdfVec {
  std::array<std::vector<std::pair<uint64_t, double>>, kMaxN> entries;
  std::array<std::unordered_map<uint64_t, double>, kMaxN> lookup;
  std::array<double, kMaxN> norm{};
  int64_t length = 0;  // counted from bigram totals
};

TfIdfVec to_vec(const TokenSeq& s, const CorpusStats& stats) {
  TfIdfVec out;
  for (int n = 1; n <= kMaxN; ++n) {
    if (s.size() < static_cast<size_t>(n)) continue;
    OrderedCounts counts;
    for (size_t i = 0; i + static_cast<size_t>(n) <= s.size(); ++i) counts.bump(pack_ngram(s, i, n));
    double sq = 0.0;
    auto& ent = out.entries[static_cast<size_t>(n - 1)];
    auto& look = out.lookup[static_cast<size_t>(n - 1)];
    ent.reserve(counts.entries.size());
    for (const auto& [g, tf] : counts.entries) {
      const double idf = stats.log_ref_count() - std::log(std::max(1.0, stats.df(g)));
      const double v = static_cast<double>(tf) * idf;
      ent.emplace_back(g, v);
      look.emplace(g, v);
      sq += v * v;
      if (n == 2) out.length += tf;
    }
    out.norm[static_cast<size_t>(n - 1)] = std::sqrt(sq);
  }
  return out;
}

}  // namespace

CorpusStats CorpusStats::build(const std::vector<std::vector<TokenSeq>>& refs_per_image) {
  if (refs_per_image.empty()) throw std::invalid_argument("CorpusStats: empty reference corpus");
  CorpusStats stats;
  stats.n_images_ = static_cast<int>(refs_per_image.size());
  stats.log_ref_count_ = std::log(static_cast<double>(std::max(stats.n_images_, 1)));
  for (const auto& refs : refs_per_image) {
    std::unordered_map<uint64_t, bool> seen;
    for (const TokenSeq& ref : refs) {
      for (int n = 1; n <= kMaxN; ++n) {
        for (size_t i = 0; i + static_cast<size_t>(n) <= ref.size(); ++i) seen[pack_ngram(ref, i, n)] = true;
      }
    }
    for (const auto& [g, _] : seen) ++stats.df_[g];
  }
  return stats;
}

double CorpusStats::df(uint64_t key) const {
  auto it = df_.find(key);
  return it == df_.end() ? 0.0 : static_cast<double>(it->second);
}

std::vector<CiderRefTerms> cider_d_terms(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
                                         const CorpusStats& stats) {
  if (references.empty()) throw std::invalid_argument("cider_d: empty reference list");
  const TfIdfVec ch = to_vec(candidate, stats);
  std::vector<CiderRefTerms> out;
  out.reserve(references.size());
  for (const TokenSeq& ref : references) {
    const TfIdfVec rv = to_vec(ref, stats);
    CiderRefTerms terms;
    const double delta = static_cast<double>(ch.length - rv.length);
    terms.penalty = std::exp(-(delta * delta) / (2.0 * kCiderSigma * kCiderSigma));
    for (int n = 0; n < kMaxN; ++n) {
      double val = 0.0;
      for (const auto& [g, cv] : ch.entries[static_cast<size_t>(n)]) {
        auto it = rv.lookup[static_cast<size_t>(n)].find(g);
        if (it == rv.lookup[static_cast<size_t>(n)].end()) continue;
        val += std::min(cv, it->second) * it->second;
      }
      if (ch.norm[static_cast<size_t>(n)] != 0.0 && rv.norm[static_cast<size_t>(n)] != 0.0) {
        val /= ch.norm[static_cast<size_t>(n)] * rv.norm[static_cast<size_t>(n)];
      }
      terms.cosine[static_cast<size_t>(n)] = val;
    }
    out.push_back(terms);
  }
  return out;
}

double cider_d(const TokenSeq& candidate, const std::vector<TokenSeq>& references, const CorpusStats& stats) {
  const auto terms = cider_d_terms(candidate, references, stats);
  double acc = 0.0;
  for (const CiderRefTerms& t : terms) {
    for (int n = 0; n < kMaxN; ++n) acc += t.penalty * t.cosine[static_cast<size_t>(n)];
  }
  return acc / kMaxN / static_cast<double>(terms.size()) * 10.0;
}

namespace {

// (clipped matches, candidate total) for order-n grams.
std::pair<int64_t, int64_t> clipped_counts(const TokenSeq& cand, const std::vector<TokenSeq>& refs, int n) {
  if (cand.size() < static_cast<size_t>(n)) return {0, 0};
  std::unordered_map<uint64_t, int32_t> cc;
  for (size_t i = 0; i + static_cast<size_t>(n) <= cand.size(); ++i) ++cc[pack_ngram(cand, i, n)];
  std::unordered_map<uint64_t, int32_t> max_ref;
  for (const TokenSeq& ref : refs) {
    std::unordered_map<uint64_t, int32_t> rc;
    for (size_t i = 0; i + static_cast<size_t>(n) <= ref.size(); ++i) ++rc[pack_ngram(ref, i, n)];
    for (const auto& [g, c] : rc) max_ref[g] = std::max(max_ref[g], c);
  }
  int64_t match = 0;
  int64_t total = 0;
  for (const auto& [g, c] : cc) {
    auto it = max_ref.find(g);
    match += std::min<int64_t>(c, it == max_ref.end() ? 0 : it->second);
    total += c;
  }
  return {match, total};
}

int64_t closest_ref_length(const TokenSeq& cand, const std::vector<TokenSeq>& refs) {
  int64_t best = -1;
  int64_t best_diff = -1;
  for (const TokenSeq& ref : refs) {
    const int64_t len = static_cast<int64_t>(ref.size());
    const int64_t diff = std::llabs(len - static_cast<int64_t>(cand.size()));
    if (best < 0 || diff < best_diff || (diff == best_diff && len < best)) {
      best = len;
      best_diff = diff;
    }
  }
  return best;
}

}  // namespace

double corpus_bleu(const std::vector<TokenSeq>& candidates,
                   const std::vector<std::vector<TokenSeq>>& references, int max_n) {
  if (candidates.size() != references.size()) {
    throw std::invalid_argument("corpus_bleu: candidate/reference count mismatch");
  }
  if (candidates.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
  std::vector<int64_t> match(static_cast<size_t>(max_n), 0);
  std::vector<int64_t> total(static_cast<size_t>(max_n), 0);
  int64_t c_len = 0;
  int64_t r_len = 0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    if (references[i].empty()) throw std::invalid_argument("corpus_bleu: image without references");
    for (int n = 1; n <= max_n; ++n) {
      const auto [m, t] = clipped_counts(candidates[i], references[i], n);
      match[static_cast<size_t>(n - 1)] += m;
      total[static_cast<size_t>(n - 1)] += t;
    }
    c_len += static_cast<int64_t>(candidates[i].size());
    r_len += closest_ref_length(candidates[i], references[i]);
  }
  double log_p = 0.0;
  for (int n = 0; n < max_n; ++n) {
    if (match[static_cast<size_t>(n)] == 0 || total[static_cast<size_t>(n)] == 0) return 0.0;
    log_p += std::log(static_cast<double>(match[static_cast<size_t>(n)]) /
                      static_cast<double>(total[static_cast<size_t>(n)]));
  }
  log_p /= max_n;
  const double bp = c_len > r_len ? 1.0 : std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(std::max<int64_t>(c_len, 1)));
  return bp * std::exp(log_p);
}

double sentence_bleu(const TokenSeq& candidate, const std::vector<TokenSeq>& references, int max_n) {
  if (references.empty()) throw std::invalid_argument("sentence_bleu: empty reference list");
  if (candidate.empty()) return 0.0;
  double log_p = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    auto [m, t] = clipped_counts(candidate, references, n);
    if (n >= 2 && m == 0) {
      m += 1;
      t += 1;
    }
    if (m == 0 || t == 0) return 0.0;
    log_p += std::log(static_cast<double>(m) / static_cast<double>(t));
  }
  log_p /= max_n;
  const int64_t r = closest_ref_length(candidate, references);
  const double bp =
      static_cast<int64_t>(candidate.size()) > r
          ? 1.0
          : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(candidate.size()));
  return bp * std::exp(log_p);
}

}  // namespace dlct
