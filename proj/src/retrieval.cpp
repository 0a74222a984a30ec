#include "pplug/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "pplug/tokenizer.hpp"

namespace pplug {

namespace {

constexpr double kK1 = 1.2;
constexpr double kB = 0.75;

struct Ranked {
  std::size_t index;
  double score;
  long long timestamp;
};

RetrievalResult finish(const UserProfile& profile, std::vector<Ranked> ranked, int k,
                       RetrieverKind kind) {
  RetrievalResult r;
  r.kind = kind;
  r.k = k;
  std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), ranked.size());
  for (std::size_t i = 0; i < keep; ++i) {
    r.indices.push_back(ranked[i].index);
    r.ids.push_back(profile.behaviors[ranked[i].index].behavior_id);
    r.scores.push_back(ranked[i].score);
  }
  return r;
}

}  // namespace

RetrievalResult bm25_rank(const std::string& input_text, const UserProfile& profile, int k) {
  if (profile.behaviors.empty()) throw std::invalid_argument("bm25_rank: empty profile");
  const std::size_t n = profile.behaviors.size();

  std::vector<std::map<std::string, int>> tf(n);
  std::map<std::string, int> df;
  double total_len = 0.0;
  std::vector<double> doc_len(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto toks = Tokenizer::split(profile.behaviors[i].text);
    doc_len[i] = static_cast<double>(toks.size());
    total_len += doc_len[i];
    for (const auto& t : toks) ++tf[i][t];
    for (const auto& [t, c] : tf[i]) {
      (void)c;
      ++df[t];
    }
  }
  double avg_len = total_len / static_cast<double>(n);
  if (avg_len <= 0) avg_len = 1.0;

  std::vector<Ranked> ranked;
  auto query = Tokenizer::split(input_text);
  for (std::size_t i = 0; i < n; ++i) {
    double score = 0.0;
    for (const auto& term : query) {
      auto it = tf[i].find(term);
      if (it == tf[i].end()) continue;
      double f = static_cast<double>(it->second);
      double idf = std::log((static_cast<double>(n) - df[term] + 0.5) / (df[term] + 0.5) + 1.0);
      score += idf * f * (kK1 + 1.0) / (f + kK1 * (1.0 - kB + kB * doc_len[i] / avg_len));
    }
    ranked.push_back({i, score, profile.behaviors[i].timestamp});
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.timestamp > b.timestamp;  // ties: newer first
  });
  return finish(profile, std::move(ranked), k, RetrieverKind::bm25);
}

RetrievalResult recency_rank(const UserProfile& profile, int k) {
  if (profile.behaviors.empty()) throw std::invalid_argument("recency_rank: empty profile");
  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < profile.behaviors.size(); ++i)
    ranked.push_back({i, static_cast<double>(profile.behaviors[i].timestamp),
                      profile.behaviors[i].timestamp});
  // Newest first; equal timestamps keep original order.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.timestamp > b.timestamp; });
  return finish(profile, std::move(ranked), k, RetrieverKind::recency);
}

RetrievalResult dense_rank(const EncodedProfile& profile_enc, const Vector& x_vec, int k) {
  if (profile_enc.rows.rows() == 0) throw std::invalid_argument("dense_rank: empty profile");
  if (profile_enc.rows.cols() != x_vec.size())
    throw std::invalid_argument("dense_rank: width mismatch");
  Vector dots = profile_enc.rows * x_vec;
  std::vector<Ranked> ranked;
  for (Eigen::Index i = 0; i < dots.size(); ++i)
    ranked.push_back({static_cast<std::size_t>(i), dots(i), 0});
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  RetrievalResult r;
  r.kind = RetrieverKind::dense;
  r.k = k;
  std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), ranked.size());
  for (std::size_t i = 0; i < keep; ++i) {
    r.indices.push_back(ranked[i].index);
    r.ids.push_back(profile_enc.behavior_ids[ranked[i].index]);
    r.scores.push_back(ranked[i].score);
  }
  return r;
}

std::vector<const Behavior*> retrieved_behaviors(const UserProfile& profile,
                                                 const RetrievalResult& result) {
  std::vector<std::size_t> idx = result.indices;
  std::sort(idx.begin(), idx.end());  // profile order is chronological
  std::vector<const Behavior*> out;
  for (std::size_t i : idx) out.push_back(&profile.behaviors[i]);
  return out;
}

std::string build_rbp_prompt(const std::vector<const Behavior*>& retrieved,
                             const std::string& input_text) {
  std::string out;
  for (const auto* b : retrieved) {
    out += b->text;
    out += "\n\n";
  }
  out += input_text;
  return out;
}

}  // namespace pplug
