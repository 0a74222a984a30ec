#pragma once

#include <string>
#include <vector>

#include "pplug/data.hpp"
#include "pplug/encoder.hpp"

namespace pplug {

enum class RetrieverKind { bm25, recency, dense };

struct RetrievalResult {
  std::vector<std::string> ids;  // ranked, best first
  std::vector<double> scores;    // non-increasing
  RetrieverKind kind = RetrieverKind::bm25;
  int k = 0;
  std::vector<std::size_t> indices;  // positions within the profile
};

// Okapi BM25 over one user's profile, k1=1.2, b=0.75,
// idf = ln((n - df + 0.5)/(df + 0.5) + 1). Score ties broken by recency
// (newer first).
RetrievalResult bm25_rank(const std::string& input_text, const UserProfile& profile, int k);

RetrievalResult recency_rank(const UserProfile& profile, int k);

// Dot-product ranking against the frozen behavior vectors; ties by lower
// row index. Stands in for a dense retriever checkpoint.
RetrievalResult dense_rank(const EncodedProfile& profile_enc, const Vector& x_vec, int k);

// Demonstrations joined oldest-to-newest with "\n\n", followed by the input.
std::string build_rbp_prompt(const std::vector<const Behavior*>& retrieved,
                             const std::string& input_text);

// Convenience: behaviors for a retrieval result, oldest-to-newest.
std::vector<const Behavior*> retrieved_behaviors(const UserProfile& profile,
                                                 const RetrievalResult& result);

}  // namespace pplug
