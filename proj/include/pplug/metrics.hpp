#pragma once

#include <string>
#include <vector>

namespace pplug {

struct LabeledPair {
  std::string prediction;
  std::string gold;
};

struct ClassificationMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

// accuracy = exact-match rate; F1 = unweighted mean of per-class F1 over the
// full label set (absent classes contribute 0).
ClassificationMetrics classification_metrics(const std::vector<LabeledPair>& pairs,
                                             const std::vector<std::string>& label_set);

struct RegressionMetrics {
  double mae = 0.0;
  double rmse = 0.0;
};

RegressionMetrics regression_metrics(const std::vector<LabeledPair>& pairs);

struct RougeMetrics {
  double rouge1_f = 0.0;
  double rougeL_f = 0.0;
};

// Lowercased shared tokenization; ROUGE-1 with clipped counts, ROUGE-L via
// LCS; no stemming.
RougeMetrics rouge_metrics(const std::string& candidate, const std::string& reference);

// Appendix-style selection-curve normalization:
// (R - R_k2) / (R_all - R_k2) + eps. Lower-is-better metrics are negated
// before applying the formula.
double normalize_selection(double R, double R_k2, double R_all, double eps = 0.1,
                           bool lower_is_better = false);

}  // namespace pplug
