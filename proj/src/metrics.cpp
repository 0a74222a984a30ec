#include "pplug/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "pplug/tokenizer.hpp"

namespace pplug {

ClassificationMetrics classification_metrics(const std::vector<LabeledPair>& pairs,
                                             const std::vector<std::string>& label_set) {
  if (pairs.empty()) throw std::invalid_argument("classification_metrics: empty pairs");
  ClassificationMetrics m;
  std::map<std::string, long> tp, fp, fn;
  long correct = 0;
  for (const auto& p : pairs) {
    if (p.prediction == p.gold) {
      ++correct;
      ++tp[p.gold];
    } else {
      ++fp[p.prediction];
      ++fn[p.gold];
    }
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(pairs.size());
  double f1_sum = 0.0;
  for (const auto& label : label_set) {
    double t = static_cast<double>(tp[label]);
    double denom = 2.0 * t + fp[label] + fn[label];
    f1_sum += denom > 0 ? 2.0 * t / denom : 0.0;
  }
  m.macro_f1 = label_set.empty() ? 0.0 : f1_sum / static_cast<double>(label_set.size());
  return m;
}

RegressionMetrics regression_metrics(const std::vector<LabeledPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("regression_metrics: empty pairs");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (const auto& p : pairs) {
    double pred, gold;
    try {
      pred = std::stod(p.prediction);
    } catch (...) {
      throw std::runtime_error("regression_metrics: unparseable prediction '" + p.prediction + "'");
    }
    try {
      gold = std::stod(p.gold);
    } catch (...) {
      throw std::runtime_error("regression_metrics: unparseable gold '" + p.gold + "'");
    }
    abs_sum += std::abs(pred - gold);
    sq_sum += (pred - gold) * (pred - gold);
  }
  RegressionMetrics m;
  m.mae = abs_sum / static_cast<double>(pairs.size());
  m.rmse = std::sqrt(sq_sum / static_cast<double>(pairs.size()));
  return m;
}

RougeMetrics rouge_metrics(const std::string& candidate, const std::string& reference) {
  auto cand = Tokenizer::split(candidate);
  auto ref = Tokenizer::split(reference);
  RougeMetrics m;
  if (cand.empty() || ref.empty()) return m;

  auto f1 = [](double overlap, double cand_n, double ref_n) {
    if (overlap <= 0) return 0.0;
    double p = overlap / cand_n, r = overlap / ref_n;
    return 2.0 * p * r / (p + r);
  };

  std::map<std::string, long> ref_counts, cand_counts;
  for (const auto& t : ref) ++ref_counts[t];
  for (const auto& t : cand) ++cand_counts[t];
  double overlap = 0.0;
  for (const auto& [t, c] : cand_counts) {
    auto it = ref_counts.find(t);
    if (it != ref_counts.end()) overlap += std::min(c, it->second);
  }
  m.rouge1_f = f1(overlap, static_cast<double>(cand.size()), static_cast<double>(ref.size()));

  // LCS length
  const std::size_t a = cand.size(), b = ref.size();
  std::vector<std::size_t> prev(b + 1, 0), cur(b + 1, 0);
  for (std::size_t i = 1; i <= a; ++i) {
    for (std::size_t j = 1; j <= b; ++j) {
      cur[j] = cand[i - 1] == ref[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  m.rougeL_f = f1(static_cast<double>(prev[b]), static_cast<double>(a), static_cast<double>(b));
  return m;
}

double normalize_selection(double R, double R_k2, double R_all, double eps,
                           bool lower_is_better) {
  if (lower_is_better) {
    R = -R;
    R_k2 = -R_k2;
    R_all = -R_all;
  }
  if (R_all == R_k2)
    throw std::invalid_argument("normalize_selection: R_all == R_k2 (undefined)");
  return (R - R_k2) / (R_all - R_k2) + eps;
}

}  // namespace pplug
