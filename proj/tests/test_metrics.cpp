#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pplug/common.hpp"
#include "pplug/metrics.hpp"

using namespace pplug;

TEST_CASE("classification: perfect predictions") {
  std::vector<LabeledPair> pairs = {{"A", "A"}, {"B", "B"}};
  auto m = classification_metrics(pairs, {"A", "B"});
  CHECK(m.accuracy == doctest::Approx(1.0));
  CHECK(m.macro_f1 == doctest::Approx(1.0));
}

TEST_CASE("classification: hand-computed confusion matrix") {
  // golds [A,A,B,B], preds [A,B,B,B]: F1_A = 2/3, F1_B = 4/5.
  std::vector<LabeledPair> pairs = {{"A", "A"}, {"B", "A"}, {"B", "B"}, {"B", "B"}};
  auto m = classification_metrics(pairs, {"A", "B"});
  CHECK(m.accuracy == doctest::Approx(0.75));
  CHECK(m.macro_f1 == doctest::Approx((2.0 / 3.0 + 4.0 / 5.0) / 2.0).epsilon(1e-9));
}

TEST_CASE("classification: degenerate one-class predictor") {
  std::vector<LabeledPair> pairs = {{"A", "A"}, {"A", "A"}, {"A", "B"}, {"A", "B"}};
  auto m = classification_metrics(pairs, {"A", "B"});
  CHECK(m.accuracy == doctest::Approx(0.5));
}

TEST_CASE("classification: empty input is an error") {
  CHECK_THROWS(classification_metrics({}, {"A"}));
}

TEST_CASE("regression: hand arithmetic") {
  std::vector<LabeledPair> pairs = {{"1", "2"}, {"5", "5"}};
  auto m = regression_metrics(pairs);
  CHECK(m.mae == doctest::Approx(0.5));
  CHECK(m.rmse == doctest::Approx(std::sqrt(0.5)).epsilon(1e-9));
}

TEST_CASE("regression: zero error and unparseable gold") {
  std::vector<LabeledPair> pairs = {{"3", "3"}, {"4", "4"}};
  auto m = regression_metrics(pairs);
  CHECK(m.mae == doctest::Approx(0.0));
  CHECK(m.rmse == doctest::Approx(0.0));
  CHECK_THROWS(regression_metrics({{"3", "not-a-number"}}));
}

TEST_CASE("regression: rmse dominates mae on random data") {
  Rng rng(5);
  std::vector<LabeledPair> pairs;
  for (int i = 0; i < 50; ++i)
    pairs.push_back({std::to_string(1 + rng.below(5)), std::to_string(1 + rng.below(5))});
  auto m = regression_metrics(pairs);
  CHECK(m.rmse >= m.mae - 1e-12);
}

TEST_CASE("rouge: identity and hand-computed overlap") {
  auto perfect = rouge_metrics("the cat sat", "the cat sat");
  CHECK(perfect.rouge1_f == doctest::Approx(1.0));
  CHECK(perfect.rougeL_f == doctest::Approx(1.0));

  // "the cat sat" vs "the cat ran": 2 shared unigrams of 3 each; LCS "the cat".
  auto m = rouge_metrics("the cat sat", "the cat ran");
  CHECK(m.rouge1_f == doctest::Approx(2.0 / 3.0).epsilon(1e-9));
  CHECK(m.rougeL_f == doctest::Approx(2.0 / 3.0).epsilon(1e-9));
}

TEST_CASE("rouge: empty candidate") {
  auto m = rouge_metrics("", "anything at all");
  CHECK(m.rouge1_f == doctest::Approx(0.0));
  CHECK(m.rougeL_f == doctest::Approx(0.0));
}

TEST_CASE("rouge: unigram F1 symmetric under swap") {
  Rng rng(11);
  const char* words[] = {"a", "b", "c", "d", "e"};
  for (int trial = 0; trial < 30; ++trial) {
    std::string s1, s2;
    for (int i = 0; i < 6; ++i) {
      s1 += std::string(words[rng.below(5)]) + " ";
      s2 += std::string(words[rng.below(5)]) + " ";
    }
    CHECK(rouge_metrics(s1, s2).rouge1_f ==
          doctest::Approx(rouge_metrics(s2, s1).rouge1_f).epsilon(1e-9));
  }
}

TEST_CASE("normalize_selection: endpoints and midpoint") {
  CHECK(normalize_selection(0.8, 0.4, 0.8) == doctest::Approx(1.1).epsilon(1e-9));
  CHECK(normalize_selection(0.4, 0.4, 0.8) == doctest::Approx(0.1).epsilon(1e-9));
  CHECK(normalize_selection(0.6, 0.4, 0.8) == doctest::Approx(0.6).epsilon(1e-9));
}

TEST_CASE("normalize_selection: lower-is-better and degenerate denominator") {
  // MAE 0.5 between endpoints 1.0 (K=2) and 0.2 (all): negate first.
  double v = normalize_selection(0.5, 1.0, 0.2, 0.1, true);
  CHECK(v == doctest::Approx((-0.5 + 1.0) / (-0.2 + 1.0) + 0.1).epsilon(1e-9));
  CHECK_THROWS(normalize_selection(0.5, 0.3, 0.3));
}
