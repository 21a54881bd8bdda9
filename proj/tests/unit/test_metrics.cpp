#include <random>

#include "doctest.h"
#include "test_support.hpp"
#include "triad/metrics.hpp"

using namespace triad;
using triad::test::error_kind_of;

namespace {

// Mann-Whitney: fraction of (positive, negative) pairs ranked correctly, ties half.
double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("dice hand cases") {
    std::vector<std::int32_t> a{1, 1, 0, 0};
    std::vector<std::int32_t> b{1, 0, 1, 0};
    CHECK(dice(a, a, 1) == 1.0);
    CHECK(dice(a, b, 1) == doctest::Approx(0.5));
    std::vector<std::int32_t> none{0, 0, 0, 0};
    CHECK(dice(none, none, 1) == 1.0);
    std::vector<std::int32_t> c{0, 0, 1, 1};
    CHECK(dice(a, c, 1) == 0.0);
  }

  TEST_CASE("dice matches a counting oracle") {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> lab(0, 2);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<std::int32_t> p(200), g(200);
      for (auto& x : p) x = lab(rng);
      for (auto& x : g) x = lab(rng);
      for (int k = 0; k < 3; ++k) {
        int inter = 0, np = 0, ng = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
          np += p[i] == k;
          ng += g[i] == k;
          inter += p[i] == k && g[i] == k;
        }
        REQUIRE(dice(p, g, k) == doctest::Approx(2.0 * inter / (np + ng)));
      }
    }
    LabelVolume lv = LabelVolume::zeros({2, 2, 2});
    LabelVolume other = LabelVolume::zeros({2, 2, 1});
    CHECK(error_kind_of([&] { dice(lv, other, 1); }) == ErrorKind::shape);
  }

  TEST_CASE("accuracy and confusion matrix") {
    std::vector<int> labels{0, 0, 0, 1, 1, 1, 1};
    std::vector<int> preds{0, 1, 0, 1, 0, 1, 1};
    CHECK(accuracy(preds, labels) == doctest::Approx(5.0 / 7.0));
    const auto cm = confusion(preds, labels, 2);
    CHECK(cm.at(0, 0) == 2);
    CHECK(cm.at(0, 1) == 1);
    CHECK(cm.at(1, 0) == 1);
    CHECK(cm.at(1, 1) == 3);
    CHECK(cm.total() == 7);
    CHECK(static_cast<double>(cm.trace()) / cm.total() == accuracy(preds, labels));

    std::vector<int> four{0, 0, 1, 1, 1, 0, 0};
    CHECK(accuracy(four, labels) == doctest::Approx(4.0 / 7.0));
    std::vector<int> bad{0, 5, 0, 1, 0, 1, 1};
    CHECK(error_kind_of([&] { confusion(bad, labels, 2); }) == ErrorKind::label);
  }

  TEST_CASE("roc_auc against brute-force Mann-Whitney") {
    std::vector<double> perfect{0.1, 0.2, 0.8, 0.9};
    std::vector<int> y{0, 0, 1, 1};
    CHECK(roc_auc(perfect, y) == 1.0);
    std::vector<double> reversed{0.9, 0.8, 0.2, 0.1};
    CHECK(roc_auc(reversed, y) == 0.0);
    std::vector<double> tied{0.5, 0.5, 0.5, 0.5};
    CHECK(roc_auc(tied, y) == 0.5);

    std::mt19937_64 rng(12);
    std::uniform_int_distribution<int> coarse(0, 9);
    std::bernoulli_distribution coin(0.4);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> s(40);
      std::vector<int> lab(40);
      for (auto& x : s) x = coarse(rng) / 10.0;
      for (auto& l : lab) l = coin(rng);
      lab[0] = 0;
      lab[1] = 1;
      REQUIRE(roc_auc(s, lab) == doctest::Approx(brute_auc(s, lab)).epsilon(1e-12));
    }
    std::vector<int> one{1, 1, 1, 1};
    CHECK(error_kind_of([&] { roc_auc(perfect, one); }) == ErrorKind::degenerate);
  }

  TEST_CASE("roc_curve endpoints") {
    std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    std::vector<int> y{0, 0, 1, 1};
    const auto c = roc_curve(s, y);
    CHECK(c.front().fpr == 0.0);
    CHECK(c.front().tpr == 0.0);
    CHECK(c.back().fpr == 1.0);
    CHECK(c.back().tpr == 1.0);
    CHECK(roc_auc(s, y) == doctest::Approx(0.75));
  }
}
