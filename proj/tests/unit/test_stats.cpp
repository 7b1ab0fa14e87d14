#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "msuf/stats.hpp"
#include "support/chi2_reference.hpp"
#include "support/oracles.hpp"

using namespace msuf;

namespace {

Thread thread(const std::string& id, Verdict label, const std::vector<std::int64_t>& offsets) {
  Thread t;
  t.id = id;
  t.label = label;
  t.source = {id + "s", "s", 0, std::nullopt};
  for (std::size_t k = 0; k < offsets.size(); ++k) t.comments.push_back({id + "c" + std::to_string(k), "c", offsets[k], std::nullopt});
  return t;
}

}  // namespace

TEST(GammaQ, ReferenceTable) {
  for (const auto& r : msuf::testing::kChiReference) {
    const auto q = gamma_q(0.5 * r.dof, 0.5 * r.x);
    EXPECT_NEAR(q.value, r.p, 1e-12) << "dof=" << r.dof << " x=" << r.x;
    if (r.p > 1e-300 && r.p < 1) EXPECT_NEAR(q.log_value, std::log(r.p), 1e-9);
  }
}

TEST(GammaQ, CriticalValue) {
  EXPECT_NEAR(gamma_q(0.5, 3.841 / 2).value, 0.05, 1e-4);
  EXPECT_EQ(gamma_q(3.0, 0.0).value, 1.0);
  EXPECT_THROW(gamma_q(0.0, 1.0), std::invalid_argument);
}

TEST(ChiSquared, HandTable) {
  const auto r = chi_squared({{10, 20}, {20, 10}});
  EXPECT_NEAR(r.statistic, 20.0 / 3.0, 1e-12);
  EXPECT_EQ(r.dof, 1u);
  EXPECT_NEAR(r.p_value, 0.0098232745, 1e-9);
}

TEST(ChiSquared, ProportionalTableIsIndependent) {
  const auto r = chi_squared({{2, 4, 6}, {3, 6, 9}, {1, 2, 3}});
  EXPECT_NEAR(r.statistic, 0.0, 1e-12);
  EXPECT_NEAR(r.p_value, 1.0, 1e-12);
}

TEST(ChiSquared, DropsEmptyRowsAndColumns) {
  const auto r = chi_squared({{10, 0, 20}, {0, 0, 0}, {20, 0, 10}});
  EXPECT_EQ(r.dropped_rows, std::vector<std::size_t>{1});
  EXPECT_EQ(r.dropped_cols, std::vector<std::size_t>{1});
  EXPECT_NEAR(r.statistic, 20.0 / 3.0, 1e-12);
  EXPECT_THROW(chi_squared({{1, 2}, {0, 0}}), std::invalid_argument);
  EXPECT_THROW(chi_squared(std::vector<std::vector<std::uint64_t>>{}), std::invalid_argument);
}

TEST(ChiSquared, UnderflowFlagged) {
  const auto r = chi_squared({{100000, 0}, {0, 100000}});
  EXPECT_TRUE(r.underflow);
  EXPECT_LT(r.log10_p, -300);
}

TEST(ChiSquared, MatchesBruteForceOracle) {
  Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t r = 2 + rng.below(4), c = 2 + rng.below(30);
    std::vector<std::vector<std::uint64_t>> t(r, std::vector<std::uint64_t>(c));
    for (auto& row : t)
      for (auto& v : row) v = rng.below(3) == 0 ? 0 : rng.below(200);
    t[0][0] += 1;
    t[1][1] += 1;
    const auto oracle = msuf::testing::chi_squared_oracle(t);
    const auto got = chi_squared(t);
    EXPECT_EQ(got.dof, oracle.dof);
    EXPECT_NEAR(got.statistic, oracle.statistic, 1e-9 * std::max(1.0, oracle.statistic));
  }
}

TEST(ChiSquared, PermutationAndScalingProperties) {
  Rng rng(32);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t r = 2 + rng.below(3), c = 2 + rng.below(8);
    std::vector<std::vector<std::uint64_t>> t(r, std::vector<std::uint64_t>(c));
    for (auto& row : t)
      for (auto& v : row) v = 1 + rng.below(50);
    const auto base = chi_squared(t);
    auto rows = t;
    rng.shuffle(rows);
    EXPECT_NEAR(chi_squared(rows).statistic, base.statistic, 1e-9 * std::max(1.0, base.statistic));
    std::vector<std::size_t> perm(c);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    auto cols = t;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) cols[i][j] = t[i][perm[j]];
    EXPECT_NEAR(chi_squared(cols).statistic, base.statistic, 1e-9 * std::max(1.0, base.statistic));
    const std::uint64_t k = 2 + rng.below(5);
    auto scaled = t;
    for (auto& row : scaled)
      for (auto& v : row) v *= k;
    EXPECT_NEAR(chi_squared(scaled).statistic, static_cast<double>(k) * base.statistic, 1e-9 * std::max(1.0, base.statistic) * k);
  }
}

TEST(ChiSquared, PValueDecreasesInStatistic) {
  for (int dof : {1, 3, 24, 48}) {
    double prev = 1.0;
    for (double x = 0.0; x < 400.0; x += 0.37) {
      const double p = gamma_q(0.5 * dof, 0.5 * x).value;
      EXPECT_LE(p, prev + 1e-15) << dof << " " << x;
      prev = p;
    }
  }
}

TEST(Contingency, HandTally) {
  const BinningConfig cfg{3600, 3, 1};
  const std::vector<Thread> threads{thread("a", Verdict::False, {0, 10, 4000}), thread("b", Verdict::True, {0, 8000})};
  const std::vector<DualSignSignal> signals{sign_signal(threads[0], 0.5, {0.9, 0.5, 0.1}, cfg),
                                            sign_signal(threads[1], 0.5, {0.2, 0.7}, cfg)};
  const auto t = build_contingency(threads, signals, 3, ContingencyLayout::IntervalSign);
  ASSERT_EQ(t.counts.size(), 3u);
  EXPECT_EQ(t.counts[0], (std::vector<std::uint64_t>{1, 0, 0, 1, 0, 0}));
  EXPECT_EQ(t.counts[1], (std::vector<std::uint64_t>{0, 1, 0, 0, 1, 0}));
  EXPECT_EQ(t.counts[2], (std::vector<std::uint64_t>(6, 0)));
  const auto collapsed = build_contingency(threads, signals, 3, ContingencyLayout::Collapsed);
  EXPECT_EQ(collapsed.counts[0], (std::vector<std::uint64_t>{1, 1}));
  EXPECT_EQ(collapsed.counts[1], (std::vector<std::uint64_t>{1, 1}));
  EXPECT_EQ(contingency_csv(collapsed), "category,+,-\nfalse,1,1\ntrue,1,1\nunverified,0,0\n");
}

TEST(Contingency, SingleSourceAndEmptyCorpus) {
  const BinningConfig cfg{3600, 4, 1};
  const std::vector<Thread> one{thread("a", Verdict::False, {0, 5000})};
  const auto t = build_contingency(one, {sign_signal(one[0], 0.1, {0.9, 0.8}, cfg)}, 4, ContingencyLayout::IntervalSign);
  for (std::size_t r = 1; r < t.counts.size(); ++r) EXPECT_EQ(std::accumulate(t.counts[r].begin(), t.counts[r].end(), std::uint64_t{0}), 0u);
  EXPECT_EQ(t.total(), 2u);
  EXPECT_FALSE(t.testable());
  const auto empty = build_contingency({}, {}, 4, ContingencyLayout::IntervalSign);
  EXPECT_EQ(empty.total(), 0u);
  EXPECT_FALSE(empty.testable());
}

TEST(Trend, Examples) {
  const BinningConfig cfg{3600, 25, 1};
  std::vector<Thread> threads;
  std::vector<DualSignSignal> signals;
  DualSignSignal s{"a", std::vector<std::size_t>(25, 2), std::vector<std::size_t>(25, 0), std::vector<std::size_t>(25, 0)};
  threads.push_back(thread("a", Verdict::False, {}));
  signals.push_back(s);
  s.n_neg.assign(25, 2);
  threads.push_back(thread("b", Verdict::True, {}));
  signals.push_back(s);
  s.n_pos.assign(25, 0);
  s.n_neg.assign(25, 0);
  s.n_pos[3] = 3;
  s.n_neg[3] = 1;
  threads.push_back(thread("c", Verdict::Unverified, {}));
  signals.push_back(s);
  const auto series = trend_series(threads, signals, cfg);
  ASSERT_EQ(series.size(), 3u);
  ASSERT_EQ(series[0].raw.size(), 24u);
  for (std::size_t k = 0; k < 24; ++k) {
    EXPECT_EQ(series[0].raw[k], 1.0);
    EXPECT_EQ(series[0].smoothed[k], 1.0);
    EXPECT_EQ(series[1].raw[k], 0.0);
  }
  EXPECT_EQ(series[2].raw[3], 0.5);
  EXPECT_FALSE(series[2].raw[2].has_value());
  // window k-2..k+1 over non-missing values
  EXPECT_EQ(series[2].smoothed[2], 0.5);
  EXPECT_EQ(series[2].smoothed[5], 0.5);
  EXPECT_FALSE(series[2].smoothed[6].has_value());
  EXPECT_FALSE(series[2].smoothed[1].has_value());
}

TEST(Trend, SmoothingStaysInHull) {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::optional<double>> v(1 + rng.below(30));
    double lo = 2, hi = -2;
    for (auto& x : v)
      if (rng.below(4)) {
        x = rng.uniform(-1, 1);
        lo = std::min(lo, *x);
        hi = std::max(hi, *x);
      }
    for (const auto& s : smooth_centered(v)) {
      if (!s) continue;
      EXPECT_GE(*s, lo - 1e-15);
      EXPECT_LE(*s, hi + 1e-15);
    }
  }
}

TEST(Trend, WindowMatchesPandasConvention) {
  const std::vector<std::optional<double>> v{1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
  const auto s = smooth_centered(v);
  // pandas Series.rolling(4, center=True, min_periods=1).mean()
  const double expect[] = {1.5, 2.0, 2.5, 3.5, 4.5, 5.0};
  for (std::size_t k = 0; k < v.size(); ++k) EXPECT_DOUBLE_EQ(*s[k], expect[k]);
}

TEST(Histogram, ConservationAndDegenerateTiming) {
  const BinningConfig cfg{3600, 25, 1};
  std::vector<Thread> threads{thread("a", Verdict::False, {0, 0, 0}), thread("b", Verdict::True, {0, 0})};
  auto h = interval_histogram(threads, cfg);
  EXPECT_EQ(h.counts[0][0], 3u);
  EXPECT_EQ(h.counts[1][0], 2u);
  for (std::size_t k = 1; k < 25; ++k) EXPECT_EQ(h.counts[0][k] + h.counts[1][k], 0u);

  Rng rng(4);
  threads.clear();
  std::size_t total = 0;
  for (int k = 0; k < 50; ++k) {
    std::vector<std::int64_t> offs;
    for (std::size_t j = rng.below(10); j > 0; --j) offs.push_back(static_cast<std::int64_t>(rng.below(200000)));
    total += offs.size();
    threads.push_back(thread("t" + std::to_string(k), static_cast<Verdict>(rng.below(3)), offs));
  }
  h = interval_histogram(threads, cfg);
  std::uint64_t sum = 0;
  for (const auto& r : h.counts) sum += std::accumulate(r.begin(), r.end(), std::uint64_t{0});
  EXPECT_EQ(sum, total);
}
