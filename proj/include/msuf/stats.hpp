#pragma once
// Dependence between rumor category and the sign of comment-minus-source SI:
// contingency tables, Pearson chi-squared with an incomplete-gamma p-value,
// smoothed per-category trend series and interval histograms.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "msuf/core/errors.hpp"
#include "msuf/dual_stream.hpp"
#include "msuf/thread_store.hpp"

namespace msuf {

// ---------------------------------------------------------------------------
// Regularized incomplete gamma

namespace detail {

inline constexpr double kGammaEps = 1e-15;
inline constexpr int kGammaMaxIter = 100000;

// log of the series for P(a, x); valid for x < a + 1.
inline double log_gamma_p_series(double a, double x) {
  double ap = a, sum = 1.0 / a, del = sum;
  for (int n = 0; n < kGammaMaxIter; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * kGammaEps) break;
  }
  return std::log(sum) - x + a * std::log(x) - std::lgamma(a);
}

// log of the continued fraction for Q(a, x) (modified Lentz); x >= a + 1.
inline double log_gamma_q_fraction(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
  for (int i = 1; i < kGammaMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kGammaEps) break;
  }
  return std::log(h) - x + a * std::log(x) - std::lgamma(a);
}

}  // namespace detail

// Upper regularized incomplete gamma Q(a, x) = Gamma(a, x) / Gamma(a), and
// its natural log (finite even where Q underflows).
struct GammaQ {
  double value;
  double log_value;
};

inline GammaQ gamma_q(double a, double x) {
  if (!(a > 0.0) || !(x >= 0.0)) throw std::invalid_argument("gamma_q: need a > 0 and x >= 0");
  if (x == 0.0) return {1.0, 0.0};
  if (x < a + 1.0) {
    const double p = std::exp(detail::log_gamma_p_series(a, x));
    const double q = 1.0 - p;
    return {q, std::log(q)};
  }
  const double lq = detail::log_gamma_q_fraction(a, x);
  return {std::exp(lq), lq};
}

// ---------------------------------------------------------------------------
// Contingency tables

enum class ContingencyLayout { IntervalSign, Collapsed };

struct ContingencyTable {
  ContingencyLayout layout = ContingencyLayout::IntervalSign;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<std::vector<std::uint64_t>> counts;

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (const auto& r : counts)
      for (auto v : r) s += v;
    return s;
  }
  // Untestable when fewer than two non-empty rows or columns remain.
  bool testable() const {
    std::size_t rows = 0, cols = 0;
    for (const auto& r : counts) rows += std::any_of(r.begin(), r.end(), [](auto v) { return v > 0; });
    for (std::size_t c = 0; c < col_labels.size(); ++c)
      cols += std::any_of(counts.begin(), counts.end(), [&](const auto& r) { return r[c] > 0; });
    return rows >= 2 && cols >= 2;
  }
};

inline std::vector<DualSignSignal> sign_signals(const std::vector<Thread>& threads, const std::vector<ThreadRecords>& records,
                                                const BinningConfig& cfg) {
  if (threads.size() != records.size()) throw ShapeError("sign_signals: one record set per thread required");
  std::vector<DualSignSignal> out;
  out.reserve(threads.size());
  for (std::size_t k = 0; k < threads.size(); ++k) out.push_back(sign_signal(threads[k], records[k], cfg));
  return out;
}

// Rows are categories 0..classes-1; columns are (interval, sign) cells or,
// collapsed, the two signs.
inline ContingencyTable build_contingency(const std::vector<Thread>& threads, const std::vector<DualSignSignal>& signals,
                                          std::size_t intervals, ContingencyLayout layout, std::size_t classes = 0) {
  if (threads.size() != signals.size()) throw ShapeError("build_contingency: one signal per thread required");
  if (classes == 0) classes = threads.empty() ? 3 : class_count(threads);
  ContingencyTable t;
  t.layout = layout;
  for (std::size_t c = 0; c < classes; ++c) t.row_labels.push_back(verdict_name(static_cast<Verdict>(c)));
  if (layout == ContingencyLayout::IntervalSign) {
    for (std::size_t k = 0; k < intervals; ++k) {
      t.col_labels.push_back(std::to_string(k) + "+");
      t.col_labels.push_back(std::to_string(k) + "-");
    }
  } else {
    t.col_labels = {"+", "-"};
  }
  t.counts.assign(classes, std::vector<std::uint64_t>(t.col_labels.size(), 0));
  for (std::size_t n = 0; n < threads.size(); ++n) {
    const std::size_t row = label_index(threads[n].label);
    if (row >= classes) throw ShapeError("build_contingency: label outside " + std::to_string(classes) + " classes");
    const auto& s = signals[n];
    if (s.n_pos.size() != intervals) throw ShapeError("build_contingency: signal has wrong interval count");
    for (std::size_t k = 0; k < intervals; ++k) {
      if (layout == ContingencyLayout::IntervalSign) {
        t.counts[row][2 * k] += s.n_pos[k];
        t.counts[row][2 * k + 1] += s.n_neg[k];
      } else {
        t.counts[row][0] += s.n_pos[k];
        t.counts[row][1] += s.n_neg[k];
      }
    }
  }
  return t;
}

struct ChiSquaredResult {
  double statistic = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
  double log10_p = 0.0;
  bool underflow = false;  // p below 1e-300
  std::vector<std::size_t> dropped_rows;
  std::vector<std::size_t> dropped_cols;
};

// Pearson statistic over rows and columns with positive margins.
inline ChiSquaredResult chi_squared(const std::vector<std::vector<std::uint64_t>>& counts) {
  ChiSquaredResult res;
  const std::size_t r0 = counts.size(), c0 = r0 ? counts.front().size() : 0;
  for (const auto& r : counts)
    if (r.size() != c0) throw ShapeError("chi_squared: ragged table");
  std::vector<double> row(r0, 0.0), col(c0, 0.0);
  for (std::size_t i = 0; i < r0; ++i)
    for (std::size_t j = 0; j < c0; ++j) {
      row[i] += static_cast<double>(counts[i][j]);
      col[j] += static_cast<double>(counts[i][j]);
    }
  std::vector<std::size_t> rows, cols;
  for (std::size_t i = 0; i < r0; ++i) (row[i] > 0 ? rows : res.dropped_rows).push_back(i);
  for (std::size_t j = 0; j < c0; ++j) (col[j] > 0 ? cols : res.dropped_cols).push_back(j);
  if (rows.size() < 2 || cols.size() < 2)
    throw std::invalid_argument("chi_squared: need at least 2x2 after dropping empty rows/columns, have " +
                                std::to_string(rows.size()) + "x" + std::to_string(cols.size()));
  double n = 0.0;
  for (auto i : rows) n += row[i];
  for (auto i : rows)
    for (auto j : cols) {
      const double e = row[i] * col[j] / n;
      const double d = static_cast<double>(counts[i][j]) - e;
      res.statistic += d * d / e;
    }
  res.dof = (rows.size() - 1) * (cols.size() - 1);
  const auto q = gamma_q(0.5 * static_cast<double>(res.dof), 0.5 * res.statistic);
  res.p_value = std::min(1.0, std::max(0.0, q.value));
  res.log10_p = std::min(0.0, q.log_value / std::log(10.0));
  res.underflow = res.p_value < 1e-300;
  return res;
}

inline ChiSquaredResult chi_squared(const ContingencyTable& t) { return chi_squared(t.counts); }

inline std::string contingency_csv(const ContingencyTable& t) {
  std::ostringstream out;
  out << "category";
  for (const auto& c : t.col_labels) out << ',' << c;
  out << '\n';
  for (std::size_t i = 0; i < t.counts.size(); ++i) {
    out << t.row_labels[i];
    for (auto v : t.counts[i]) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Trend series

struct TrendSeries {
  std::string category;
  std::vector<std::optional<double>> raw;       // (n_pos - n_neg) / (n_pos + n_neg)
  std::vector<std::optional<double>> smoothed;  // centered window of 4
  std::vector<std::uint64_t> n_pos, n_neg;
};

// Centered moving mean with an even window w: position k averages the
// non-missing values at k - w/2 .. k + w/2 - 1, shrinking at the edges.
inline std::vector<std::optional<double>> smooth_centered(const std::vector<std::optional<double>>& v, std::size_t w = 4) {
  std::vector<std::optional<double>> out(v.size());
  const auto lo_off = static_cast<std::ptrdiff_t>(w / 2), hi_off = static_cast<std::ptrdiff_t>(w - w / 2 - 1);
  for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(v.size()); ++k) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::ptrdiff_t j = k - lo_off; j <= k + hi_off; ++j) {
      if (j < 0 || j >= static_cast<std::ptrdiff_t>(v.size()) || !v[j]) continue;
      s += *v[j];
      ++n;
    }
    if (n) out[k] = s / static_cast<double>(n);
  }
  return out;
}

// Windows that close within the first 24 hours; the open-ended last window
// is never included.
inline std::size_t trend_intervals(const BinningConfig& cfg) {
  const auto within = static_cast<std::size_t>(86400 / cfg.interval_seconds);
  return std::max<std::size_t>(1, std::min(within, cfg.intervals - 1));
}

inline std::vector<TrendSeries> trend_series(const std::vector<Thread>& threads, const std::vector<DualSignSignal>& signals,
                                             const BinningConfig& cfg, std::size_t classes = 0) {
  if (threads.size() != signals.size()) throw ShapeError("trend_series: one signal per thread required");
  if (classes == 0) classes = threads.empty() ? 3 : class_count(threads);
  const std::size_t m = trend_intervals(cfg);
  std::vector<TrendSeries> out(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    out[c].category = verdict_name(static_cast<Verdict>(c));
    out[c].n_pos.assign(m, 0);
    out[c].n_neg.assign(m, 0);
  }
  for (std::size_t n = 0; n < threads.size(); ++n) {
    auto& s = out.at(label_index(threads[n].label));
    for (std::size_t k = 0; k < m; ++k) {
      s.n_pos[k] += signals[n].n_pos[k];
      s.n_neg[k] += signals[n].n_neg[k];
    }
  }
  for (auto& s : out) {
    s.raw.resize(m);
    for (std::size_t k = 0; k < m; ++k) {
      const double p = static_cast<double>(s.n_pos[k]), q = static_cast<double>(s.n_neg[k]);
      if (p + q > 0) s.raw[k] = (p - q) / (p + q);
    }
    s.smoothed = smooth_centered(s.raw, 4);
  }
  return out;
}

inline std::string trend_csv(const std::vector<TrendSeries>& series) {
  std::ostringstream out;
  out.precision(12);
  out << "category,interval,n_pos,n_neg,raw,smoothed\n";
  for (const auto& s : series)
    for (std::size_t k = 0; k < s.raw.size(); ++k) {
      out << s.category << ',' << k << ',' << s.n_pos[k] << ',' << s.n_neg[k] << ',';
      if (s.raw[k]) out << *s.raw[k];
      out << ',';
      if (s.smoothed[k]) out << *s.smoothed[k];
      out << '\n';
    }
  return out.str();
}

// ---------------------------------------------------------------------------
// Histogram

struct IntervalHistogram {
  std::vector<std::string> categories;
  std::vector<std::vector<std::uint64_t>> counts;  // category x interval
};

inline IntervalHistogram interval_histogram(const std::vector<Thread>& threads, const BinningConfig& cfg,
                                            std::size_t classes = 0) {
  if (classes == 0) classes = threads.empty() ? 3 : class_count(threads);
  IntervalHistogram h;
  for (std::size_t c = 0; c < classes; ++c) h.categories.push_back(verdict_name(static_cast<Verdict>(c)));
  h.counts.assign(classes, std::vector<std::uint64_t>(cfg.intervals, 0));
  for (const auto& t : threads)
    for (std::size_t k = 0; k < t.comments.size(); ++k) ++h.counts.at(label_index(t.label))[interval_of(t.offset(k), cfg)];
  return h;
}

inline std::string histogram_csv(const IntervalHistogram& h) {
  std::ostringstream out;
  out << "category";
  for (std::size_t k = 0; k < (h.counts.empty() ? 0 : h.counts[0].size()); ++k) out << ",i" << k;
  out << '\n';
  for (std::size_t c = 0; c < h.counts.size(); ++c) {
    out << h.categories[c];
    for (auto v : h.counts[c]) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

}  // namespace msuf
