#pragma once
// Temporal dual-sentiment stream.
//
// Per thread: fuse each comment's SI embedding (minus the source's) with its
// semantic embedding, bucket comments by time since the source into i
// half-open windows of T seconds (the last window is open-ended), average
// within each window, then project each averaged row with a PCA fitted on
// training rows.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msuf/affect_encoder.hpp"
#include "msuf/core/errors.hpp"
#include "msuf/core/hash.hpp"
#include "msuf/core/matrix.hpp"
#include "msuf/core/random.hpp"
#include "msuf/thread_store.hpp"

namespace msuf {

struct BinningConfig {
  std::int64_t interval_seconds = 3600;  // T
  std::size_t intervals = 25;            // i
  std::size_t d_dual = 8;

  void validate(std::size_t fused_width) const {
    if (interval_seconds <= 0) throw ShapeError("binning: T must be positive");
    if (intervals < 2) throw ShapeError("binning: need at least 2 intervals");
    if (d_dual < 1 || d_dual > fused_width)
      throw ShapeError("binning: d_dual " + std::to_string(d_dual) + " must lie in [1, " + std::to_string(fused_width) + "]");
  }
};

// Window index of a comment posted `delta_t` seconds after its source.
inline std::size_t interval_of(std::int64_t delta_t, const BinningConfig& cfg) {
  if (delta_t < 0) throw std::invalid_argument("interval_of: negative offset " + std::to_string(delta_t));
  const auto k = static_cast<std::uint64_t>(delta_t / cfg.interval_seconds);
  return static_cast<std::size_t>(std::min<std::uint64_t>(k, cfg.intervals - 1));
}

// Which blocks of the fused row are kept. Full is (SI_c - SI_s) ++ sem_c.
enum class FusionMode { Full, NoSemantic, NoSentiment, NoSourceSentiment, CommentSentimentOnly };

inline std::size_t fused_width(std::size_t d_si, std::size_t d_sem, FusionMode mode) {
  switch (mode) {
    case FusionMode::Full:
    case FusionMode::NoSourceSentiment: return d_si + d_sem;
    case FusionMode::NoSemantic:
    case FusionMode::CommentSentimentOnly: return d_si;
    case FusionMode::NoSentiment: return d_sem;
  }
  return 0;
}

// One row per comment.
inline Matrix fuse_rows(const SentimentRecord& source, const std::vector<SentimentRecord>& comments,
                        FusionMode mode = FusionMode::Full) {
  const std::size_t d_si = source.e_si.size();
  const std::size_t d_sem = comments.empty() ? 0 : comments.front().e_sem.size();
  const std::size_t width = fused_width(d_si, d_sem, mode);
  Matrix out(comments.size(), width);
  for (std::size_t j = 0; j < comments.size(); ++j) {
    const auto& c = comments[j];
    if (c.e_si.size() != d_si || c.e_sem.size() != d_sem) {
      throw ShapeError("fuse_rows: comment '" + c.message_id + "' has widths " + std::to_string(c.e_si.size()) + "/" +
                       std::to_string(c.e_sem.size()) + ", expected " + std::to_string(d_si) + "/" + std::to_string(d_sem));
    }
    auto row = out.row(j);
    std::size_t at = 0;
    const bool si = mode != FusionMode::NoSentiment;
    const bool subtract = mode == FusionMode::Full || mode == FusionMode::NoSemantic;
    const bool sem = mode == FusionMode::Full || mode == FusionMode::NoSentiment || mode == FusionMode::NoSourceSentiment;
    if (si)
      for (std::size_t k = 0; k < d_si; ++k) row[at++] = c.e_si[k] - (subtract ? source.e_si[k] : 0.0);
    if (sem)
      for (std::size_t k = 0; k < d_sem; ++k) row[at++] = c.e_sem[k];
  }
  return out;
}

// Window per comment. With a shuffle seed, comments are instead spread
// uniformly at random over the windows (the no-time ablation).
inline std::vector<std::size_t> assign_intervals(const Thread& t, const BinningConfig& cfg,
                                                 std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
  std::vector<std::size_t> out(t.comments.size());
  if (shuffle_seed) {
    Rng rng(*shuffle_seed ^ fnv1a64(t.id));
    for (auto& k : out) k = static_cast<std::size_t>(rng.below(cfg.intervals));
    return out;
  }
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = interval_of(t.offset(k), cfg);
  return out;
}

struct IntervalAverage {
  Matrix e_ave;                         // intervals x width
  std::vector<std::size_t> occupancy;  // comments per window
};

// Window means; windows without comments stay zero.
inline IntervalAverage average_intervals(const Matrix& fused, const std::vector<std::size_t>& buckets,
                                         const BinningConfig& cfg) {
  if (fused.rows != buckets.size()) throw ShapeError("average_intervals: one bucket per fused row required");
  IntervalAverage out{Matrix(cfg.intervals, fused.cols), std::vector<std::size_t>(cfg.intervals, 0)};
  for (std::size_t j = 0; j < fused.rows; ++j) {
    const std::size_t k = buckets[j];
    if (k >= cfg.intervals) throw ShapeError("average_intervals: bucket out of range");
    ++out.occupancy[k];
    for (std::size_t c = 0; c < fused.cols; ++c) out.e_ave(k, c) += fused(j, c);
  }
  for (std::size_t k = 0; k < cfg.intervals; ++k)
    if (out.occupancy[k] > 0)
      for (double& v : out.e_ave.row(k)) v /= static_cast<double>(out.occupancy[k]);
  return out;
}

// ---------------------------------------------------------------------------
// PCA

struct PcaModel {
  std::vector<double> mean;
  Matrix components;  // d_dual x width, orthonormal rows
  std::vector<double> explained_variance;

  std::size_t input_width() const { return mean.size(); }
  std::size_t output_width() const { return components.rows; }

  std::vector<double> project(std::span<const double> row) const {
    if (row.size() != mean.size()) throw ShapeError("pca: row width " + std::to_string(row.size()) + " != " + std::to_string(mean.size()));
    std::vector<double> out(components.rows, 0.0);
    for (std::size_t k = 0; k < components.rows; ++k)
      for (std::size_t c = 0; c < mean.size(); ++c) out[k] += (row[c] - mean[c]) * components(k, c);
    return out;
  }

  Matrix transform(const Matrix& rows) const {
    Matrix out(rows.rows, components.rows);
    for (std::size_t r = 0; r < rows.rows; ++r) {
      const auto p = project(rows.row(r));
      std::copy(p.begin(), p.end(), out.row(r).begin());
    }
    return out;
  }

  Matrix reconstruct(const Matrix& scores) const {
    Matrix out(scores.rows, mean.size());
    for (std::size_t r = 0; r < scores.rows; ++r)
      for (std::size_t c = 0; c < mean.size(); ++c) {
        double v = mean[c];
        for (std::size_t k = 0; k < components.rows; ++k) v += scores(r, k) * components(k, c);
        out(r, c) = v;
      }
    return out;
  }

  bool operator==(const PcaModel&) const = default;
};

// Principal axes of the centred rows by SVD, sorted by descending variance.
// Each axis is signed so that its largest-magnitude entry is positive.
inline PcaModel fit_pca(const Matrix& rows, std::size_t d_dual) {
  const std::size_t n = rows.rows, d = rows.cols;
  if (n < 2) throw ShapeError("fit_pca: need at least 2 rows, got " + std::to_string(n));
  if (d_dual < 1 || d_dual > std::min(n, d))
    throw ShapeError("fit_pca: d_dual " + std::to_string(d_dual) + " exceeds min(rows, width) = " + std::to_string(std::min(n, d)));

  Eigen::MatrixXd x(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows(r, c);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const auto& v = svd.matrixV();

  PcaModel m;
  m.mean.assign(mu.data(), mu.data() + d);
  m.components = Matrix(d_dual, d);
  m.explained_variance.resize(d_dual);
  for (std::size_t k = 0; k < d_dual; ++k) {
    const auto col = static_cast<Eigen::Index>(k);
    Eigen::Index arg = 0;
    v.col(col).cwiseAbs().maxCoeff(&arg);
    const double sign = v(arg, col) < 0 ? -1.0 : 1.0;
    for (std::size_t c = 0; c < d; ++c) m.components(k, c) = sign * v(static_cast<Eigen::Index>(c), col);
    m.explained_variance[k] = sv(col) * sv(col) / static_cast<double>(n - 1);
  }
  return m;
}

inline nlohmann::json pca_json(const PcaModel& m) {
  std::vector<std::vector<double>> comps;
  for (std::size_t k = 0; k < m.components.rows; ++k) comps.emplace_back(m.components.row(k).begin(), m.components.row(k).end());
  return {{"mean", m.mean}, {"components", comps}, {"explained_variance", m.explained_variance}};
}

inline PcaModel pca_from_json(const nlohmann::json& j) {
  try {
    PcaModel m;
    m.mean = j.at("mean").get<std::vector<double>>();
    const auto comps = j.at("components").get<std::vector<std::vector<double>>>();
    m.components = Matrix(comps.size(), m.mean.size());
    for (std::size_t k = 0; k < comps.size(); ++k) {
      if (comps[k].size() != m.mean.size()) throw DataError("pca: component width mismatch");
      std::copy(comps[k].begin(), comps[k].end(), m.components.row(k).begin());
    }
    m.explained_variance = j.at("explained_variance").get<std::vector<double>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("pca: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Streams

struct IntervalStream {
  std::string thread_id;
  Matrix e_ave;   // intervals x width
  Matrix e_dual;  // intervals x d_dual
  std::vector<std::size_t> occupancy;
};

inline IntervalStream build_stream(const Thread& t, const IntervalAverage& avg, const PcaModel& pca) {
  if (avg.e_ave.cols != pca.input_width())
    throw ShapeError("build_stream: fused width " + std::to_string(avg.e_ave.cols) + " but pca expects " +
                     std::to_string(pca.input_width()));
  return {t.id, avg.e_ave, pca.transform(avg.e_ave), avg.occupancy};
}

inline IntervalStream build_stream(const Thread& t, const ThreadRecords& records, const BinningConfig& cfg,
                                   const PcaModel& pca, FusionMode mode = FusionMode::Full) {
  const Matrix fused = fuse_rows(records.source, records.comments, mode);
  return build_stream(t, average_intervals(fused, assign_intervals(t, cfg), cfg), pca);
}

// CSV: interval,occupancy,dual_0..dual_{d-1}
inline std::string stream_csv(const IntervalStream& s) {
  std::ostringstream out;
  out.precision(17);
  out << "interval,occupancy";
  for (std::size_t k = 0; k < s.e_dual.cols; ++k) out << ",dual_" << k;
  out << '\n';
  for (std::size_t r = 0; r < s.e_dual.rows; ++r) {
    out << r << ',' << s.occupancy[r];
    for (double v : s.e_dual.row(r)) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Sign signal of SI_dual = SI_c - SI_s per window.

struct DualSignSignal {
  std::string thread_id;
  std::vector<std::size_t> n_pos;
  std::vector<std::size_t> n_neg;
  std::vector<std::size_t> n_zero;  // exact ties, excluded from counts
};

inline DualSignSignal sign_signal(const Thread& t, double source_si, const std::vector<double>& comment_si,
                                  const BinningConfig& cfg) {
  if (comment_si.size() != t.comments.size()) throw ShapeError("sign_signal: one score per comment required");
  DualSignSignal s{t.id, std::vector<std::size_t>(cfg.intervals, 0), std::vector<std::size_t>(cfg.intervals, 0),
                   std::vector<std::size_t>(cfg.intervals, 0)};
  for (std::size_t k = 0; k < comment_si.size(); ++k) {
    const std::size_t bucket = interval_of(t.offset(k), cfg);
    const double dual = comment_si[k] - source_si;
    if (dual > 0)
      ++s.n_pos[bucket];
    else if (dual < 0)
      ++s.n_neg[bucket];
    else
      ++s.n_zero[bucket];
  }
  return s;
}

inline DualSignSignal sign_signal(const Thread& t, const ThreadRecords& r, const BinningConfig& cfg) {
  std::vector<double> scores;
  for (const auto& c : r.comments) scores.push_back(c.si_score);
  return sign_signal(t, r.source.si_score, scores, cfg);
}

}  // namespace msuf
