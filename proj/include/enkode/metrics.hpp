#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "enkode/csv.hpp"
#include "enkode/types.hpp"

namespace enkode {

inline double epe(const Vec2& truth, const Vec2& est) { return (truth - est).norm(); }

/// Norms below this leave the angle undefined.
inline constexpr double kCosineNormFloor = 1e-12;

/// nullopt when either vector is (numerically) zero.
inline std::optional<double> cosine_similarity(const Vec2& truth, const Vec2& est) {
  const double a = truth.norm(), b = est.norm();
  if (a < kCosineNormFloor || b < kCosineNormFloor) return std::nullopt;
  return std::clamp(truth.dot(est) / (a * b), -1.0, 1.0);
}

inline double magnitude_error(const Vec2& truth, const Vec2& est) { return std::abs(truth.norm() - est.norm()); }

/// Pointwise and domain-mean errors between a true and an estimated field.
struct MetricReport {
  double epe_mean = 0, cs_mean = 0, me_mean = 0;
  Eigen::VectorXd epe, cs, me;  // cs is NaN at excluded points
  int cs_excluded = 0;
  int n_samples = 0;
  int trial = 0;
};

inline MetricReport evaluate_fields(const Points& truth, const Points& est) {
  if (truth.rows() != est.rows() || truth.rows() == 0) throw Error("metrics: field sizes differ or are empty");
  MetricReport r;
  const Eigen::Index n = truth.rows();
  r.epe.resize(n);
  r.cs.resize(n);
  r.me.resize(n);
  double cs_sum = 0;
  int cs_count = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    const Vec2 t = truth.row(k).transpose(), e = est.row(k).transpose();
    r.epe(k) = epe(t, e);
    r.me(k) = magnitude_error(t, e);
    if (auto c = cosine_similarity(t, e)) {
      r.cs(k) = *c;
      cs_sum += *c;
      ++cs_count;
    } else {
      r.cs(k) = std::numeric_limits<double>::quiet_NaN();
      ++r.cs_excluded;
    }
  }
  r.epe_mean = r.epe.mean();
  r.me_mean = r.me.mean();
  r.cs_mean = cs_count ? cs_sum / cs_count : 0.0;
  return r;
}

/// Writes `x,y,epe,cs,me` rows.
inline void export_metric_grid(const Points& grid, const MetricReport& r, const std::string& path) {
  csv::Writer w(path);
  w.header({"x", "y", "epe", "cs", "me"});
  for (Eigen::Index k = 0; k < grid.rows(); ++k) w.row(grid(k, 0), grid(k, 1), r.epe(k), r.cs(k), r.me(k));
}

struct MetricSummary {
  double mean = 0, stddev = 0;
};

struct AggregateRow {
  int n_samples = 0;
  int trials = 0;
  MetricSummary cs, me, epe;
};

/// Per-N mean and population standard deviation across trials. Every trial
/// must report the same N schedule.
inline std::vector<AggregateRow> aggregate_trials(const std::vector<std::vector<MetricReport>>& trials) {
  if (trials.empty()) throw AggregationError("aggregate: no trials");
  const auto& ref = trials.front();
  for (const auto& t : trials) {
    if (t.size() != ref.size()) throw AggregationError("aggregate: trials have different N schedules");
    for (std::size_t i = 0; i < t.size(); ++i)
      if (t[i].n_samples != ref[i].n_samples) throw AggregationError("aggregate: trials have different N schedules");
  }
  const auto summarize = [](const std::vector<double>& xs) {
    const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double v = 0;
    for (double x : xs) v += (x - m) * (x - m);
    return MetricSummary{m, std::sqrt(v / static_cast<double>(xs.size()))};
  };
  std::vector<AggregateRow> out;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    std::vector<double> cs, me, ep;
    for (const auto& t : trials) {
      cs.push_back(t[i].cs_mean);
      me.push_back(t[i].me_mean);
      ep.push_back(t[i].epe_mean);
    }
    out.push_back({ref[i].n_samples, static_cast<int>(trials.size()), summarize(cs), summarize(me), summarize(ep)});
  }
  return out;
}

/// Average ranks (ties share the mean rank), 1-based.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw Error("spearman: need two equal-length samples of size >= 2");
  return pearson(average_ranks(a), average_ranks(b));
}

}  // namespace enkode
