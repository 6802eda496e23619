#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "enkode/csv.hpp"
#include "enkode/koopman.hpp"
#include "enkode/types.hpp"

namespace enkode {

struct CircularVariance {
  double value = 0;  // 1 - R / M over members with a defined direction
  int used = 0;      // members contributing an angle
  bool degenerate = false;
};

/// Fisher circular variance of the directions of a set of vectors.
/// Zero vectors have no direction and are left out of the statistic.
inline CircularVariance circular_variance(std::span<const Vec2> vectors) {
  double sc = 0, ss = 0;
  int used = 0;
  for (const Vec2& v : vectors) {
    const double r = v.norm();
    if (!(r > 0)) continue;
    sc += v.x() / r;
    ss += v.y() / r;
    ++used;
  }
  if (used == 0) return {0.0, 0, true};
  const double rbar = std::sqrt(sc * sc + ss * ss) / used;
  return {std::clamp(1.0 - rbar, 0.0, 1.0), used, false};
}

struct Uncertainty {
  double value = 0;      // U = norm_var + beta * circ_var
  double norm_var = 0;   // population variance of |v_m|
  double circ_var = 0;
  bool degenerate = false;
};

inline Uncertainty uncertainty_of(std::span<const Vec2> predictions, double beta) {
  const double m = static_cast<double>(predictions.size());
  double mean = 0;
  for (const Vec2& v : predictions) mean += v.norm();
  mean /= m;
  double var = 0;
  for (const Vec2& v : predictions) {
    const double d = v.norm() - mean;
    var += d * d;
  }
  var /= m;
  const CircularVariance cv = circular_variance(predictions);
  return {var + beta * cv.value, var, cv.value, cv.degenerate};
}

/// U(x') over a set of query points, with its two components.
struct UncertaintyMap {
  Points grid;
  Eigen::VectorXd values, norm_var, circ_var;

  Eigen::Index size() const { return grid.rows(); }
};

inline void export_uncertainty_csv(const UncertaintyMap& map, const std::string& path) {
  csv::Writer w(path);
  w.header({"x", "y", "U", "norm_var", "circ_var"});
  for (Eigen::Index k = 0; k < map.size(); ++k)
    w.row(map.grid(k, 0), map.grid(k, 1), map.values(k), map.norm_var(k), map.circ_var(k));
}

inline UncertaintyMap load_uncertainty_csv(const std::string& path) {
  const auto t = csv::read(path);
  const int cols[5] = {t.column("x"), t.column("y"), t.column("U"), t.column("norm_var"), t.column("circ_var")};
  for (int c : cols)
    if (c < 0) throw FormatError(path + ": expected header x,y,U,norm_var,circ_var");
  UncertaintyMap m;
  const auto n = static_cast<Eigen::Index>(t.rows.size());
  m.grid.resize(n, 2);
  m.values.resize(n);
  m.norm_var.resize(n);
  m.circ_var.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    double v[5];
    for (int c = 0; c < 5; ++c)
      if (!csv::parse_double(t.rows[static_cast<std::size_t>(k)][static_cast<std::size_t>(cols[c])], v[c]))
        throw FormatError(path + ": bad number");
    m.grid.row(k) << v[0], v[1];
    m.values(k) = v[2];
    m.norm_var(k) = v[3];
    m.circ_var(k) = v[4];
  }
  return m;
}

/// M independently initialised Koopman models sharing nu and dt.
class Ensemble {
 public:
  Ensemble(std::vector<KoopmanModel> members, double beta, double dt, int threads = 1)
      : members_(std::move(members)), beta_(beta), dt_(dt), threads_(std::max(1, threads)) {
    if (members_.size() < 2) throw Error("ensemble: need at least two members");
    if (!(beta_ >= 0)) throw Error("ensemble: beta must be >= 0");
    if (!(dt_ > 0)) throw Error("ensemble: dt must be > 0");
    for (const auto& m : members_)
      if (m.nu() != members_.front().nu()) throw Error("ensemble: members must share nu");
  }

  /// Member m is seeded with derive_seed(seed, m).
  static Ensemble random(const KoopmanConfig& cfg, int members, double beta, double dt, std::uint64_t seed,
                         const Normalizer& norm, int threads = 1) {
    std::vector<KoopmanModel> ms;
    ms.reserve(static_cast<std::size_t>(members));
    for (int m = 0; m < members; ++m) ms.push_back(KoopmanModel::random(cfg, derive_seed(seed, static_cast<std::uint64_t>(m)), norm));
    return Ensemble(std::move(ms), beta, dt, threads);
  }

  std::size_t size() const { return members_.size(); }
  const std::vector<KoopmanModel>& members() const { return members_; }
  double beta() const { return beta_; }
  double dt() const { return dt_; }

  /// Trains every member on the same data. Members are independent, so the
  /// result does not depend on the thread count.
  void train(const Dataset& ds) {
    if (threads_ == 1 || members_.size() == 1) {
      for (auto& m : members_) m.train(ds);
      return;
    }
    std::vector<std::exception_ptr> errors(members_.size());
    std::vector<std::thread> pool;
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads_), members_.size());
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t k = w; k < members_.size(); k += workers) {
          try {
            members_[k].train(ds);
          } catch (...) {
            errors[k] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  std::vector<Vec2> member_velocities(const Point2& x) const {
    std::vector<Vec2> out;
    out.reserve(members_.size());
    for (const auto& m : members_) out.push_back(m.predict_velocity(x, dt_));
    return out;
  }

  Vec2 velocity(const Point2& x) const {
    Vec2 sum = Vec2::Zero();
    for (const auto& m : members_) sum += m.predict_velocity(x, dt_);
    return sum / static_cast<double>(members_.size());
  }

  Uncertainty uncertainty(const Point2& x) const { return uncertainty_of(member_velocities(x), beta_); }

  /// Per-member velocity predictions at each row of pts.
  std::vector<Points> member_velocities(const Points& pts) const {
    std::vector<Points> out;
    out.reserve(members_.size());
    for (const auto& m : members_) out.push_back(m.predict_velocities(pts, dt_));
    return out;
  }

  static Points mean_of(const std::vector<Points>& per_member) {
    Points mean = Points::Zero(per_member.front().rows(), 2);
    for (const auto& p : per_member) mean += p;
    return mean / static_cast<double>(per_member.size());
  }

  Points velocities(const Points& pts) const { return mean_of(member_velocities(pts)); }

  UncertaintyMap uncertainty_map(const Points& grid) const { return map_from(grid, member_velocities(grid), beta_); }

  static UncertaintyMap map_from(const Points& grid, const std::vector<Points>& per_member, double beta) {
    if (grid.rows() == 0) throw Error("uncertainty map: empty grid");
    UncertaintyMap map{grid, Eigen::VectorXd(grid.rows()), Eigen::VectorXd(grid.rows()), Eigen::VectorXd(grid.rows())};
    std::vector<Vec2> preds(per_member.size());
    for (Eigen::Index k = 0; k < grid.rows(); ++k) {
      for (std::size_t m = 0; m < per_member.size(); ++m) preds[m] = per_member[m].row(k).transpose();
      const Uncertainty u = uncertainty_of(preds, beta);
      map.values(k) = u.value;
      map.norm_var(k) = u.norm_var;
      map.circ_var(k) = u.circ_var;
    }
    return map;
  }

 private:
  std::vector<KoopmanModel> members_;
  double beta_;
  double dt_;
  int threads_;
};

inline Vec2 ensemble_velocity(const Ensemble& e, const Point2& x) { return e.velocity(x); }
inline Uncertainty uncertainty(const Ensemble& e, const Point2& x) { return e.uncertainty(x); }
inline UncertaintyMap uncertainty_map(const Ensemble& e, const Points& grid) { return e.uncertainty_map(grid); }

}  // namespace enkode
