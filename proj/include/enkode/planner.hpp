#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "enkode/data.hpp"
#include "enkode/ensemble.hpp"
#include "enkode/flowfields.hpp"
#include "enkode/gp.hpp"
#include "enkode/koopman.hpp"
#include "enkode/metrics.hpp"

namespace enkode {

enum class EstimatorKind { enkode, gp };
enum class SamplerKind { active, uniform };

struct EnkodeSettings {
  KoopmanConfig model{};
  int members = 10;
  double beta = 1.0;
  int threads = 1;
};

struct GPSettings {
  KernelKind kernel = KernelKind::matern32;
  GPOptions options{};
  double init_signal_var = 1.0;
  double init_lengthscale = 0.5;  // in unit-normalized coordinates
  double init_noise_var = 1e-4;
};

/// Fully resolved settings for one campaign.
struct CampaignConfig {
  EstimatorKind estimator = EstimatorKind::enkode;
  SamplerKind sampler = SamplerKind::active;
  int n_total = 36;
  int grid_nx = 50, grid_ny = 50;
  double exclusion_radius = -1;  // < 0: one test-grid cell width
  MeasurementConfig measurement{};
  std::uint64_t seed = 0;
  EnkodeSettings enkode{};
  GPSettings gp{};
  bool keep_fields = false;  // retain per-iteration estimate and uncertainty grids
};

/// Index of the largest value among flagged candidates; ties go to the lowest index.
inline std::optional<std::size_t> argmax_free(const Eigen::VectorXd& values, const std::vector<std::uint8_t>& free) {
  std::optional<std::size_t> best;
  for (std::size_t k = 0; k < free.size(); ++k) {
    if (!free[k]) continue;
    if (!best || values(static_cast<Eigen::Index>(k)) > values(static_cast<Eigen::Index>(*best))) best = k;
  }
  return best;
}

/// The k-th point (0-based) of a sqrt(n_total)-sided lattice with half-cell
/// margins, traversed row by row in alternating direction from the bottom.
inline Point2 serpentine_point(const Domain& d, int n_total, int k) {
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n_total))));
  if (side * side != n_total) throw Error("uniform sampler: n_total must be a perfect square");
  if (k < 0 || k >= n_total) throw BudgetExhaustedError("uniform sampler: lattice exhausted");
  const int row = k / side;
  const int col = row % 2 == 0 ? k % side : side - 1 - k % side;
  return {d.x_min() + (col + 0.5) * d.width() / side, d.y_min() + (row + 0.5) * d.height() / side};
}

struct IterationRecord {
  int n_samples = 0;
  MetricReport metrics;
  double wall_ms = 0;
  double uncertainty_error_spearman = 0;  // rank correlation of U with pointwise EPE
  Point2 sampled = Point2::Zero();        // location of the n-th sample
  std::optional<Point2> next;             // choice made from this iteration's map
  Points estimate;                        // kept only when keep_fields
  UncertaintyMap map;                     // kept only when keep_fields
};

struct CampaignResult {
  std::vector<IterationRecord> iterations;
  std::vector<Point2> visited;
  Dataset dataset{1.0};
  Points grid;                       // all test-grid points
  std::vector<std::uint8_t> valid;   // unmasked and backed by data
  Points truth;                      // ground truth at every valid point (NaN elsewhere)
  bool aborted = false;
  std::string abort_reason;
  std::vector<std::string> log;
};

/// Predictions of the current estimator over the test grid.
struct GridPrediction {
  Points velocities;
  UncertaintyMap map;
};

class Estimator {
 public:
  virtual ~Estimator() = default;
  virtual void update(const Dataset& ds) = 0;
  virtual GridPrediction predict(const Points& grid) const = 0;
};

class EnkodeEstimator final : public Estimator {
 public:
  EnkodeEstimator(const EnkodeSettings& s, double dt, std::uint64_t seed, const Normalizer& norm)
      : ensemble_(Ensemble::random(s.model, s.members, s.beta, dt, seed, norm, s.threads)) {}

  void update(const Dataset& ds) override { ensemble_.train(ds); }

  GridPrediction predict(const Points& grid) const override {
    const auto per_member = ensemble_.member_velocities(grid);
    return {Ensemble::mean_of(per_member), Ensemble::map_from(grid, per_member, ensemble_.beta())};
  }

  const Ensemble& ensemble() const { return ensemble_; }

 private:
  Ensemble ensemble_;
};

/// GP path: U is the posterior variance (reported as norm_var, circ_var = 0).
class GPEstimator final : public Estimator {
 public:
  GPEstimator(const GPSettings& s, double dt, std::uint64_t seed, const Normalizer& norm)
      : gp_(Kernel{s.kernel, s.init_signal_var, {s.init_lengthscale, s.init_lengthscale}}, s.init_noise_var,
            with_seed(s.options, seed), norm),
        dt_(dt) {}

  void update(const Dataset& ds) override { gp_.fit(ds); }

  GridPrediction predict(const Points& grid) const override {
    const Posterior post = gp_.posterior(grid);
    GridPrediction out{gp_.velocities(grid, dt_), {}};
    out.map.grid = grid;
    out.map.values = post.variances;
    out.map.norm_var = post.variances;
    out.map.circ_var = Eigen::VectorXd::Zero(grid.rows());
    return out;
  }

  const GPRegressor& regressor() const { return gp_; }

 private:
  static GPOptions with_seed(GPOptions o, std::uint64_t seed) {
    o.seed = seed;
    return o;
  }
  GPRegressor gp_;
  double dt_;
};

/// Active-learning loop state over a fixed test grid.
class Campaign {
 public:
  Campaign(FieldPtr field, CampaignConfig cfg) : field_(std::move(field)), cfg_(cfg) {
    if (cfg_.n_total < 1) throw Error("campaign: n_total must be >= 1");
    cfg_.measurement.validate();
    const Domain& d = field_->domain();
    lattice_ = d.lattice(cfg_.grid_nx, cfg_.grid_ny);
    if (cfg_.exclusion_radius < 0) cfg_.exclusion_radius = std::min(lattice_.dx(), lattice_.dy());
    result_.grid = lattice_.nodes();
    result_.valid.assign(lattice_.size(), 0);
    result_.truth = Points::Constant(static_cast<Eigen::Index>(lattice_.size()), 2,
                                     std::numeric_limits<double>::quiet_NaN());
    for (std::size_t k = 0; k < lattice_.size(); ++k) {
      const Point2 p = lattice_.node(k);
      if (d.blocked(p) || !field_->has_data(p)) continue;
      result_.valid[k] = 1;
      result_.truth.row(static_cast<Eigen::Index>(k)) = field_->velocity(p).transpose();
      valid_index_.push_back(k);
    }
    if (valid_index_.empty()) throw BudgetExhaustedError("campaign: test grid has no free point");
    valid_points_.resize(static_cast<Eigen::Index>(valid_index_.size()), 2);
    valid_truth_.resize(static_cast<Eigen::Index>(valid_index_.size()), 2);
    for (std::size_t i = 0; i < valid_index_.size(); ++i) {
      valid_points_.row(static_cast<Eigen::Index>(i)) = result_.grid.row(static_cast<Eigen::Index>(valid_index_[i]));
      valid_truth_.row(static_cast<Eigen::Index>(i)) = result_.truth.row(static_cast<Eigen::Index>(valid_index_[i]));
    }
    result_.dataset = Dataset(cfg_.measurement.dt);

    const Normalizer norm(d);
    if (cfg_.estimator == EstimatorKind::enkode)
      estimator_ = std::make_unique<EnkodeEstimator>(cfg_.enkode, cfg_.measurement.dt, derive_seed(cfg_.seed, 1), norm);
    else
      estimator_ = std::make_unique<GPEstimator>(cfg_.gp, cfg_.measurement.dt, derive_seed(cfg_.seed, 4), norm);
    noise_rng_.seed(derive_seed(cfg_.seed, 2));
    start_rng_.seed(derive_seed(cfg_.seed, 3));
  }

  const CampaignConfig& config() const { return cfg_; }
  const Lattice& lattice() const { return lattice_; }
  const CampaignResult& result() const { return result_; }
  const Estimator& estimator() const { return *estimator_; }

  /// Candidate flags over the whole grid: valid and outside the exclusion radius of every visited point.
  std::vector<std::uint8_t> free_flags() const {
    std::vector<std::uint8_t> flags(lattice_.size(), 0);
    const Domain& d = field_->domain();
    for (std::size_t k : valid_index_)
      flags[k] = is_free(d, lattice_.node(k), result_.visited, cfg_.exclusion_radius) ? 1 : 0;
    return flags;
  }

  /// Grid point of X' n D_free with maximal U.
  Point2 next_active(const UncertaintyMap& map) const {
    const auto best = argmax_free(map.values, free_flags());
    if (!best) throw BudgetExhaustedError("planner: no free candidate remains");
    return lattice_.node(*best);
  }

  /// Next serpentine lattice point; an obstacle point is replaced by the nearest free grid point.
  Point2 next_uniform() {
    const Domain& d = field_->domain();
    const Point2 target = serpentine_point(d, cfg_.n_total, static_cast<int>(result_.visited.size()));
    if (field_->has_data(target) && !d.blocked(target)) return target;
    const auto flags = free_flags();
    std::optional<std::size_t> best;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < flags.size(); ++k) {
      if (!flags[k]) continue;
      const double dist = (lattice_.node(k) - target).norm();
      if (dist < best_dist) best = k, best_dist = dist;
    }
    if (!best) throw BudgetExhaustedError("uniform sampler: no free grid point near an obstacle lattice point");
    const Point2 sub = lattice_.node(*best);
    std::ostringstream os;
    os << "uniform point (" << target.x() << ", " << target.y() << ") is obstructed; substituted (" << sub.x()
       << ", " << sub.y() << ")";
    result_.log.push_back(os.str());
    return sub;
  }

  Point2 random_start() {
    std::uniform_int_distribution<std::size_t> pick(0, valid_index_.size() - 1);
    return lattice_.node(valid_index_[pick(start_rng_)]);
  }

  void acquire(const Point2& p) {
    const auto pair = sample_pair(*field_, p, cfg_.measurement, noise_rng_);
    result_.dataset.push_back(pair.first, pair.second);
    result_.visited.push_back(p);
  }

  /// Fits on the current data and scores the estimate against ground truth.
  IterationRecord evaluate_iteration(GridPrediction& pred_out) {
    estimator_->update(result_.dataset);
    pred_out = estimator_->predict(valid_points_);
    IterationRecord rec;
    rec.n_samples = static_cast<int>(result_.dataset.size());
    rec.metrics = evaluate_fields(valid_truth_, pred_out.velocities);
    rec.metrics.n_samples = rec.n_samples;
    rec.sampled = result_.visited.back();
    if (valid_points_.rows() >= 2) {
      std::vector<double> u(pred_out.map.values.data(), pred_out.map.values.data() + pred_out.map.values.size());
      std::vector<double> e(rec.metrics.epe.data(), rec.metrics.epe.data() + rec.metrics.epe.size());
      rec.uncertainty_error_spearman = spearman(u, e);
    }
    return rec;
  }

  /// Expands a map over the valid points to the full grid (NaN off-grid).
  UncertaintyMap full_map(const UncertaintyMap& valid_map) const {
    const auto n = static_cast<Eigen::Index>(lattice_.size());
    const double nan = std::numeric_limits<double>::quiet_NaN();
    UncertaintyMap m{result_.grid, Eigen::VectorXd::Constant(n, nan), Eigen::VectorXd::Constant(n, nan),
                     Eigen::VectorXd::Constant(n, nan)};
    for (std::size_t i = 0; i < valid_index_.size(); ++i) {
      const auto k = static_cast<Eigen::Index>(valid_index_[i]);
      m.values(k) = valid_map.values(static_cast<Eigen::Index>(i));
      m.norm_var(k) = valid_map.norm_var(static_cast<Eigen::Index>(i));
      m.circ_var(k) = valid_map.circ_var(static_cast<Eigen::Index>(i));
    }
    return m;
  }

  /// Runs the whole loop; errors abort with the iterations completed so far.
  CampaignResult run() {
    try {
      acquire(cfg_.sampler == SamplerKind::active ? random_start() : next_uniform());
      while (true) {
        const auto t0 = std::chrono::steady_clock::now();
        GridPrediction pred;
        IterationRecord rec = evaluate_iteration(pred);
        const bool last = rec.n_samples >= cfg_.n_total;
        // Full-grid map: valid points carry U, blocked/no-data points NaN (never selected).
        UncertaintyMap map = full_map(pred.map);
        // Selection failure still records the current estimate before aborting.
        std::optional<BudgetExhaustedError> exhausted;
        if (!last) {
          try {
            rec.next = cfg_.sampler == SamplerKind::active ? next_active(map) : next_uniform();
          } catch (const BudgetExhaustedError& e) {
            exhausted = e;
          }
        }
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (cfg_.keep_fields) {
          rec.estimate = std::move(pred.velocities);
          rec.map = std::move(map);
        }
        const std::optional<Point2> next = rec.next;
        result_.iterations.push_back(std::move(rec));
        if (exhausted) throw *exhausted;
        if (last) break;
        acquire(*next);
      }
    } catch (const Error& e) {
      result_.aborted = true;
      result_.abort_reason = e.what();
      result_.log.push_back(std::string("aborted: ") + e.what());
    }
    return result_;
  }

  /// Valid grid points in row-major order (the evaluation set).
  const Points& evaluation_points() const { return valid_points_; }
  const std::vector<std::size_t>& evaluation_index() const { return valid_index_; }

 private:
  FieldPtr field_;
  CampaignConfig cfg_;
  Lattice lattice_;
  CampaignResult result_;
  std::vector<std::size_t> valid_index_;
  Points valid_points_, valid_truth_;
  std::unique_ptr<Estimator> estimator_;
  std::mt19937_64 noise_rng_, start_rng_;
};

inline CampaignResult run_campaign(FieldPtr field, const CampaignConfig& cfg) {
  Campaign c(std::move(field), cfg);
  return c.run();
}

/// dt so the fastest grid velocity moves one test-grid cell.
inline double default_dt(const VectorField& f, int nx, int ny) {
  const Lattice lat = f.domain().lattice(nx, ny);
  const double vmax = max_speed(f, lat);
  if (!(vmax > 0)) throw Error("default dt: field is identically zero on the test grid");
  return std::min(lat.dx(), lat.dy()) / vmax;
}

inline double default_noise_sigma(const VectorField& f, int nx, int ny) {
  return 0.01 * max_speed(f, f.domain().lattice(nx, ny));
}

}  // namespace enkode
