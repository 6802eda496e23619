#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>

#include "enkode/data.hpp"
#include "enkode/types.hpp"

namespace enkode {

enum class KernelKind { rbf, matern32 };

inline std::string to_string(KernelKind k) { return k == KernelKind::rbf ? "rbf" : "matern32"; }
inline KernelKind parse_kernel(const std::string& s) {
  if (s == "rbf") return KernelKind::rbf;
  if (s == "matern32" || s == "m32") return KernelKind::matern32;
  throw FormatError("unknown kernel '" + s + "' (expected rbf or matern32)");
}

/// Stationary ARD kernel on R^2. Both kinds carry the signal variance.
struct Kernel {
  KernelKind kind = KernelKind::matern32;
  double signal_var = 1.0;
  Eigen::Vector2d lengthscales{1.0, 1.0};

  double scaled_sq_dist(const Point2& a, const Point2& b) const {
    return (a - b).cwiseQuotient(lengthscales).squaredNorm();
  }

  double operator()(const Point2& a, const Point2& b) const {
    const double r2 = scaled_sq_dist(a, b);
    if (kind == KernelKind::rbf) return signal_var * std::exp(-0.5 * r2);
    const double s = std::sqrt(3.0 * r2);
    return signal_var * (1.0 + s) * std::exp(-s);
  }
};

inline double kernel_eval(const Kernel& k, const Point2& a, const Point2& b) { return k(a, b); }

/// K(A, B) for row-per-point sets.
inline Eigen::MatrixXd cross_gram(const Kernel& k, const Points& a, const Points& b) {
  Eigen::MatrixXd out(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i) out(i, j) = k(a.row(i).transpose(), b.row(j).transpose());
  return out;
}

inline Eigen::MatrixXd gram(const Kernel& k, const Points& x) {
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    out(j, j) = k.signal_var;
    for (Eigen::Index i = j + 1; i < n; ++i) out(i, j) = out(j, i) = k(x.row(i).transpose(), x.row(j).transpose());
  }
  return out;
}

enum class HyperOptMode { always, below_threshold, never };

struct GPOptions {
  HyperOptMode mode = HyperOptMode::always;
  int freeze_at = 10;  // below_threshold: optimise only while N < freeze_at
  int restarts = 5;
  int iterations = 200;
  std::uint64_t seed = 0;
  int max_jitter_doublings = 8;
};

struct Posterior {
  Points means;               // field units
  Eigen::VectorXd variances;  // diagonal of the latent posterior covariance
};

/// Zero-mean GP from current to next state, one independent output per
/// coordinate with shared hyperparameters (sigma_f^2, l1, l2, sigma_n^2).
class GPRegressor {
 public:
  GPRegressor(Kernel kernel = {}, double noise_var = 1e-4, GPOptions opts = {}, Normalizer norm = {})
      : kernel_(kernel), noise_var_(noise_var), opts_(opts), norm_(norm), rng_(opts.seed) {
    if (!(kernel_.signal_var > 0) || !(kernel_.lengthscales.minCoeff() > 0) || !(noise_var_ > 0))
      throw FitError("gp: hyperparameters must be strictly positive");
  }

  const Kernel& kernel() const { return kernel_; }
  double noise_var() const { return noise_var_; }
  const GPOptions& options() const { return opts_; }
  bool fitted() const { return fitted_; }
  double jitter() const { return jitter_; }
  const Points& train_inputs() const { return x_; }

  /// Log-space hyperparameters (log sf^2, log l1, log l2, log sn^2).
  using Theta = Eigen::Vector4d;

  Theta theta() const {
    return {std::log(kernel_.signal_var), std::log(kernel_.lengthscales.x()), std::log(kernel_.lengthscales.y()),
            std::log(noise_var_)};
  }

  void set_theta(const Theta& t) {
    kernel_.signal_var = std::exp(t(0));
    kernel_.lengthscales = {std::exp(t(1)), std::exp(t(2))};
    noise_var_ = std::exp(t(3));
  }

  /// Sum over outputs of the log marginal likelihood at theta, optionally with its gradient.
  double log_marginal_likelihood(const Theta& t, Theta* grad = nullptr) const {
    GPRegressor probe = *this;
    probe.set_theta(t);
    const Eigen::MatrixXd kf = gram(probe.kernel_, x_);
    Eigen::LLT<Eigen::MatrixXd> llt;
    double jit = 0;
    if (!probe.factorize(kf, llt, jit)) return -std::numeric_limits<double>::infinity();
    const Eigen::Index n = x_.rows();
    const Eigen::MatrixXd alpha = llt.solve(y_);
    const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const double outputs = static_cast<double>(y_.cols());
    const double value = -0.5 * (y_.array() * alpha.array()).sum() - 0.5 * outputs * log_det -
                         0.5 * outputs * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
    if (grad) {
      const Eigen::MatrixXd kinv = llt.solve(Eigen::MatrixXd::Identity(n, n));
      const Eigen::MatrixXd w = alpha * alpha.transpose() - outputs * kinv;
      Eigen::MatrixXd dk1(n, n), dk2(n, n);
      for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index i = 0; i < n; ++i) {
          const Eigen::Vector2d d = (x_.row(i) - x_.row(j)).transpose().cwiseQuotient(probe.kernel_.lengthscales);
          const Eigen::Vector2d d2 = d.cwiseProduct(d);
          double base;
          if (probe.kernel_.kind == KernelKind::rbf) {
            base = kf(i, j);
          } else {
            base = 3.0 * probe.kernel_.signal_var * std::exp(-std::sqrt(3.0 * d2.sum()));
          }
          dk1(i, j) = base * d2.x();
          dk2(i, j) = base * d2.y();
        }
      (*grad)(0) = 0.5 * (w.array() * kf.array()).sum();
      (*grad)(1) = 0.5 * (w.array() * dk1.array()).sum();
      (*grad)(2) = 0.5 * (w.array() * dk2.array()).sum();
      (*grad)(3) = 0.5 * probe.noise_var_ * w.trace();
    }
    return value;
  }

  double log_marginal_likelihood() const { return log_marginal_likelihood(theta()); }

  /// Sets the training data, optimises hyperparameters when the mode asks
  /// for it, and caches the Cholesky factor.
  void fit(const Dataset& ds) {
    ds.require_nonempty("gp fit");
    x_ = norm_.to_unit(ds.inputs());
    y_ = norm_.to_unit(ds.targets());
    const bool optimise = opts_.mode == HyperOptMode::always ||
                          (opts_.mode == HyperOptMode::below_threshold && ds.size() < opts_.freeze_at);
    if (optimise) optimise_hyperparameters();
    const Eigen::MatrixXd kf = gram(kernel_, x_);
    if (!factorize(kf, llt_, jitter_))
      throw FitError("gp fit: Gram matrix not positive definite after maximum jitter");
    alpha_ = llt_.solve(y_);
    fitted_ = true;
  }

  Posterior posterior(const Points& query) const {
    require_fitted();
    const Points q = norm_.to_unit(query);
    const Eigen::MatrixXd ks = cross_gram(kernel_, q, x_);
    Posterior out;
    const Eigen::MatrixXd mean_unit = ks * alpha_;
    out.means.resize(query.rows(), 2);
    for (Eigen::Index k = 0; k < query.rows(); ++k)
      out.means.row(k) = norm_.from_unit(mean_unit.row(k).transpose()).transpose();
    const Eigen::MatrixXd v = llt_.matrixL().solve(ks.transpose());
    out.variances = (kernel_.signal_var - v.colwise().squaredNorm().array()).matrix().transpose();
    // Clamp round-off negatives; anything larger indicates a real defect.
    const double tiny = 1e-10 * kernel_.signal_var;
    for (Eigen::Index k = 0; k < out.variances.size(); ++k)
      if (out.variances(k) < 0 && out.variances(k) > -tiny) out.variances(k) = 0;
    return out;
  }

  /// (posterior mean - x) / dt in field units, row per query point.
  Points velocities(const Points& query, double dt) const {
    require_fitted();
    const Points q = norm_.to_unit(query);
    const Eigen::MatrixXd mean_unit = cross_gram(kernel_, q, x_) * alpha_;
    Points out(query.rows(), 2);
    for (Eigen::Index k = 0; k < query.rows(); ++k)
      out.row(k) = (norm_.scale_from_unit((mean_unit.row(k) - q.row(k)).transpose()) / dt).transpose();
    return out;
  }

  Vec2 velocity(const Point2& x, double dt) const {
    Points q(1, 2);
    q.row(0) = x.transpose();
    return velocities(q, dt).row(0).transpose();
  }

 private:
  void require_fitted() const {
    if (!fitted_) throw FitError("gp: posterior requested before fit");
  }

  /// Cholesky of kf + sn^2 I; on failure retries with 1e-10 trace/N jitter, doubling.
  bool factorize(const Eigen::MatrixXd& kf, Eigen::LLT<Eigen::MatrixXd>& llt, double& jitter_used) const {
    const Eigen::Index n = kf.rows();
    Eigen::MatrixXd a = kf;
    a.diagonal().array() += noise_var_;
    llt.compute(a);
    jitter_used = 0;
    if (!a.allFinite()) return false;
    if (llt.info() == Eigen::Success && llt.matrixLLT().allFinite()) return true;
    double jit = 1e-10 * a.trace() / static_cast<double>(n);
    for (int k = 0; k <= opts_.max_jitter_doublings; ++k, jit *= 2) {
      Eigen::MatrixXd b = a;
      b.diagonal().array() += jit;
      llt.compute(b);
      if (llt.info() == Eigen::Success && llt.matrixLLT().allFinite()) {
        jitter_used = jit;
        return true;
      }
    }
    return false;
  }

  static Theta clamp_theta(Theta t) {
    static const Theta lo(-20.0, std::log(1e-3), std::log(1e-3), -25.0);
    static const Theta hi(10.0, std::log(1e3), std::log(1e3), 5.0);
    return t.cwiseMax(lo).cwiseMin(hi);
  }

  /// Gradient ascent on the summed log marginal likelihood with an adaptive
  /// step; restart 0 starts from the current hyperparameters, the rest from
  /// random draws.
  void optimise_hyperparameters() {
    const double y_power = std::max(y_.squaredNorm() / static_cast<double>(y_.size()), 1e-12);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Theta best = theta();
    double best_value = log_marginal_likelihood(best);
    for (int restart = 0; restart < opts_.restarts; ++restart) {
      Theta t = theta();
      if (restart > 0) {
        t(0) = std::log(y_power) + (2.0 * unif(rng_) - 1.0);
        t(1) = std::log(0.05) + unif(rng_) * (std::log(2.0) - std::log(0.05));
        t(2) = std::log(0.05) + unif(rng_) * (std::log(2.0) - std::log(0.05));
        t(3) = std::log(y_power) - 3.0 - 6.0 * unif(rng_);
      }
      t = clamp_theta(t);
      Theta g;
      double value = log_marginal_likelihood(t, &g);
      double step = 0.1;
      for (int it = 0; it < opts_.iterations && std::isfinite(value); ++it) {
        const double gn = g.norm();
        if (!(gn > 1e-12)) break;
        const Theta cand = clamp_theta(t + step * g / std::max(1.0, gn));
        Theta cg;
        const double cv = log_marginal_likelihood(cand, &cg);
        if (cv > value) {
          t = cand, g = cg, value = cv;
          step = std::min(step * 1.5, 2.0);
        } else {
          step *= 0.5;
          if (step < 1e-10) break;
        }
      }
      if (value > best_value) best = t, best_value = value;
    }
    set_theta(best);
  }

  Kernel kernel_;
  double noise_var_;
  GPOptions opts_;
  Normalizer norm_;
  std::mt19937_64 rng_;
  Points x_ = Points(0, 2);
  Points y_ = Points(0, 2);
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::MatrixXd alpha_;
  double jitter_ = 0;
  bool fitted_ = false;
};

inline Vec2 gp_velocity(const GPRegressor& g, const Point2& x, double dt) { return g.velocity(x, dt); }

}  // namespace enkode
