#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "enkode/types.hpp"

namespace enkode {

/// Regular node lattice spanning a rectangle, node (i, j) at
/// (x_min + i*dx, y_min + j*dy). Flat indices are row-major: j*nx + i.
struct Lattice {
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
  int nx = 2, ny = 2;

  Lattice() = default;
  Lattice(double x0, double x1, double y0, double y1, int nx_, int ny_)
      : x_min(x0), x_max(x1), y_min(y0), y_max(y1), nx(nx_), ny(ny_) {
    if (!(x0 < x1) || !(y0 < y1)) throw DomainError("lattice: empty rectangle");
    if (nx < 2 || ny < 2) throw DomainError("lattice: need at least 2 nodes per axis");
  }

  double dx() const { return (x_max - x_min) / (nx - 1); }
  double dy() const { return (y_max - y_min) / (ny - 1); }
  std::size_t size() const { return static_cast<std::size_t>(nx) * ny; }
  std::size_t index(int i, int j) const { return static_cast<std::size_t>(j) * nx + i; }

  Point2 node(int i, int j) const {
    // Last node pinned to the upper bound so the lattice spans the rectangle exactly.
    const double x = i == nx - 1 ? x_max : x_min + i * dx();
    const double y = j == ny - 1 ? y_max : y_min + j * dy();
    return {x, y};
  }
  Point2 node(std::size_t flat) const {
    return node(static_cast<int>(flat % nx), static_cast<int>(flat / nx));
  }

  Points nodes() const {
    Points out(static_cast<Eigen::Index>(size()), 2);
    for (std::size_t k = 0; k < size(); ++k) out.row(static_cast<Eigen::Index>(k)) = node(k).transpose();
    return out;
  }

  /// Index of the node closest to p (p clamped into the rectangle first).
  std::size_t nearest(const Point2& p) const {
    const auto snap = [](double v, double lo, double h, int n) {
      const long k = std::lround((v - lo) / h);
      return static_cast<int>(std::clamp<long>(k, 0, n - 1));
    };
    return index(snap(p.x(), x_min, dx(), nx), snap(p.y(), y_min, dy(), ny));
  }
};

/// Blocked/unblocked flags on a node lattice. A point is blocked when the
/// nearest mask node is blocked.
class ObstacleMask {
 public:
  ObstacleMask(Lattice lattice, std::vector<std::uint8_t> blocked)
      : lattice_(lattice), blocked_(std::move(blocked)) {
    if (blocked_.size() != lattice_.size()) throw FormatError("obstacle mask: size does not match lattice");
  }

  const Lattice& lattice() const { return lattice_; }
  bool blocked_node(std::size_t k) const { return blocked_[k] != 0; }
  bool blocked(const Point2& p) const { return blocked_[lattice_.nearest(p)] != 0; }
  std::size_t blocked_count() const {
    return static_cast<std::size_t>(std::count(blocked_.begin(), blocked_.end(), std::uint8_t{1}));
  }

 private:
  Lattice lattice_;
  std::vector<std::uint8_t> blocked_;
};

class Domain {
 public:
  Domain(double x_min, double x_max, double y_min, double y_max,
         std::shared_ptr<const ObstacleMask> mask = nullptr)
      : x_min_(x_min), x_max_(x_max), y_min_(y_min), y_max_(y_max), mask_(std::move(mask)) {
    if (!(x_min < x_max) || !(y_min < y_max)) throw DomainError("domain: require x_min < x_max and y_min < y_max");
    if (mask_) {
      const Lattice& l = mask_->lattice();
      const double tol = 1e-9 * std::max({std::abs(x_max - x_min), std::abs(y_max - y_min), 1.0});
      if (std::abs(l.x_min - x_min) > tol || std::abs(l.x_max - x_max) > tol ||
          std::abs(l.y_min - y_min) > tol || std::abs(l.y_max - y_max) > tol)
        throw DomainError("domain: obstacle mask must cover the full rectangle");
    }
  }

  double x_min() const { return x_min_; }
  double x_max() const { return x_max_; }
  double y_min() const { return y_min_; }
  double y_max() const { return y_max_; }
  double width() const { return x_max_ - x_min_; }
  double height() const { return y_max_ - y_min_; }
  const ObstacleMask* mask() const { return mask_.get(); }
  std::shared_ptr<const ObstacleMask> shared_mask() const { return mask_; }

  bool contains(const Point2& p) const {
    return p.x() >= x_min_ && p.x() <= x_max_ && p.y() >= y_min_ && p.y() <= y_max_;
  }
  bool blocked(const Point2& p) const { return mask_ && mask_->blocked(p); }

  void require_inside(const Point2& p, const char* who) const {
    if (!contains(p)) {
      std::ostringstream os;
      os << who << ": point (" << p.x() << ", " << p.y() << ") outside domain [" << x_min_ << ", " << x_max_
         << "] x [" << y_min_ << ", " << y_max_ << "]";
      throw DomainError(os.str());
    }
  }

  Lattice lattice(int nx, int ny) const { return {x_min_, x_max_, y_min_, y_max_, nx, ny}; }

 private:
  double x_min_, x_max_, y_min_, y_max_;
  std::shared_ptr<const ObstacleMask> mask_;
};

/// True iff p is inside the rectangle, unblocked, and farther than tol from
/// every visited point.
inline bool is_free(const Domain& domain, const Point2& p, std::span<const Point2> visited, double tol) {
  if (!domain.contains(p) || domain.blocked(p)) return false;
  return std::none_of(visited.begin(), visited.end(),
                      [&](const Point2& q) { return (p - q).norm() <= tol; });
}

/// Ground-truth velocity field. Implementations are immutable.
class VectorField {
 public:
  virtual ~VectorField() = default;
  virtual const Domain& domain() const = 0;
  /// Throws DomainError outside the domain, DataError where data is missing.
  virtual Vec2 velocity(const Point2& p) const = 0;
  /// Whether velocity(p) is defined (inside, and backed by finite data).
  virtual bool has_data(const Point2& p) const { return domain().contains(p); }
  virtual std::string describe() const = 0;
};

using FieldPtr = std::shared_ptr<const VectorField>;

struct BickleyParams {
  double U0 = 62.66;
  double L = 1.77;
  std::array<double, 3> epsilons{0.0075, 0.15, 0.3};
  /// k_n = 2n / r0 with r0 = 6.371 (earth radius in the same length unit as L).
  std::array<double, 3> wavenumbers{2.0 / 6.371, 4.0 / 6.371, 6.0 / 6.371};
  std::array<double, 3> phase_speeds{0.1446 * 62.66, 0.205 * 62.66, 0.461 * 62.66};
  double t_freeze = 0.0;
  /// Speed of the observing frame along +x; adds frame_speed * y to psi.
  /// The default rides with the fastest mode, where the recirculating
  /// vortices beside the jet appear. 0 gives the fixed frame.
  double frame_speed = 0.461 * 62.66;
};

/// Meandering jet from the stream function
///   psi = -U0 L tanh(y/L) + U0 L sech^2(y/L) sum_n eps_n cos(k_n (x - c_n t)) + c y,
/// frozen at t_freeze, with (u, v) = (-dpsi/dy, dpsi/dx) and c the frame speed.
class BickleyField final : public VectorField {
 public:
  explicit BickleyField(BickleyParams params = {},
                        Domain domain = Domain(0.0, std::numbers::pi * 6.371, -3.0, 3.0))
      : p_(params), domain_(std::move(domain)) {
    if (!(p_.L > 0) || !(p_.U0 > 0)) throw DomainError("bickley: require L > 0 and U0 > 0");
  }

  const Domain& domain() const override { return domain_; }
  const BickleyParams& params() const { return p_; }

  double stream_function(const Point2& p) const {
    const double s = sech2(p.y());
    double sum = 0;
    for (int n = 0; n < 3; ++n) sum += p_.epsilons[n] * std::cos(phase(n, p.x()));
    return p_.frame_speed * p.y() - p_.U0 * p_.L * std::tanh(p.y() / p_.L) + p_.U0 * p_.L * s * sum;
  }

  Vec2 velocity(const Point2& p) const override {
    domain_.require_inside(p, "bickley_velocity");
    const double s = sech2(p.y());
    const double th = std::tanh(p.y() / p_.L);
    double cos_sum = 0, sin_sum = 0;
    for (int n = 0; n < 3; ++n) {
      cos_sum += p_.epsilons[n] * std::cos(phase(n, p.x()));
      sin_sum += p_.epsilons[n] * p_.wavenumbers[n] * std::sin(phase(n, p.x()));
    }
    return {p_.U0 * s * (1.0 + 2.0 * th * cos_sum) - p_.frame_speed, -p_.U0 * p_.L * s * sin_sum};
  }

  std::string describe() const override { return "bickley"; }

 private:
  double sech2(double y) const {
    const double c = std::cosh(y / p_.L);
    return 1.0 / (c * c);
  }
  double phase(int n, double x) const { return p_.wavenumbers[n] * (x - p_.phase_speeds[n] * p_.t_freeze); }

  BickleyParams p_;
  Domain domain_;
};

/// Velocity samples on a node lattice, bilinearly interpolated. NaN nodes are
/// allowed (land / obstacle) and make every cell touching them undefined.
class GriddedField final : public VectorField {
 public:
  GriddedField(Lattice lattice, std::vector<double> u, std::vector<double> v,
               std::shared_ptr<const ObstacleMask> mask = nullptr)
      : lattice_(lattice),
        u_(std::move(u)),
        v_(std::move(v)),
        domain_(lattice.x_min, lattice.x_max, lattice.y_min, lattice.y_max, std::move(mask)) {
    if (u_.size() != lattice_.size() || v_.size() != lattice_.size())
      throw FormatError("gridded field: component grids do not match lattice size");
  }

  const Domain& domain() const override { return domain_; }
  const Lattice& lattice() const { return lattice_; }
  int nx() const { return lattice_.nx; }
  int ny() const { return lattice_.ny; }
  double u_at(int i, int j) const { return u_[lattice_.index(i, j)]; }
  double v_at(int i, int j) const { return v_[lattice_.index(i, j)]; }
  bool node_finite(std::size_t k) const { return std::isfinite(u_[k]) && std::isfinite(v_[k]); }

  Vec2 velocity(const Point2& p) const override {
    domain_.require_inside(p, "gridded_velocity");
    const Cell c = locate(p);
    const std::array<std::size_t, 4> k{lattice_.index(c.i, c.j), lattice_.index(c.i + 1, c.j),
                                       lattice_.index(c.i, c.j + 1), lattice_.index(c.i + 1, c.j + 1)};
    for (auto idx : k)
      if (!node_finite(idx)) {
        std::ostringstream os;
        os << "gridded_velocity: missing data at a corner of cell (" << c.i << ", " << c.j << ")";
        throw DataError(os.str());
      }
    const double w00 = (1 - c.tx) * (1 - c.ty), w10 = c.tx * (1 - c.ty), w01 = (1 - c.tx) * c.ty, w11 = c.tx * c.ty;
    return {w00 * u_[k[0]] + w10 * u_[k[1]] + w01 * u_[k[2]] + w11 * u_[k[3]],
            w00 * v_[k[0]] + w10 * v_[k[1]] + w01 * v_[k[2]] + w11 * v_[k[3]]};
  }

  bool has_data(const Point2& p) const override {
    if (!domain_.contains(p)) return false;
    const Cell c = locate(p);
    return node_finite(lattice_.index(c.i, c.j)) && node_finite(lattice_.index(c.i + 1, c.j)) &&
           node_finite(lattice_.index(c.i, c.j + 1)) && node_finite(lattice_.index(c.i + 1, c.j + 1));
  }

  std::string describe() const override { return "gridded"; }

 private:
  struct Cell {
    int i, j;
    double tx, ty;
  };

  Cell locate(const Point2& p) const {
    const auto axis = [](double v, double lo, double h, int n, int& idx, double& t) {
      const double s = (v - lo) / h;
      idx = std::clamp(static_cast<int>(std::floor(s)), 0, n - 2);
      t = std::clamp(s - idx, 0.0, 1.0);
    };
    Cell c{};
    axis(p.x(), lattice_.x_min, lattice_.dx(), lattice_.nx, c.i, c.tx);
    axis(p.y(), lattice_.y_min, lattice_.dy(), lattice_.ny, c.j, c.ty);
    return c;
  }

  Lattice lattice_;
  std::vector<double> u_, v_;
  Domain domain_;
};

/// Cross-shaped obstacle centred in the domain, sampled on an n x n lattice.
inline std::shared_ptr<const ObstacleMask> cross_mask(double x_min, double x_max, double y_min, double y_max,
                                                      int n = 101, double half_width = 0.05,
                                                      double half_length = 0.2) {
  Lattice lat(x_min, x_max, y_min, y_max, n, n);
  const double cx = 0.5 * (x_min + x_max), cy = 0.5 * (y_min + y_max);
  const double w = x_max - x_min, h = y_max - y_min;
  std::vector<std::uint8_t> blocked(lat.size(), 0);
  for (std::size_t k = 0; k < lat.size(); ++k) {
    const Point2 p = lat.node(k);
    const double ax = std::abs(p.x() - cx) / w, ay = std::abs(p.y() - cy) / h;
    const bool bar_h = ax <= half_length && ay <= half_width;
    const bool bar_v = ax <= half_width && ay <= half_length;
    blocked[k] = (bar_h || bar_v) ? 1 : 0;
  }
  return std::make_shared<const ObstacleMask>(lat, std::move(blocked));
}

/// Analytic stand-in for the obstacle cavity: a single clockwise vortex
/// psi = A sin(pi x') sin(pi y') on the unit-mapped domain, with a cross mask.
class VortexTestField final : public VectorField {
 public:
  explicit VortexTestField(double amplitude = 1.0, bool with_obstacle = true)
      : amplitude_(amplitude),
        domain_(0.0, 1.0, 0.0, 1.0, with_obstacle ? cross_mask(0.0, 1.0, 0.0, 1.0) : nullptr) {}

  const Domain& domain() const override { return domain_; }

  Vec2 velocity(const Point2& p) const override {
    domain_.require_inside(p, "vortex_velocity");
    constexpr double pi = std::numbers::pi;
    return {-amplitude_ * pi * std::sin(pi * p.x()) * std::cos(pi * p.y()),
            amplitude_ * pi * std::cos(pi * p.x()) * std::sin(pi * p.y())};
  }

  std::string describe() const override { return "vortex-test"; }

 private:
  double amplitude_;
  Domain domain_;
};

/// F(x) = A x.
class LinearField final : public VectorField {
 public:
  LinearField(Eigen::Matrix2d A, Domain domain) : A_(A), domain_(std::move(domain)) {}

  const Domain& domain() const override { return domain_; }
  const Eigen::Matrix2d& matrix() const { return A_; }
  Vec2 velocity(const Point2& p) const override {
    domain_.require_inside(p, "linear_velocity");
    return A_ * p;
  }
  std::string describe() const override { return "linear"; }

 private:
  Eigen::Matrix2d A_;
  Domain domain_;
};

/// Largest speed over the defined nodes of a lattice laid over the field's domain.
inline double max_speed(const VectorField& field, const Lattice& lattice) {
  double best = 0;
  for (std::size_t k = 0; k < lattice.size(); ++k) {
    const Point2 p = lattice.node(k);
    if (!field.has_data(p)) continue;
    best = std::max(best, field.velocity(p).norm());
  }
  return best;
}

}  // namespace enkode
