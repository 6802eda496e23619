#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "enkode/csv.hpp"
#include "enkode/flowfields.hpp"
#include "enkode/types.hpp"

namespace enkode {

/// Paired states: row n of targets is row n of inputs advanced by dt.
class Dataset {
 public:
  explicit Dataset(double dt) : dt_(dt) {
    if (!(dt > 0)) throw DataError("dataset: dt must be positive");
  }
  Dataset(Points inputs, Points targets, double dt) : Dataset(dt) {
    if (inputs.rows() != targets.rows()) throw DataError("dataset: inputs and targets differ in row count");
    if (!inputs.allFinite() || !targets.allFinite()) throw DataError("dataset: non-finite entry");
    inputs_ = std::move(inputs);
    targets_ = std::move(targets);
  }

  Eigen::Index size() const { return inputs_.rows(); }
  bool empty() const { return size() == 0; }
  double dt() const { return dt_; }
  const Points& inputs() const { return inputs_; }
  const Points& targets() const { return targets_; }

  void push_back(const Point2& from, const Point2& to) {
    if (!from.allFinite() || !to.allFinite()) throw DataError("dataset: non-finite pair");
    const Eigen::Index n = size();
    inputs_.conservativeResize(n + 1, Eigen::NoChange);
    targets_.conservativeResize(n + 1, Eigen::NoChange);
    inputs_.row(n) = from.transpose();
    targets_.row(n) = to.transpose();
  }

  void require_nonempty(const char* who) const {
    if (empty()) throw DataError(std::string(who) + ": dataset is empty");
  }

 private:
  Points inputs_ = Points(0, 2);
  Points targets_ = Points(0, 2);
  double dt_;
};

inline Dataset append(Dataset ds, const std::pair<Point2, Point2>& pair) {
  ds.push_back(pair.first, pair.second);
  return ds;
}

struct MeasurementConfig {
  double noise_sigma = 0.0;
  double dt = 0.1;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(noise_sigma >= 0)) throw DataError("measurement: noise_sigma must be >= 0");
    if (!(dt > 0)) throw DataError("measurement: dt must be > 0");
  }
};

/// One noisy Euler displacement at p: x_next = p + (F(p) + omega) dt.
template <typename Rng>
std::pair<Point2, Point2> sample_pair(const VectorField& field, const Point2& p, const MeasurementConfig& cfg,
                                      Rng& rng) {
  cfg.validate();
  const Vec2 f = field.velocity(p);
  Vec2 noise = Vec2::Zero();
  if (cfg.noise_sigma > 0) {
    std::normal_distribution<double> gauss(0.0, cfg.noise_sigma);
    noise.x() = gauss(rng);
    noise.y() = gauss(rng);
  }
  return {p, p + (f + noise) * cfg.dt};
}

inline std::pair<Point2, Point2> sample_pair(const VectorField& field, const Point2& p,
                                             const MeasurementConfig& cfg) {
  std::mt19937_64 rng(cfg.rng_seed);
  return sample_pair(field, p, cfg, rng);
}

/// Per-axis affine map of the domain rectangle onto [-1, 1]^2.
class Normalizer {
 public:
  Normalizer() = default;
  explicit Normalizer(const Domain& d)
      : offset_(0.5 * (d.x_min() + d.x_max()), 0.5 * (d.y_min() + d.y_max())),
        half_(0.5 * d.width(), 0.5 * d.height()) {}
  Normalizer(Vec2 offset, Vec2 half_extent) : offset_(offset), half_(half_extent) {
    if (!(half_.x() > 0) || !(half_.y() > 0)) throw DataError("normalizer: half extents must be positive");
  }

  Point2 to_unit(const Point2& p) const { return (p - offset_).cwiseQuotient(half_); }
  Point2 from_unit(const Point2& q) const { return q.cwiseProduct(half_) + offset_; }
  /// A displacement in unit coordinates expressed in field units.
  Vec2 scale_from_unit(const Vec2& d) const { return d.cwiseProduct(half_); }

  Points to_unit(const Points& pts) const {
    Points out(pts.rows(), 2);
    for (Eigen::Index r = 0; r < pts.rows(); ++r) out.row(r) = to_unit(Point2(pts.row(r).transpose())).transpose();
    return out;
  }

  const Vec2& offset() const { return offset_; }
  const Vec2& half_extent() const { return half_; }
  bool is_identity() const { return offset_.isZero(0) && half_ == Vec2::Ones(); }

 private:
  Vec2 offset_ = Vec2::Zero();
  Vec2 half_ = Vec2::Ones();
};

namespace detail {

/// Sorted distinct coordinates; requires uniform spacing to rel. tol 1e-9 of the span.
inline std::vector<double> lattice_axis(std::vector<double> values, const std::string& what) {
  std::sort(values.begin(), values.end());
  std::vector<double> uniq;
  const double span = values.back() - values.front();
  const double tol = 1e-9 * std::max(std::abs(span), 1e-300);
  for (double v : values)
    if (uniq.empty() || v - uniq.back() > tol) uniq.push_back(v);
  if (uniq.size() < 2) throw FormatError(what + ": lattice needs at least 2 distinct coordinates");
  const double step = span / static_cast<double>(uniq.size() - 1);
  for (std::size_t i = 0; i < uniq.size(); ++i)
    if (std::abs(uniq[i] - (uniq.front() + step * static_cast<double>(i))) > tol)
      throw FormatError(what + ": irregular lattice spacing");
  return uniq;
}

inline std::size_t axis_index(const std::vector<double>& axis, double v) {
  const double step = (axis.back() - axis.front()) / static_cast<double>(axis.size() - 1);
  return static_cast<std::size_t>(std::lround((v - axis.front()) / step));
}

struct LatticeValues {
  Lattice lattice;
  std::vector<std::vector<double>> columns;  // one row-major grid per value column
};

/// Scatters (x, y, values...) rows onto the inferred lattice; every node exactly once.
inline LatticeValues scatter(const std::vector<std::array<double, 2>>& xy,
                             const std::vector<std::vector<double>>& values, const std::string& what) {
  if (xy.empty()) throw FormatError(what + ": no data rows");
  std::vector<double> xs, ys;
  for (auto& p : xy) {
    if (!std::isfinite(p[0]) || !std::isfinite(p[1])) throw FormatError(what + ": non-finite coordinate");
    xs.push_back(p[0]);
    ys.push_back(p[1]);
  }
  const auto ax = lattice_axis(xs, what), ay = lattice_axis(ys, what);
  LatticeValues out{Lattice(ax.front(), ax.back(), ay.front(), ay.back(), static_cast<int>(ax.size()),
                            static_cast<int>(ay.size())),
                    {}};
  if (xy.size() != out.lattice.size())
    throw FormatError(what + ": " + std::to_string(xy.size()) + " rows do not fill a " + std::to_string(ax.size()) +
                      "x" + std::to_string(ay.size()) + " lattice");
  out.columns.assign(values.size(), std::vector<double>(out.lattice.size(), 0.0));
  std::vector<std::uint8_t> seen(out.lattice.size(), 0);
  for (std::size_t r = 0; r < xy.size(); ++r) {
    const std::size_t k = out.lattice.index(static_cast<int>(axis_index(ax, xy[r][0])),
                                            static_cast<int>(axis_index(ay, xy[r][1])));
    if (seen[k]) throw FormatError(what + ": duplicate lattice node");
    seen[k] = 1;
    for (std::size_t c = 0; c < values.size(); ++c) out.columns[c][k] = values[c][r];
  }
  return out;
}

inline double field_value(const std::vector<std::string>& row, int col, const std::string& what) {
  double v;
  if (!csv::parse_double(row[static_cast<std::size_t>(col)], v))
    throw FormatError(what + ": cannot parse '" + row[static_cast<std::size_t>(col)] + "'");
  return v;
}

inline std::shared_ptr<const ObstacleMask> mask_from_missing(const Lattice& lat, const std::vector<double>& u,
                                                             const std::vector<double>& v) {
  std::vector<std::uint8_t> blocked(lat.size(), 0);
  bool any = false;
  for (std::size_t k = 0; k < lat.size(); ++k)
    if (!std::isfinite(u[k]) || !std::isfinite(v[k])) blocked[k] = 1, any = true;
  if (!any) return nullptr;
  return std::make_shared<const ObstacleMask>(lat, std::move(blocked));
}

}  // namespace detail

/// Reads a `x,y,blocked` CSV into a mask (blocked: 0/1).
inline std::shared_ptr<const ObstacleMask> load_mask_csv(const std::string& path) {
  const auto t = csv::read(path);
  const int cx = t.column("x"), cy = t.column("y"), cb = t.column("blocked");
  if (cx < 0 || cy < 0 || cb < 0) throw FormatError(path + ": expected header x,y,blocked");
  std::vector<std::array<double, 2>> xy;
  std::vector<std::vector<double>> vals(1);
  for (auto& row : t.rows) {
    xy.push_back({detail::field_value(row, cx, path), detail::field_value(row, cy, path)});
    vals[0].push_back(detail::field_value(row, cb, path));
  }
  auto lv = detail::scatter(xy, vals, path);
  std::vector<std::uint8_t> blocked(lv.lattice.size());
  for (std::size_t k = 0; k < blocked.size(); ++k) blocked[k] = lv.columns[0][k] != 0.0 ? 1 : 0;
  return std::make_shared<const ObstacleMask>(lv.lattice, std::move(blocked));
}

/// Reads gridded velocity data. Accepts `x,y,u,v` or the ERDDAP griddap layout
/// `time,latitude,longitude,<u>,<v>` (optional units row; a single time slice).
/// Nodes with missing values are added to the obstacle mask. An explicit mask
/// CSV on the same lattice, when given, is merged in.
inline GriddedField ingest_erddap_csv(const std::string& path, const std::string& mask_path = {}) {
  const auto t = csv::read(path);
  int cx, cy, cu, cv, ct = -1;
  if (t.column("x") >= 0 && t.column("y") >= 0 && t.column("u") >= 0 && t.column("v") >= 0) {
    cx = t.column("x"), cy = t.column("y"), cu = t.column("u"), cv = t.column("v");
  } else if (t.header.size() == 5 && t.header[0] == "time" && t.header[1] == "latitude" &&
             t.header[2] == "longitude") {
    ct = 0, cy = 1, cx = 2, cu = 3, cv = 4;
  } else {
    throw FormatError(path + ": expected header x,y,u,v or time,latitude,longitude,u,v");
  }

  std::vector<std::array<double, 2>> xy;
  std::vector<std::vector<double>> vals(2);
  std::set<std::string> times;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    double probe;
    // ERDDAP emits a units row (UTC, degrees_north, ...) right after the header.
    if (r == 0 && !csv::parse_double(row[static_cast<std::size_t>(cx)], probe)) continue;
    if (ct >= 0) times.insert(row[static_cast<std::size_t>(ct)]);
    xy.push_back({detail::field_value(row, cx, path), detail::field_value(row, cy, path)});
    vals[0].push_back(detail::field_value(row, cu, path));
    vals[1].push_back(detail::field_value(row, cv, path));
  }
  if (xy.empty()) throw FormatError(path + ": empty file");
  if (times.size() > 1) throw FormatError(path + ": multiple time slices present; extract a single time");

  auto lv = detail::scatter(xy, vals, path);
  auto mask = detail::mask_from_missing(lv.lattice, lv.columns[0], lv.columns[1]);
  if (!mask_path.empty()) {
    auto extra = load_mask_csv(mask_path);
    const Lattice& a = lv.lattice;
    const Lattice& b = extra->lattice();
    if (a.nx != b.nx || a.ny != b.ny) throw FormatError(mask_path + ": mask lattice differs from field lattice");
    std::vector<std::uint8_t> merged(a.size(), 0);
    for (std::size_t k = 0; k < a.size(); ++k)
      merged[k] = (extra->blocked_node(k) || (mask && mask->blocked_node(k))) ? 1 : 0;
    mask = std::make_shared<const ObstacleMask>(a, std::move(merged));
  }
  return GriddedField(lv.lattice, std::move(lv.columns[0]), std::move(lv.columns[1]), std::move(mask));
}

/// Writes `x,y,u,v` rows in row-major lattice order; missing nodes as NaN.
inline void export_gridded_csv(const GriddedField& f, const std::string& path) {
  csv::Writer w(path);
  w.header({"x", "y", "u", "v"});
  const Lattice& lat = f.lattice();
  for (int j = 0; j < lat.ny; ++j)
    for (int i = 0; i < lat.nx; ++i) {
      const Point2 p = lat.node(i, j);
      w.row(p.x(), p.y(), f.u_at(i, j), f.v_at(i, j));
    }
}

inline void export_mask_csv(const ObstacleMask& m, const std::string& path) {
  csv::Writer w(path);
  w.header({"x", "y", "blocked"});
  const Lattice& lat = m.lattice();
  for (std::size_t k = 0; k < lat.size(); ++k) {
    const Point2 p = lat.node(k);
    w.row(p.x(), p.y(), m.blocked_node(k) ? 1 : 0);
  }
}

}  // namespace enkode
