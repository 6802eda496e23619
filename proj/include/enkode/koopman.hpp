#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "enkode/csv.hpp"
#include "enkode/data.hpp"
#include "enkode/types.hpp"

namespace enkode {

/// Identity coordinates followed by nu cosine features cos(w_i . x + b_i).
struct FourierLift {
  Eigen::Matrix<double, Eigen::Dynamic, 2> freqs;  // nu x 2
  Eigen::VectorXd phases;                          // nu

  FourierLift() : freqs(0, 2), phases(0) {}
  FourierLift(Eigen::Matrix<double, Eigen::Dynamic, 2> w, Eigen::VectorXd b) : freqs(std::move(w)), phases(std::move(b)) {
    if (freqs.rows() != phases.size()) throw Error("fourier lift: freqs and phases disagree on nu");
  }

  int nu() const { return static_cast<int>(phases.size()); }
  int dim() const { return 2 + nu(); }

  /// Lifts the columns of a 2 x N matrix of unit-normalized states (d x N out).
  Eigen::MatrixXd lift_columns(const Eigen::Matrix<double, 2, Eigen::Dynamic>& x) const {
    Eigen::MatrixXd out(dim(), x.cols());
    out.topRows<2>() = x;
    if (nu() > 0) {
      Eigen::MatrixXd z = freqs * x;
      z.colwise() += phases;
      out.bottomRows(nu()) = z.array().cos().matrix();
    }
    return out;
  }
};

inline Eigen::VectorXd lift(const FourierLift& l, const Point2& x) { return l.lift_columns(x); }

struct KoopmanConfig {
  int nu = 64;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
  int epochs_per_update = 500;
  double init_freq_std = std::numbers::pi;
  double init_operator_std = 1e-2;
};

struct Gradients {
  Eigen::MatrixXd d_operator;
  Eigen::Matrix<double, Eigen::Dynamic, 2> d_freqs;
  Eigen::VectorXd d_phases;
};

class KoopmanModel;
double loss(const KoopmanModel& m, const Dataset& ds);
Gradients gradients(const KoopmanModel& m, const Dataset& ds);

/// Fourier-lifted Koopman model with its Adam state. Works internally in
/// unit-normalized coordinates; the public surface speaks field units.
class KoopmanModel {
 public:
  KoopmanModel(FourierLift lift, Eigen::MatrixXd op, KoopmanConfig cfg = {}, Normalizer norm = {})
      : lift_(std::move(lift)), op_(std::move(op)), cfg_(cfg), norm_(norm) {
    if (op_.rows() != lift_.dim() || op_.cols() != lift_.dim())
      throw Error("koopman model: operator must be square with side 2 + nu");
    cfg_.nu = lift_.nu();
    reset_optimizer();
  }

  /// freqs ~ N(0, init_freq_std^2), phases ~ U[0, 2 pi), K = I + N(0, init_operator_std^2).
  static KoopmanModel random(const KoopmanConfig& cfg, std::uint64_t seed, Normalizer norm = {}) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> w_dist(0.0, cfg.init_freq_std);
    std::uniform_real_distribution<double> b_dist(0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> k_dist(0.0, cfg.init_operator_std);
    Eigen::Matrix<double, Eigen::Dynamic, 2> w(cfg.nu, 2);
    Eigen::VectorXd b(cfg.nu);
    for (int i = 0; i < cfg.nu; ++i) {
      w(i, 0) = w_dist(rng);
      w(i, 1) = w_dist(rng);
      b(i) = b_dist(rng);
    }
    const int d = 2 + cfg.nu;
    Eigen::MatrixXd k = Eigen::MatrixXd::Identity(d, d);
    for (int c = 0; c < d; ++c)
      for (int r = 0; r < d; ++r) k(r, c) += k_dist(rng);
    return KoopmanModel(FourierLift(std::move(w), std::move(b)), std::move(k), cfg, norm);
  }

  const FourierLift& lift() const { return lift_; }
  const Eigen::MatrixXd& op() const { return op_; }
  const KoopmanConfig& config() const { return cfg_; }
  const Normalizer& normalizer() const { return norm_; }
  long step() const { return step_; }
  int nu() const { return lift_.nu(); }
  int dim() const { return lift_.dim(); }

  void set_config(const KoopmanConfig& cfg) {
    const int nu = cfg_.nu;
    cfg_ = cfg;
    cfg_.nu = nu;
  }

  /// Full-batch AdamW for epochs_per_update epochs, continuing from the
  /// current parameters and optimizer moments.
  void train(const Dataset& ds) {
    ds.require_nonempty("koopman train");
    const Eigen::Matrix<double, 2, Eigen::Dynamic> x = norm_.to_unit(ds.inputs()).transpose();
    const Eigen::Matrix<double, 2, Eigen::Dynamic> y = norm_.to_unit(ds.targets()).transpose();
    Gradients g;
    for (int epoch = 0; epoch < cfg_.epochs_per_update; ++epoch) {
      const double l = evaluate(x, y, &g);
      if (!std::isfinite(l))
        throw DivergenceError("koopman train: non-finite loss at epoch " + std::to_string(epoch), epoch);
      adam_step(g);
    }
  }

  /// One AdamW update with a caller-supplied gradient bundle.
  void adam_step(const Gradients& g) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    auto update = [&](auto& param, auto& m, auto& v, const auto& grad) {
      param *= 1.0 - cfg_.learning_rate * cfg_.weight_decay;
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * grad;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
      param.array() -= cfg_.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.epsilon);
    };
    update(op_, m_op_, v_op_, g.d_operator);
    if (nu() > 0) {
      update(lift_.freqs, m_w_, v_w_, g.d_freqs);
      update(lift_.phases, m_b_, v_b_, g.d_phases);
    }
  }

  /// Loss on unit-normalized 2 x N state matrices; fills grad when non-null.
  double evaluate(const Eigen::Matrix<double, 2, Eigen::Dynamic>& x, const Eigen::Matrix<double, 2, Eigen::Dynamic>& y,
                  Gradients* grad) const {
    const Eigen::Index n = x.cols();
    const int nu = this->nu();
    Eigen::MatrixXd zx, zy;
    Eigen::MatrixXd psi_x(dim(), n), psi_y(dim(), n);
    psi_x.topRows<2>() = x;
    psi_y.topRows<2>() = y;
    if (nu > 0) {
      zx = lift_.freqs * x;
      zx.colwise() += lift_.phases;
      zy = lift_.freqs * y;
      zy.colwise() += lift_.phases;
      psi_x.bottomRows(nu) = zx.array().cos().matrix();
      psi_y.bottomRows(nu) = zy.array().cos().matrix();
    }
    const Eigen::MatrixXd r = psi_y - op_ * psi_x;
    const double value = r.squaredNorm() / static_cast<double>(n);
    if (!grad) return value;

    const double scale = 2.0 / static_cast<double>(n);
    grad->d_operator = -scale * r * psi_x.transpose();
    grad->d_freqs.setZero(nu, 2);
    grad->d_phases.setZero(nu);
    if (nu > 0) {
      // Both sides of the residual depend on (w, b):
      //   dL/dPsi(y) = scale * r,  dL/dPsi(x) = -scale * K^T r,  dcos(z)/dz = -sin(z).
      const Eigen::ArrayXXd gy = (scale * r.bottomRows(nu)).array() * -zy.array().sin();
      const Eigen::ArrayXXd gx = (-scale * (op_.transpose() * r).bottomRows(nu)).array() * -zx.array().sin();
      grad->d_freqs = gy.matrix() * y.transpose() + gx.matrix() * x.transpose();
      grad->d_phases = (gy + gx).rowwise().sum().matrix();
    }
    return value;
  }

  Point2 predict_next(const Point2& x) const {
    const Point2 u = norm_.to_unit(x);
    const Eigen::Vector2d next = op_.topRows<2>() * lift_.lift_columns(u);
    return norm_.from_unit(next);
  }

  Vec2 predict_velocity(const Point2& x, double dt) const {
    const Point2 u = norm_.to_unit(x);
    const Eigen::Vector2d next = op_.topRows<2>() * lift_.lift_columns(u);
    return norm_.scale_from_unit(next - u) / dt;
  }

  /// Row-per-point velocities for many query points.
  Points predict_velocities(const Points& pts, double dt) const {
    const Eigen::Matrix<double, 2, Eigen::Dynamic> u = norm_.to_unit(pts).transpose();
    Eigen::Matrix<double, 2, Eigen::Dynamic> d = op_.topRows<2>() * lift_.lift_columns(u) - u;
    Points out(pts.rows(), 2);
    for (Eigen::Index k = 0; k < pts.rows(); ++k) out.row(k) = (norm_.scale_from_unit(d.col(k)) / dt).transpose();
    return out;
  }

  std::string to_text() const;
  static KoopmanModel from_text(const std::string& text);

  /// Bitwise equality of every parameter, optimizer moment and hyperparameter.
  bool identical_to(const KoopmanModel& o) const;

 private:
  void reset_optimizer() {
    m_op_ = v_op_ = Eigen::MatrixXd::Zero(dim(), dim());
    m_w_ = v_w_ = Eigen::Matrix<double, Eigen::Dynamic, 2>::Zero(nu(), 2);
    m_b_ = v_b_ = Eigen::VectorXd::Zero(nu());
    step_ = 0;
  }

  friend struct KoopmanSerializer;

  FourierLift lift_;
  Eigen::MatrixXd op_;
  KoopmanConfig cfg_;
  Normalizer norm_;
  Eigen::MatrixXd m_op_, v_op_;
  Eigen::Matrix<double, Eigen::Dynamic, 2> m_w_, v_w_;
  Eigen::VectorXd m_b_, v_b_;
  long step_ = 0;
};

namespace detail {
template <typename A, typename B>
bool same_matrix(const A& a, const B& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.size() == 0 || a == b);
}
}  // namespace detail

inline bool operator==(const FourierLift& a, const FourierLift& b) {
  return detail::same_matrix(a.freqs, b.freqs) && detail::same_matrix(a.phases, b.phases);
}
inline bool operator==(const KoopmanConfig& a, const KoopmanConfig& b) {
  return a.nu == b.nu && a.learning_rate == b.learning_rate && a.beta1 == b.beta1 && a.beta2 == b.beta2 &&
         a.epsilon == b.epsilon && a.weight_decay == b.weight_decay && a.epochs_per_update == b.epochs_per_update &&
         a.init_freq_std == b.init_freq_std && a.init_operator_std == b.init_operator_std;
}
inline bool operator==(const Normalizer& a, const Normalizer& b) {
  return a.offset() == b.offset() && a.half_extent() == b.half_extent();
}

inline bool KoopmanModel::identical_to(const KoopmanModel& o) const {
  using detail::same_matrix;
  return lift_ == o.lift_ && same_matrix(op_, o.op_) && cfg_ == o.cfg_ && norm_ == o.norm_ &&
         same_matrix(m_op_, o.m_op_) && same_matrix(v_op_, o.v_op_) && same_matrix(m_w_, o.m_w_) &&
         same_matrix(v_w_, o.v_w_) && same_matrix(m_b_, o.m_b_) && same_matrix(v_b_, o.v_b_) && step_ == o.step_;
}

inline double loss(const KoopmanModel& m, const Dataset& ds) {
  ds.require_nonempty("koopman loss");
  const Normalizer& nz = m.normalizer();
  return m.evaluate(nz.to_unit(ds.inputs()).transpose(), nz.to_unit(ds.targets()).transpose(), nullptr);
}

/// Gradients of the MSE loss alone; weight decay is applied decoupled in the optimizer.
inline Gradients gradients(const KoopmanModel& m, const Dataset& ds) {
  ds.require_nonempty("koopman gradients");
  const Normalizer& nz = m.normalizer();
  Gradients g;
  m.evaluate(nz.to_unit(ds.inputs()).transpose(), nz.to_unit(ds.targets()).transpose(), &g);
  return g;
}

inline KoopmanModel train(KoopmanModel m, const Dataset& ds) {
  m.train(ds);
  return m;
}

inline Point2 predict_next(const KoopmanModel& m, const Point2& x) { return m.predict_next(x); }
inline Vec2 predict_velocity(const KoopmanModel& m, const Point2& x, double dt) { return m.predict_velocity(x, dt); }

// Text record: "key = value" lines followed by "matrix <name> <rows> <cols>" blocks
// terminated by "end". Doubles are written in shortest round-trip form.
struct KoopmanSerializer {
  static void write_matrix(std::ostream& os, const char* name, const Eigen::MatrixXd& m) {
    os << "matrix " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) os << (c ? " " : "") << csv::format_double(m(r, c));
      os << '\n';
    }
    os << "end\n";
  }

  static std::string write(const KoopmanModel& m) {
    std::ostringstream os;
    const auto& c = m.cfg_;
    const auto kv = [&](const char* k, double v) { os << k << " = " << csv::format_double(v) << '\n'; };
    os << "# enkode koopman model v1\n";
    os << "nu = " << m.nu() << '\n';
    kv("learning_rate", c.learning_rate);
    kv("beta1", c.beta1);
    kv("beta2", c.beta2);
    kv("epsilon", c.epsilon);
    kv("weight_decay", c.weight_decay);
    os << "epochs_per_update = " << c.epochs_per_update << '\n';
    kv("init_freq_std", c.init_freq_std);
    kv("init_operator_std", c.init_operator_std);
    os << "step = " << m.step_ << '\n';
    kv("norm_offset_x", m.norm_.offset().x());
    kv("norm_offset_y", m.norm_.offset().y());
    kv("norm_half_x", m.norm_.half_extent().x());
    kv("norm_half_y", m.norm_.half_extent().y());
    write_matrix(os, "freqs", m.lift_.freqs);
    write_matrix(os, "phases", m.lift_.phases);
    write_matrix(os, "operator", m.op_);
    write_matrix(os, "adam_m_operator", m.m_op_);
    write_matrix(os, "adam_v_operator", m.v_op_);
    write_matrix(os, "adam_m_freqs", m.m_w_);
    write_matrix(os, "adam_v_freqs", m.v_w_);
    write_matrix(os, "adam_m_phases", m.m_b_);
    write_matrix(os, "adam_v_phases", m.v_b_);
    return os.str();
  }

  static KoopmanModel read(const std::string& text) {
    std::istringstream in(text);
    std::map<std::string, std::string> kv;
    std::map<std::string, Eigen::MatrixXd> mats;
    std::string line;
    const auto num = [](const std::string& tok) {
      double v;
      if (!csv::parse_double(tok, v)) throw FormatError("koopman record: bad number '" + tok + "'");
      return v;
    };
    while (std::getline(in, line)) {
      line = csv::trim(line);
      if (line.empty() || line[0] == '#') continue;
      if (line.rfind("matrix ", 0) == 0) {
        std::istringstream hs(line.substr(7));
        std::string name;
        Eigen::Index rows = -1, cols = -1;
        hs >> name >> rows >> cols;
        if (!hs || rows < 0 || cols < 0) throw FormatError("koopman record: bad matrix header '" + line + "'");
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r) {
          if (!std::getline(in, line)) throw FormatError("koopman record: truncated matrix " + name);
          std::istringstream rs(line);
          for (Eigen::Index c = 0; c < cols; ++c) {
            std::string tok;
            if (!(rs >> tok)) throw FormatError("koopman record: short row in matrix " + name);
            m(r, c) = num(tok);
          }
        }
        if (!std::getline(in, line) || csv::trim(line) != "end")
          throw FormatError("koopman record: matrix " + name + " not terminated by 'end'");
        mats[name] = std::move(m);
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError("koopman record: expected key = value, got '" + line + "'");
      kv[csv::trim(line.substr(0, eq))] = csv::trim(line.substr(eq + 1));
    }
    const auto get = [&](const std::string& k) {
      auto it = kv.find(k);
      if (it == kv.end()) throw FormatError("koopman record: missing key " + k);
      return num(it->second);
    };
    const auto mat = [&](const std::string& k) -> const Eigen::MatrixXd& {
      auto it = mats.find(k);
      if (it == mats.end()) throw FormatError("koopman record: missing matrix " + k);
      return it->second;
    };

    KoopmanConfig cfg;
    cfg.nu = static_cast<int>(get("nu"));
    cfg.learning_rate = get("learning_rate");
    cfg.beta1 = get("beta1");
    cfg.beta2 = get("beta2");
    cfg.epsilon = get("epsilon");
    cfg.weight_decay = get("weight_decay");
    cfg.epochs_per_update = static_cast<int>(get("epochs_per_update"));
    cfg.init_freq_std = get("init_freq_std");
    cfg.init_operator_std = get("init_operator_std");

    const auto& w = mat("freqs");
    const auto& b = mat("phases");
    if (w.rows() != cfg.nu || w.cols() != 2 || b.rows() != cfg.nu || b.cols() != 1)
      throw FormatError("koopman record: lift shapes disagree with nu");
    const Normalizer norm(Vec2(get("norm_offset_x"), get("norm_offset_y")),
                          Vec2(get("norm_half_x"), get("norm_half_y")));

    KoopmanModel m(FourierLift(w, b.col(0)), mat("operator"), cfg, norm);
    const auto shaped = [&](const std::string& k, Eigen::Index r, Eigen::Index c) {
      const auto& x = mat(k);
      if (x.rows() != r || x.cols() != c) throw FormatError("koopman record: bad shape for " + k);
      return x;
    };
    const int d = m.dim();
    m.m_op_ = shaped("adam_m_operator", d, d);
    m.v_op_ = shaped("adam_v_operator", d, d);
    m.m_w_ = shaped("adam_m_freqs", cfg.nu, 2);
    m.v_w_ = shaped("adam_v_freqs", cfg.nu, 2);
    m.m_b_ = shaped("adam_m_phases", cfg.nu, 1).col(0);
    m.v_b_ = shaped("adam_v_phases", cfg.nu, 1).col(0);
    m.step_ = static_cast<long>(get("step"));
    return m;
  }
};

inline std::string KoopmanModel::to_text() const { return KoopmanSerializer::write(*this); }
inline KoopmanModel KoopmanModel::from_text(const std::string& text) { return KoopmanSerializer::read(text); }

}  // namespace enkode
