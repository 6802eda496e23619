#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "enkode/csv.hpp"
#include "enkode/data.hpp"
#include "enkode/flowfields.hpp"
#include "enkode/metrics.hpp"
#include "enkode/planner.hpp"

namespace enkode {

namespace fs = std::filesystem;

struct FlowSpec {
  std::string type = "bickley";  // bickley | gridded | vortex-test | linear
  fs::path path, mask;           // gridded only
  BickleyParams bickley{};
  std::optional<double> x_min, x_max, y_min, y_max;  // bickley / linear extents
  double vortex_amplitude = 1.0;
  bool vortex_obstacle = true;
  Eigen::Matrix2d linear = (Eigen::Matrix2d() << 0.0, -1.0, 1.0, 0.0).finished();
};

/// One estimator variant: "enkode", "gp-rbf" or "gp-m32".
struct MethodSpec {
  std::string name;
  EstimatorKind kind = EstimatorKind::enkode;
  KernelKind kernel = KernelKind::matern32;
};

inline MethodSpec parse_method(const std::string& s) {
  if (s == "enkode") return {s, EstimatorKind::enkode, KernelKind::matern32};
  if (s == "gp-rbf") return {s, EstimatorKind::gp, KernelKind::rbf};
  if (s == "gp-m32" || s == "gp-matern32") return {"gp-m32", EstimatorKind::gp, KernelKind::matern32};
  throw FormatError("unknown method '" + s + "' (expected enkode, gp-rbf or gp-m32)");
}

inline std::string to_string(SamplerKind s) { return s == SamplerKind::active ? "active" : "uniform"; }
inline SamplerKind parse_sampler(const std::string& s) {
  if (s == "active") return SamplerKind::active;
  if (s == "uniform") return SamplerKind::uniform;
  throw FormatError("unknown sampler '" + s + "' (expected active or uniform)");
}

inline std::string to_string(HyperOptMode m) {
  switch (m) {
    case HyperOptMode::always: return "always";
    case HyperOptMode::below_threshold: return "below_threshold";
    default: return "never";
  }
}
inline HyperOptMode parse_hyperopt(const std::string& s) {
  if (s == "always") return HyperOptMode::always;
  if (s == "below_threshold") return HyperOptMode::below_threshold;
  if (s == "never") return HyperOptMode::never;
  throw FormatError("unknown hyperopt mode '" + s + "' (expected always, below_threshold or never)");
}

struct ExperimentConfig {
  std::string name = "experiment";
  int trials = 10;
  std::uint64_t base_seed = 0;
  fs::path output_dir = "results";
  bool dump_fields = false;
  bool record_timing = false;
  int threads = 1;  // concurrent campaigns

  FlowSpec flow{};
  std::optional<double> dt, noise_sigma, exclusion_radius;  // nullopt: auto
  int grid_nx = 50, grid_ny = 50;
  int n_total = 36;
  std::vector<MethodSpec> methods{parse_method("enkode")};
  std::vector<SamplerKind> samplers{SamplerKind::active};
  EnkodeSettings enkode{};
  GPSettings gp{};

  void validate() const {
    if (trials < 1) throw FormatError("config: trials must be >= 1");
    if (n_total < 1) throw FormatError("config: n_total must be >= 1");
    if (grid_nx < 2 || grid_ny < 2) throw FormatError("config: grid needs at least 2 nodes per axis");
    if (threads < 1) throw FormatError("config: threads must be >= 1");
    if (methods.empty() || samplers.empty()) throw FormatError("config: need at least one method and sampler");
    if (enkode.members < 2) throw FormatError("config: enkode members must be >= 2");
    if (enkode.model.nu < 0) throw FormatError("config: nu must be >= 0");
    if (dt && !(*dt > 0)) throw FormatError("config: dt must be > 0");
    if (noise_sigma && !(*noise_sigma >= 0)) throw FormatError("config: noise_sigma must be >= 0");
    if (flow.type == "gridded") {
      if (!fs::exists(flow.path)) throw FormatError("config: flow file not found: " + flow.path.string());
      if (!flow.mask.empty() && !fs::exists(flow.mask))
        throw FormatError("config: mask file not found: " + flow.mask.string());
    }
  }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  for (auto& tok : csv::split(s, ','))
    if (!tok.empty()) out.push_back(tok);
  return out;
}

inline double to_double(const std::string& v, const std::string& key) {
  double out;
  if (v.empty() || !csv::parse_double(v, out) || !std::isfinite(out))
    throw FormatError("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

inline long to_long(const std::string& v, const std::string& key) {
  char* end = nullptr;
  const long out = std::strtol(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0') throw FormatError("config: " + key + " expects an integer, got '" + v + "'");
  return out;
}

inline bool to_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw FormatError("config: " + key + " expects true/false, got '" + v + "'");
}

inline std::optional<double> auto_or(const std::string& v, const std::string& key) {
  if (v == "auto") return std::nullopt;
  return to_double(v, key);
}

inline std::string fmt_opt(const std::optional<double>& v) { return v ? csv::format_double(*v) : "auto"; }

}  // namespace detail

/// Parses the INI text of an experiment. Relative file paths resolve
/// against base_dir. Unknown sections or keys are rejected.
inline ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir = ".") {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw FormatError(std::string("config: ") + e.what());
  }

  ExperimentConfig c;
  c.enkode.model.nu = 64;
  std::string frame_value = "auto";
  const auto resolve = [&](const std::string& p) {
    fs::path q(p);
    return q.is_absolute() ? q : base_dir / q;
  };

  using Handler = std::function<void(const std::string&, const std::string&)>;
  std::map<std::string, std::map<std::string, Handler>> known;
  auto& ex = known["experiment"];
  ex["name"] = [&](auto& v, auto&) { c.name = v; };
  ex["trials"] = [&](auto& v, auto& k) { c.trials = static_cast<int>(detail::to_long(v, k)); };
  ex["base_seed"] = [&](auto& v, auto& k) {
    char* end = nullptr;
    c.base_seed = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || *end != '\0') throw FormatError("config: " + k + " expects an unsigned integer");
  };
  ex["output_dir"] = [&](auto& v, auto&) { c.output_dir = v; };
  ex["dump_fields"] = [&](auto& v, auto& k) { c.dump_fields = detail::to_bool(v, k); };
  ex["record_timing"] = [&](auto& v, auto& k) { c.record_timing = detail::to_bool(v, k); };
  ex["threads"] = [&](auto& v, auto& k) { c.threads = static_cast<int>(detail::to_long(v, k)); };
  ex["n_total"] = [&](auto& v, auto& k) { c.n_total = static_cast<int>(detail::to_long(v, k)); };
  ex["methods"] = [&](auto& v, auto&) {
    c.methods.clear();
    for (auto& m : detail::split_list(v)) c.methods.push_back(parse_method(m));
  };
  ex["samplers"] = [&](auto& v, auto&) {
    c.samplers.clear();
    for (auto& s : detail::split_list(v)) c.samplers.push_back(parse_sampler(s));
  };

  auto& fl = known["flow"];
  fl["type"] = [&](auto& v, auto&) {
    // "gridded:path" is shorthand for type = gridded plus path.
    if (v.rfind("gridded:", 0) == 0) {
      c.flow.type = "gridded";
      c.flow.path = resolve(v.substr(8));
    } else if (v == "bickley" || v == "gridded" || v == "vortex-test" || v == "linear") {
      c.flow.type = v;
    } else {
      throw FormatError("config: unknown flow type '" + v + "'");
    }
  };
  fl["path"] = [&](auto& v, auto&) { c.flow.path = resolve(v); };
  fl["mask"] = [&](auto& v, auto&) { c.flow.mask = v.empty() ? fs::path{} : resolve(v); };
  fl["x_min"] = [&](auto& v, auto& k) { c.flow.x_min = detail::auto_or(v, k); };
  fl["x_max"] = [&](auto& v, auto& k) { c.flow.x_max = detail::auto_or(v, k); };
  fl["y_min"] = [&](auto& v, auto& k) { c.flow.y_min = detail::auto_or(v, k); };
  fl["y_max"] = [&](auto& v, auto& k) { c.flow.y_max = detail::auto_or(v, k); };
  fl["U0"] = [&](auto& v, auto& k) { c.flow.bickley.U0 = detail::to_double(v, k); };
  fl["L"] = [&](auto& v, auto& k) { c.flow.bickley.L = detail::to_double(v, k); };
  fl["t_freeze"] = [&](auto& v, auto& k) { c.flow.bickley.t_freeze = detail::to_double(v, k); };
  fl["frame_speed"] = [&](auto& v, auto&) { frame_value = v; };
  fl["epsilons"] = [&](auto& v, auto& k) {
    const auto xs = detail::split_list(v);
    if (xs.size() != 3) throw FormatError("config: " + k + " expects 3 values");
    for (int n = 0; n < 3; ++n) c.flow.bickley.epsilons[n] = detail::to_double(xs[n], k);
  };
  fl["vortex_amplitude"] = [&](auto& v, auto& k) { c.flow.vortex_amplitude = detail::to_double(v, k); };
  fl["vortex_obstacle"] = [&](auto& v, auto& k) { c.flow.vortex_obstacle = detail::to_bool(v, k); };
  fl["linear_matrix"] = [&](auto& v, auto& k) {
    const auto xs = detail::split_list(v);
    if (xs.size() != 4) throw FormatError("config: " + k + " expects 4 values a11,a12,a21,a22");
    c.flow.linear << detail::to_double(xs[0], k), detail::to_double(xs[1], k), detail::to_double(xs[2], k),
        detail::to_double(xs[3], k);
  };

  auto& me = known["measurement"];
  me["dt"] = [&](auto& v, auto& k) { c.dt = detail::auto_or(v, k); };
  me["noise_sigma"] = [&](auto& v, auto& k) { c.noise_sigma = detail::auto_or(v, k); };

  auto& gr = known["grid"];
  gr["nx"] = [&](auto& v, auto& k) { c.grid_nx = static_cast<int>(detail::to_long(v, k)); };
  gr["ny"] = [&](auto& v, auto& k) { c.grid_ny = static_cast<int>(detail::to_long(v, k)); };
  gr["exclusion_radius"] = [&](auto& v, auto& k) { c.exclusion_radius = detail::auto_or(v, k); };

  auto& en = known["enkode"];
  en["nu"] = [&](auto& v, auto& k) { c.enkode.model.nu = static_cast<int>(detail::to_long(v, k)); };
  en["members"] = [&](auto& v, auto& k) { c.enkode.members = static_cast<int>(detail::to_long(v, k)); };
  en["beta"] = [&](auto& v, auto& k) { c.enkode.beta = detail::to_double(v, k); };
  en["threads"] = [&](auto& v, auto& k) { c.enkode.threads = static_cast<int>(detail::to_long(v, k)); };
  en["learning_rate"] = [&](auto& v, auto& k) { c.enkode.model.learning_rate = detail::to_double(v, k); };
  en["beta1"] = [&](auto& v, auto& k) { c.enkode.model.beta1 = detail::to_double(v, k); };
  en["beta2"] = [&](auto& v, auto& k) { c.enkode.model.beta2 = detail::to_double(v, k); };
  en["epsilon"] = [&](auto& v, auto& k) { c.enkode.model.epsilon = detail::to_double(v, k); };
  en["weight_decay"] = [&](auto& v, auto& k) { c.enkode.model.weight_decay = detail::to_double(v, k); };
  en["epochs"] = [&](auto& v, auto& k) { c.enkode.model.epochs_per_update = static_cast<int>(detail::to_long(v, k)); };
  en["init_freq_std"] = [&](auto& v, auto& k) { c.enkode.model.init_freq_std = detail::to_double(v, k); };
  en["init_operator_std"] = [&](auto& v, auto& k) { c.enkode.model.init_operator_std = detail::to_double(v, k); };

  auto& gp = known["gp"];
  gp["hyperopt"] = [&](auto& v, auto&) { c.gp.options.mode = parse_hyperopt(v); };
  gp["freeze_at"] = [&](auto& v, auto& k) { c.gp.options.freeze_at = static_cast<int>(detail::to_long(v, k)); };
  gp["restarts"] = [&](auto& v, auto& k) { c.gp.options.restarts = static_cast<int>(detail::to_long(v, k)); };
  gp["iterations"] = [&](auto& v, auto& k) { c.gp.options.iterations = static_cast<int>(detail::to_long(v, k)); };
  gp["max_jitter_doublings"] = [&](auto& v, auto& k) {
    c.gp.options.max_jitter_doublings = static_cast<int>(detail::to_long(v, k));
  };
  gp["signal_var"] = [&](auto& v, auto& k) { c.gp.init_signal_var = detail::to_double(v, k); };
  gp["lengthscale"] = [&](auto& v, auto& k) { c.gp.init_lengthscale = detail::to_double(v, k); };
  gp["noise_var"] = [&](auto& v, auto& k) { c.gp.init_noise_var = detail::to_double(v, k); };

  // The INI reader drops empty sections, so their names are checked on the raw text.
  {
    std::istringstream lines(text);
    for (std::string line; std::getline(lines, line);) {
      const std::string t = csv::trim(line);
      if (t.size() > 1 && t.front() == '[' && t.back() == ']' && !known.count(csv::trim(t.substr(1, t.size() - 2))))
        throw FormatError("config: unknown section " + t);
    }
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw FormatError("config: key '" + section + "' outside a section");
    auto sec = known.find(section);
    if (sec == known.end()) throw FormatError("config: unknown section [" + section + "]");
    for (const auto& [key, val] : body) {
      auto h = sec->second.find(key);
      if (h == sec->second.end()) throw FormatError("config: unknown key " + section + "." + key);
      h->second(csv::trim(val.data()), section + "." + key);
    }
  }

  if (frame_value != "auto") c.flow.bickley.frame_speed = detail::to_double(frame_value, "flow.frame_speed");
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

/// Builds the ground-truth field named by a flow spec.
inline FieldPtr make_field(const FlowSpec& f) {
  if (f.type == "bickley") {
    const Domain d(f.x_min.value_or(0.0), f.x_max.value_or(std::numbers::pi * 6.371), f.y_min.value_or(-3.0),
                   f.y_max.value_or(3.0));
    return std::make_shared<BickleyField>(f.bickley, d);
  }
  if (f.type == "gridded")
    return std::make_shared<GriddedField>(ingest_erddap_csv(f.path.string(), f.mask.string()));
  if (f.type == "vortex-test") return std::make_shared<VortexTestField>(f.vortex_amplitude, f.vortex_obstacle);
  if (f.type == "linear") {
    const Domain d(f.x_min.value_or(-1.0), f.x_max.value_or(1.0), f.y_min.value_or(-1.0), f.y_max.value_or(1.0));
    return std::make_shared<LinearField>(f.linear, d);
  }
  throw FormatError("unknown flow type '" + f.type + "'");
}

/// Replaces every "auto" with the value it stands for on this field.
inline ExperimentConfig resolve(ExperimentConfig c, const VectorField& field) {
  const Domain& d = field.domain();
  if (c.flow.type == "bickley" || c.flow.type == "linear") {
    c.flow.x_min = d.x_min();
    c.flow.x_max = d.x_max();
    c.flow.y_min = d.y_min();
    c.flow.y_max = d.y_max();
  }
  if (!c.dt) c.dt = default_dt(field, c.grid_nx, c.grid_ny);
  if (!c.noise_sigma) c.noise_sigma = default_noise_sigma(field, c.grid_nx, c.grid_ny);
  if (!c.exclusion_radius) {
    const Lattice lat = d.lattice(c.grid_nx, c.grid_ny);
    c.exclusion_radius = std::min(lat.dx(), lat.dy());
  }
  return c;
}

/// INI text that parses back to the same configuration.
inline std::string to_ini(const ExperimentConfig& c) {
  using detail::fmt_opt;
  const auto num = [](double v) { return csv::format_double(v); };
  std::ostringstream os;
  os << "[experiment]\n"
     << "name = " << c.name << "\n"
     << "trials = " << c.trials << "\n"
     << "base_seed = " << c.base_seed << "\n"
     << "output_dir = " << c.output_dir.string() << "\n"
     << "dump_fields = " << (c.dump_fields ? "true" : "false") << "\n"
     << "record_timing = " << (c.record_timing ? "true" : "false") << "\n"
     << "threads = " << c.threads << "\n"
     << "n_total = " << c.n_total << "\n"
     << "methods = ";
  for (std::size_t i = 0; i < c.methods.size(); ++i) os << (i ? ", " : "") << c.methods[i].name;
  os << "\nsamplers = ";
  for (std::size_t i = 0; i < c.samplers.size(); ++i) os << (i ? ", " : "") << to_string(c.samplers[i]);
  os << "\n\n[flow]\ntype = " << c.flow.type << "\n";
  if (c.flow.type == "gridded") {
    os << "path = " << fs::absolute(c.flow.path).string() << "\n";
    os << "mask = " << (c.flow.mask.empty() ? std::string() : fs::absolute(c.flow.mask).string()) << "\n";
  }
  if (c.flow.type == "bickley" || c.flow.type == "linear")
    os << "x_min = " << fmt_opt(c.flow.x_min) << "\nx_max = " << fmt_opt(c.flow.x_max)
       << "\ny_min = " << fmt_opt(c.flow.y_min) << "\ny_max = " << fmt_opt(c.flow.y_max) << "\n";
  if (c.flow.type == "bickley") {
    const auto& b = c.flow.bickley;
    os << "U0 = " << num(b.U0) << "\nL = " << num(b.L) << "\nt_freeze = " << num(b.t_freeze)
       << "\nframe_speed = " << num(b.frame_speed) << "\nepsilons = " << num(b.epsilons[0]) << ", "
       << num(b.epsilons[1]) << ", " << num(b.epsilons[2]) << "\n";
  }
  if (c.flow.type == "vortex-test")
    os << "vortex_amplitude = " << num(c.flow.vortex_amplitude)
       << "\nvortex_obstacle = " << (c.flow.vortex_obstacle ? "true" : "false") << "\n";
  if (c.flow.type == "linear")
    os << "linear_matrix = " << num(c.flow.linear(0, 0)) << ", " << num(c.flow.linear(0, 1)) << ", "
       << num(c.flow.linear(1, 0)) << ", " << num(c.flow.linear(1, 1)) << "\n";
  os << "\n[measurement]\ndt = " << fmt_opt(c.dt) << "\nnoise_sigma = " << fmt_opt(c.noise_sigma) << "\n";
  os << "\n[grid]\nnx = " << c.grid_nx << "\nny = " << c.grid_ny << "\nexclusion_radius = " << fmt_opt(c.exclusion_radius)
     << "\n";
  const auto& m = c.enkode.model;
  os << "\n[enkode]\nnu = " << m.nu << "\nmembers = " << c.enkode.members << "\nbeta = " << num(c.enkode.beta)
     << "\nthreads = " << c.enkode.threads << "\nlearning_rate = " << num(m.learning_rate)
     << "\nbeta1 = " << num(m.beta1) << "\nbeta2 = " << num(m.beta2) << "\nepsilon = " << num(m.epsilon)
     << "\nweight_decay = " << num(m.weight_decay) << "\nepochs = " << m.epochs_per_update
     << "\ninit_freq_std = " << num(m.init_freq_std) << "\ninit_operator_std = " << num(m.init_operator_std) << "\n";
  const auto& g = c.gp;
  os << "\n[gp]\nhyperopt = " << to_string(g.options.mode) << "\nfreeze_at = " << g.options.freeze_at
     << "\nrestarts = " << g.options.restarts << "\niterations = " << g.options.iterations
     << "\nmax_jitter_doublings = " << g.options.max_jitter_doublings << "\nsignal_var = " << num(g.init_signal_var)
     << "\nlengthscale = " << num(g.init_lengthscale) << "\nnoise_var = " << num(g.init_noise_var) << "\n";
  return os.str();
}

/// Seed of trial t; every method and sampler sees the same trial seeds.
inline std::uint64_t trial_seed(std::uint64_t base, int trial) { return derive_seed(base, static_cast<std::uint64_t>(trial)); }

/// Campaign settings for one (method, sampler, trial) of a resolved config.
inline CampaignConfig campaign_config(const ExperimentConfig& c, const MethodSpec& method, SamplerKind sampler,
                                      int trial) {
  if (!c.dt || !c.noise_sigma || !c.exclusion_radius) throw Error("campaign_config: config is not resolved");
  CampaignConfig cc;
  cc.estimator = method.kind;
  cc.sampler = sampler;
  cc.n_total = c.n_total;
  cc.grid_nx = c.grid_nx;
  cc.grid_ny = c.grid_ny;
  cc.exclusion_radius = *c.exclusion_radius;
  cc.measurement.dt = *c.dt;
  cc.measurement.noise_sigma = *c.noise_sigma;
  cc.seed = trial_seed(c.base_seed, trial);
  cc.enkode = c.enkode;
  cc.gp = c.gp;
  cc.gp.kernel = method.kernel;
  cc.keep_fields = c.dump_fields;
  return cc;
}

/// Output root: a relative output_dir sits under $ENKODE_OUTPUT_ROOT when set.
inline fs::path output_path(const ExperimentConfig& c) {
  if (c.output_dir.is_absolute()) return c.output_dir;
  if (const char* root = std::getenv("ENKODE_OUTPUT_ROOT"); root && *root) return fs::path(root) / c.output_dir;
  return c.output_dir;
}

struct TrialRun {
  MethodSpec method;
  SamplerKind sampler = SamplerKind::active;
  int trial = 0;
  std::uint64_t seed = 0;
  CampaignResult result;
};

struct ExperimentResult {
  ExperimentConfig config;  // resolved
  fs::path dir;
  std::vector<TrialRun> runs;
  bool ok() const {
    return std::none_of(runs.begin(), runs.end(), [](const TrialRun& r) { return r.result.aborted; });
  }
};

inline std::string run_tag(const std::string& method, const std::string& sampler, int trial) {
  return method + "_" + sampler + "_trial" + std::to_string(trial);
}

/// One row of metrics.csv.
struct MetricsRow {
  int trial = 0;
  std::uint64_t seed = 0;
  std::string method, sampler;
  int n = 0;
  double cs = 0, me = 0, epe = 0, wall_ms = 0;
};

inline constexpr const char* kMetricsHeader = "trial,seed,method,sampler,N,cs,me,epe,wall_ms";

/// Rows ordered by method, sampler, trial, N. Timings are written as 0 unless
/// record_timing is on, so that reruns are byte-identical.
inline void write_metrics_csv(const std::vector<TrialRun>& runs, const fs::path& path, bool record_timing) {
  csv::Writer w(path.string());
  w.header({"trial", "seed", "method", "sampler", "N", "cs", "me", "epe", "wall_ms"});
  for (const auto& r : runs)
    for (const auto& it : r.result.iterations)
      w.row(r.trial, r.seed, r.method.name, to_string(r.sampler), it.n_samples, it.metrics.cs_mean, it.metrics.me_mean,
            it.metrics.epe_mean, record_timing ? it.wall_ms : 0.0);
}

inline std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
  const auto t = csv::read(path.string());
  std::ostringstream hdr;
  for (std::size_t i = 0; i < t.header.size(); ++i) hdr << (i ? "," : "") << t.header[i];
  if (hdr.str() != kMetricsHeader) throw FormatError(path.string() + ": expected header " + kMetricsHeader);
  std::vector<MetricsRow> out;
  for (const auto& row : t.rows) {
    MetricsRow m;
    const std::string where = path.string();
    m.trial = static_cast<int>(detail::to_long(row[0], where + " trial"));
    char* end = nullptr;
    m.seed = std::strtoull(row[1].c_str(), &end, 10);
    if (row[1].empty() || *end != '\0') throw FormatError(where + ": bad seed '" + row[1] + "'");
    m.method = row[2];
    m.sampler = row[3];
    m.n = static_cast<int>(detail::to_long(row[4], where + " N"));
    for (auto [dst, col] : {std::pair{&m.cs, 5}, {&m.me, 6}, {&m.epe, 7}, {&m.wall_ms, 8}})
      if (!csv::parse_double(row[static_cast<std::size_t>(col)], *dst)) throw FormatError(where + ": bad number");
    out.push_back(std::move(m));
  }
  return out;
}

namespace detail {

inline void write_points_csv(const fs::path& path, const Points& grid, const Points& vel) {
  csv::Writer w(path.string());
  w.header({"x", "y", "u", "v"});
  for (Eigen::Index k = 0; k < grid.rows(); ++k) w.row(grid(k, 0), grid(k, 1), vel(k, 0), vel(k, 1));
}

inline void write_trial_log(const fs::path& path, const TrialRun& r) {
  std::ofstream os(path, std::ios::binary);
  os << "method " << r.method.name << "\nsampler " << to_string(r.sampler) << "\ntrial " << r.trial << "\nseed "
     << r.seed << "\n";
  for (const auto& it : r.result.iterations) {
    os << "N " << it.n_samples << " sampled " << csv::format_double(it.sampled.x()) << ","
       << csv::format_double(it.sampled.y()) << " cs " << csv::format_double(it.metrics.cs_mean) << " me "
       << csv::format_double(it.metrics.me_mean) << " epe " << csv::format_double(it.metrics.epe_mean)
       << " cs_excluded " << it.metrics.cs_excluded << " spearman_u_epe "
       << csv::format_double(it.uncertainty_error_spearman) << " wall_ms " << csv::format_double(it.wall_ms) << "\n";
  }
  for (const auto& line : r.result.log) os << "log " << line << "\n";
  os << (r.result.aborted ? "status aborted: " + r.result.abort_reason : std::string("status ok")) << "\n";
}

inline void write_samples_csv(const fs::path& path, const CampaignResult& r) {
  csv::Writer w(path.string());
  w.header({"n", "x", "y", "x_next", "y_next"});
  const Points& in = r.dataset.inputs();
  const Points& out = r.dataset.targets();
  for (Eigen::Index k = 0; k < in.rows(); ++k) w.row(static_cast<int>(k + 1), in(k, 0), in(k, 1), out(k, 0), out(k, 1));
}

/// Per-iteration estimate and uncertainty over the full test grid (NaN off the valid set).
inline void write_field_dumps(const fs::path& dir, const CampaignResult& r) {
  fs::create_directories(dir);
  detail::write_points_csv(dir / "truth.csv", r.grid, r.truth);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t i = 0; i < r.iterations.size(); ++i) {
    const auto& it = r.iterations[i];
    const fs::path d = dir / ("iter_" + std::to_string(i));
    fs::create_directories(d);
    Points est = Points::Constant(r.grid.rows(), 2, nan);
    Eigen::Index row = 0;
    for (std::size_t k = 0; k < r.valid.size(); ++k)
      if (r.valid[k]) est.row(static_cast<Eigen::Index>(k)) = it.estimate.row(row++);
    detail::write_points_csv(d / "estimate.csv", r.grid, est);
    export_uncertainty_csv(it.map, (d / "uncertainty.csv").string());
  }
}

}  // namespace detail

/// Runs every (method, sampler, trial) campaign of a config and writes the
/// artifacts under dir. Progress lines go to `progress` when given.
inline ExperimentResult run_experiment(const ExperimentConfig& raw, const fs::path& dir,
                                       std::ostream* progress = nullptr) {
  raw.validate();
  const FieldPtr field = make_field(raw.flow);
  ExperimentResult res{resolve(raw, *field), dir, {}};
  const ExperimentConfig& c = res.config;
  fs::create_directories(dir / "logs");
  {
    std::ofstream ini(dir / "effective_config.ini", std::ios::binary);
    ini << to_ini(c);
  }

  for (const auto& m : c.methods)
    for (SamplerKind s : c.samplers)
      for (int t = 0; t < c.trials; ++t) res.runs.push_back({m, s, t, trial_seed(c.base_seed, t), {}});

  std::atomic<std::size_t> next{0};
  std::mutex io;
  std::vector<std::exception_ptr> errors(res.runs.size());
  const auto worker = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < res.runs.size();) {
      TrialRun& r = res.runs[k];
      try {
        r.result = run_campaign(field, campaign_config(c, r.method, r.sampler, r.trial));
        const std::string tag = run_tag(r.method.name, to_string(r.sampler), r.trial);
        detail::write_trial_log(dir / "logs" / (tag + ".log"), r);
        detail::write_samples_csv(dir / "logs" / (tag + "_samples.csv"), r.result);
        if (c.dump_fields) detail::write_field_dumps(dir / "fields" / tag, r.result);
        std::lock_guard lock(io);
        if (progress) {
          *progress << tag << ": ";
          if (r.result.iterations.empty())
            *progress << "no iterations";
          else
            *progress << "N=" << r.result.iterations.back().n_samples << " cs=" << std::fixed
                      << std::setprecision(3) << r.result.iterations.back().metrics.cs_mean << std::defaultfloat;
          if (r.result.aborted) *progress << " ABORTED: " << r.result.abort_reason;
          *progress << std::endl;
        }
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const int n_threads = std::min<int>(c.threads, static_cast<int>(res.runs.size()));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  write_metrics_csv(res.runs, dir / "metrics.csv", c.record_timing);
  return res;
}

/// Mean and population std of one metric per (method, sampler, N).
struct TableCell {
  int count = 0;
  MetricSummary cs, me;
};

struct ComparisonTable {
  std::vector<int> n_values{9, 16, 25, 36};
  std::vector<std::string> methods;   // display order
  std::vector<std::string> samplers;  // display order
  std::map<std::tuple<std::string, std::string, int>, TableCell> cells;

  std::optional<TableCell> cell(const std::string& method, const std::string& sampler, int n) const {
    auto it = cells.find({method, sampler, n});
    if (it == cells.end()) return std::nullopt;
    return it->second;
  }
};

inline ComparisonTable build_table(const std::vector<MetricsRow>& rows) {
  ComparisonTable t;
  t.methods = {"enkode", "gp-rbf", "gp-m32"};
  std::set<std::string> samplers_seen;
  std::map<std::tuple<std::string, std::string, int>, std::pair<std::vector<double>, std::vector<double>>> acc;
  for (const auto& r : rows) {
    if (std::find(t.n_values.begin(), t.n_values.end(), r.n) == t.n_values.end()) continue;
    if (std::find(t.methods.begin(), t.methods.end(), r.method) == t.methods.end()) t.methods.push_back(r.method);
    samplers_seen.insert(r.sampler);
    auto& a = acc[{r.method, r.sampler, r.n}];
    a.first.push_back(r.cs);
    a.second.push_back(r.me);
  }
  for (const char* s : {"active", "uniform"})
    if (samplers_seen.count(s)) t.samplers.push_back(s);
  for (const auto& s : samplers_seen)
    if (std::find(t.samplers.begin(), t.samplers.end(), s) == t.samplers.end()) t.samplers.push_back(s);
  const auto summarize = [](const std::vector<double>& xs) {
    const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double v = 0;
    for (double x : xs) v += (x - m) * (x - m);
    return MetricSummary{m, std::sqrt(v / static_cast<double>(xs.size()))};
  };
  for (const auto& [key, a] : acc)
    t.cells[key] = {static_cast<int>(a.first.size()), summarize(a.first), summarize(a.second)};
  return t;
}

/// Plain-text rendering: one block per sampler, one CS/ME column pair per method.
inline std::string format_table(const ComparisonTable& t) {
  std::ostringstream os;
  if (t.samplers.empty()) {
    os << "no rows with N in {9, 16, 25, 36}\n";
    return os.str();
  }
  for (const auto& s : t.samplers) {
    os << "sampler: " << s << "\n";
    os << std::left << std::setw(4) << "N";
    for (const auto& m : t.methods) os << " | " << std::setw(31) << (m + " CS / ME");
    os << "\n";
    for (int n : t.n_values) {
      os << std::setw(4) << n;
      for (const auto& m : t.methods) {
        std::ostringstream cell;
        if (auto c = t.cell(m, s, n))
          cell << std::fixed << std::setprecision(3) << c->cs.mean << "+-" << c->cs.stddev << " / " << c->me.mean
               << "+-" << c->me.stddev;
        else
          cell << "absent";
        os << " | " << std::setw(31) << cell.str();
      }
      os << "\n";
    }
    os << "\n";
  }
  return os.str();
}

/// All metrics.csv files in dir and its immediate subdirectories.
inline std::vector<MetricsRow> collect_metrics(const fs::path& dir) {
  std::vector<fs::path> files;
  if (fs::exists(dir / "metrics.csv")) files.push_back(dir / "metrics.csv");
  if (fs::is_directory(dir))
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory() && fs::exists(e.path() / "metrics.csv")) files.push_back(e.path() / "metrics.csv");
  if (files.empty()) throw FormatError("table: no metrics.csv under " + dir.string());
  std::sort(files.begin(), files.end());
  std::vector<MetricsRow> rows;
  for (const auto& f : files) {
    auto r = read_metrics_csv(f);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

/// Writes truth.csv, estimate.csv, epe.csv and uncertainty.csv for iteration
/// `iter` of one dumped campaign into out_dir.
inline void extract_fields(const fs::path& run_dir, const std::string& tag, int iter, const fs::path& out_dir) {
  const fs::path src = run_dir / "fields" / tag;
  const fs::path it_dir = src / ("iter_" + std::to_string(iter));
  if (!fs::exists(src / "truth.csv")) throw FormatError("fields: no field dump for " + tag + " under " + run_dir.string());
  if (!fs::exists(it_dir / "estimate.csv") || !fs::exists(it_dir / "uncertainty.csv"))
    throw FormatError("fields: iteration " + std::to_string(iter) + " not found for " + tag);
  const auto load = [](const fs::path& p, Points& grid, Points& vel) {
    const auto t = csv::read(p.string());
    if (t.column("x") != 0 || t.column("y") != 1 || t.column("u") != 2 || t.column("v") != 3)
      throw FormatError(p.string() + ": expected header x,y,u,v");
    grid.resize(static_cast<Eigen::Index>(t.rows.size()), 2);
    vel.resize(static_cast<Eigen::Index>(t.rows.size()), 2);
    for (std::size_t r = 0; r < t.rows.size(); ++r)
      for (int c = 0; c < 4; ++c) {
        double v;
        if (!csv::parse_double(t.rows[r][static_cast<std::size_t>(c)], v)) throw FormatError(p.string() + ": bad number");
        (c < 2 ? grid(static_cast<Eigen::Index>(r), c) : vel(static_cast<Eigen::Index>(r), c - 2)) = v;
      }
  };
  Points grid, truth, grid2, est;
  load(src / "truth.csv", grid, truth);
  load(it_dir / "estimate.csv", grid2, est);
  if (grid.rows() != grid2.rows()) throw FormatError("fields: truth and estimate grids differ");

  fs::create_directories(out_dir);
  detail::write_points_csv(out_dir / "truth.csv", grid, truth);
  detail::write_points_csv(out_dir / "estimate.csv", grid, est);
  // Points without ground truth (masked / no data) keep NaN metrics.
  const double nan = std::numeric_limits<double>::quiet_NaN();
  MetricReport rep;
  rep.epe = Eigen::VectorXd::Constant(grid.rows(), nan);
  rep.cs = rep.epe;
  rep.me = rep.epe;
  for (Eigen::Index k = 0; k < grid.rows(); ++k) {
    const Vec2 t = truth.row(k).transpose(), e = est.row(k).transpose();
    if (!t.allFinite() || !e.allFinite()) continue;
    rep.epe(k) = epe(t, e);
    rep.me(k) = magnitude_error(t, e);
    rep.cs(k) = cosine_similarity(t, e).value_or(nan);
  }
  export_metric_grid(grid, rep, (out_dir / "epe.csv").string());
  fs::copy_file(it_dir / "uncertainty.csv", out_dir / "uncertainty.csv", fs::copy_options::overwrite_existing);
}

}  // namespace enkode
