#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "enkode/experiment.hpp"

using namespace enkode;

namespace {

const char* kSmall = R"(
[experiment]
name = small
trials = 2
base_seed = 5
n_total = 4
methods = enkode, gp-m32
samplers = active, uniform
dump_fields = true

[flow]
type = linear

[grid]
nx = 10
ny = 10

[enkode]
nu = 4
members = 2
epochs = 20

[gp]
restarts = 1
iterations = 20
)";

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "enkode_experiment_test" / name;
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Config, Defaults) {
  const ExperimentConfig c = parse_config("");
  EXPECT_EQ(c.trials, 10);
  EXPECT_EQ(c.n_total, 36);
  EXPECT_EQ(c.grid_nx, 50);
  EXPECT_EQ(c.enkode.model.nu, 64);
  EXPECT_EQ(c.enkode.members, 10);
  EXPECT_EQ(c.enkode.beta, 1.0);
  EXPECT_EQ(c.enkode.model.epochs_per_update, 500);
  EXPECT_EQ(c.gp.options.restarts, 5);
  EXPECT_EQ(c.gp.options.iterations, 200);
  ASSERT_EQ(c.methods.size(), 1u);
  EXPECT_EQ(c.methods[0].name, "enkode");
  EXPECT_EQ(c.flow.type, "bickley");
  EXPECT_FALSE(c.dt.has_value());
  EXPECT_NEAR(c.flow.bickley.frame_speed, 0.461 * 62.66, 1e-12);
}

TEST(Config, ParsesValuesAndAuto) {
  const ExperimentConfig c = parse_config(
      "[experiment]\nmethods = gp-rbf, gp-matern32\nsamplers = uniform\n"
      "[flow]\ntype = bickley\nframe_speed = 0\n[measurement]\ndt = 0.01\nnoise_sigma = auto\n"
      "[gp]\nhyperopt = below_threshold\n");
  ASSERT_EQ(c.methods.size(), 2u);
  EXPECT_EQ(c.methods[1].name, "gp-m32");
  EXPECT_EQ(c.methods[0].kernel, KernelKind::rbf);
  EXPECT_EQ(c.samplers, std::vector<SamplerKind>{SamplerKind::uniform});
  EXPECT_EQ(c.flow.bickley.frame_speed, 0.0);
  EXPECT_EQ(*c.dt, 0.01);
  EXPECT_FALSE(c.noise_sigma.has_value());
  EXPECT_EQ(c.gp.options.mode, HyperOptMode::below_threshold);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("[experiment]\ntrails = 3\n"), FormatError);
  EXPECT_THROW(parse_config("[experimnt]\n"), FormatError);
  EXPECT_THROW(parse_config("[experiment]\ntrials = 0\n"), FormatError);
  EXPECT_THROW(parse_config("[experiment]\ntrials = many\n"), FormatError);
  EXPECT_THROW(parse_config("[experiment]\nmethods = svm\n"), FormatError);
  EXPECT_THROW(parse_config("[flow]\ntype = gridded:/nonexistent/data.csv\n"), FormatError);
  EXPECT_THROW(parse_config("[flow]\ntype = tornado\n"), FormatError);
  EXPECT_THROW(load_config("/nonexistent/config.ini"), FormatError);
}

TEST(Config, GriddedPathRelativeToConfig) {
  const ExperimentConfig c = load_config(fs::path(ENKODE_TEST_DATA) / ".." / ".." / "configs" / "ocean_sample.ini");
  EXPECT_EQ(c.flow.type, "gridded");
  EXPECT_TRUE(fs::exists(c.flow.path));
  EXPECT_EQ(c.flow.path.filename(), "ocean_sample.csv");
}

TEST(Config, IniRoundTrip) {
  ExperimentConfig c = parse_config(kSmall);
  const FieldPtr f = make_field(c.flow);
  c = resolve(c, *f);
  const std::string text = to_ini(c);
  EXPECT_EQ(to_ini(parse_config(text)), text);
  const ExperimentConfig raw = parse_config(kSmall);
  EXPECT_EQ(to_ini(parse_config(to_ini(raw))), to_ini(raw));
}

TEST(Config, ShippedConfigsParse) {
  for (const auto& e : fs::directory_iterator(fs::path(ENKODE_TEST_DATA) / ".." / ".." / "configs"))
    if (e.path().extension() == ".ini") {
      EXPECT_NO_THROW(load_config(e.path())) << e.path();
    }
}

TEST(Run, SingleTrialSingleSample) {
  ExperimentConfig c = parse_config(kSmall);
  c.trials = 1;
  c.n_total = 1;
  c.methods = {parse_method("gp-m32")};
  c.samplers = {SamplerKind::active};
  const fs::path dir = fresh_dir("one");
  const auto res = run_experiment(c, dir);
  EXPECT_TRUE(res.ok());
  const auto rows = read_metrics_csv(dir / "metrics.csv");
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].n, 1);
  EXPECT_EQ(rows[0].wall_ms, 0.0);
  EXPECT_EQ(rows[0].seed, trial_seed(5, 0));
  EXPECT_TRUE(fs::exists(dir / "effective_config.ini"));
  EXPECT_TRUE(fs::exists(dir / "logs" / "gp-m32_active_trial0.log"));
}

TEST(Run, DeterministicAndReproducibleFromEffectiveConfig) {
  const ExperimentConfig c = parse_config(kSmall);
  const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b"), e = fresh_dir("det_eff");
  const auto res = run_experiment(c, a);
  ASSERT_TRUE(res.ok());
  run_experiment(c, b);
  const std::string first = slurp(a / "metrics.csv");
  EXPECT_EQ(first, slurp(b / "metrics.csv"));
  EXPECT_EQ(read_metrics_csv(a / "metrics.csv").size(), 2u * 2u * 2u * 4u);
  EXPECT_EQ(first.find('\r'), std::string::npos);

  run_experiment(load_config(a / "effective_config.ini"), e);
  EXPECT_EQ(slurp(e / "metrics.csv"), first);
  EXPECT_EQ(slurp(e / "effective_config.ini"), slurp(a / "effective_config.ini"));
}

TEST(Run, ThreadedMatchesSequential) {
  ExperimentConfig c = parse_config(kSmall);
  const fs::path a = fresh_dir("thr_a"), b = fresh_dir("thr_b");
  run_experiment(c, a);
  c.threads = 3;
  run_experiment(c, b);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
}

TEST(Table, Layout) {
  std::vector<MetricsRow> rows;
  for (int trial = 0; trial < 2; ++trial)
    for (const char* m : {"enkode", "gp-m32"})
      for (int n : {1, 9, 10, 16, 25, 36}) rows.push_back({trial, 0, m, "active", n, 0.1 * trial + n / 100.0, 1.0, 2.0, 0});
  const ComparisonTable t = build_table(rows);
  ASSERT_TRUE(t.cell("enkode", "active", 9));
  EXPECT_FALSE(t.cell("enkode", "active", 10));
  EXPECT_FALSE(t.cell("gp-rbf", "active", 9));
  EXPECT_NEAR(t.cell("gp-m32", "active", 16)->cs.mean, (0.16 + 0.26) / 2, 1e-15);
  EXPECT_NEAR(t.cell("gp-m32", "active", 16)->cs.stddev, 0.05, 1e-15);
  EXPECT_EQ(t.cell("enkode", "active", 36)->count, 2);
  const std::string text = format_table(t);
  EXPECT_NE(text.find("enkode CS / ME"), std::string::npos);
  EXPECT_NE(text.find("gp-m32 CS / ME"), std::string::npos);
  EXPECT_NE(text.find("absent"), std::string::npos);
  EXPECT_EQ(text.find("\n10 "), std::string::npos);
}

TEST(Table, CellIsMeanOfCsvRows) {
  ExperimentConfig c = parse_config(kSmall);
  c.n_total = 9;
  c.trials = 3;
  c.methods = {parse_method("gp-m32")};
  c.samplers = {SamplerKind::uniform};
  c.dump_fields = false;
  const fs::path dir = fresh_dir("table");
  run_experiment(c, dir);
  const auto rows = collect_metrics(dir);
  double sum = 0;
  int count = 0;
  for (const auto& r : rows)
    if (r.n == 9) sum += r.cs, ++count;
  ASSERT_EQ(count, 3);
  EXPECT_NEAR(build_table(rows).cell("gp-m32", "uniform", 9)->cs.mean, sum / 3, 1e-15);
  EXPECT_THROW(collect_metrics(fresh_dir("empty_table")), FormatError);
}

TEST(Fields, ExtractIteration) {
  ExperimentConfig c = parse_config(kSmall);
  c.methods = {parse_method("enkode")};
  c.samplers = {SamplerKind::active};
  c.trials = 1;
  const fs::path dir = fresh_dir("fields");
  const auto res = run_experiment(c, dir);
  const std::string tag = run_tag("enkode", "active", 0);
  const fs::path out = dir / "out";
  extract_fields(dir, tag, 2, out);
  for (const char* f : {"truth.csv", "estimate.csv", "epe.csv", "uncertainty.csv"}) EXPECT_TRUE(fs::exists(out / f)) << f;

  const auto epe_grid = csv::read((out / "epe.csv").string());
  ASSERT_EQ(epe_grid.rows.size(), 100u);
  for (const auto& row : epe_grid.rows) {
    double v;
    ASSERT_TRUE(csv::parse_double(row[2], v));
    if (!std::isnan(v)) {
      EXPECT_GE(v, 0.0);
    }
  }
  const UncertaintyMap dumped = load_uncertainty_csv((out / "uncertainty.csv").string());
  const UncertaintyMap& mem = res.runs[0].result.iterations[2].map;
  ASSERT_EQ(dumped.size(), mem.size());
  for (Eigen::Index k = 0; k < mem.size(); ++k)
    if (std::isfinite(mem.values(k))) {
      EXPECT_EQ(dumped.values(k), mem.values(k));
    }

  EXPECT_THROW(extract_fields(dir, tag, 99, out), FormatError);
  EXPECT_THROW(extract_fields(dir, run_tag("gp-rbf", "active", 0), 0, out), FormatError);
}

TEST(Output, RootFromEnvironment) {
  ExperimentConfig c;
  c.output_dir = "results/x";
  ::setenv("ENKODE_OUTPUT_ROOT", "/tmp/enkode_root", 1);
  EXPECT_EQ(output_path(c), fs::path("/tmp/enkode_root/results/x"));
  c.output_dir = "/abs/dir";
  EXPECT_EQ(output_path(c), fs::path("/abs/dir"));
  ::unsetenv("ENKODE_OUTPUT_ROOT");
  c.output_dir = "rel";
  EXPECT_EQ(output_path(c), fs::path("rel"));
}

TEST(Metrics, CsvRejectsWrongHeader) {
  const fs::path p = fresh_dir("hdr");
  fs::create_directories(p);
  std::ofstream(p / "metrics.csv") << "trial,seed,N\n1,2,3\n";
  EXPECT_THROW(read_metrics_csv(p / "metrics.csv"), FormatError);
}
