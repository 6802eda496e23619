// Command-line harness: run experiments, tabulate results, extract field
// grids and ingest gridded ocean-current CSVs.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <regex>
#include <string>

// Eigen first: httplib pulls in <resolv.h>, whose _res macro breaks Eigen.
#include "enkode/data.hpp"
#include "enkode/experiment.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <CLI11.hpp>
#include <httplib.h>

namespace {

using namespace enkode;

int cmd_run(const std::string& config_path, const std::string& out_override, int threads, bool dump, bool timing,
            bool quiet) {
  ExperimentConfig cfg = load_config(config_path);
  if (!out_override.empty()) cfg.output_dir = out_override;
  if (threads > 0) cfg.threads = threads;
  if (dump) cfg.dump_fields = true;
  if (timing) cfg.record_timing = true;
  const fs::path dir = output_path(cfg);
  const ExperimentResult res = run_experiment(cfg, dir, quiet ? nullptr : &std::cerr);
  std::size_t rows = 0;
  for (const auto& r : res.runs) rows += r.result.iterations.size();
  std::cout << "wrote " << (dir / "metrics.csv").string() << " (" << rows << " rows)\n";
  if (!res.ok()) {
    for (const auto& r : res.runs)
      if (r.result.aborted)
        std::cerr << "aborted " << run_tag(r.method.name, to_string(r.sampler), r.trial) << ": "
                  << r.result.abort_reason << "\n";
    return 2;
  }
  return 0;
}

int cmd_table(const std::string& dir) {
  std::cout << format_table(build_table(collect_metrics(dir)));
  return 0;
}

int cmd_fields(const std::string& dir, int iter, const std::string& method, const std::string& sampler, int trial,
               const std::string& out) {
  const std::string tag = run_tag(parse_method(method).name, to_string(parse_sampler(sampler)), trial);
  const fs::path dest = out.empty() ? fs::path(dir) / "fields_out" / (tag + "_iter_" + std::to_string(iter)) : fs::path(out);
  extract_fields(dir, tag, iter, dest);
  std::cout << "wrote truth.csv, estimate.csv, epe.csv, uncertainty.csv to " << dest.string() << "\n";
  return 0;
}

/// Downloads url to path over HTTP(S).
void fetch(const std::string& url, const std::string& path) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw Error("fetch: cannot parse URL " + url);
  httplib::Client client(m[1].str());
  client.set_follow_location(true);
  client.set_read_timeout(120, 0);
  const auto resp = client.Get(m[2].matched ? m[2].str() : "/");
  if (!resp) throw Error("fetch: request failed: " + httplib::to_string(resp.error()));
  if (resp->status != 200) throw Error("fetch: HTTP status " + std::to_string(resp->status));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("fetch: cannot write " + path);
  os << resp->body;
}

int cmd_ingest(const std::string& csv_path, const std::string& mask, const std::string& url, bool allow_network,
               const std::string& out) {
  if (!url.empty()) {
    if (!allow_network) throw Error("ingest: --fetch needs --allow-network");
    fetch(url, csv_path);
    std::cout << "downloaded " << url << " -> " << csv_path << "\n";
  }
  const GriddedField f = ingest_erddap_csv(csv_path, mask);
  const Lattice& lat = f.lattice();
  std::size_t missing = 0;
  double vmax = 0;
  for (std::size_t k = 0; k < lat.size(); ++k) {
    if (!f.node_finite(k)) {
      ++missing;
      continue;
    }
    vmax = std::max(vmax, std::hypot(f.u_at(static_cast<int>(k % lat.nx), static_cast<int>(k / lat.nx)),
                                     f.v_at(static_cast<int>(k % lat.nx), static_cast<int>(k / lat.nx))));
  }
  std::cout << "lattice " << lat.nx << " x " << lat.ny << " over [" << lat.x_min << ", " << lat.x_max << "] x ["
            << lat.y_min << ", " << lat.y_max << "]\n"
            << "missing nodes " << missing << ", masked nodes " << (f.domain().mask() ? f.domain().mask()->blocked_count() : 0)
            << ", max speed " << vmax << "\n";
  if (!out.empty()) {
    fs::create_directories(out);
    export_gridded_csv(f, (fs::path(out) / "field.csv").string());
    std::cout << "wrote " << (fs::path(out) / "field.csv").string();
    if (f.domain().mask()) {
      export_mask_csv(*f.domain().mask(), (fs::path(out) / "mask.csv").string());
      std::cout << ", " << (fs::path(out) / "mask.csv").string();
    }
    std::cout << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Active flow modelling experiments"};
  app.require_subcommand(1);

  std::string config, out_dir;
  int threads = 0;
  bool dump = false, timing = false, quiet = false;
  auto* run = app.add_subcommand("run", "Run every campaign of a config and write metrics.csv");
  run->add_option("config", config, "Experiment INI file")->required()->check(CLI::ExistingFile);
  run->add_option("-o,--output", out_dir, "Override the output directory");
  run->add_option("-j,--threads", threads, "Concurrent campaigns");
  run->add_flag("--dump-fields", dump, "Keep per-iteration estimate and uncertainty grids");
  run->add_flag("--record-timing", timing, "Write wall-clock times into metrics.csv");
  run->add_flag("-q,--quiet", quiet, "No per-campaign progress");

  std::string table_dir;
  auto* table = app.add_subcommand("table", "CS / ME at N = 9, 16, 25, 36 per method and sampler");
  table->add_option("dir", table_dir, "Results directory")->required()->check(CLI::ExistingDirectory);

  std::string fields_dir, method = "enkode", sampler = "active", fields_out;
  int iter = -1, trial = 0;
  auto* fields = app.add_subcommand("fields", "Truth, estimate, EPE and uncertainty grids for one iteration");
  fields->add_option("dir", fields_dir, "Results directory of a run with field dumps")->required();
  fields->add_option("--iter", iter, "Iteration index (0 = after the first sample)")->required();
  fields->add_option("--method", method, "enkode, gp-rbf or gp-m32");
  fields->add_option("--sampler", sampler, "active or uniform");
  fields->add_option("--trial", trial, "Trial index");
  fields->add_option("--out", fields_out, "Destination directory");

  std::string ingest_csv, mask, url, ingest_out;
  bool allow_network = false;
  auto* ingest = app.add_subcommand("ingest", "Validate a gridded CSV (x,y,u,v or ERDDAP griddap)");
  ingest->add_option("csv", ingest_csv, "Input CSV (destination when fetching)")->required();
  ingest->add_option("--mask", mask, "Extra obstacle mask CSV x,y,blocked");
  ingest->add_option("--fetch", url, "Download the CSV from this URL first");
  ingest->add_flag("--allow-network", allow_network, "Permit --fetch to use the network");
  ingest->add_option("--out", ingest_out, "Write normalized field.csv / mask.csv here");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(config, out_dir, threads, dump, timing, quiet);
    if (*table) return cmd_table(table_dir);
    if (*fields) return cmd_fields(fields_dir, iter, method, sampler, trial, fields_out);
    if (*ingest) return cmd_ingest(ingest_csv, mask, url, allow_network, ingest_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
