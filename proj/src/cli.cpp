#include "isslab/cli.hpp"

#include "isslab/config.hpp"
#include "isslab/dataset.hpp"
#include "isslab/gradcheck.hpp"
#include "isslab/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace isslab::cli {
namespace {

namespace fs = std::filesystem;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::string cell(const nlohmann::json& stat) {
  const auto& m = stat.at("mean");
  if (m.is_null()) return "n/a";
  char buf[64];
  const auto& s = stat.at("std");
  if (s.is_null()) std::snprintf(buf, sizeof buf, "%.2f", m.get<double>());
  else std::snprintf(buf, sizeof buf, "%.2f +/- %.2f", m.get<double>(), s.get<double>());
  return buf;
}

// Options shared by run and gen-data.
struct ConfigOptions {
  std::string config = "default";
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* sub) {
    sub->add_option("--config", config, "Config file or preset name")->capture_default_str();
    sub->add_option("--set", overrides, "Override, key=value (repeatable)");
    sub->add_option("--seed", seed, "Base seed");
  }

  RunConfig resolve() const {
    RunConfig cfg = config::load(config);
    for (const auto& o : overrides) config::apply_override(cfg, o);
    if (seed) config::apply_override(cfg, "run.seed=" + std::to_string(*seed));
    return cfg;
  }
};

int gen_data(const ConfigOptions& opts, const std::string& out_dir, int dump_ppm, int threads, std::ostream& out) {
  RunConfig cfg = opts.resolve();
  if (threads > 0) config::apply_override(cfg, "run.threads=" + std::to_string(threads));
  ScenarioSpec spec = cfg.request.scenario;
  spec.seed = cfg.request.base_seed;
  const Scenario sc = dataset::generate_scenario(spec, cfg.request.generator, cfg.request.threads);

  const fs::path dir = out_dir.empty() ? cfg.output / "data" : fs::path(out_dir);
  fs::create_directories(dir);
  std::ostringstream sums;
  auto emit = [&](const StageDataset& data, const std::string& name) {
    dataset::save(data, dir / (name + ".issdata"));
    char hex[32];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(dataset::checksum(data)));
    sums << name << '\t' << hex << '\n';
    if (dump_ppm > 0) dataset::dump_ppm(data, dir / (name + "_ppm"), dump_ppm);
  };
  for (std::size_t t = 0; t < sc.stages.size(); ++t) {
    const int stage = static_cast<int>(t) + 1;
    emit(sc.stages[t], "stage_" + std::to_string(stage));
    out << "stage " << stage << ": " << sc.stages[t].samples.size() << " images, labeled {";
    for (std::size_t i = 0; i < sc.stages[t].labeled_categories.size(); ++i)
      out << (i ? "," : "") << sc.stages[t].labeled_categories[i];
    out << "}, background shift " << dataset::background_shift_fraction(sc, stage) << '\n';
  }
  emit(sc.evaluation, "eval");
  out << "eval: " << sc.evaluation.samples.size() << " images\n";
  write_text(dir / "checksums.tsv", sums.str());
  write_text(dir / "config.resolved", config::manifest(cfg));
  out << "wrote " << dir.string() << '\n';
  return kExitOk;
}

struct GradcheckOptions {
  bool all = false;
  std::vector<std::string> losses;
  bool cayley = false;
  std::int64_t cases = 200;
  std::uint64_t seed = 0;
  double eps = 1e-5;
  double tolerance = 1e-6;
  std::string out;
};

int gradcheck_cmd(const GradcheckOptions& o, std::ostream& out, std::ostream& err) {
  std::vector<gradcheck::LossId> ids;
  if (o.all) ids.assign(std::begin(gradcheck::kAllLosses), std::end(gradcheck::kAllLosses));
  for (const auto& name : o.losses) {
    auto id = gradcheck::loss_from_string(name);
    if (!id) throw ConfigError("--loss", "unknown loss '" + name + "'");
    if (std::find(ids.begin(), ids.end(), *id) == ids.end()) ids.push_back(*id);
  }
  if (ids.empty() && !o.cayley) throw ConfigError("", "nothing to check: pass --all, --loss or --cayley");
  if (o.cases < 1) throw ConfigError("--cases", "must be at least 1");
  if (!(o.eps > 0.0)) throw ConfigError("--eps", "must be positive");

  std::vector<gradcheck::GradReport> reports;
  for (auto id : ids) reports.push_back(gradcheck::verify_table(id, o.cases, o.seed, o.eps, o.tolerance));
  if (o.cayley)
    for (int d : {2, 8, 16, 64}) reports.push_back(gradcheck::verify_cayley_grad(d, o.cases, o.seed));

  out << gradcheck::format_table(reports);
  bool pass = true;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) {
    pass = pass && r.pass;
    arr.push_back(r.to_json());
  }
  if (!o.out.empty())
    write_text(o.out, nlohmann::json{{"pass", pass}, {"reports", arr}}.dump(2) + "\n");
  if (!pass) err << "gradcheck: at least one loss failed\n";
  return pass ? kExitOk : kExitFailure;
}

int run_cmd(const ConfigOptions& opts, std::optional<int> seeds, const std::string& out_dir, int threads,
            bool print_only, std::ostream& out) {
  RunConfig cfg = opts.resolve();
  if (seeds) config::apply_override(cfg, "run.seeds=" + std::to_string(*seeds));
  if (threads > 0) config::apply_override(cfg, "run.threads=" + std::to_string(threads));
  if (!out_dir.empty()) config::apply_override(cfg, "run.output=" + out_dir);
  if (print_only) {
    out << config::render(cfg);
    return kExitOk;
  }

  fs::create_directories(cfg.output);
  write_text(cfg.output / "config.resolved", config::manifest(cfg));
  const auto t0 = std::chrono::steady_clock::now();
  const auto outcome = pipeline::run_scenario(cfg.request);
  pipeline::write_outputs(cfg.output, cfg.request, outcome);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << format_report(pipeline::metrics_json(cfg.request, outcome));
  out << "wrote " << cfg.output.string() << " in " << secs << " s\n";
  return kExitOk;
}

int report_cmd(const std::string& dir, std::ostream& out) {
  const fs::path path = fs::path(dir) / "metrics.json";
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  nlohmann::json metrics;
  try {
    metrics = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  out << format_report(metrics);
  return kExitOk;
}

}  // namespace

std::string format_report(const nlohmann::json& metrics) {
  std::ostringstream out;
  out << "scenario " << metrics.at("scenario").get<std::string>() << ", feature_dim "
      << metrics.at("feature_dim").get<int>() << ", memory_size " << metrics.at("memory_size").get<int>() << '\n';
  char line[256];
  std::snprintf(line, sizeof line, "%-22s %4s  %-16s %-16s %-16s %-16s %12s\n", "method", "runs", "mIoU(base)",
                "mIoU(new)", "mIoU", "hIoU", "memory_bytes");
  out << line;
  for (const auto& s : metrics.at("summary")) {
    std::snprintf(line, sizeof line, "%-22s %4d  %-16s %-16s %-16s %-16s %12lld\n",
                  s.at("method").get<std::string>().c_str(), s.at("runs").get<int>(), cell(s.at("miou_base")).c_str(),
                  cell(s.at("miou_new")).c_str(), cell(s.at("miou")).c_str(), cell(s.at("hiou")).c_str(),
                  static_cast<long long>(s.at("memory_bytes").get<std::int64_t>()));
    out << line;
  }
  return out.str();
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Incremental semantic segmentation lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("isslab build ") + config::build_id());

  ConfigOptions gen_opts;
  std::string gen_out;
  int dump_ppm = 0;
  int gen_threads = 0;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic scenario and write its datasets");
  gen_opts.attach(gen);
  gen->add_option("--out", gen_out, "Output directory (default: <run.output>/data)");
  gen->add_option("--dump-ppm", dump_ppm, "Also write PPM/PGM previews of the first N images per split");
  gen->add_option("--threads", gen_threads, "Worker threads");

  GradcheckOptions gc;
  auto* grad = app.add_subcommand("gradcheck", "Certify analytic loss gradients");
  grad->add_flag("--all", gc.all, "Check every loss");
  grad->add_option("--loss", gc.losses, "Loss to check: ce, kd, cce, ckd, ali, fl (repeatable)");
  grad->add_flag("--cayley", gc.cayley, "Also check the Cayley backward pass for D in {2, 8, 16, 64}");
  grad->add_option("--cases", gc.cases, "Random contexts per loss")->capture_default_str();
  grad->add_option("--seed", gc.seed, "Seed")->capture_default_str();
  grad->add_option("--eps", gc.eps, "Finite-difference step")->capture_default_str();
  grad->add_option("--tol", gc.tolerance, "Relative error tolerance")->capture_default_str();
  grad->add_option("--out", gc.out, "JSON report path");

  ConfigOptions run_opts;
  std::optional<int> seeds;
  std::string run_out;
  int run_threads = 0;
  bool print_config = false;
  auto* runc = app.add_subcommand("run", "Run every configured method over a scenario");
  run_opts.attach(runc);
  runc->add_option("--seeds", seeds, "Number of seeds");
  runc->add_option("--out", run_out, "Output directory");
  runc->add_option("--threads", run_threads, "Worker threads; results do not depend on it");
  runc->add_flag("--print-config", print_config, "Print the resolved config and exit");

  std::string report_dir;
  auto* rep = app.add_subcommand("report", "Print the summary of a finished run");
  rep->add_option("--in", report_dir, "Run output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) return gen_data(gen_opts, gen_out, dump_ppm, gen_threads, out);
    if (grad->parsed()) return gradcheck_cmd(gc, out, err);
    if (runc->parsed()) return run_cmd(run_opts, seeds, run_out, run_threads, print_config, out);
    if (rep->parsed()) return report_cmd(report_dir, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitConfig;
}

}  // namespace isslab::cli
