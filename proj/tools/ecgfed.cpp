// Command-line front door: render synthetic datasets, train federated or
// centralized runs, digitize pages with a trained model, compare runs, and
// query the privacy accountant. Success exits 0; any failure prints one
// machine-readable JSON object to stderr and exits nonzero.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ecgfed/digitize.hpp"
#include "ecgfed/dpcore.hpp"
#include "ecgfed/fedcore.hpp"
#include "ecgfed/harness.hpp"
#include "ecgfed/synthgen.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ecgfed;

namespace {

bool dir_nonempty(const fs::path& p) {
  return fs::exists(p) && fs::is_directory(p) && !fs::is_empty(p);
}

ResolvedConfig config_or_defaults(const std::string& config_path) {
  if (config_path.empty()) return resolve_config(json::object());
  return load_config_file(config_path);
}

int cmd_render(const std::string& config_path, const std::string& out,
               std::int64_t seed_override, bool force) {
  ResolvedConfig rc = config_or_defaults(config_path);
  if (seed_override >= 0) rc.dataset.seed = static_cast<std::uint64_t>(seed_override);
  fs::path target = out.empty() ? rc.dataset_dir : fs::path(out);
  if (dir_nonempty(target)) {
    if (!force)
      throw std::runtime_error("target directory '" + target.string() +
                               "' is not empty (pass --force to overwrite)");
    fs::remove_all(target);
  }
  json manifest = synthgen::build_dataset(rc.dataset, target);
  int pages = 0;
  for (const auto& c : manifest.at("clients")) pages += c.at("n_pages").get<int>();
  std::cout << json{{"dataset", target.string()},
                    {"clients", manifest.at("clients").size()},
                    {"pages", pages},
                    {"seed", rc.dataset.seed}}
                   .dump(2)
            << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data,
              const std::string& out, std::int64_t seed_override, bool force) {
  ResolvedConfig rc = config_or_defaults(config_path);
  if (seed_override >= 0) {
    rc.spec.seed = static_cast<std::uint64_t>(seed_override);
    // keep the recorded config in step with what actually runs
    rc.resolved["seed"] = rc.spec.seed;
    rc.spec.resolved_config_json = rc.resolved.dump(2);
  }
  fs::path data_dir = data.empty() ? rc.dataset_dir : fs::path(data);
  fs::path run_dir = out.empty() ? rc.run_dir : fs::path(out);
  if (!fs::exists(data_dir / "manifest.json"))
    throw std::runtime_error("dataset manifest not found: " +
                             (data_dir / "manifest.json").string());
  if (force && fs::exists(run_dir)) fs::remove_all(run_dir);
  std::vector<ClientData> clients = load_clients(data_dir);
  ExperimentResult res = run_experiment(rc.spec, clients, run_dir);
  json summary = {{"run", run_dir.string()},
                  {"rounds", res.server.round},
                  {"finished", res.finished}};
  if (!res.records.empty()) summary["val_dice"] = res.records.back().val_dice;
  if (res.finished && res.manifest.contains("final"))
    summary["final"] = res.manifest.at("final");
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_digitize(const std::string& model, const std::string& image,
                 const std::string& meta, const std::string& out, int tile,
                 double overlap) {
  auto [net, params] = load_checkpoint(model);
  GrayImage page = read_pgm(image);
  json jm = json::parse(read_file(meta));
  auto calib = jm.at("calib").get<CalibrationMeta>();
  VectorizeParams vp;
  vp.validate();
  DigitizeResult res = digitize_page(net, params, page, calib, vp, tile, overlap);
  export_csv_signal(out, res.signal);
  int present = 0;
  for (const auto& tr : res.traces)
    for (auto p : tr.present) present += p != 0;
  std::cout << json{{"signal", out},
                    {"samples_per_lead", res.signal.leads[0].size()},
                    {"traced_columns", present}}
                   .dump(2)
            << "\n";
  return 0;
}

int cmd_eval(const std::vector<std::string>& run_dirs, const std::string& out,
             std::uint64_t B, double level, double alpha, std::uint64_t seed) {
  std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
  json rep = compare_runs(dirs, B, level, alpha, seed);
  std::string text = rep.dump(2) + "\n";
  if (!out.empty()) atomic_write_file(out, text);
  std::cout << text;
  return 0;
}

int cmd_accountant(double sigma, long long rounds, double delta, double target_eps) {
  json out;
  out["delta"] = delta;
  out["rounds"] = rounds;
  if (target_eps > 0.0) {
    double s = calibrate_sigma(target_eps, delta, static_cast<std::size_t>(rounds));
    EpsilonResult er = compose_and_convert(s, static_cast<std::size_t>(rounds), delta);
    out["target_epsilon"] = target_eps;
    out["sigma"] = s;
    out["epsilon"] = er.epsilon;
    out["alpha"] = er.alpha;
  } else {
    EpsilonResult er = compose_and_convert(sigma, static_cast<std::size_t>(rounds), delta);
    out["sigma"] = sigma;
    out["epsilon"] = er.epsilon;
    out["alpha"] = er.alpha;
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deterministic federated ECG segmentation workbench"};
  app.require_subcommand(1);

  std::string config_path, out, data, model, image, meta;
  std::vector<std::string> run_dirs;
  std::int64_t seed_override = -1;
  bool force = false;
  int tile = 128;
  double overlap = 0.5;
  double sigma = 0.6, delta = 1e-5, target_eps = 0.0, level = 0.95, alpha = 0.05;
  long long rounds = 1;
  std::uint64_t B = 10000, eval_seed = 0;

  CLI::App* render = app.add_subcommand("render", "generate a synthetic multi-site dataset");
  render->add_option("--config", config_path, "config file (sectioned text or JSON)");
  render->add_option("--out", out, "dataset directory (default from config)");
  render->add_option("--seed", seed_override, "override the dataset seed");
  render->add_flag("--force", force, "overwrite a non-empty target");

  CLI::App* train = app.add_subcommand("train", "run one federated or centralized experiment");
  train->add_option("--config", config_path, "config file (sectioned text or JSON)");
  train->add_option("--data", data, "dataset directory (default from config)");
  train->add_option("--out", out, "run directory (default from config); resumes if it has state");
  train->add_option("--seed", seed_override, "override the experiment seed");
  train->add_flag("--force", force, "discard any existing run directory first");

  CLI::App* digitize = app.add_subcommand("digitize", "page image + trained model -> 12-lead CSV");
  digitize->add_option("--model", model, "checkpoint file")->required();
  digitize->add_option("--image", image, "page image (PGM)")->required();
  digitize->add_option("--meta", meta, "page metadata JSON with calibration")->required();
  digitize->add_option("--out", out, "output signal CSV")->required();
  digitize->add_option("--tile", tile, "inference tile side");
  digitize->add_option("--overlap", overlap, "inference tile overlap fraction");

  CLI::App* eval = app.add_subcommand("eval", "compare finished runs on shared validation pages");
  eval->add_option("runs", run_dirs, "two or more run directories")->expected(2, -1);
  eval->add_option("--out", out, "also write the report JSON here");
  eval->add_option("--bootstrap", B, "bootstrap resamples for the BCa interval");
  eval->add_option("--level", level, "confidence level");
  eval->add_option("--alpha", alpha, "family-wise error rate for Holm");
  eval->add_option("--seed", eval_seed, "bootstrap seed");

  CLI::App* acct = app.add_subcommand("accountant", "Gaussian-mechanism RDP accountant");
  acct->add_option("--sigma", sigma, "noise multiplier");
  acct->add_option("--rounds", rounds, "composed rounds")->required();
  acct->add_option("--delta", delta, "target delta")->required();
  acct->add_option("--target-epsilon", target_eps, "calibrate sigma to this epsilon instead");

  CLI11_PARSE(app, argc, argv);

  try {
    if (render->parsed()) return cmd_render(config_path, out, seed_override, force);
    if (train->parsed()) return cmd_train(config_path, data, out, seed_override, force);
    if (digitize->parsed()) return cmd_digitize(model, image, meta, out, tile, overlap);
    if (eval->parsed()) return cmd_eval(run_dirs, out, B, level, alpha, eval_seed);
    if (acct->parsed()) return cmd_accountant(sigma, rounds, delta, target_eps);
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
