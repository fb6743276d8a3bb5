#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ecgfed/core/io.hpp"
#include "ecgfed/evalstats.hpp"
#include "ecgfed/fedcore.hpp"
#include "ecgfed/synthgen.hpp"

#include <json.hpp>

// Experiment configuration: a sectioned key = value file (JSON accepted as an
// alternative), resolved against a fixed schema with every default filled in
// and unknown keys rejected. The fully resolved config is re-emitted as JSON
// so the run manifest records exactly what executed. Also home to the
// run-comparison report behind the eval subcommand.

namespace ecgfed {

// ---------------------------------------------------------------------------
// Config text -> section tree
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

}  // namespace detail

// Parses the sectioned text format into {section: {key: "value"}}. Lines are
// `[section]`, `key = value`, blanks, and comments (# or ; at line start, or
// preceded by whitespace for trailing comments). JSON input (first non-space
// character '{') is parsed as {section: {key: scalar-or-array}} directly.
inline json parse_config_text(const std::string& text) {
  std::size_t first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    json j = json::parse(text);
    if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
    for (const auto& [sec, body] : j.items())
      if (!body.is_object())
        throw std::invalid_argument("config: section '" + sec + "' must be an object");
    return j;
  }
  json tree = json::object();
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = raw;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if ((line[i] == '#' || line[i] == ';') &&
          (i == 0 || std::isspace(static_cast<unsigned char>(line[i - 1])))) {
        line.erase(i);
        break;
      }
    }
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(lineno) + ": unterminated section");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty section name");
      if (!tree.contains(section)) tree[section] = json::object();
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": key outside any [section]");
    std::string key = detail::trim(line.substr(0, eq));
    std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    if (tree[section].contains(key))
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": duplicate key '" +
                                  section + "." + key + "'");
    tree[section][key] = val;
  }
  return tree;
}

// ---------------------------------------------------------------------------
// Typed getters over the tree (strings from the text format, native scalars
// from JSON) with consumed-key tracking for unknown-key rejection.
// ---------------------------------------------------------------------------

namespace detail {

struct ConfigCursor {
  const json& tree;
  std::set<std::string> used;  // "section.key"

  const json* find(const std::string& sec, const std::string& key) {
    auto its = tree.find(sec);
    if (its == tree.end()) return nullptr;
    auto itk = its->find(key);
    if (itk == its->end()) return nullptr;
    used.insert(sec + "." + key);
    return &*itk;
  }

  void check_all_used() const {
    for (const auto& [sec, body] : tree.items())
      for (const auto& [key, val] : body.items())
        if (!used.count(sec + "." + key))
          throw std::invalid_argument("config: unknown key '" + sec + "." + key + "'");
  }
};

inline double scalar_double(const json& v, const std::string& where) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const std::string& s = v.get_ref<const std::string&>();
    std::size_t pos = 0;
    double out;
    try {
      out = std::stod(s, &pos);
    } catch (...) {
      throw std::invalid_argument("config: " + where + " is not a number: '" + s + "'");
    }
    if (trim(s.substr(pos)) != "")
      throw std::invalid_argument("config: " + where + " is not a number: '" + s + "'");
    return out;
  }
  throw std::invalid_argument("config: " + where + " must be a number");
}

inline long long scalar_int(const json& v, const std::string& where) {
  double d = scalar_double(v, where);
  long long n = static_cast<long long>(std::llround(d));
  if (static_cast<double>(n) != d)
    throw std::invalid_argument("config: " + where + " must be an integer");
  return n;
}

inline bool scalar_bool(const json& v, const std::string& where) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_string()) {
    std::string s = v.get<std::string>();
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  }
  throw std::invalid_argument("config: " + where + " must be a boolean");
}

inline std::string scalar_str(const json& v, const std::string& where) {
  if (v.is_string()) return v.get<std::string>();
  throw std::invalid_argument("config: " + where + " must be a string");
}

inline std::vector<double> list_double(const json& v, const std::string& where) {
  std::vector<double> out;
  if (v.is_array()) {
    for (const auto& e : v) out.push_back(scalar_double(e, where));
    return out;
  }
  if (v.is_string()) {
    std::stringstream ss(v.get<std::string>());
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(scalar_double(json(item), where));
    }
    return out;
  }
  throw std::invalid_argument("config: " + where + " must be a list");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Schema resolution
// ---------------------------------------------------------------------------

struct ResolvedConfig {
  synthgen::DatasetConfig dataset;
  ExperimentSpec spec;
  fs::path dataset_dir;  // where train reads pages from
  fs::path run_dir;      // where train writes
  std::vector<std::uint64_t> eval_seeds;
  std::uint64_t bootstrap_b = 10000;
  json resolved;  // every field, defaults filled
};

// Resolves a parsed section tree against the schema: unknown keys are an
// error, and every default lands in `resolved` so the manifest documents the
// complete effective configuration.
inline ResolvedConfig resolve_config(const json& tree, const fs::path& config_dir = ".") {
  detail::ConfigCursor cur{tree, {}};
  ResolvedConfig rc;

  auto num = [&](const char* sec, const char* key, double dflt) {
    const json* v = cur.find(sec, key);
    return v ? detail::scalar_double(*v, std::string(sec) + "." + key) : dflt;
  };
  auto inum = [&](const char* sec, const char* key, long long dflt) {
    const json* v = cur.find(sec, key);
    return v ? detail::scalar_int(*v, std::string(sec) + "." + key) : dflt;
  };
  auto boolean = [&](const char* sec, const char* key, bool dflt) {
    const json* v = cur.find(sec, key);
    return v ? detail::scalar_bool(*v, std::string(sec) + "." + key) : dflt;
  };
  auto str = [&](const char* sec, const char* key, const std::string& dflt) {
    const json* v = cur.find(sec, key);
    return v ? detail::scalar_str(*v, std::string(sec) + "." + key) : dflt;
  };
  auto list = [&](const char* sec, const char* key,
                  const std::vector<double>& dflt) {
    const json* v = cur.find(sec, key);
    return v ? detail::list_double(*v, std::string(sec) + "." + key) : dflt;
  };

  // dataset
  rc.dataset.seed = static_cast<std::uint64_t>(inum("dataset", "seed", 1));
  rc.dataset.fs = num("dataset", "fs", 100.0);
  rc.dataset.hr_lo = num("dataset", "hr_lo", 55.0);
  rc.dataset.hr_hi = num("dataset", "hr_hi", 95.0);
  rc.dataset.train_fraction = num("dataset", "train_fraction", 0.8);
  rc.dataset_dir = str("dataset", "dir", "dataset");
  std::string profiles = str("dataset", "profiles", "builtin");
  if (profiles != "builtin") {
    fs::path p = profiles;
    if (p.is_relative()) p = config_dir / p;
    json jp = json::parse(read_file(p));
    rc.dataset.profiles = jp.get<std::vector<synthgen::ClientProfile>>();
    if (rc.dataset.profiles.empty())
      throw std::invalid_argument("config: dataset.profiles file holds no profiles");
  }
  std::vector<double> dflt_pages;
  for (const auto& pr : rc.dataset.profiles) dflt_pages.push_back(pr.n_pages);
  std::vector<double> pages = list("dataset", "pages", dflt_pages);
  if (pages.size() != rc.dataset.profiles.size())
    throw std::invalid_argument("config: dataset.pages must list one count per profile");
  for (std::size_t i = 0; i < pages.size(); ++i) {
    long long n = static_cast<long long>(std::llround(pages[i]));
    if (static_cast<double>(n) != pages[i] || n < 1)
      throw std::invalid_argument("config: dataset.pages entries must be positive integers");
    rc.dataset.profiles[i].n_pages = static_cast<int>(n);
  }

  // model
  std::vector<double> ch = list("model", "channels", {8, 16, 32});
  if (ch.size() != 3) throw std::invalid_argument("config: model.channels needs 3 entries");
  rc.spec.net.channels = {static_cast<int>(ch[0]), static_cast<int>(ch[1]),
                          static_cast<int>(ch[2])};
  rc.spec.net.patch = static_cast<int>(inum("model", "patch", rc.spec.net.patch));
  rc.spec.net.batch = static_cast<int>(inum("model", "batch", rc.spec.net.batch));
  rc.spec.net.in_eps = num("model", "in_eps", rc.spec.net.in_eps);
  rc.spec.net.lrelu_slope = num("model", "lrelu_slope", rc.spec.net.lrelu_slope);
  rc.spec.net.ds_main = num("model", "ds_main", rc.spec.net.ds_main);
  rc.spec.net.ds_aux = num("model", "ds_aux", rc.spec.net.ds_aux);
  rc.spec.net.lambda_dice = num("model", "lambda_dice", rc.spec.net.lambda_dice);
  rc.spec.net.dice_eps = num("model", "dice_eps", rc.spec.net.dice_eps);

  // federation
  rc.spec.seed = static_cast<std::uint64_t>(inum("federation", "seed", 1));
  rc.spec.aggregator = aggregator_from(str("federation", "aggregator", "fedadam"));
  rc.spec.centralized = boolean("federation", "centralized", false);
  rc.spec.rounds = static_cast<int>(inum("federation", "rounds", rc.spec.rounds));
  rc.spec.local_epochs = static_cast<int>(inum("federation", "local_epochs", rc.spec.local_epochs));
  rc.spec.k_min = static_cast<int>(inum("federation", "k_min", rc.spec.k_min));
  rc.spec.prox_mu = num("federation", "prox_mu", rc.spec.prox_mu);
  rc.spec.server_lr = num("federation", "server_lr", rc.spec.server_lr);
  rc.spec.server_beta1 = num("federation", "server_beta1", rc.spec.server_beta1);
  rc.spec.server_beta2 = num("federation", "server_beta2", rc.spec.server_beta2);
  rc.spec.adaptivity_tau = num("federation", "adaptivity_tau", rc.spec.adaptivity_tau);
  rc.spec.participation = num("federation", "participation", rc.spec.participation);
  rc.spec.retry_budget = static_cast<int>(inum("federation", "retry_budget", rc.spec.retry_budget));
  rc.spec.workers = static_cast<int>(inum("federation", "workers", rc.spec.workers));

  // optimizer (local AdamW template)
  rc.spec.opt.peak_lr = num("optimizer", "peak_lr", rc.spec.opt.peak_lr);
  rc.spec.opt.floor_lr = num("optimizer", "floor_lr", rc.spec.opt.floor_lr);
  rc.spec.opt.warmup_steps = inum("optimizer", "warmup_steps", rc.spec.opt.warmup_steps);
  rc.spec.opt.total_steps = inum("optimizer", "total_steps", rc.spec.opt.total_steps);
  rc.spec.opt.beta1 = num("optimizer", "beta1", rc.spec.opt.beta1);
  rc.spec.opt.beta2 = num("optimizer", "beta2", rc.spec.opt.beta2);
  rc.spec.opt.eps = num("optimizer", "eps", rc.spec.opt.eps);
  rc.spec.opt.weight_decay = num("optimizer", "weight_decay", rc.spec.opt.weight_decay);
  rc.spec.opt.clip_norm = num("optimizer", "clip_norm", rc.spec.opt.clip_norm);

  // privacy
  rc.spec.dp.enabled = boolean("privacy", "enabled", false);
  rc.spec.use_secagg = boolean("privacy", "secagg", rc.spec.dp.enabled);
  rc.spec.dp.sigma = num("privacy", "sigma", rc.spec.dp.sigma);
  rc.spec.dp.C = num("privacy", "clip_c", rc.spec.dp.C);
  rc.spec.dp.delta = num("privacy", "delta", rc.spec.dp.delta);

  // data sampling
  rc.spec.patch_px = static_cast<int>(inum("data", "patch_px", rc.spec.patch_px));
  rc.spec.val_patches_per_page =
      static_cast<int>(inum("data", "val_patches_per_page", rc.spec.val_patches_per_page));

  // eval
  std::vector<double> miles = list("eval", "milestones", {});
  rc.spec.milestones.clear();
  for (double m : miles) rc.spec.milestones.push_back(static_cast<int>(m));
  std::vector<double> seeds = list("eval", "seeds", {1, 2, 3, 4, 5});
  for (double s : seeds) rc.eval_seeds.push_back(static_cast<std::uint64_t>(s));
  rc.bootstrap_b = static_cast<std::uint64_t>(inum("eval", "bootstrap_b", 10000));
  rc.spec.final_page_eval = boolean("eval", "final_page_eval", true);
  rc.spec.eval_tile = static_cast<int>(inum("eval", "tile", rc.spec.eval_tile));
  rc.spec.eval_overlap = num("eval", "overlap", rc.spec.eval_overlap);

  // io
  rc.run_dir = str("io", "run_dir", "runs/run");

  cur.check_all_used();

  json resolved = spec_to_json(rc.spec);
  resolved["dataset"] = {{"seed", rc.dataset.seed},
                         {"fs", rc.dataset.fs},
                         {"hr_lo", rc.dataset.hr_lo},
                         {"hr_hi", rc.dataset.hr_hi},
                         {"train_fraction", rc.dataset.train_fraction},
                         {"dir", rc.dataset_dir.string()},
                         {"profiles", rc.dataset.profiles}};
  resolved["eval"]["seeds"] = rc.eval_seeds;
  resolved["eval"]["bootstrap_b"] = rc.bootstrap_b;
  resolved["io"] = {{"run_dir", rc.run_dir.string()}};
  rc.resolved = resolved;
  rc.spec.resolved_config_json = resolved.dump(2);
  return rc;
}

inline ResolvedConfig load_config_file(const fs::path& path) {
  return resolve_config(parse_config_text(read_file(path)), path.parent_path());
}

// ---------------------------------------------------------------------------
// Run comparison (the eval subcommand)
// ---------------------------------------------------------------------------

// One run's per-page Dice table keyed by record id.
struct RunPages {
  std::string name;
  std::map<std::string, std::pair<std::string, double>> dice;  // record -> (profile, dice)
};

inline RunPages load_run_pages(const fs::path& run_dir) {
  RunPages rp;
  rp.name = run_dir.filename().string();
  std::string text = read_file(run_dir / "page_dice.csv");
  std::istringstream in(text);
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {  // column header
      header_seen = true;
      continue;
    }
    std::vector<std::string> f = split_csv_line(line);
    if (f.size() != 4) throw std::runtime_error("page_dice.csv: malformed row in " + rp.name);
    rp.dice[f[2]] = {f[1], std::stod(f[3])};
  }
  if (rp.dice.empty()) throw std::runtime_error("page_dice.csv holds no rows in " + rp.name);
  return rp;
}

// Pairwise paired comparison over run directories on the shared validation
// pages: mean Dice difference, bias-corrected Hedges' g, a stratified BCa
// interval (strata = profiles), and Holm-corrected paired t decisions across
// all pairs.
inline json compare_runs(const std::vector<fs::path>& run_dirs, std::uint64_t B = 10000,
                         double level = 0.95, double alpha = 0.05, std::uint64_t seed = 0) {
  if (run_dirs.size() < 2) throw std::invalid_argument("compare_runs: need at least two runs");
  std::vector<RunPages> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run_pages(d));
  for (std::size_t i = 1; i < runs.size(); ++i) {
    if (runs[i].dice.size() != runs[0].dice.size())
      throw std::runtime_error("runs cover different validation pages");
    for (const auto& [rec, pd] : runs[0].dice)
      if (!runs[i].dice.count(rec))
        throw std::runtime_error("runs cover different validation pages (missing " + rec + ")");
  }

  // Stable record order and profile strata from the first run.
  std::vector<std::string> recs;
  std::vector<int> strata;
  std::map<std::string, int> stratum_of;
  for (const auto& [rec, pd] : runs[0].dice) {
    recs.push_back(rec);
    auto it = stratum_of.find(pd.first);
    if (it == stratum_of.end())
      it = stratum_of.emplace(pd.first, static_cast<int>(stratum_of.size())).first;
    strata.push_back(it->second);
  }

  json out;
  out["runs"] = json::array();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    double mean = 0.0;
    for (const auto& [rec, pd] : runs[i].dice) mean += pd.second;
    mean /= static_cast<double>(runs[i].dice.size());
    out["runs"].push_back({{"name", runs[i].name},
                           {"dir", run_dirs[i].string()},
                           {"pages", runs[i].dice.size()},
                           {"mean_page_dice", mean}});
  }

  std::vector<std::vector<double>> diffs_per_pair;
  std::vector<std::pair<std::size_t, std::size_t>> pair_idx;
  for (std::size_t a = 0; a < runs.size(); ++a)
    for (std::size_t b = a + 1; b < runs.size(); ++b) {
      std::vector<double> d;
      d.reserve(recs.size());
      for (const auto& rec : recs)
        d.push_back(runs[a].dice.at(rec).second - runs[b].dice.at(rec).second);
      diffs_per_pair.push_back(std::move(d));
      pair_idx.push_back({a, b});
    }
  std::vector<PairTestResult> tests = paired_t_holm(diffs_per_pair, alpha);

  out["pairs"] = json::array();
  for (std::size_t k = 0; k < pair_idx.size(); ++k) {
    const auto& d = diffs_per_pair[k];
    double delta = 0.0;
    for (double x : d) delta += x;
    delta /= static_cast<double>(d.size());
    json jp;
    jp["a"] = runs[pair_idx[k].first].name;
    jp["b"] = runs[pair_idx[k].second].name;
    jp["delta"] = delta;
    try {
      jp["hedges_g"] = hedges_g_paired(d);
    } catch (const std::invalid_argument&) {
      jp["hedges_g"] = nullptr;  // zero spread: effect size undefined
    }
    try {
      CiResult ci = bca_ci(d, strata, B, level, seed);
      jp["ci"] = {{"lower", ci.lower}, {"upper", ci.upper}, {"level", ci.level}, {"b", ci.B}};
    } catch (const std::invalid_argument&) {
      jp["ci"] = nullptr;  // fewer than two strata
    }
    jp["t"] = tests[k].t ? json(*tests[k].t) : json(nullptr);
    jp["p"] = tests[k].p ? json(*tests[k].p) : json(nullptr);
    jp["reject"] = tests[k].reject;
    out["pairs"].push_back(jp);
  }
  out["alpha"] = alpha;
  out["correction"] = "holm";
  return out;
}

}  // namespace ecgfed
