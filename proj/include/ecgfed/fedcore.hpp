#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "ecgfed/core/image.hpp"
#include "ecgfed/core/io.hpp"
#include "ecgfed/core/rng.hpp"
#include "ecgfed/digitize.hpp"
#include "ecgfed/dpcore.hpp"
#include "ecgfed/evalstats.hpp"
#include "ecgfed/raster.hpp"
#include "ecgfed/secagg.hpp"
#include "ecgfed/segnet.hpp"

#include <json.hpp>

// Synchronous-round federated orchestration over in-memory clients: broadcast,
// concurrent local training, the clip -> mask -> sum secure path with optional
// central Gaussian noise, the three server aggregation rules, and the
// experiment loop with atomically committed rounds, milestone checkpoints,
// and resume. The centralized baseline is the same loop run over a single
// pooled client, so the "single-client federation == centralized" identity
// holds by construction.
//
// Determinism contract: no long-lived RNG lives in this module. Every draw
// (participation, patches, shuffles, noise, masks) uses a seed derived
// functionally from the experiment seed and the (round, epoch, page, client)
// coordinates, so an interrupted run resumed from the last committed round
// replays the exact bytes of an uninterrupted one. Wall-clock goes to a
// separate timing file that is excluded from that promise.

namespace ecgfed {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kCodeVersion = "ecgfed 1.0";

// ---------------------------------------------------------------------------
// Plans and server state
// ---------------------------------------------------------------------------

enum class Aggregator { fedavg, fedprox, fedadam };

inline const char* aggregator_name(Aggregator a) {
  switch (a) {
    case Aggregator::fedavg: return "fedavg";
    case Aggregator::fedprox: return "fedprox";
    case Aggregator::fedadam: return "fedadam";
  }
  return "?";
}

inline Aggregator aggregator_from(std::string_view s) {
  if (s == "fedavg") return Aggregator::fedavg;
  if (s == "fedprox") return Aggregator::fedprox;
  if (s == "fedadam") return Aggregator::fedadam;
  throw std::invalid_argument("unknown aggregator: " + std::string(s));
}

struct RoundPlan {
  long long round = 0;  // 1-based committed-round number
  std::vector<int> participants;
  std::vector<double> weights;  // n_k / N over the participants, same order
  int local_epochs = 1;
  Aggregator aggregator = Aggregator::fedavg;
  int k_min = 3;
};

inline void validate_plan(const RoundPlan& p) {
  if (p.participants.empty()) throw std::invalid_argument("plan: no participants");
  if (p.participants.size() != p.weights.size())
    throw std::invalid_argument("plan: participants/weights size mismatch");
  if (p.local_epochs < 1) throw std::invalid_argument("plan: local_epochs must be >= 1");
  double sum = 0.0;
  for (double w : p.weights) {
    if (!(w > 0.0)) throw std::invalid_argument("plan: weights must be positive");
    sum += w;
  }
  if (std::fabs(sum - 1.0) > 1e-12)
    throw std::invalid_argument("plan: weights must sum to 1 within 1e-12");
}

struct ServerState {
  ParamVec global_params;
  ParamVec fedadam_m, fedadam_v;  // zero until the first fedadam round
  double server_lr = 1e-2;
  double server_beta1 = 0.9, server_beta2 = 0.99;
  double adaptivity_tau = 1e-3;
  long long round = 0;       // committed rounds so far
  long long adam_steps = 0;  // fedadam updates applied (bias correction)
};

// theta <- theta + weighted_sum.
inline ParamVec agg_fedavg(const ParamVec& global, const std::vector<double>& weighted_sum) {
  if (global.size() != weighted_sum.size())
    throw std::invalid_argument("agg_fedavg: size mismatch");
  ParamVec out = global;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += weighted_sum[i];
  return out;
}

// Adam on the server driven by g = sum_k w_k * delta_k; moments persist.
inline void agg_fedadam(ServerState& st, const std::vector<double>& g) {
  if (st.global_params.size() != g.size()) throw std::invalid_argument("agg_fedadam: size mismatch");
  if (st.fedadam_m.empty()) {
    st.fedadam_m.assign(g.size(), 0.0);
    st.fedadam_v.assign(g.size(), 0.0);
  }
  if (st.fedadam_m.size() != g.size())
    throw std::invalid_argument("agg_fedadam: moment size mismatch");
  const long long t = st.adam_steps + 1;
  const double bc1 = 1.0 - std::pow(st.server_beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(st.server_beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < g.size(); ++i) {
    st.fedadam_m[i] = st.server_beta1 * st.fedadam_m[i] + (1.0 - st.server_beta1) * g[i];
    st.fedadam_v[i] = st.server_beta2 * st.fedadam_v[i] + (1.0 - st.server_beta2) * g[i] * g[i];
    double mhat = st.fedadam_m[i] / bc1, vhat = st.fedadam_v[i] / bc2;
    st.global_params[i] += st.server_lr * mhat / (std::sqrt(vhat) + st.adaptivity_tau);
  }
  ++st.adam_steps;
}

// ---------------------------------------------------------------------------
// Client data: pages packed to a uint8 normalized image plus the mask, with
// cached foreground pixel indices for biased patch sampling.
// ---------------------------------------------------------------------------

struct PackedPage {
  int w = 0, h = 0;
  std::vector<std::uint8_t> img;  // robust-normalized, round(255 * x)
  BinMask mask;
  std::vector<std::uint32_t> fg;  // mask foreground indices (y * w + x)
  std::uint64_t gid = 0;          // stable page id (seeds patch draws)
  std::string rid;                // record id for reports
};

inline PackedPage pack_page(const GrayImage& image, const BinMask& mask, const std::string& rid) {
  if (image.w != mask.w || image.h != mask.h)
    throw std::invalid_argument("pack_page: image/mask shape mismatch");
  PackedPage out;
  out.w = image.w;
  out.h = image.h;
  out.rid = rid;
  out.gid = fnv1a64(rid);
  GrayImage norm = raster::robust_normalize(image);
  out.img.resize(norm.px.size());
  for (std::size_t i = 0; i < norm.px.size(); ++i)
    out.img[i] = static_cast<std::uint8_t>(
        std::lround(std::clamp(norm.px[i], 0.0, 1.0) * 255.0));
  out.mask = mask;
  for (std::size_t i = 0; i < mask.px.size(); ++i)
    if (mask.px[i]) out.fg.push_back(static_cast<std::uint32_t>(i));
  return out;
}

// One training example: 50% of draws center on a random foreground pixel
// (clamped into bounds), the rest are uniform over valid origins. Draw order
// is part of the on-disk determinism contract: u01 (bias coin), then either
// one uniform_int over the foreground list or two over the origin ranges.
inline Sample sample_patch(const PackedPage& pg, int patch_px, std::uint64_t seed) {
  if (patch_px < 4 || patch_px > pg.w || patch_px > pg.h)
    throw std::invalid_argument("sample_patch: patch does not fit the page");
  RandStream rs(seed);
  int x0 = 0, y0 = 0;
  bool biased = rs.u01() < 0.5 && !pg.fg.empty();
  if (biased) {
    std::uint32_t idx = pg.fg[static_cast<std::size_t>(
        rs.uniform_int(static_cast<std::int64_t>(pg.fg.size())))];
    int cx = static_cast<int>(idx % static_cast<std::uint32_t>(pg.w));
    int cy = static_cast<int>(idx / static_cast<std::uint32_t>(pg.w));
    x0 = std::clamp(cx - patch_px / 2, 0, pg.w - patch_px);
    y0 = std::clamp(cy - patch_px / 2, 0, pg.h - patch_px);
  } else {
    x0 = static_cast<int>(rs.uniform_int(pg.w - patch_px + 1));
    y0 = static_cast<int>(rs.uniform_int(pg.h - patch_px + 1));
  }
  Sample s;
  s.patch = GrayImage(patch_px, patch_px);
  s.mask = BinMask(patch_px, patch_px);
  for (int y = 0; y < patch_px; ++y)
    for (int x = 0; x < patch_px; ++x) {
      std::size_t src = static_cast<std::size_t>(y0 + y) * pg.w + (x0 + x);
      s.patch.at(x, y) = pg.img[src] / 255.0;
      s.mask.at(x, y) = pg.mask.px[src];
    }
  return s;
}

struct ClientData {
  int id = 0;
  std::string profile;
  std::vector<PackedPage> train, val;
};

// Pointer view the round engine trains on; the centralized baseline pools all
// clients into one view over the same pages (no copies, same gids).
struct ClientView {
  int id = 0;
  std::string profile;
  std::vector<const PackedPage*> train, val;
  long long n() const { return static_cast<long long>(train.size()); }
};

inline std::vector<ClientView> make_views(const std::vector<ClientData>& clients,
                                          bool centralized) {
  if (clients.empty()) throw std::invalid_argument("make_views: no clients");
  std::vector<ClientView> out;
  if (centralized) {
    ClientView v;
    v.id = 0;
    v.profile = "pooled";
    for (const auto& c : clients) {
      for (const auto& p : c.train) v.train.push_back(&p);
      for (const auto& p : c.val) v.val.push_back(&p);
    }
    out.push_back(std::move(v));
  } else {
    for (const auto& c : clients) {
      ClientView v;
      v.id = c.id;
      v.profile = c.profile;
      for (const auto& p : c.train) v.train.push_back(&p);
      for (const auto& p : c.val) v.val.push_back(&p);
      out.push_back(std::move(v));
    }
  }
  for (const auto& v : out)
    if (v.train.empty()) throw std::invalid_argument("make_views: client without train pages");
  return out;
}

// Loads a dataset directory produced by the renderer (manifest.json plus PGM
// pages) into packed client data, in manifest order.
inline std::vector<ClientData> load_clients(const fs::path& dataset_dir) {
  json manifest = json::parse(read_file(dataset_dir / "manifest.json"));
  std::vector<ClientData> out;
  int id = 0;
  for (const auto& jc : manifest.at("clients")) {
    ClientData c;
    c.id = id++;
    c.profile = jc.at("name").get<std::string>();
    for (const auto& jp : jc.at("pages")) {
      GrayImage img = read_pgm(dataset_dir / jp.at("image").get<std::string>());
      BinMask mask = read_pgm_mask(dataset_dir / jp.at("mask").get<std::string>());
      PackedPage pg = pack_page(img, mask, jp.at("record_id").get<std::string>());
      if (jp.at("split").get<std::string>() == "train")
        c.train.push_back(std::move(pg));
      else
        c.val.push_back(std::move(pg));
    }
    out.push_back(std::move(c));
  }
  if (out.empty()) throw std::runtime_error("load_clients: dataset has no clients");
  return out;
}

// ---------------------------------------------------------------------------
// Experiment specification (already resolved; file parsing lives in the
// harness) and per-round records.
// ---------------------------------------------------------------------------

struct ExperimentSpec {
  NetConfig net;
  Aggregator aggregator = Aggregator::fedadam;
  bool centralized = false;
  int rounds = 30;
  int local_epochs = 1;
  int k_min = 3;
  double prox_mu = 0.01;
  double server_lr = 1e-2;
  double server_beta1 = 0.9, server_beta2 = 0.99;
  double adaptivity_tau = 1e-3;
  double participation = 1.0;
  int retry_budget = 3;
  int patch_px = 64;
  int val_patches_per_page = 2;
  OptState opt;  // local AdamW template, copied per client
  DpConfig dp;
  bool use_secagg = false;
  std::uint64_t seed = 1;
  int workers = 0;  // 0 = one per participant
  bool final_page_eval = true;
  int eval_tile = 128;
  double eval_overlap = 0.25;
  std::vector<int> milestones;  // empty = {10, 20, 40, rounds} clipped
  int stop_after_round = 0;     // testing knob: pause after N commits (excluded from hash)
  std::string resolved_config_json;  // optional: harness-resolved config for the manifest
};

inline std::vector<int> milestones_for(const ExperimentSpec& s) {
  std::vector<int> m = s.milestones;
  if (m.empty()) m = {10, 20, 40, s.rounds};
  std::vector<int> out;
  for (int v : m)
    if (v >= 1 && v <= s.rounds) out.push_back(v);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline json spec_to_json(const ExperimentSpec& s) {
  return {{"model",
           {{"channels", {s.net.channels[0], s.net.channels[1], s.net.channels[2]}},
            {"patch", s.net.patch},
            {"batch", s.net.batch},
            {"in_eps", s.net.in_eps},
            {"lrelu_slope", s.net.lrelu_slope},
            {"ds_main", s.net.ds_main},
            {"ds_aux", s.net.ds_aux},
            {"lambda_dice", s.net.lambda_dice},
            {"dice_eps", s.net.dice_eps}}},
          {"federation",
           {{"aggregator", aggregator_name(s.aggregator)},
            {"centralized", s.centralized},
            {"rounds", s.rounds},
            {"local_epochs", s.local_epochs},
            {"k_min", s.k_min},
            {"prox_mu", s.prox_mu},
            {"server_lr", s.server_lr},
            {"server_beta1", s.server_beta1},
            {"server_beta2", s.server_beta2},
            {"adaptivity_tau", s.adaptivity_tau},
            {"participation", s.participation},
            {"retry_budget", s.retry_budget},
            {"workers", s.workers}}},
          {"optimizer",
           {{"peak_lr", s.opt.peak_lr},
            {"floor_lr", s.opt.floor_lr},
            {"warmup_steps", s.opt.warmup_steps},
            {"total_steps", s.opt.total_steps},
            {"beta1", s.opt.beta1},
            {"beta2", s.opt.beta2},
            {"eps", s.opt.eps},
            {"weight_decay", s.opt.weight_decay},
            {"clip_norm", s.opt.clip_norm}}},
          {"privacy",
           {{"enabled", s.dp.enabled},
            {"sigma", s.dp.sigma},
            {"clip_c", s.dp.C},
            {"delta", s.dp.delta},
            {"secagg", s.use_secagg}}},
          {"data", {{"patch_px", s.patch_px}, {"val_patches_per_page", s.val_patches_per_page}}},
          {"eval",
           {{"final_page_eval", s.final_page_eval},
            {"tile", s.eval_tile},
            {"overlap", s.eval_overlap},
            {"milestones", milestones_for(s)}}},
          {"seed", s.seed}};
}

inline std::uint64_t spec_hash(const ExperimentSpec& s) {
  return fnv1a64(spec_to_json(s).dump());
}

struct RoundRecord {
  long long round = 0;  // 1-based
  std::vector<int> participants;
  std::vector<long long> n_k;
  std::vector<double> preclip_norm, postclip_norm, local_loss;
  double aggregate_norm = 0.0;
  double noise_sigma = 0.0;  // 0 when privacy off
  double val_dice = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;  // reported separately; never in deterministic files
  bool aborted = false;
  std::string abort_cause;
};

namespace detail {

inline void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  int tcount = std::max(1, std::min(workers, n));
  if (tcount == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(tcount));
  for (int t = 0; t < tcount; ++t)
    pool.emplace_back([&] {
      for (int i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!err) err = std::current_exception();
          return;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

inline double l2_norm(const std::vector<double>& v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  return std::sqrt(ss);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Round engine
// ---------------------------------------------------------------------------

// Everything the round engine holds across rounds besides ServerState.
struct FedRuntime {
  ExperimentSpec spec;
  std::vector<ClientView> views;
  std::vector<OptState> opt;  // one per view, persistent across rounds
  PairwiseSeeds pairs;        // secagg pair seeds (empty unless use_secagg)
  std::vector<Sample> val_set;
  PrivacyLedger ledger;
  long long dp_rounds = 0;  // committed rounds that invoked the mechanism
  std::vector<RoundRecord> records;
  std::vector<std::string> abort_log;
};

inline FedRuntime make_runtime(const ExperimentSpec& spec, const std::vector<ClientData>& clients) {
  FedRuntime rt;
  rt.spec = spec;
  rt.views = make_views(clients, spec.centralized);
  rt.opt.assign(rt.views.size(), spec.opt);
  if (spec.use_secagg) {
    std::vector<int> ids;
    for (const auto& v : rt.views) ids.push_back(v.id);
    rt.pairs = PairwiseSeeds::make(derive_seed(spec.seed, "pairs"), ids);
  }
  for (const auto& v : rt.views)
    for (const PackedPage* pg : v.val)
      for (int j = 0; j < spec.val_patches_per_page; ++j)
        rt.val_set.push_back(sample_patch(
            *pg, spec.patch_px,
            derive_seed(spec.seed, "valpatch", {pg->gid, static_cast<std::uint64_t>(j)})));
  return rt;
}

// Pooled-pixel Dice of the current params over the fixed validation patches.
inline double eval_val_patches(const ExperimentSpec& spec, const std::vector<Sample>& val_set,
                               const ParamVec& params) {
  if (val_set.empty()) return std::numeric_limits<double>::quiet_NaN();
  int n = static_cast<int>(val_set.size());
  std::vector<ConfusionCounts> counts(static_cast<std::size_t>(n));
  int workers = spec.workers > 0 ? spec.workers
                                 : std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
  detail::parallel_for(n, workers, [&](int i) {
    ForwardResult fr = forward_probs(spec.net, params, val_set[static_cast<std::size_t>(i)].patch);
    BinMask pred(fr.prob.w, fr.prob.h);
    for (std::size_t k = 0; k < fr.prob.px.size(); ++k) pred.px[k] = fr.prob.px[k] >= 0.5;
    counts[static_cast<std::size_t>(i)] =
        confusion(pred, val_set[static_cast<std::size_t>(i)].mask);
  });
  std::uint64_t tp = 0, fp = 0, fn = 0;
  for (const auto& c : counts) {
    tp += c.tp;
    fp += c.fp;
    fn += c.fn;
  }
  if (2 * tp + fp + fn == 0) return 1.0;
  return static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
}

// Runs one synchronous round: broadcast, concurrent local training, the
// privacy pipeline, one aggregator update, then validation. On participation
// below k_min the state is untouched and the record comes back aborted.
inline RoundRecord run_round(ServerState& state, FedRuntime& rt, const RoundPlan& plan) {
  auto t0 = std::chrono::steady_clock::now();
  RoundRecord rec;
  rec.round = plan.round;
  rec.participants = plan.participants;
  if (static_cast<int>(plan.participants.size()) < plan.k_min) {
    rec.aborted = true;
    rec.abort_cause = "participation " + std::to_string(plan.participants.size()) +
                      " below k_min " + std::to_string(plan.k_min);
    return rec;
  }
  validate_plan(plan);
  const ExperimentSpec& spec = rt.spec;
  const std::size_t dim = state.global_params.size();
  const int P = static_cast<int>(plan.participants.size());
  std::vector<int> slots(plan.participants.size());
  for (int i = 0; i < P; ++i) {
    slots[static_cast<std::size_t>(i)] = -1;
    for (std::size_t v = 0; v < rt.views.size(); ++v)
      if (rt.views[v].id == plan.participants[static_cast<std::size_t>(i)])
        slots[static_cast<std::size_t>(i)] = static_cast<int>(v);
    if (slots[static_cast<std::size_t>(i)] < 0)
      throw std::invalid_argument("run_round: unknown participant id");
  }

  rec.n_k.resize(plan.participants.size());
  rec.preclip_norm.assign(plan.participants.size(), 0.0);
  rec.postclip_norm.assign(plan.participants.size(), 0.0);
  rec.local_loss.assign(plan.participants.size(), 0.0);
  std::vector<std::vector<double>> deltas(plan.participants.size());

  const long long r0 = plan.round - 1;  // 0-based for seed derivation
  const ParamVec anchor = state.global_params;
  const bool prox = plan.aggregator == Aggregator::fedprox;
  ParamVec single_local;  // kept verbatim for the exact single-client commit
  int workers = spec.workers > 0 ? spec.workers : P;
  detail::parallel_for(P, workers, [&](int i) {
    const ClientView& cv = rt.views[static_cast<std::size_t>(slots[static_cast<std::size_t>(i)])];
    OptState& opt = rt.opt[static_cast<std::size_t>(slots[static_cast<std::size_t>(i)])];
    ParamVec params = state.global_params;
    double loss_sum = 0.0;
    long long loss_n = 0;
    for (int ep = 0; ep < plan.local_epochs; ++ep) {
      const std::uint64_t e = static_cast<std::uint64_t>(r0) *
                                  static_cast<std::uint64_t>(plan.local_epochs) +
                              static_cast<std::uint64_t>(ep);
      std::vector<Sample> data;
      data.reserve(cv.train.size());
      for (const PackedPage* pg : cv.train)
        data.push_back(sample_patch(*pg, spec.patch_px,
                                    derive_seed(spec.seed, "patch", {e, pg->gid})));
      TrainStats ts = local_train(
          spec.net, params, opt, data, 1, prox ? spec.prox_mu : 0.0, prox ? &anchor : nullptr,
          derive_seed(spec.seed, "local", {e, static_cast<std::uint64_t>(cv.id)}));
      loss_sum += ts.mean_loss * static_cast<double>(ts.steps);
      loss_n += ts.steps;
    }
    rec.local_loss[static_cast<std::size_t>(i)] =
        loss_n > 0 ? loss_sum / static_cast<double>(loss_n) : 0.0;
    rec.n_k[static_cast<std::size_t>(i)] = cv.n();
    std::vector<double> d(dim);
    for (std::size_t k = 0; k < dim; ++k) d[k] = params[k] - state.global_params[k];
    rec.preclip_norm[static_cast<std::size_t>(i)] = detail::l2_norm(d);
    deltas[static_cast<std::size_t>(i)] = std::move(d);
    if (P == 1) single_local = std::move(params);
  });

  // Aggregation barrier: the weighted sum, through the secure path when on.
  std::vector<double> g;
  if (spec.use_secagg) {
    std::vector<FixedVec> masked(plan.participants.size());
    for (int i = 0; i < P; ++i) {
      auto [clipped, rep] =
          clip_update(deltas[static_cast<std::size_t>(i)], spec.dp.C,
                      plan.participants[static_cast<std::size_t>(i)]);
      rec.postclip_norm[static_cast<std::size_t>(i)] = detail::l2_norm(clipped);
      FixedVec enc = encode_fixed(clipped, plan.weights[static_cast<std::size_t>(i)]);
      masked[static_cast<std::size_t>(i)] = add_ring(
          enc, mask_for(plan.participants[static_cast<std::size_t>(i)],
                        static_cast<std::uint64_t>(plan.round), plan.participants, rt.pairs, dim));
    }
    g = masked_sum(masked, static_cast<std::size_t>(plan.k_min));
  } else {
    for (int i = 0; i < P; ++i)
      rec.postclip_norm[static_cast<std::size_t>(i)] = rec.preclip_norm[static_cast<std::size_t>(i)];
    g.assign(dim, 0.0);
    for (int i = 0; i < P; ++i) {
      const double w = plan.weights[static_cast<std::size_t>(i)];
      const std::vector<double>& d = deltas[static_cast<std::size_t>(i)];
      for (std::size_t k = 0; k < dim; ++k) g[k] += w * d[k];
    }
  }
  if (spec.dp.enabled) {
    g = add_central_noise(g, spec.dp, derive_seed(spec.seed, "noise", {static_cast<std::uint64_t>(r0)}),
                          rt.ledger);
    rec.noise_sigma = spec.dp.sigma;
    ++rt.dp_rounds;
    if (static_cast<long long>(rt.ledger.rounds_applied()) != rt.dp_rounds)
      throw std::logic_error("privacy ledger out of step with committed rounds");
  }
  rec.aggregate_norm = detail::l2_norm(g);

  switch (plan.aggregator) {
    case Aggregator::fedavg:
    case Aggregator::fedprox:
      if (P == 1 && plan.weights[0] == 1.0 && !spec.use_secagg && !spec.dp.enabled) {
        // w = 1: the new global is the client's locally trained params exactly.
        state.global_params = std::move(single_local);
      } else {
        state.global_params = agg_fedavg(state.global_params, g);
      }
      break;
    case Aggregator::fedadam:
      agg_fedadam(state, g);
      break;
  }
  ++state.round;
  rec.val_dice = eval_val_patches(spec, rt.val_set, state.global_params);
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

// Participant draw for one attempt: everyone at participation 1.0, otherwise
// a seeded fixed-size subset (ascending ids either way).
inline std::vector<int> draw_participants(const ExperimentSpec& spec,
                                          const std::vector<ClientView>& views, long long round_1b,
                                          int attempt) {
  std::vector<int> ids;
  for (const auto& v : views) ids.push_back(v.id);
  std::sort(ids.begin(), ids.end());
  if (spec.participation >= 1.0) return ids;
  int target = static_cast<int>(std::llround(spec.participation * static_cast<double>(ids.size())));
  target = std::clamp(target, 0, static_cast<int>(ids.size()));
  RandStream rs(derive_seed(spec.seed, "part",
                            {static_cast<std::uint64_t>(round_1b), static_cast<std::uint64_t>(attempt)}));
  for (std::size_t i = ids.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rs.uniform_int(static_cast<std::int64_t>(i)));
    std::swap(ids[i - 1], ids[j]);
  }
  ids.resize(static_cast<std::size_t>(target));
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline RoundPlan plan_for(const ExperimentSpec& spec, const std::vector<ClientView>& views,
                          long long round_1b, int attempt) {
  RoundPlan plan;
  plan.round = round_1b;
  plan.aggregator = spec.aggregator;
  plan.local_epochs = spec.local_epochs;
  plan.k_min = spec.k_min;
  plan.participants = draw_participants(spec, views, round_1b, attempt);
  long long total = 0;
  for (int id : plan.participants)
    for (const auto& v : views)
      if (v.id == id) total += v.n();
  for (int id : plan.participants)
    for (const auto& v : views)
      if (v.id == id)
        plan.weights.push_back(static_cast<double>(v.n()) / static_cast<double>(total));
  return plan;
}

// ---------------------------------------------------------------------------
// Run-state serialization (atomic resume file)
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& s, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  put_u64(s, u);
}
inline void put_str(std::string& s, const std::string& v) {
  put_u64(s, v.size());
  s.append(v);
}
inline void put_f64v(std::string& s, const std::vector<double>& v) {
  put_u64(s, v.size());
  for (double x : v) put_f64(s, x);
}

struct Reader {
  const std::string& s;
  std::size_t pos = 0;
  explicit Reader(const std::string& bytes) : s(bytes) {}
  std::uint64_t u64() {
    if (pos + 8 > s.size()) throw std::runtime_error("run state: truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    std::uint64_t u = u64();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }
  std::string str() {
    std::uint64_t n = u64();
    if (pos + n > s.size()) throw std::runtime_error("run state: truncated string");
    std::string v = s.substr(pos, n);
    pos += n;
    return v;
  }
  std::vector<double> f64v() {
    std::uint64_t n = u64();
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }
};

}  // namespace detail

inline std::string serialize_run_state(const ExperimentSpec& spec, const ServerState& st,
                                       const FedRuntime& rt) {
  std::string s = "ecgfedrun 1\n";
  detail::put_u64(s, spec_hash(spec));
  detail::put_u64(s, static_cast<std::uint64_t>(st.round));
  detail::put_u64(s, static_cast<std::uint64_t>(st.adam_steps));
  detail::put_f64v(s, st.global_params);
  detail::put_f64v(s, st.fedadam_m);
  detail::put_f64v(s, st.fedadam_v);
  detail::put_u64(s, rt.opt.size());
  for (const auto& o : rt.opt) {
    detail::put_u64(s, static_cast<std::uint64_t>(o.step));
    detail::put_f64v(s, o.m);
    detail::put_f64v(s, o.v);
  }
  detail::put_f64v(s, rt.ledger.sigma_history);
  detail::put_f64v(s, rt.ledger.c_history);
  detail::put_u64(s, static_cast<std::uint64_t>(rt.dp_rounds));
  detail::put_u64(s, rt.records.size());
  for (const auto& r : rt.records) {
    detail::put_u64(s, static_cast<std::uint64_t>(r.round));
    detail::put_u64(s, r.participants.size());
    for (int p : r.participants) detail::put_u64(s, static_cast<std::uint64_t>(p));
    detail::put_u64(s, r.n_k.size());
    for (long long n : r.n_k) detail::put_u64(s, static_cast<std::uint64_t>(n));
    detail::put_f64v(s, r.preclip_norm);
    detail::put_f64v(s, r.postclip_norm);
    detail::put_f64v(s, r.local_loss);
    detail::put_f64(s, r.aggregate_norm);
    detail::put_f64(s, r.noise_sigma);
    detail::put_f64(s, r.val_dice);
  }
  detail::put_u64(s, rt.abort_log.size());
  for (const auto& a : rt.abort_log) detail::put_str(s, a);
  return s;
}

inline void restore_run_state(const std::string& bytes, const ExperimentSpec& spec,
                              ServerState& st, FedRuntime& rt) {
  const std::string magic = "ecgfedrun 1\n";
  if (bytes.rfind(magic, 0) != 0) throw std::runtime_error("run state: bad magic");
  detail::Reader rd(bytes);
  rd.pos = magic.size();
  if (rd.u64() != spec_hash(spec))
    throw std::runtime_error("run state belongs to a different experiment config");
  st.round = static_cast<long long>(rd.u64());
  st.adam_steps = static_cast<long long>(rd.u64());
  st.global_params = rd.f64v();
  st.fedadam_m = rd.f64v();
  st.fedadam_v = rd.f64v();
  std::uint64_t nopt = rd.u64();
  if (nopt != rt.opt.size()) throw std::runtime_error("run state: client count mismatch");
  for (auto& o : rt.opt) {
    o.step = static_cast<long long>(rd.u64());
    o.m = rd.f64v();
    o.v = rd.f64v();
  }
  rt.ledger = PrivacyLedger{};
  std::vector<double> sig = rd.f64v(), cc = rd.f64v();
  if (sig.size() != cc.size()) throw std::runtime_error("run state: ledger mismatch");
  for (std::size_t i = 0; i < sig.size(); ++i) rt.ledger.record_round(sig[i], cc[i]);
  rt.dp_rounds = static_cast<long long>(rd.u64());
  std::uint64_t nrec = rd.u64();
  rt.records.clear();
  for (std::uint64_t i = 0; i < nrec; ++i) {
    RoundRecord r;
    r.round = static_cast<long long>(rd.u64());
    std::uint64_t np = rd.u64();
    for (std::uint64_t k = 0; k < np; ++k) r.participants.push_back(static_cast<int>(rd.u64()));
    std::uint64_t nn = rd.u64();
    for (std::uint64_t k = 0; k < nn; ++k) r.n_k.push_back(static_cast<long long>(rd.u64()));
    r.preclip_norm = rd.f64v();
    r.postclip_norm = rd.f64v();
    r.local_loss = rd.f64v();
    r.aggregate_norm = rd.f64();
    r.noise_sigma = rd.f64();
    r.val_dice = rd.f64();
    rt.records.push_back(std::move(r));
  }
  std::uint64_t nab = rd.u64();
  rt.abort_log.clear();
  for (std::uint64_t i = 0; i < nab; ++i) rt.abort_log.push_back(rd.str());
}

// ---------------------------------------------------------------------------
// Deterministic report files
// ---------------------------------------------------------------------------

inline std::string records_csv(const std::vector<RoundRecord>& records) {
  std::string s = "# ecgfed round records v1\n";
  s += "round,client,n_k,preclip_norm,postclip_norm,val_dice,local_loss,noise_sigma\n";
  for (const auto& r : records)
    for (std::size_t i = 0; i < r.participants.size(); ++i) {
      s += std::to_string(r.round) + ',' + std::to_string(r.participants[i]) + ',' +
           std::to_string(r.n_k[i]) + ',' + fmt_double(r.preclip_norm[i]) + ',' +
           fmt_double(r.postclip_norm[i]) + ',' + fmt_double(r.val_dice) + ',' +
           fmt_double(r.local_loss[i]) + ',' + fmt_double(r.noise_sigma) + '\n';
    }
  return s;
}

inline std::string aborts_csv(const std::vector<std::string>& abort_log) {
  std::string s = "# ecgfed aborts v1\n";
  for (const auto& a : abort_log) s += a + '\n';
  return s;
}

// ---------------------------------------------------------------------------
// Final page-level evaluation
// ---------------------------------------------------------------------------

struct PageEval {
  double tau = 0.5;
  double pooled_dice = 0.0;
  std::map<std::string, double> profile_dice;  // pooled within each profile
  // per page: client id, profile, record id, dice at the chosen tau
  struct Row {
    int client;
    std::string profile;
    std::string rid;
    double dice;
  };
  std::vector<Row> pages;
};

// Full-page tiled inference over every validation page; the binarization
// threshold is refined on the pooled validation counts over a fixed grid,
// then per-page and per-profile Dice are reported at that threshold.
inline PageEval final_page_eval(const ExperimentSpec& spec, const std::vector<ClientView>& views,
                                const ParamVec& params) {
  struct Item {
    const PackedPage* pg;
    int client;
    const std::string* profile;
  };
  std::vector<Item> items;
  for (const auto& v : views)
    for (const PackedPage* pg : v.val) items.push_back({pg, v.id, &v.profile});
  PageEval ev;
  if (items.empty()) return ev;
  std::vector<double> taus;
  for (double t = 0.30; t < 0.7049; t += 0.05) taus.push_back(t);
  const int nt = static_cast<int>(taus.size());
  std::vector<std::vector<ConfusionCounts>> counts(items.size(),
                                                   std::vector<ConfusionCounts>(nt));
  int workers = spec.workers > 0 ? spec.workers
                                 : std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
  detail::parallel_for(static_cast<int>(items.size()), workers, [&](int i) {
    const PackedPage& pg = *items[static_cast<std::size_t>(i)].pg;
    GrayImage img(pg.w, pg.h);
    for (std::size_t k = 0; k < img.px.size(); ++k) img.px[k] = pg.img[k] / 255.0;
    GrayImage prob = infer_tiled(spec.net, params, img, spec.eval_tile, spec.eval_overlap);
    for (int t = 0; t < nt; ++t) {
      ConfusionCounts c;
      for (std::size_t k = 0; k < prob.px.size(); ++k) {
        bool p = prob.px[k] >= taus[static_cast<std::size_t>(t)];
        bool gmask = pg.mask.px[k] != 0;
        if (p && gmask) ++c.tp;
        else if (p) ++c.fp;
        else if (gmask) ++c.fn;
        else ++c.tn;
      }
      counts[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)] = c;
    }
  });
  int best_t = 0;
  double best_dice = -1.0;
  for (int t = 0; t < nt; ++t) {
    std::uint64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
      tp += counts[i][static_cast<std::size_t>(t)].tp;
      fp += counts[i][static_cast<std::size_t>(t)].fp;
      fn += counts[i][static_cast<std::size_t>(t)].fn;
    }
    double d = (2 * tp + fp + fn) == 0
                   ? 1.0
                   : static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
    if (d > best_dice) {
      best_dice = d;
      best_t = t;
    }
  }
  ev.tau = taus[static_cast<std::size_t>(best_t)];
  ev.pooled_dice = best_dice;
  std::map<std::string, ConfusionCounts> by_profile;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const ConfusionCounts& c = counts[i][static_cast<std::size_t>(best_t)];
    double d = (2 * c.tp + c.fp + c.fn) == 0
                   ? 1.0
                   : static_cast<double>(2 * c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
    ev.pages.push_back({items[i].client, *items[i].profile, items[i].pg->rid, d});
    ConfusionCounts& acc = by_profile[*items[i].profile];
    acc.tp += c.tp;
    acc.fp += c.fp;
    acc.fn += c.fn;
    acc.tn += c.tn;
  }
  for (const auto& [prof, c] : by_profile)
    ev.profile_dice[prof] = (2 * c.tp + c.fp + c.fn) == 0
                                ? 1.0
                                : static_cast<double>(2 * c.tp) /
                                      static_cast<double>(2 * c.tp + c.fp + c.fn);
  return ev;
}

inline std::string page_dice_csv(const PageEval& ev) {
  std::string s = "# ecgfed page dice v1\n";
  s += "client,profile,record,dice\n";
  for (const auto& row : ev.pages)
    s += std::to_string(row.client) + ',' + row.profile + ',' + row.rid + ',' +
         fmt_double(row.dice) + '\n';
  return s;
}

// ---------------------------------------------------------------------------
// Experiment loop
// ---------------------------------------------------------------------------

struct ExperimentResult {
  ServerState server;
  std::vector<RoundRecord> records;
  json manifest;      // empty object until the run completes
  bool finished = false;
};

// Executes (or resumes) a full run in out_dir. Commit order per round:
// state.bin is atomically replaced first, then the deterministic report files
// are regenerated from it, so a kill at any point leaves either the previous
// or the new round visible, never a half-written one. Wall-clock goes to
// timing.csv only.
inline ExperimentResult run_experiment(const ExperimentSpec& spec,
                                       const std::vector<ClientData>& clients,
                                       const fs::path& out_dir) {
  if (spec.rounds < 1) throw std::invalid_argument("run_experiment: rounds must be >= 1");
  fs::create_directories(out_dir);
  FedRuntime rt = make_runtime(spec, clients);
  ServerState st;
  st.server_lr = spec.server_lr;
  st.server_beta1 = spec.server_beta1;
  st.server_beta2 = spec.server_beta2;
  st.adaptivity_tau = spec.adaptivity_tau;
  st.global_params = init_params(spec.net, derive_seed(spec.seed, "model"));

  const fs::path state_path = out_dir / "state.bin";
  if (fs::exists(state_path)) restore_run_state(read_file(state_path), spec, st, rt);

  std::vector<int> miles = milestones_for(spec);
  auto commit = [&]() {
    atomic_write_file(state_path, serialize_run_state(spec, st, rt));
    atomic_write_file(out_dir / "records.csv", records_csv(rt.records));
    atomic_write_file(out_dir / "aborts.csv", aborts_csv(rt.abort_log));
  };

  while (st.round < spec.rounds) {
    if (spec.stop_after_round > 0 && st.round >= spec.stop_after_round) {
      ExperimentResult partial;
      partial.server = st;
      partial.records = rt.records;
      return partial;  // paused for tests; a later call resumes from state.bin
    }
    const long long r1 = st.round + 1;
    bool committed = false;
    for (int attempt = 0; attempt <= spec.retry_budget && !committed; ++attempt) {
      RoundPlan plan = plan_for(spec, rt.views, r1, attempt);
      RoundRecord rec = run_round(st, rt, plan);
      if (rec.aborted) {
        rt.abort_log.push_back("round " + std::to_string(r1) + " attempt " +
                               std::to_string(attempt) + ": " + rec.abort_cause);
        continue;
      }
      rt.records.push_back(rec);
      committed = true;
      commit();
      {
        std::ofstream tf(out_dir / "timing.csv", std::ios::app);
        tf << r1 << ',' << fmt_double(rec.wall_seconds) << '\n';
      }
      if (std::find(miles.begin(), miles.end(), static_cast<int>(r1)) != miles.end()) {
        fs::path tmp = out_dir / ("ckpt_r" + std::to_string(r1) + ".bin.tmp");
        save_checkpoint(tmp.string(), spec.net, st.global_params);
        fs::rename(tmp, out_dir / ("ckpt_r" + std::to_string(r1) + ".bin"));
      }
    }
    if (!committed) {
      std::string cause = "round " + std::to_string(r1) + " aborted beyond retry budget " +
                          std::to_string(spec.retry_budget);
      rt.abort_log.push_back(cause);
      commit();
      throw std::runtime_error(cause);
    }
  }

  // Completed: final evaluation and the immutable manifest.
  json manifest;
  manifest["schema"] = 1;
  manifest["kind"] = "ecgfed run";
  manifest["code_version"] = kCodeVersion;
  manifest["code_hash"] = fnv1a64(std::string(kCodeVersion));
  std::string cfg_json =
      spec.resolved_config_json.empty() ? spec_to_json(spec).dump(2) : spec.resolved_config_json;
  manifest["config_hash"] = fnv1a64(cfg_json);
  manifest["resolved_config"] = json::parse(cfg_json);
  manifest["seed"] = spec.seed;
  manifest["aggregator"] = aggregator_name(spec.aggregator);
  manifest["centralized"] = spec.centralized;
  manifest["rounds"] = spec.rounds;
  manifest["milestones"] = miles;
  json ck = json::object();
  for (int m : miles) ck["r" + std::to_string(m)] = "ckpt_r" + std::to_string(m) + ".bin";
  manifest["checkpoints"] = ck;
  json cl = json::array();
  for (const auto& v : rt.views)
    cl.push_back({{"id", v.id},
                  {"profile", v.profile},
                  {"n_train", v.train.size()},
                  {"n_val", v.val.size()}});
  manifest["clients"] = cl;
  json priv;
  priv["enabled"] = spec.dp.enabled;
  priv["secagg"] = spec.use_secagg;
  if (spec.dp.enabled) {
    priv["sigma"] = spec.dp.sigma;
    priv["clip_c"] = spec.dp.C;
    priv["delta"] = spec.dp.delta;
    priv["rounds_applied"] = rt.ledger.rounds_applied();
    EpsilonResult er = compose_and_convert(rt.ledger, spec.dp.delta);
    priv["epsilon"] = er.epsilon;
    priv["alpha_star"] = er.alpha;
    priv["ledger"] = rt.ledger.to_json();
  }
  manifest["privacy"] = priv;
  json fin;
  fin["val_dice_patch"] = rt.records.empty()
                              ? std::numeric_limits<double>::quiet_NaN()
                              : rt.records.back().val_dice;
  if (spec.final_page_eval) {
    PageEval ev = final_page_eval(spec, rt.views, st.global_params);
    fin["page_tau"] = ev.tau;
    fin["page_dice_pooled"] = ev.pooled_dice;
    json pd = json::object();
    for (const auto& [prof, d] : ev.profile_dice) pd[prof] = d;
    fin["page_dice_by_profile"] = pd;
    atomic_write_file(out_dir / "page_dice.csv", page_dice_csv(ev));
  }
  manifest["final"] = fin;
  atomic_write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");

  ExperimentResult res;
  res.server = st;
  res.records = rt.records;
  res.manifest = manifest;
  res.finished = true;
  return res;
}

}  // namespace ecgfed
