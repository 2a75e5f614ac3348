#pragma once

// Implicit-stage optimization loop, pseudo-label export, and the two-stage
// pipeline driver. The explicit (stage-2) model lives in stage2.hpp behind
// the Stage2Model interface.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cu/cluster.hpp"
#include "cu/dataio.hpp"
#include "cu/evalkit.hpp"
#include "cu/losses.hpp"
#include "cu/model.hpp"
#include "cu/tensor.hpp"

namespace cu {

struct TrainConfig {
  LossWeights weights;
  LossFlags flags;
  int batch = 8;              // B
  int clusters_per_batch = 4; // N
  int k = 10;                 // cluster count
  double rho = 1.2;           // multi-membership distance ratio
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 200;
  uint64_t seed = 1;
  int d = 16;                 // fused feature dimension
  double k_init = 3.0;        // plateau sharpness at init
  double clip_norm = 5.0;
  // explicit stage
  int stage2_epochs = 150;
  double stage2_lr = 3e-3;
  int stage2_batch = 16;
  int stage2_hidden = 8;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
    if (stage2_epochs < 1) throw std::invalid_argument("config: stage2_epochs must be >= 1");
    if (!flags.any()) throw std::invalid_argument("no loss enabled");
    if (weights.tau <= 0.0) throw std::invalid_argument("config: tau must be > 0");
    if (weights.alpha < 0.0 || weights.beta < 0.0 || weights.lambda < 0.0 || weights.gamma < 0.0)
      throw std::invalid_argument("config: margins and ratios must be >= 0");
    if (k < 2) throw std::invalid_argument("config: k must be >= 2");
    if (rho < 1.0) throw std::invalid_argument("config: rho must be >= 1");
    if (d < 1) throw std::invalid_argument("config: d must be >= 1");
  }
};

inline LossFlags parse_flags(const std::string& csv) {
  LossFlags f{false, false, false, false};
  std::istringstream is(csv);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    if (tok == "raml") f.raml = true;
    else if (tok == "raun") f.raun = true;
    else if (tok == "erml") f.erml = true;
    else if (tok == "erun") f.erun = true;
    else if (!tok.empty()) throw std::invalid_argument("unknown loss flag '" + tok + "'");
  }
  return f;
}

inline std::string flags_to_string(const LossFlags& f) {
  std::string s;
  auto app = [&](bool on, const char* name) {
    if (on) s += (s.empty() ? "" : ",") + std::string(name);
  };
  app(f.raml, "raml");
  app(f.raun, "raun");
  app(f.erml, "erml");
  app(f.erun, "erun");
  return s;
}

// --- config file -----------------------------------------------------------------

inline void save_config(const TrainConfig& c, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write config: " + path.string());
  f.precision(17);
  f << "alpha " << c.weights.alpha << "\nbeta " << c.weights.beta << "\nlambda "
    << c.weights.lambda << "\ntau " << c.weights.tau << "\ngamma " << c.weights.gamma
    << "\nflags " << flags_to_string(c.flags) << "\nbatch " << c.batch << "\nclusters_per_batch "
    << c.clusters_per_batch << "\nk " << c.k << "\nrho " << c.rho << "\nlr " << c.lr << "\nbeta1 "
    << c.beta1 << "\nbeta2 " << c.beta2 << "\nadam_eps " << c.adam_eps << "\nepochs " << c.epochs
    << "\nseed " << c.seed << "\nd " << c.d << "\nk_init " << c.k_init << "\nclip_norm "
    << c.clip_norm << "\nstage2_epochs " << c.stage2_epochs << "\nstage2_lr " << c.stage2_lr
    << "\nstage2_batch " << c.stage2_batch << "\nstage2_hidden " << c.stage2_hidden << "\n";
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path.string());
  TrainConfig c;
  std::string key;
  while (f >> key) {
    if (key == "alpha") f >> c.weights.alpha;
    else if (key == "beta") f >> c.weights.beta;
    else if (key == "lambda") f >> c.weights.lambda;
    else if (key == "tau") f >> c.weights.tau;
    else if (key == "gamma") f >> c.weights.gamma;
    else if (key == "flags") { std::string v; f >> v; c.flags = parse_flags(v); }
    else if (key == "batch") f >> c.batch;
    else if (key == "clusters_per_batch") f >> c.clusters_per_batch;
    else if (key == "k") f >> c.k;
    else if (key == "rho") f >> c.rho;
    else if (key == "lr") f >> c.lr;
    else if (key == "beta1") f >> c.beta1;
    else if (key == "beta2") f >> c.beta2;
    else if (key == "adam_eps") f >> c.adam_eps;
    else if (key == "epochs") f >> c.epochs;
    else if (key == "seed") f >> c.seed;
    else if (key == "d") f >> c.d;
    else if (key == "k_init") f >> c.k_init;
    else if (key == "clip_norm") f >> c.clip_norm;
    else if (key == "stage2_epochs") f >> c.stage2_epochs;
    else if (key == "stage2_lr") f >> c.stage2_lr;
    else if (key == "stage2_batch") f >> c.stage2_batch;
    else if (key == "stage2_hidden") f >> c.stage2_hidden;
    else throw std::runtime_error("unknown config key: " + key);
  }
  return c;
}

// --- optimizer ---------------------------------------------------------------------

struct AdamState {
  std::vector<double> m, v;
  long step = 0;
};

// One Adam update over a flattened parameter set, with global-norm clipping.
inline void adam_update(ParamSet& params, const std::vector<std::vector<double>>& grads,
                        AdamState& st, const TrainConfig& cfg) {
  size_t total = params.scalar_count();
  if (st.m.empty()) {
    st.m.assign(total, 0.0);
    st.v.assign(total, 0.0);
  }
  double norm2 = 0.0;
  for (const auto& g : grads)
    for (double x : g) norm2 += x * x;
  double scale = 1.0;
  double norm = std::sqrt(norm2);
  if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) scale = cfg.clip_norm / norm;

  st.step++;
  double bc1 = 1.0 - std::pow(cfg.beta1, st.step);
  double bc2 = 1.0 - std::pow(cfg.beta2, st.step);
  size_t off = 0;
  for (size_t p = 0; p < params.items.size(); ++p) {
    auto& data = params.items[p].value.data;
    const auto& g = grads[p];
    for (size_t i = 0; i < data.size(); ++i, ++off) {
      double gi = g[i] * scale;
      st.m[off] = cfg.beta1 * st.m[off] + (1.0 - cfg.beta1) * gi;
      st.v[off] = cfg.beta2 * st.v[off] + (1.0 - cfg.beta2) * gi * gi;
      double mh = st.m[off] / bc1;
      double vh = st.v[off] / bc2;
      data[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.adam_eps);
      if (!std::isfinite(data[i]))
        throw std::runtime_error("optimizer produced a non-finite parameter");
    }
  }
}

// --- training log --------------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double raml = 0.0, raun = 0.0, erml = 0.0, erun = 0.0, grnd = 0.0, total = 0.0;
  double grnd_sat_rate = 0.0;   // fraction of samples whose clip is contained
  double pseudo_miou = -1.0;    // vs gt, -1 when gt unavailable
  double seconds = 0.0;
};
struct TrainLog {
  std::vector<EpochStats> epochs;
};

inline void save_train_log(const TrainLog& log, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write train log: " + path.string());
  f << "cu-trainlog/1\n";
  f.precision(10);
  for (const auto& e : log.epochs)
    f << e.epoch << " raml " << e.raml << " raun " << e.raun << " erml " << e.erml << " erun "
      << e.erun << " grnd " << e.grnd << " total " << e.total << " sat " << e.grnd_sat_rate
      << " pseudo_miou " << e.pseudo_miou << " seconds " << e.seconds << "\n";
}

// --- implicit-stage forward ------------------------------------------------------------

struct SampleForward {
  FusedFeatures fused;
  EventPrediction event;
  Var mask;
  PooledEvent pooled;
};

inline SampleForward forward_sample(Tape& t, const ParamVars& pv, const SampleRecord& s, int d,
                                    double anchor) {
  SampleForward f;
  Var video = t.leaf({s.t_len, static_cast<int>(s.video.size()) / s.t_len}, s.video);
  Var query = t.leaf({s.m_len, static_cast<int>(s.query.size()) / s.m_len}, s.query);
  f.fused = fuse(t, pv, video, query, d);
  f.event = detect_event(t, pv, f.fused.V, anchor, s.t_len);
  Var k = mask_sharpness(t, pv);
  f.mask = plateau_mask(t, f.event.s_hat, f.event.e_hat, k, s.t_len);
  f.pooled = pool_event(t, f.fused.V, f.mask, s.t_len);
  return f;
}

// Raw predicted interval for a sample (no clamping).
inline Interval predict_interval(const ParamSet& params, const SampleRecord& s, int d) {
  if (!s.label) throw std::runtime_error("sample " + s.id + " has no partial label (anchor needed)");
  Tape t;
  ParamVars pv = insert_leaves(t, params);
  SampleForward f = forward_sample(t, pv, s, d, s.label->center);
  return Interval{t.sval(f.event.s_hat), t.sval(f.event.e_hat)};
}

inline std::vector<std::pair<std::string, Interval>> export_pseudo_labels(const ParamSet& params,
                                                                          const Corpus& corpus,
                                                                          int d) {
  std::vector<std::pair<std::string, Interval>> out;
  out.reserve(corpus.samples.size());
  for (const auto& s : corpus.samples) {
    Interval raw = predict_interval(params, s, d);
    out.emplace_back(s.id, clamp_interval(raw.start, raw.end, s.t_len));
  }
  return out;
}

// --- implicit-stage training loop ---------------------------------------------------------

struct ImplicitResult {
  ParamSet params;
  TrainLog log;
};

inline ImplicitResult train_implicit(const Corpus& corpus, const TrainConfig& cfg) {
  cfg.validate();
  for (const auto& s : corpus.samples)
    if (!s.label) throw std::runtime_error("sample " + s.id + " has no partial label; cannot train");

  // Corpora smaller than one batch skip clustering: a single all-samples
  // batch under one cluster tag (inter-sample losses then need >= 2 samples).
  int n_samples = static_cast<int>(corpus.samples.size());
  bool clustered = n_samples >= std::max(2, cfg.batch);
  ClusterAssignment assign;
  if (clustered) {
    EmbedMatrix emb = embed_queries(corpus);
    int k = std::min(cfg.k, n_samples);
    ClusterModel cm = kmeans(emb, k, cfg.seed);
    assign = assign_clusters(cm, emb, cfg.rho);
  }
  LossFlags eff = cfg.flags;
  if (n_samples < 2) eff.erml = eff.erun = false;

  ModelDims dims{corpus.dv, corpus.dq, cfg.d};
  ParamSet params = init_params(dims, cfg.seed, cfg.k_init);
  AdamState adam;

  bool has_gt = true;
  for (const auto& s : corpus.samples) has_gt = has_gt && s.gt.has_value();

  ImplicitResult res;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    BatchPlan plan;
    if (clustered) {
      plan = make_batches(assign, cfg.batch, cfg.clusters_per_batch, cfg.seed, epoch);
    } else {
      Batch all;
      for (int i = 0; i < n_samples; ++i) {
        all.sample_idx.push_back(i);
        all.cluster_tag.push_back(0);
      }
      plan.push_back(std::move(all));
    }
    EpochStats st;
    st.epoch = epoch;
    int batches = 0;
    for (size_t bi = 0; bi < plan.size(); ++bi) {
      const Batch& batch = plan[bi];
      Tape t;
      ParamVars pv = insert_leaves(t, params);
      int b = static_cast<int>(batch.sample_idx.size());
      std::vector<Var> evs, qs, ramls, rauns, grnds;
      for (int i = 0; i < b; ++i) {
        const SampleRecord& s = corpus.samples[batch.sample_idx[i]];
        SampleForward f = forward_sample(t, pv, s, cfg.d, s.label->center);
        evs.push_back(f.pooled.ev);
        qs.push_back(f.fused.q);
        ramls.push_back(l_raml(t, f.pooled.ev, f.fused.v_vd, f.fused.q, cfg.weights.alpha));
        rauns.push_back(l_raun(t, f.pooled.ev, f.pooled.bg, f.fused.v_vd, cfg.weights.beta));
        grnds.push_back(l_grnd(t, f.event.s_hat, f.event.e_hat, s.label->ts(), s.label->te()));
      }
      Var raml_mean = t.mean(t.stack(ramls));
      Var raun_mean = t.mean(t.stack(rauns));
      Var grnd_mean = t.mean(t.stack(grnds));
      Var erml_mean{}, erun_mean{};
      if (eff.erml || eff.erun) {
        ContrastSets sets = build_contrast_sets(batch.cluster_tag);
        if (eff.erml) erml_mean = l_erml(t, evs, qs, sets, cfg.weights.tau).mean;
        if (eff.erun) erun_mean = l_erun(t, evs, sets, cfg.weights.tau).mean;
      }
      Var total = total_implicit_loss(t, raml_mean, raun_mean, erml_mean, erun_mean, grnd_mean,
                                      cfg.weights, eff);
      double total_v = t.sval(total);
      if (!std::isfinite(total_v))
        throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", batch " + std::to_string(bi));
      t.backward(total);
      std::vector<std::vector<double>> grads;
      grads.reserve(pv.items.size());
      for (const auto& [name, var] : pv.items) grads.push_back(t.grad(var));
      adam_update(params, grads, adam, cfg);

      st.raml += t.sval(raml_mean);
      st.raun += t.sval(raun_mean);
      if (eff.erml) st.erml += t.sval(erml_mean);
      if (eff.erun) st.erun += t.sval(erun_mean);
      st.grnd += t.sval(grnd_mean);
      st.total += total_v;
      batches++;
    }
    st.raml /= batches;
    st.raun /= batches;
    st.erml /= batches;
    st.erun /= batches;
    st.grnd /= batches;
    st.total /= batches;

    // End-of-epoch audit over the training set: containment rate and, when gt
    // is available, the pseudo-label mIoU via the canonical metric.
    auto pseudo = export_pseudo_labels(params, corpus, cfg.d);
    int contained = 0;
    std::map<std::string, Interval> pred, gts;
    for (size_t i = 0; i < corpus.samples.size(); ++i) {
      const auto& s = corpus.samples[i];
      const Interval& iv = pseudo[i].second;
      if (s.label->ts() >= iv.start && s.label->te() <= iv.end) contained++;
      pred[pseudo[i].first] = iv;
      if (has_gt) gts[s.id] = *s.gt;
    }
    st.grnd_sat_rate = static_cast<double>(contained) / corpus.samples.size();
    if (has_gt) st.pseudo_miou = evaluate(pred, gts).miou / 100.0;
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.epochs.push_back(st);
  }
  res.params = std::move(params);
  return res;
}

}  // namespace cu
