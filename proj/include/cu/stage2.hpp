#pragma once

// Explicit stage: a standalone fully-supervised grounding model trained on
// pseudo-labels and used alone at inference. The built-in model is a minimal
// saliency grounder (query-conditioned frame scores -> soft-argmax center +
// width head); other fully-supervised models can be plugged in behind
// Stage2Model.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cu/dataio.hpp"
#include "cu/model.hpp"
#include "cu/tensor.hpp"
#include "cu/trainer.hpp"

namespace cu {

class Stage2Model {
 public:
  virtual ~Stage2Model() = default;
  virtual void train(const Corpus& corpus, const std::map<std::string, Interval>& targets,
                     const TrainConfig& cfg) = 0;
  virtual Interval infer(const SampleRecord& s) const = 0;
  virtual void save(const std::filesystem::path& path) const = 0;
  virtual void load(const std::filesystem::path& path) = 0;
};

// Built-in explicit model.
//
// Frame scores mix a query-conditioned term with a query-free eventness term;
// softmax over frames gives a soft-argmax center and a spread statistic, and a
// small perceptron refines (center, width) in normalized [0,1] video time.
class SaliencyGrounder final : public Stage2Model {
 public:
  SaliencyGrounder() = default;
  SaliencyGrounder(int dv, int dq, int d, int hidden, uint64_t seed) { init(dv, dq, d, hidden, seed); }

  void init(int dv, int dq, int d, int hidden, uint64_t seed) {
    std::mt19937_64 rng(seed);
    params_.items.clear();
    params_.items.push_back({"wv", detail::uniform_init({dv, d}, dv, rng)});
    params_.items.push_back({"wq", detail::uniform_init({dq, d}, dq, rng)});
    params_.items.push_back({"u", detail::uniform_init({d}, d, rng)});
    params_.items.push_back({"kappa_raw", Tensor{{1}, {softplus_inverse(5.0)}}});
    params_.items.push_back({"head.w1", detail::uniform_init({3, hidden}, 3, rng)});
    params_.items.push_back({"head.b1", detail::zeros({hidden})});
    // Final layer starts at zero: the initial prediction is the raw
    // soft-argmax center with width 0.5.
    params_.items.push_back({"head.w2", detail::zeros({hidden, 2})});
    params_.items.push_back({"head.b2", detail::zeros({2})});
    d_ = d;
  }

  struct Pred {
    Var center;  // in (0,1) after clamp
    Var width;   // in (0,1)
  };

  Pred forward(Tape& t, const ParamVars& pv, const SampleRecord& s) const {
    int T = s.t_len;
    Var video = t.leaf({T, static_cast<int>(s.video.size()) / T}, s.video);
    Var query = t.leaf({s.m_len, static_cast<int>(s.query.size()) / s.m_len}, s.query);
    Var x = t.matmul(video, pv.at("wv"));                        // T x d
    Var qv = t.normalize(t.mean_rows(t.matmul(query, pv.at("wq"))));  // d
    Var kappa = t.softplus(pv.at("kappa_raw"));

    // Per-frame scores: normalize each frame row via cosine against qv and u.
    std::vector<Var> scores;
    scores.reserve(T);
    std::vector<double> pos(T);
    for (int i = 0; i < T; ++i) pos[i] = (i + 0.5) / T;
    for (int i = 0; i < T; ++i) {
      Var row = t.normalize(row_of(t, x, i, d_));
      Var sc = t.add(t.dot(row, qv), t.dot(row, t.normalize(pv.at("u"))));
      scores.push_back(sc);
    }
    Var svec = t.mul(t.stack(scores), t.bcast(t.at(kappa, 0), T));
    Var p = t.softmax(svec);
    Var posv = t.leaf({T}, pos);
    Var c_soft = t.dot(p, posv);
    Var centered = t.sub(posv, t.bcast(c_soft, T));
    Var spread = t.sqrt_(t.add_const(t.dot(p, t.mul(centered, centered)), 1e-8));
    Var smean = t.mean(svec);

    Var feat = t.stack({c_soft, spread, smean});
    Var hid = t.tanh_(t.add(t.vecmat(feat, pv.at("head.w1")), pv.at("head.b1")));
    Var out = t.add(t.vecmat(hid, pv.at("head.w2")), pv.at("head.b2"));
    Pred pr;
    pr.center = t.clamp(t.add(c_soft, t.scale(t.tanh_(t.at(out, 0)), 0.5)), 0.0, 1.0);
    pr.width = t.sigmoid(t.at(out, 1));
    return pr;
  }

  void train(const Corpus& corpus, const std::map<std::string, Interval>& targets,
             const TrainConfig& cfg) override {
    cfg.validate();
    if (params_.items.empty()) init(corpus.dv, corpus.dq, cfg.d, cfg.stage2_hidden, cfg.seed);
    for (const auto& s : corpus.samples)
      if (!targets.count(s.id)) throw std::runtime_error("no pseudo label for sample " + s.id);

    AdamState adam;
    TrainConfig opt = cfg;
    opt.lr = cfg.stage2_lr;
    std::mt19937_64 rng(cfg.seed ^ 0x5a5a5a5aULL);
    std::vector<int> order(corpus.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg.stage2_epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (size_t start = 0; start < order.size(); start += cfg.stage2_batch) {
        Tape t;
        ParamVars pv = insert_leaves(t, params_);
        std::vector<Var> losses;
        for (size_t j = start; j < std::min(order.size(), start + cfg.stage2_batch); ++j) {
          const SampleRecord& s = corpus.samples[order[j]];
          const Interval& tgt = targets.at(s.id);
          double tc = (tgt.start + tgt.end) / 2.0 / s.t_len;
          double tw = (tgt.end - tgt.start) / s.t_len;
          Pred pr = forward(t, pv, s);
          Var reg = t.add(t.huber(t.add_const(pr.center, -tc)), t.huber(t.add_const(pr.width, -tw)));
          losses.push_back(t.add(reg, one_minus_iou(t, pr, tc, tw)));
        }
        Var total = t.mean(t.stack(losses));
        if (!std::isfinite(t.sval(total)))
          throw std::runtime_error("explicit stage diverged: non-finite loss at epoch " +
                                   std::to_string(epoch));
        t.backward(total);
        std::vector<std::vector<double>> grads;
        for (const auto& [name, var] : pv.items) grads.push_back(t.grad(var));
        adam_update(params_, grads, adam, opt);
      }
    }
  }

  Interval infer(const SampleRecord& s) const override {
    if (params_.items.empty()) throw std::runtime_error("explicit model not trained/loaded");
    Tape t;
    ParamVars pv = insert_leaves(t, params_);
    Pred pr = forward(t, pv, s);
    double c = t.sval(pr.center) * s.t_len;
    double w = t.sval(pr.width) * s.t_len;
    return clamp_interval(c - w / 2.0, c + w / 2.0, s.t_len);
  }

  void save(const std::filesystem::path& path) const override { save_checkpoint(params_, path); }
  void load(const std::filesystem::path& path) override {
    params_ = load_checkpoint(path);
    d_ = params_.at("wv").shape[1];
  }

  const ParamSet& params() const { return params_; }

 private:
  ParamSet params_;
  int d_ = 16;

  static Var row_of(Tape& t, Var m, int i, int d) {
    // One-hot vecmat picks row i of a [T,d] matrix.
    const Shape& s = t.shape(m);
    std::vector<double> oh(s[0], 0.0);
    oh[i] = 1.0;
    (void)d;
    return t.vecmat(t.leaf({s[0]}, oh), m);
  }

  // 1 - IoU between [c-w/2, c+w/2] and the target, in normalized time.
  static Var one_minus_iou(Tape& t, const Pred& pr, double tc, double tw) {
    Var half = t.scale(pr.width, 0.5);
    Var ps = t.sub(pr.center, half);
    Var pe = t.add(pr.center, half);
    double ts = tc - tw / 2.0, te = tc + tw / 2.0;
    Var inter_hi = t.scale(t.max2(t.scale(pe, -1.0), t.scalar(-te)), -1.0);  // min(pe, te)
    Var inter_lo = t.max2(ps, t.scalar(ts));
    Var inter = t.relu(t.sub(inter_hi, inter_lo));
    Var uni = t.add_const(t.sub(pr.width, inter), tw);
    return t.add_const(t.scale(t.div(inter, t.add_const(uni, 1e-9)), -1.0), 1.0);
  }
};

inline std::unique_ptr<Stage2Model> make_stage2(const std::string& name) {
  if (name == "saliency" || name == "builtin") return std::make_unique<SaliencyGrounder>();
  throw std::invalid_argument("unknown stage-2 model '" + name + "' (valid: saliency)");
}

// --- full pipeline -------------------------------------------------------------------

struct TwoStageResult {
  ParamSet implicit_params;
  TrainLog implicit_log;
  std::vector<std::pair<std::string, Interval>> pseudo_labels;
  EvalReport test_report;
};

inline TwoStageResult run_two_stage(const Corpus& train_raw, const Corpus& test,
                                    LabelDist dist, double clip_seconds, uint64_t label_seed,
                                    const TrainConfig& cfg, Stage2Model* stage2) {
  for (const auto& s : test.samples)
    for (const auto& tr : train_raw.samples)
      if (s.id == tr.id) throw std::invalid_argument("train/test corpora share sample id " + s.id);

  Corpus train = simulate_partial_labels(train_raw, dist, clip_seconds, label_seed);
  ImplicitResult imp = train_implicit(train, cfg);
  auto pseudo = export_pseudo_labels(imp.params, train, cfg.d);

  std::map<std::string, Interval> targets(pseudo.begin(), pseudo.end());
  stage2->train(train, targets, cfg);

  std::map<std::string, Interval> preds, gts;
  for (const auto& s : test.samples) {
    if (!s.gt) throw std::runtime_error("test sample " + s.id + " has no gt interval");
    preds[s.id] = stage2->infer(s);
    gts[s.id] = *s.gt;
  }
  TwoStageResult res;
  res.implicit_params = std::move(imp.params);
  res.implicit_log = std::move(imp.log);
  res.pseudo_labels = std::move(pseudo);
  res.test_report = evaluate(preds, gts, {0.3, 0.5, 0.7}, "two-stage");
  return res;
}

}  // namespace cu
