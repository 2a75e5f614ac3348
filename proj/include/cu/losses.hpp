#pragma once

// The quadruple contrastive losses, their aggregation, and the partial-label
// grounding hinge — all differentiable tape scalars.
//
// Reduction note: the inter-sample losses are written in the source equations
// as sums over the batch; we mean-reduce every loss by B so the balancing
// weights stay comparable across batch sizes.

#include <stdexcept>
#include <vector>

#include "cu/tensor.hpp"

namespace cu {

struct LossWeights {
  double alpha = 0.2;   // intra-sample multi-modal margin
  double beta = 0.2;    // intra-sample uni-modal margin
  double lambda = 1.0;  // inter-sample balance
  double tau = 0.3;     // softmax temperature
  double gamma = 5.0;   // grounding-loss ratio
};

struct LossFlags {
  bool raml = true;
  bool raun = true;
  bool erml = true;
  bool erun = true;
  bool any() const { return raml || raun || erml || erun; }
};

// max(S(v_vd, q) - S(v_ev, q) + alpha, 0)
inline Var l_raml(Tape& t, Var v_ev, Var v_vd, Var q, double alpha) {
  Var gap = t.sub(t.cosine(v_vd, q), t.cosine(v_ev, q));
  return t.relu(t.add_const(gap, alpha));
}

// max(S(v_ev, v_bg) - S(v_ev, v_vd) + beta, 0)
inline Var l_raun(Tape& t, Var v_ev, Var v_bg, Var v_vd, double beta) {
  Var gap = t.sub(t.cosine(v_ev, v_bg), t.cosine(v_ev, v_vd));
  return t.relu(t.add_const(gap, beta));
}

// Positive/negative index sets per sample within a batch. Multi-modal
// positives include the sample itself; uni-modal positives exclude it.
struct ContrastSets {
  std::vector<std::vector<int>> pos_mm;
  std::vector<std::vector<int>> pos_um;
  std::vector<std::vector<int>> neg;
};

inline ContrastSets build_contrast_sets(const std::vector<int>& cluster_ids) {
  int b = static_cast<int>(cluster_ids.size());
  ContrastSets s;
  s.pos_mm.resize(b);
  s.pos_um.resize(b);
  s.neg.resize(b);
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < b; ++j) {
      if (cluster_ids[j] == cluster_ids[i]) {
        s.pos_mm[i].push_back(j);
        if (j != i) s.pos_um[i].push_back(j);
      } else {
        s.neg[i].push_back(j);
      }
    }
    if (s.pos_um[i].empty())
      throw std::invalid_argument(
          "build_contrast_sets: sample " + std::to_string(i) +
          " has no uni-modal positive; batches need >= 2 samples per cluster");
  }
  return s;
}

struct InterLoss {
  Var per_sample;  // B
  Var mean;        // scalar
};

namespace detail {
// sum_i -log( sum_{m in pos_i} exp(a_i . b_m / tau) / sum_{j in pos_i U neg_i} ... )
inline InterLoss info_nce(Tape& t, const std::vector<Var>& anchors, const std::vector<Var>& others,
                          const std::vector<std::vector<int>>& pos,
                          const std::vector<std::vector<int>>& neg, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("temperature must be > 0");
  int b = static_cast<int>(anchors.size());
  std::vector<Var> na, nb;
  na.reserve(b);
  nb.reserve(b);
  for (int i = 0; i < b; ++i) {
    na.push_back(t.normalize(anchors[i]));
    nb.push_back(t.normalize(others[i]));
  }
  std::vector<Var> terms;
  terms.reserve(b);
  for (int i = 0; i < b; ++i) {
    auto logit = [&](int j) { return t.exp_(t.scale(t.dot(na[i], nb[j]), 1.0 / tau)); };
    Var num = logit(pos[i][0]);
    for (size_t k = 1; k < pos[i].size(); ++k) num = t.add(num, logit(pos[i][k]));
    Var den = num;
    for (int j : neg[i]) den = t.add(den, logit(j));
    terms.push_back(t.sub(t.log_(den), t.log_(num)));
  }
  InterLoss out;
  out.per_sample = t.stack(terms);
  out.mean = t.mean(out.per_sample);
  return out;
}
}  // namespace detail

// Inter-sample event-query contrast: anchors are events, positives/negatives
// are the queries of cluster peers (self included).
inline InterLoss l_erml(Tape& t, const std::vector<Var>& v_ev, const std::vector<Var>& q,
                        const ContrastSets& s, double tau) {
  return detail::info_nce(t, v_ev, q, s.pos_mm, s.neg, tau);
}

// Inter-sample visual contrast: events against other events (self excluded
// from positives).
inline InterLoss l_erun(Tape& t, const std::vector<Var>& v_ev, const ContrastSets& s, double tau) {
  return detail::info_nce(t, v_ev, v_ev, s.pos_um, s.neg, tau);
}

// max(t^e - e_hat, s_hat - t^s, 0): zero exactly when the annotated clip is
// contained in the predicted interval.
inline Var l_grnd(Tape& t, Var s_hat, Var e_hat, double label_ts, double label_te) {
  Var over_end = t.add_const(t.scale(e_hat, -1.0), label_te);  // t^e - e_hat
  Var over_start = t.add_const(s_hat, -label_ts);              // s_hat - t^s
  return t.relu(t.max2(over_end, over_start));
}

// L = (L_raml + L_raun) + lambda (L_erml + L_erun) + gamma L_grnd.
// Each part is an optional batch-mean scalar; disabled parts pass invalid Vars.
inline Var total_implicit_loss(Tape& t, Var raml, Var raun, Var erml, Var erun, Var grnd,
                               const LossWeights& w, const LossFlags& flags) {
  if (!flags.any()) throw std::invalid_argument("no loss enabled");
  Var total = t.scalar(0.0);
  if (flags.raml) total = t.add(total, raml);
  if (flags.raun) total = t.add(total, raun);
  if (flags.erml) total = t.add(total, t.scale(erml, w.lambda));
  if (flags.erun) total = t.add(total, t.scale(erun, w.lambda));
  total = t.add(total, t.scale(grnd, w.gamma));
  return total;
}

}  // namespace cu
