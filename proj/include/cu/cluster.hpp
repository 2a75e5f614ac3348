#pragma once

// Query-semantic clustering (k-means with k-means++ seeding) and
// cluster-aware batch construction: N clusters per batch, B/N samples each.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "cu/dataio.hpp"

namespace cu {

// Row-major n x d matrix of query embeddings.
struct EmbedMatrix {
  int n = 0, d = 0;
  std::vector<double> data;
  const double* row(int i) const { return data.data() + static_cast<size_t>(i) * d; }
};

// Sentence embeddings when present, mean-pooled raw query features otherwise.
inline EmbedMatrix embed_queries(const Corpus& c) {
  bool with = !c.samples.front().sent.empty();
  std::vector<std::string> offenders;
  for (const auto& s : c.samples)
    if (s.sent.empty() == with) offenders.push_back(s.id);
  if (!offenders.empty()) {
    std::string msg = "embed_queries: mixed sentence-embed presence; offending ids:";
    for (const auto& id : offenders) msg += " " + id;
    throw std::runtime_error(msg);
  }
  EmbedMatrix m;
  m.n = static_cast<int>(c.samples.size());
  m.d = with ? c.ds : c.dq;
  m.data.resize(static_cast<size_t>(m.n) * m.d);
  for (int i = 0; i < m.n; ++i) {
    const auto& s = c.samples[i];
    double* out = m.data.data() + static_cast<size_t>(i) * m.d;
    if (with) {
      std::copy(s.sent.begin(), s.sent.end(), out);
    } else {
      for (int j = 0; j < m.d; ++j) {
        double acc = 0.0;
        for (int r = 0; r < s.m_len; ++r) acc += s.query[static_cast<size_t>(r) * m.d + j];
        out[j] = acc / s.m_len;
      }
    }
  }
  return m;
}

struct ClusterModel {
  int k = 0;
  int d = 0;
  std::vector<double> centroids;          // k x d
  std::vector<double> inertia_history;    // one entry per Lloyd iteration
  const double* centroid(int c) const { return centroids.data() + static_cast<size_t>(c) * d; }
};

namespace detail {
inline double sqdist(const double* a, const double* b, int d) {
  double s = 0.0;
  for (int i = 0; i < d; ++i) {
    double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}
}  // namespace detail

inline ClusterModel kmeans(const EmbedMatrix& x, int k, uint64_t seed, int max_iters = 100) {
  if (k < 2) throw std::invalid_argument("kmeans: K must be >= 2");
  if (x.n < k) throw std::invalid_argument("kmeans: need at least K samples (" +
                                           std::to_string(x.n) + " < " + std::to_string(k) + ")");
  std::mt19937_64 rng(seed);
  ClusterModel m;
  m.k = k;
  m.d = x.d;
  m.centroids.resize(static_cast<size_t>(k) * x.d);

  // k-means++ seeding
  std::uniform_int_distribution<int> first(0, x.n - 1);
  std::vector<double> best(static_cast<size_t>(x.n), std::numeric_limits<double>::max());
  int c0 = first(rng);
  std::copy_n(x.row(c0), x.d, m.centroids.begin());
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (int i = 0; i < x.n; ++i) {
      best[i] = std::min(best[i], detail::sqdist(x.row(i), m.centroid(c - 1), x.d));
      total += best[i];
    }
    int pick = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng), acc = 0.0;
      for (int i = 0; i < x.n; ++i) {
        acc += best[i];
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    } else {
      pick = first(rng);
    }
    std::copy_n(x.row(pick), x.d, m.centroids.begin() + static_cast<size_t>(c) * x.d);
  }

  // Lloyd iterations to an assignment fixpoint
  std::vector<int> assign(x.n, -1);
  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    double inertia = 0.0;
    for (int i = 0; i < x.n; ++i) {
      int bc = 0;
      double bd = detail::sqdist(x.row(i), m.centroid(0), x.d);
      for (int c = 1; c < k; ++c) {
        double dd = detail::sqdist(x.row(i), m.centroid(c), x.d);
        if (dd < bd) {  // ties keep the lowest index
          bd = dd;
          bc = c;
        }
      }
      if (assign[i] != bc) {
        assign[i] = bc;
        changed = true;
      }
      inertia += bd;
    }
    m.inertia_history.push_back(inertia);
    if (!changed && iter > 0) break;

    std::vector<double> sums(static_cast<size_t>(k) * x.d, 0.0);
    std::vector<int> counts(k, 0);
    for (int i = 0; i < x.n; ++i) {
      counts[assign[i]]++;
      const double* r = x.row(i);
      double* s = sums.data() + static_cast<size_t>(assign[i]) * x.d;
      for (int j = 0; j < x.d; ++j) s[j] += r[j];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        for (int j = 0; j < x.d; ++j)
          m.centroids[static_cast<size_t>(c) * x.d + j] = sums[static_cast<size_t>(c) * x.d + j] / counts[c];
      } else {
        // Re-seed an empty cluster to the point farthest from its own centroid.
        int far = 0;
        double fd = -1.0;
        for (int i = 0; i < x.n; ++i) {
          double dd = detail::sqdist(x.row(i), m.centroid(assign[i]), x.d);
          if (dd > fd) {
            fd = dd;
            far = i;
          }
        }
        std::copy_n(x.row(far), x.d, m.centroids.begin() + static_cast<size_t>(c) * x.d);
      }
    }
  }
  return m;
}

// Per sample: ordered member cluster ids, nearest centroid first, then every
// centroid within rho * nearest distance (by distance, ties by lowest index).
struct ClusterAssignment {
  std::vector<std::vector<int>> members;  // per sample
};

inline ClusterAssignment assign_clusters(const ClusterModel& m, const EmbedMatrix& x,
                                         double rho = 1.2) {
  if (rho < 1.0) throw std::invalid_argument("assign_clusters: rho must be >= 1");
  ClusterAssignment a;
  a.members.resize(x.n);
  std::vector<std::pair<double, int>> dist(m.k);
  for (int i = 0; i < x.n; ++i) {
    for (int c = 0; c < m.k; ++c)
      dist[c] = {std::sqrt(detail::sqdist(x.row(i), m.centroid(c), x.d)), c};
    std::sort(dist.begin(), dist.end());
    double cutoff = rho * dist[0].first;
    for (const auto& [dd, c] : dist)
      if (dd <= cutoff) a.members[i].push_back(c);
  }
  return a;
}

struct Batch {
  std::vector<int> sample_idx;   // B entries
  std::vector<int> cluster_tag;  // the cluster each sample represents here
};
using BatchPlan = std::vector<Batch>;

// N clusters per batch sampled without replacement with probability
// proportional to size; B/N members per cluster (with replacement only when
// the cluster is smaller). Deterministic in (seed, epoch).
inline BatchPlan make_batches(const ClusterAssignment& a, int batch_size, int n_clusters,
                              uint64_t seed, int epoch) {
  if (n_clusters < 1 || batch_size % n_clusters != 0)
    throw std::invalid_argument("make_batches: B must be divisible by N");
  int per = batch_size / n_clusters;
  if (per < 2)
    throw std::invalid_argument("make_batches: B/N must be >= 2 (uni-modal positives need a peer)");

  int k = 0;
  for (const auto& ms : a.members)
    for (int c : ms) k = std::max(k, c + 1);
  std::vector<std::vector<int>> pool(k);
  for (int i = 0; i < static_cast<int>(a.members.size()); ++i)
    for (int c : a.members[i]) pool[c].push_back(i);
  std::vector<int> nonempty;
  for (int c = 0; c < k; ++c)
    if (!pool[c].empty()) nonempty.push_back(c);
  if (static_cast<int>(nonempty.size()) < n_clusters)
    throw std::invalid_argument("make_batches: fewer than N non-empty clusters");

  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(epoch) + 1);
  int n_samples = static_cast<int>(a.members.size());
  int num_batches = (n_samples + batch_size - 1) / batch_size;

  BatchPlan plan;
  plan.reserve(num_batches);
  for (int b = 0; b < num_batches; ++b) {
    // weighted sampling of N distinct clusters
    std::vector<int> cands = nonempty;
    std::vector<double> weights;
    for (int c : cands) weights.push_back(static_cast<double>(pool[c].size()));
    Batch batch;
    for (int pick = 0; pick < n_clusters; ++pick) {
      std::discrete_distribution<int> dd(weights.begin(), weights.end());
      int idx = dd(rng);
      int c = cands[idx];
      cands.erase(cands.begin() + idx);
      weights.erase(weights.begin() + idx);
      const auto& members = pool[c];
      if (static_cast<int>(members.size()) >= per) {
        std::vector<int> order(members.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (int j = 0; j < per; ++j) {
          batch.sample_idx.push_back(members[order[j]]);
          batch.cluster_tag.push_back(c);
        }
      } else {
        std::uniform_int_distribution<int> u(0, static_cast<int>(members.size()) - 1);
        for (int j = 0; j < per; ++j) {
          batch.sample_idx.push_back(members[u(rng)]);
          batch.cluster_tag.push_back(c);
        }
      }
    }
    plan.push_back(std::move(batch));
  }
  return plan;
}

// Optional inspection dump: sample-id -> member cluster ids.
inline void save_cluster_dump(const Corpus& c, const ClusterAssignment& a,
                              const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write cluster dump: " + path.string());
  f << "cu-clusters/1\n";
  for (size_t i = 0; i < c.samples.size(); ++i) {
    f << c.samples[i].id;
    for (int m : a.members[i]) f << " " << m;
    f << "\n";
  }
}

}  // namespace cu
