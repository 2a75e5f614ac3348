#pragma once

// Feature fusion (projection + bidirectional single-head cross attention),
// the anchor-based event detector, the plateau temporal mask, and
// event/background pooling. Parameters live in a named-tensor store with a
// versioned binary checkpoint format ("cu-ckpt/1").

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cu/dataio.hpp"
#include "cu/tensor.hpp"

namespace cu {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Ordered named-tensor store; order is the flattening order for the optimizer.
struct ParamSet {
  std::vector<NamedTensor> items;

  Tensor& operator[](const std::string& name) {
    for (auto& it : items)
      if (it.name == name) return it.value;
    throw std::invalid_argument("no parameter named " + name);
  }
  const Tensor& at(const std::string& name) const {
    for (const auto& it : items)
      if (it.name == name) return it.value;
    throw std::invalid_argument("no parameter named " + name);
  }
  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& it : items) n += it.value.data.size();
    return n;
  }
};

// Tape leaves for every parameter, one training step's view.
struct ParamVars {
  std::vector<std::pair<std::string, Var>> items;
  Var at(const std::string& name) const {
    for (const auto& [n, v] : items)
      if (n == name) return v;
    throw std::invalid_argument("no parameter var named " + name);
  }
};

inline ParamVars insert_leaves(Tape& t, const ParamSet& p) {
  ParamVars out;
  out.items.reserve(p.items.size());
  for (const auto& it : p.items) out.items.emplace_back(it.name, t.leaf(it.value));
  return out;
}

// --- checkpoints ---------------------------------------------------------------

inline void save_checkpoint(const ParamSet& p, const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path.string());
    const char magic[] = "cu-ckpt/1\n";
    f.write(magic, sizeof(magic) - 1);
    uint32_t count = static_cast<uint32_t>(p.items.size());
    f.write(reinterpret_cast<const char*>(&count), sizeof(count));
    for (const auto& it : p.items) {
      uint32_t nl = static_cast<uint32_t>(it.name.size());
      f.write(reinterpret_cast<const char*>(&nl), sizeof(nl));
      f.write(it.name.data(), nl);
      uint32_t nd = static_cast<uint32_t>(it.value.shape.size());
      f.write(reinterpret_cast<const char*>(&nd), sizeof(nd));
      for (int d : it.value.shape) {
        uint64_t dd = static_cast<uint64_t>(d);
        f.write(reinterpret_cast<const char*>(&dd), sizeof(dd));
      }
      f.write(reinterpret_cast<const char*>(it.value.data.data()),
              static_cast<std::streamsize>(it.value.data.size() * sizeof(double)));
    }
  }
  fs::rename(tmp, path);
}

inline ParamSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[10];
  f.read(magic, 10);
  if (!f || std::string(magic, 10) != "cu-ckpt/1\n")
    throw std::runtime_error("bad checkpoint header in " + path.string());
  uint32_t count = 0;
  f.read(reinterpret_cast<char*>(&count), sizeof(count));
  ParamSet p;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t nl = 0;
    f.read(reinterpret_cast<char*>(&nl), sizeof(nl));
    std::string name(nl, '\0');
    f.read(name.data(), nl);
    uint32_t nd = 0;
    f.read(reinterpret_cast<char*>(&nd), sizeof(nd));
    Shape shape(nd);
    for (uint32_t d = 0; d < nd; ++d) {
      uint64_t dd = 0;
      f.read(reinterpret_cast<char*>(&dd), sizeof(dd));
      shape[d] = static_cast<int>(dd);
    }
    std::vector<double> data(numel(shape));
    f.read(reinterpret_cast<char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!f) throw std::runtime_error("truncated checkpoint: " + path.string());
    p.items.push_back({std::move(name), Tensor{std::move(shape), std::move(data)}});
  }
  return p;
}

// --- parameter initialization ----------------------------------------------------

struct ModelDims {
  int dv = 32;
  int dq = 16;
  int d = 16;  // fused dimension
};

namespace detail {
inline Tensor uniform_init(Shape shape, int fan_in, std::mt19937_64& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t{std::move(shape), {}};
  t.data.resize(numel(t.shape));
  for (double& x : t.data) x = u(rng);
  return t;
}
inline Tensor zeros(Shape shape) {
  Tensor t{std::move(shape), {}};
  t.data.assign(numel(t.shape), 0.0);
  return t;
}
}  // namespace detail

// softplus(x) = 1  =>  x = log(e - 1)
inline double softplus_inverse(double y) { return std::log(std::expm1(y)); }

inline ParamSet init_params(const ModelDims& dims, uint64_t seed, double k_init = 1.0) {
  if (dims.dv <= 0 || dims.dq <= 0 || dims.d <= 0)
    throw std::invalid_argument("init_params: dims must be positive");
  std::mt19937_64 rng(seed);
  ParamSet p;
  int d = dims.d;
  p.items.push_back({"proj_v.w", detail::uniform_init({dims.dv, d}, dims.dv, rng)});
  p.items.push_back({"proj_v.b", detail::zeros({d})});
  p.items.push_back({"proj_q.w", detail::uniform_init({dims.dq, d}, dims.dq, rng)});
  p.items.push_back({"proj_q.b", detail::zeros({d})});
  for (const char* blk : {"attn_v", "attn_q"})
    for (const char* w : {"wq", "wk", "wv"})
      p.items.push_back({std::string(blk) + "." + w, detail::uniform_init({d, d}, d, rng)});
  p.items.push_back({"det.w1", detail::uniform_init({d, d}, d, rng)});
  p.items.push_back({"det.b1", detail::zeros({d})});
  p.items.push_back({"det.w2", detail::uniform_init({d, 2}, d, rng)});
  p.items.push_back({"det.b2", detail::zeros({2})});
  p.items.push_back({"mask.k_raw", Tensor{{1}, {softplus_inverse(k_init)}}});
  return p;
}

// --- forward pieces ---------------------------------------------------------------

struct FusedFeatures {
  Var V;     // T x D
  Var Q;     // M x D
  Var q;     // D, column mean of Q
  Var v_vd;  // D, column mean of V
};

// Projection + two residual cross-attention blocks (video attends query and
// the symmetric direction), then the pooled q / v_vd vectors.
inline FusedFeatures fuse(Tape& t, const ParamVars& p, Var video, Var query, int d) {
  auto attend = [&](Var x, Var y, const std::string& blk) {
    Var xq = t.matmul(x, p.at(blk + ".wq"));
    Var yk = t.matmul(y, p.at(blk + ".wk"));
    Var yv = t.matmul(y, p.at(blk + ".wv"));
    Var scores = t.scale(t.matmul_t(xq, yk), 1.0 / std::sqrt(static_cast<double>(d)));
    Var attn = t.row_softmax(scores);
    return t.add(x, t.matmul(attn, yv));  // residual
  };
  Var vp = t.add_rowvec(t.matmul(video, p.at("proj_v.w")), p.at("proj_v.b"));
  Var qp = t.add_rowvec(t.matmul(query, p.at("proj_q.w")), p.at("proj_q.b"));
  FusedFeatures f;
  f.V = attend(vp, qp, "attn_v");
  f.Q = attend(qp, vp, "attn_q");
  f.q = t.mean_rows(f.Q);
  f.v_vd = t.mean_rows(f.V);
  return f;
}

struct EventPrediction {
  Var delta;   // center offset, frames
  Var width;   // event width, frames (> 1)
  Var center;  // p = t^c + delta
  Var s_hat;
  Var e_hat;
};

// Pooled fused video -> 2-layer perceptron -> (delta, width).
// delta = tanh(raw) * T/2, width = sigmoid(raw) * T + 1.
inline EventPrediction detect_event(Tape& t, const ParamVars& p, Var V_fused, double t_c, int t_len) {
  if (t_c < 0.0 || t_c > t_len)
    throw std::invalid_argument("detect_event: anchor t^c=" + std::to_string(t_c) +
                                " outside [0, " + std::to_string(t_len) + "]");
  Var pooled = t.mean_rows(V_fused);
  Var hidden = t.tanh_(t.add(t.vecmat(pooled, p.at("det.w1")), p.at("det.b1")));
  Var out = t.add(t.vecmat(hidden, p.at("det.w2")), p.at("det.b2"));
  EventPrediction e;
  e.delta = t.scale(t.tanh_(t.at(out, 0)), t_len / 2.0);
  e.width = t.add_const(t.scale(t.sigmoid(t.at(out, 1)), static_cast<double>(t_len)), 1.0);
  e.center = t.add_const(e.delta, t_c);
  Var half = t.scale(e.width, 0.5);
  e.s_hat = t.sub(e.center, half);
  e.e_hat = t.add(e.center, half);
  return e;
}

inline Var mask_sharpness(Tape& t, const ParamVars& p) { return t.softplus(p.at("mask.k_raw")); }

// m_t = sigmoid(k (t + 0.5 - s_hat)) * sigmoid(k (e_hat - t - 0.5)), t = 0..T-1.
inline Var plateau_mask(Tape& t, Var s_hat, Var e_hat, Var k, int t_len) {
  std::vector<double> pos(t_len);
  for (int i = 0; i < t_len; ++i) pos[i] = i + 0.5;
  Var posv = t.leaf({t_len}, pos);
  Var rise = t.sigmoid(t.smul(k, t.sub(posv, t.bcast(s_hat, t_len))));
  Var fall = t.sigmoid(t.smul(k, t.sub(t.bcast(e_hat, t_len), posv)));
  return t.mul(rise, fall);
}

struct PooledEvent {
  Var ev;  // D
  Var bg;  // D
};

// v_ev = (1/T) sum_t m_t V_t ; v_bg = (1/T) sum_t (1 - m_t) V_t.
inline PooledEvent pool_event(Tape& t, Var V_fused, Var m, int t_len) {
  if (t.shape(m).size() != 1 || t.shape(m)[0] != t_len)
    throw std::invalid_argument("pool_event: mask length does not match T");
  PooledEvent pe;
  pe.ev = t.scale(t.vecmat(m, V_fused), 1.0 / t_len);
  Var inv = t.add_const(t.scale(m, -1.0), 1.0);
  pe.bg = t.scale(t.vecmat(inv, V_fused), 1.0 / t_len);
  return pe;
}

// Export-side clamp: interval within [0, T], width >= 1 frame.
inline Interval clamp_interval(double s, double e, double t_len) {
  double c = (s + e) / 2.0;
  double w = std::max(e - s, 1.0);
  c = std::min(std::max(c, w / 2.0), t_len - w / 2.0);
  if (w > t_len) {
    w = t_len;
    c = t_len / 2.0;
  }
  return Interval{c - w / 2.0, c + w / 2.0};
}

}  // namespace cu
