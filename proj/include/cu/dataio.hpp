#pragma once

// Corpus file format ("cu-corpus/1"), synthetic corpus generation with planted
// events and semantic clusters, partial-label simulation, and the pseudo-label
// and partial-label record files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cu {

struct Interval {
  double start = 0.0;
  double end = 0.0;
  double length() const { return end - start; }
};

struct PartialLabel {
  double center = 0.0;  // t^c, frames
  double range = 0.0;   // r >= 0, frames
  double ts() const { return center - range / 2.0; }
  double te() const { return center + range / 2.0; }
};

struct SampleRecord {
  std::string id;
  int t_len = 0;  // T, frames
  int m_len = 0;  // M, query tokens
  double fps = 1.0;
  std::vector<double> video;  // T x Dv, row-major
  std::vector<double> query;  // M x Dq, row-major
  std::vector<double> sent;   // Ds, optional (empty when absent)
  std::optional<Interval> gt;
  std::optional<PartialLabel> label;
};

struct Corpus {
  int dv = 0, dq = 0, ds = 0;
  std::string provenance;
  std::vector<SampleRecord> samples;
};

namespace detail {

inline void write_f32_blob(const std::filesystem::path& p, const std::vector<double>& data) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open blob for writing: " + p.string());
  for (double d : data) {
    float x = static_cast<float>(d);
    f.write(reinterpret_cast<const char*>(&x), sizeof(float));
  }
}

inline std::vector<double> read_f32_blob(const std::filesystem::path& p, size_t count,
                                         const std::string& sample_id) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("missing blob for sample " + sample_id + ": " + p.string());
  f.seekg(0, std::ios::end);
  auto bytes = static_cast<size_t>(f.tellg());
  if (bytes != count * sizeof(float))
    throw std::runtime_error("blob size mismatch for sample " + sample_id + ": " + p.string() +
                             " has " + std::to_string(bytes) + " bytes, expected " +
                             std::to_string(count * sizeof(float)));
  f.seekg(0);
  std::vector<float> raw(count);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
  std::vector<double> out(count);
  for (size_t i = 0; i < count; ++i) {
    if (!std::isfinite(raw[i]))
      throw std::runtime_error("non-finite value in blob for sample " + sample_id);
    out[i] = static_cast<double>(raw[i]);
  }
  return out;
}

// Feature values round-trip through f32 blobs; quantize at generation time so
// in-memory data equals what a save/load cycle produces.
inline double f32q(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace detail

// --- corpus manifest ---------------------------------------------------------

inline void save_corpus(const Corpus& c, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream m(dir / "manifest.txt");
  if (!m) throw std::runtime_error("cannot write manifest in " + dir.string());
  m.precision(17);
  m << "cu-corpus/1\n";
  m << "dv " << c.dv << "\n";
  m << "dq " << c.dq << "\n";
  m << "ds " << c.ds << "\n";
  m << "provenance " << (c.provenance.empty() ? "external" : c.provenance) << "\n";
  m << "samples " << c.samples.size() << "\n";
  for (const auto& s : c.samples) {
    std::string vb = s.id + ".video.f32";
    std::string qb = s.id + ".query.f32";
    std::string sb = s.sent.empty() ? "-" : s.id + ".sent.f32";
    m << s.id << " " << s.t_len << " " << s.m_len << " " << s.fps << " " << vb << " " << qb << " "
      << sb;
    if (s.gt)
      m << " " << s.gt->start << " " << s.gt->end << "\n";
    else
      m << " - -\n";
    detail::write_f32_blob(dir / vb, s.video);
    detail::write_f32_blob(dir / qb, s.query);
    if (!s.sent.empty()) detail::write_f32_blob(dir / sb, s.sent);
  }
}

inline Corpus load_corpus(const std::filesystem::path& manifest_path) {
  namespace fs = std::filesystem;
  fs::path mp = manifest_path;
  if (fs::is_directory(mp)) mp /= "manifest.txt";
  std::ifstream m(mp);
  if (!m) throw std::runtime_error("cannot open manifest: " + mp.string());
  fs::path dir = mp.parent_path();
  std::string line;
  if (!std::getline(m, line) || line != "cu-corpus/1")
    throw std::runtime_error("bad manifest header in " + mp.string() + " (expected cu-corpus/1)");
  Corpus c;
  size_t n = 0;
  while (std::getline(m, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "dv") is >> c.dv;
    else if (key == "dq") is >> c.dq;
    else if (key == "ds") is >> c.ds;
    else if (key == "provenance") { std::getline(is, c.provenance); if (!c.provenance.empty() && c.provenance[0] == ' ') c.provenance.erase(0, 1); }
    else if (key == "samples") { is >> n; break; }
    else throw std::runtime_error("unknown manifest key: " + key);
  }
  c.samples.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    if (!std::getline(m, line)) throw std::runtime_error("manifest truncated: expected " + std::to_string(n) + " samples");
    std::istringstream is(line);
    SampleRecord s;
    std::string vb, qb, sb, gs, ge;
    if (!(is >> s.id >> s.t_len >> s.m_len >> s.fps >> vb >> qb >> sb >> gs >> ge))
      throw std::runtime_error("malformed manifest row: " + line);
    if (s.t_len < 2 || s.m_len < 1)
      throw std::runtime_error("sample " + s.id + ": T must be >= 2 and M >= 1");
    s.video = detail::read_f32_blob(dir / vb, static_cast<size_t>(s.t_len) * c.dv, s.id);
    s.query = detail::read_f32_blob(dir / qb, static_cast<size_t>(s.m_len) * c.dq, s.id);
    if (sb != "-") s.sent = detail::read_f32_blob(dir / sb, static_cast<size_t>(c.ds), s.id);
    if (gs != "-") {
      Interval g{std::stod(gs), std::stod(ge)};
      if (!(0.0 <= g.start && g.start < g.end && g.end <= s.t_len))
        throw std::runtime_error("sample " + s.id + ": invalid gt interval");
      s.gt = g;
    }
    c.samples.push_back(std::move(s));
  }
  if (c.samples.empty()) throw std::runtime_error("corpus has no samples: " + mp.string());
  return c;
}

// --- synthetic generator ------------------------------------------------------

struct GenConfig {
  int num_samples = 200;
  int t_len = 64;
  int dv = 32;
  int dq = 16;
  int ds = 16;  // 0 disables the sentence-embed field
  int m_len = 6;
  int k_true = 5;
  double ev_min = 10.0;  // event length range, frames
  double ev_max = 18.0;
  double noise = 0.1;
  double fps = 2.0;
  uint64_t seed = 7;
};

inline Corpus generate_synthetic(const GenConfig& g) {
  if (!(g.ev_min > 0.0 && g.ev_max < g.t_len && g.ev_min <= g.ev_max))
    throw std::invalid_argument("generate_synthetic: event length range must lie inside (0, T)");
  if (g.k_true < 2) throw std::invalid_argument("generate_synthetic: K_true must be >= 2");
  std::mt19937_64 rng(g.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  auto proto = [&](int d) {
    std::vector<double> p(d);
    for (double& x : p) x = gauss(rng);
    return p;
  };
  std::vector<std::vector<double>> video_proto, token_proto, sent_proto;
  for (int k = 0; k < g.k_true; ++k) {
    video_proto.push_back(proto(g.dv));
    token_proto.push_back(proto(g.dq));
    sent_proto.push_back(proto(g.ds > 0 ? g.ds : 1));
  }
  std::vector<double> bg_proto = proto(g.dv);

  Corpus c;
  c.dv = g.dv;
  c.dq = g.dq;
  c.ds = g.ds;
  c.provenance = "synthetic-seed-" + std::to_string(g.seed);
  std::uniform_int_distribution<int> cluster_pick(0, g.k_true - 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int i = 0; i < g.num_samples; ++i) {
    SampleRecord s;
    {
      std::ostringstream os;
      os << "s" << std::setw(4) << std::setfill('0') << i;
      s.id = os.str();
    }
    s.t_len = g.t_len;
    s.m_len = g.m_len;
    s.fps = g.fps;
    int k = cluster_pick(rng);
    double len = g.ev_min + (g.ev_max - g.ev_min) * unif(rng);
    double start = (g.t_len - len) * unif(rng);
    s.gt = Interval{start, start + len};
    s.video.resize(static_cast<size_t>(g.t_len) * g.dv);
    for (int t = 0; t < g.t_len; ++t) {
      bool in_event = (t + 0.5 >= start && t + 0.5 <= start + len);
      const auto& p = in_event ? video_proto[k] : bg_proto;
      for (int d = 0; d < g.dv; ++d)
        s.video[static_cast<size_t>(t) * g.dv + d] = detail::f32q(p[d] + g.noise * gauss(rng));
    }
    s.query.resize(static_cast<size_t>(g.m_len) * g.dq);
    for (int mtok = 0; mtok < g.m_len; ++mtok)
      for (int d = 0; d < g.dq; ++d)
        s.query[static_cast<size_t>(mtok) * g.dq + d] =
            detail::f32q(token_proto[k][d] + g.noise * gauss(rng));
    if (g.ds > 0) {
      s.sent.resize(g.ds);
      for (int d = 0; d < g.ds; ++d) s.sent[d] = detail::f32q(sent_proto[k][d] + g.noise * gauss(rng));
    }
    c.samples.push_back(std::move(s));
  }
  return c;
}

// Deterministic tail split: the last n_test samples become the held-out set.
inline std::pair<Corpus, Corpus> split_corpus(const Corpus& c, int n_test) {
  if (n_test < 1 || n_test >= static_cast<int>(c.samples.size()))
    throw std::invalid_argument("split_corpus: n_test must be in [1, num_samples)");
  Corpus train = c, test = c;
  train.samples.assign(c.samples.begin(), c.samples.end() - n_test);
  test.samples.assign(c.samples.end() - n_test, c.samples.end());
  return {std::move(train), std::move(test)};
}

// --- partial-label simulation --------------------------------------------------

enum class LabelDist { Uniform, Gaussian };

inline LabelDist parse_label_dist(const std::string& s) {
  if (s == "uniform") return LabelDist::Uniform;
  if (s == "gaussian") return LabelDist::Gaussian;
  throw std::invalid_argument("unknown label distribution '" + s + "' (valid: uniform, gaussian)");
}

inline Corpus simulate_partial_labels(const Corpus& in, LabelDist dist, double clip_seconds,
                                      uint64_t seed) {
  if (clip_seconds < 0.0) throw std::invalid_argument("clip duration must be >= 0");
  Corpus out = in;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto& s : out.samples) {
    if (!s.gt) throw std::runtime_error("sample " + s.id + " has no gt interval; cannot simulate labels");
    double gs = s.gt->start, ge = s.gt->end;
    double r = std::min(clip_seconds * s.fps, ge - gs);  // truncate to event length
    double lo = gs + r / 2.0, hi = ge - r / 2.0;
    double center;
    if (dist == LabelDist::Uniform) {
      center = lo + (hi - lo) * unif(rng);
    } else {
      double mu = (gs + ge) / 2.0, sigma = (ge - gs) / 6.0;
      center = (lo + hi) / 2.0;  // fallback: interval midpoint
      for (int tries = 0; tries < 100; ++tries) {
        double x = mu + sigma * gauss(rng);
        if (x >= lo && x <= hi) {
          center = x;
          break;
        }
      }
    }
    s.label = PartialLabel{center, r};
  }
  return out;
}

// --- line-delimited record files ------------------------------------------------

inline void save_pseudo_labels(const std::vector<std::pair<std::string, Interval>>& labels,
                               const std::filesystem::path& path) {
  std::map<std::string, int> seen;
  for (const auto& [id, iv] : labels) {
    if (++seen[id] > 1) throw std::runtime_error("duplicate sample-id in pseudo labels: " + id);
    if (iv.start > iv.end)
      throw std::runtime_error("invalid pseudo interval for " + id + ": start > end");
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write pseudo labels: " + path.string());
  f << "cu-pseudo/1\n";
  f.precision(17);
  for (const auto& [id, iv] : labels) f << id << " " << iv.start << " " << iv.end << "\n";
}

inline std::vector<std::pair<std::string, Interval>> load_pseudo_labels(
    const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open pseudo labels: " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != "cu-pseudo/1")
    throw std::runtime_error("bad pseudo-label header in " + path.string());
  std::vector<std::pair<std::string, Interval>> out;
  std::map<std::string, int> seen;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string id;
    Interval iv;
    if (!(is >> id >> iv.start >> iv.end)) throw std::runtime_error("malformed pseudo-label row: " + line);
    if (++seen[id] > 1) throw std::runtime_error("duplicate sample-id in pseudo labels: " + id);
    if (iv.start > iv.end) throw std::runtime_error("invalid pseudo interval for " + id);
    out.emplace_back(id, iv);
  }
  return out;
}

// Partial labels travel in their own record file so corpora stay label-free.
inline void save_partial_labels(const Corpus& c, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write labels: " + path.string());
  f << "cu-labels/1\n";
  f.precision(17);
  for (const auto& s : c.samples) {
    if (!s.label) throw std::runtime_error("sample " + s.id + " has no partial label to save");
    f << s.id << " " << s.label->center << " " << s.label->range << "\n";
  }
}

inline void load_partial_labels(Corpus& c, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open labels: " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != "cu-labels/1")
    throw std::runtime_error("bad label header in " + path.string());
  std::map<std::string, PartialLabel> by_id;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string id;
    PartialLabel pl;
    if (!(is >> id >> pl.center >> pl.range)) throw std::runtime_error("malformed label row: " + line);
    if (by_id.count(id)) throw std::runtime_error("duplicate sample-id in labels: " + id);
    by_id[id] = pl;
  }
  for (auto& s : c.samples) {
    auto it = by_id.find(s.id);
    if (it == by_id.end()) throw std::runtime_error("no partial label for sample " + s.id);
    s.label = it->second;
  }
}

}  // namespace cu
