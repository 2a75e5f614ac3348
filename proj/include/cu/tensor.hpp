#pragma once

// Dense f64 tensors recorded on a reverse-mode tape, plus a finite-difference
// gradient checker. The op catalog is fixed: exactly what the fusion model,
// the plateau mask and the contrastive losses need.

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cu {

using Shape = std::vector<int>;

inline int numel(const Shape& s) {
  int n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Constant host tensor, not attached to any tape.
struct Tensor {
  Shape shape;
  std::vector<double> data;
};

class Tape;

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

class Tape {
 public:
  Tape() { nodes_.reserve(256); }

  Var leaf(Shape shape, std::vector<double> data) {
    if (numel(shape) != static_cast<int>(data.size()))
      throw std::invalid_argument("leaf: shape " + shape_str(shape) + " does not match data size " +
                                  std::to_string(data.size()));
    return wrap(push(std::move(shape), std::move(data)));
  }
  Var leaf(const Tensor& t) { return leaf(t.shape, t.data); }
  Var scalar(double v) { return leaf(Shape{1}, {v}); }

  // --- accessors -----------------------------------------------------------

  const Shape& shape(Var v) const { return node(v).shape; }
  const std::vector<double>& val(Var v) const { return node(v).value; }
  const std::vector<double>& grad(Var v) const { return node(v).grad; }
  double sval(Var v) const {
    if (node(v).value.size() != 1) throw std::invalid_argument("sval: not a scalar");
    return node(v).value[0];
  }
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // --- binary elementwise --------------------------------------------------

  Var add(Var a, Var b) {
    return ew2(a, b, "add", [](double x, double y) { return x + y; },
               [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
  }
  Var sub(Var a, Var b) {
    return ew2(a, b, "sub", [](double x, double y) { return x - y; },
               [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
  }
  Var mul(Var a, Var b) {
    return ew2(a, b, "mul", [](double x, double y) { return x * y; },
               [](double, double y) { return y; }, [](double x, double) { return x; });
  }
  Var div(Var a, Var b) {
    return ew2(a, b, "div", [](double x, double y) { return x / y; },
               [](double, double y) { return 1.0 / y; },
               [](double x, double y) { return -x / (y * y); });
  }
  // max(a, b); subgradient follows the winning side, ties go to a.
  Var max2(Var a, Var b) {
    return ew2(a, b, "max2", [](double x, double y) { return x >= y ? x : y; },
               [](double x, double y) { return x >= y ? 1.0 : 0.0; },
               [](double x, double y) { return x >= y ? 0.0 : 1.0; });
  }

  // --- unary elementwise ---------------------------------------------------

  Var sigmoid(Var a) {
    return ew1(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
  }
  Var tanh_(Var a) {
    return ew1(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
  }
  Var softplus(Var a) {
    return ew1(a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
               [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
  }
  Var exp_(Var a) {
    return ew1(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
  }
  Var log_(Var a) {
    return ew1(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
  }
  Var sqrt_(Var a) {
    return ew1(a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return 0.5 / y; });
  }
  // max(x, 0); subgradient at 0 is 0.
  Var relu(Var a) {
    return ew1(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
  }
  Var clamp(Var a, double lo, double hi) {
    return ew1(a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
               [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
  }
  // Huber with delta=1: 0.5 x^2 inside, |x|-0.5 outside.
  Var huber(Var a) {
    return ew1(a,
               [](double x) { return std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5; },
               [](double x, double) { return std::abs(x) < 1.0 ? x : (x > 0 ? 1.0 : -1.0); });
  }
  Var scale(Var a, double c) {
    return ew1(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
  }
  Var add_const(Var a, double c) {
    return ew1(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
  }

  // --- reductions / broadcasts ---------------------------------------------

  Var sum(Var a) {
    double s = 0.0;
    for (double x : node(a).value) s += x;
    int id = push(Shape{1}, {s});
    nodes_[id].pull = [this, ia = a.id, id] {
      double g = nodes_[id].grad[0];
      for (double& d : nodes_[ia].grad) d += g;
    };
    return wrap(id);
  }
  Var mean(Var a) {
    int n = static_cast<int>(node(a).value.size());
    return scale(sum(a), 1.0 / n);
  }
  // Column mean of [n,m] -> [m].
  Var mean_rows(Var a) {
    const Shape& s = shape(a);
    if (s.size() != 2) throw std::invalid_argument("mean_rows: expected matrix, got " + shape_str(s));
    int n = s[0], m = s[1];
    std::vector<double> out(m, 0.0);
    const auto& v = node(a).value;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) out[j] += v[i * m + j];
    for (int j = 0; j < m; ++j) out[j] /= n;
    int id = push(Shape{m}, std::move(out));
    nodes_[id].pull = [this, ia = a.id, id, n, m] {
      const auto& g = nodes_[id].grad;
      auto& da = nodes_[ia].grad;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) da[i * m + j] += g[j] / n;
    };
    return wrap(id);
  }
  // Scalar broadcast to a length-n vector.
  Var bcast(Var a, int n) {
    if (node(a).value.size() != 1) throw std::invalid_argument("bcast: input must be scalar");
    std::vector<double> out(n, node(a).value[0]);
    int id = push(Shape{n}, std::move(out));
    nodes_[id].pull = [this, ia = a.id, id] {
      double s = 0.0;
      for (double g : nodes_[id].grad) s += g;
      nodes_[ia].grad[0] += s;
    };
    return wrap(id);
  }
  // scalar * tensor
  Var smul(Var s, Var a) {
    if (node(s).value.size() != 1) throw std::invalid_argument("smul: first input must be scalar");
    double sv = node(s).value[0];
    std::vector<double> out(node(a).value);
    for (double& x : out) x *= sv;
    int id = push(shape(a), std::move(out));
    nodes_[id].pull = [this, is = s.id, ia = a.id, id, sv] {
      const auto& g = nodes_[id].grad;
      const auto& av = nodes_[ia].value;
      auto& ds = nodes_[is].grad;
      auto& da = nodes_[ia].grad;
      double acc = 0.0;
      for (size_t i = 0; i < g.size(); ++i) {
        acc += g[i] * av[i];
        da[i] += sv * g[i];
      }
      ds[0] += acc;
    };
    return wrap(id);
  }
  // Pick element i of a vector as a scalar.
  Var at(Var a, int i) {
    int n = static_cast<int>(node(a).value.size());
    if (i < 0 || i >= n) throw std::invalid_argument("at: index out of range");
    int id = push(Shape{1}, {node(a).value[i]});
    nodes_[id].pull = [this, ia = a.id, id, i] { nodes_[ia].grad[i] += nodes_[id].grad[0]; };
    return wrap(id);
  }
  // Stack scalars into a vector.
  Var stack(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("stack: empty input");
    std::vector<double> out;
    out.reserve(xs.size());
    std::vector<int> ids;
    for (Var x : xs) {
      if (node(x).value.size() != 1) throw std::invalid_argument("stack: inputs must be scalars");
      out.push_back(node(x).value[0]);
      ids.push_back(x.id);
    }
    int id = push(Shape{static_cast<int>(xs.size())}, std::move(out));
    nodes_[id].pull = [this, ids, id] {
      for (size_t i = 0; i < ids.size(); ++i) nodes_[ids[i]].grad[0] += nodes_[id].grad[i];
    };
    return wrap(id);
  }

  // --- linear algebra -------------------------------------------------------

  // [n,k] x [k,m] -> [n,m]
  Var matmul(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
      throw std::invalid_argument("matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
    int n = sa[0], k = sa[1], m = sb[1];
    std::vector<double> out(static_cast<size_t>(n) * m, 0.0);
    const auto& A = node(a).value;
    const auto& B = node(b).value;
    for (int i = 0; i < n; ++i)
      for (int p = 0; p < k; ++p) {
        double av = A[i * k + p];
        for (int j = 0; j < m; ++j) out[i * m + j] += av * B[p * m + j];
      }
    int id = push(Shape{n, m}, std::move(out));
    nodes_[id].pull = [this, ia = a.id, ib = b.id, id, n, k, m] {
      const auto& G = nodes_[id].grad;
      const auto& A = nodes_[ia].value;
      const auto& B = nodes_[ib].value;
      auto& dA = nodes_[ia].grad;
      auto& dB = nodes_[ib].grad;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
          double g = G[i * m + j];
          if (g == 0.0) continue;
          for (int p = 0; p < k; ++p) {
            dA[i * k + p] += g * B[p * m + j];
            dB[p * m + j] += g * A[i * k + p];
          }
        }
    };
    return wrap(id);
  }
  // [n,k] x [m,k]^T -> [n,m]
  Var matmul_t(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1])
      throw std::invalid_argument("matmul_t: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb) + "^T");
    int n = sa[0], k = sa[1], m = sb[0];
    std::vector<double> out(static_cast<size_t>(n) * m, 0.0);
    const auto& A = node(a).value;
    const auto& B = node(b).value;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
        out[i * m + j] = s;
      }
    int id = push(Shape{n, m}, std::move(out));
    nodes_[id].pull = [this, ia = a.id, ib = b.id, id, n, k, m] {
      const auto& G = nodes_[id].grad;
      const auto& A = nodes_[ia].value;
      const auto& B = nodes_[ib].value;
      auto& dA = nodes_[ia].grad;
      auto& dB = nodes_[ib].grad;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
          double g = G[i * m + j];
          if (g == 0.0) continue;
          for (int p = 0; p < k; ++p) {
            dA[i * k + p] += g * B[j * k + p];
            dB[j * k + p] += g * A[i * k + p];
          }
        }
    };
    return wrap(id);
  }
  // v^T M : [t] x [t,d] -> [d]
  Var vecmat(Var v, Var m) {
    const Shape& sv = shape(v);
    const Shape& sm = shape(m);
    if (sv.size() != 1 || sm.size() != 2 || sv[0] != sm[0])
      throw std::invalid_argument("vecmat: incompatible shapes " + shape_str(sv) + " x " + shape_str(sm));
    int t = sm[0], d = sm[1];
    std::vector<double> out(d, 0.0);
    const auto& V = node(v).value;
    const auto& M = node(m).value;
    for (int i = 0; i < t; ++i) {
      double vi = V[i];
      for (int j = 0; j < d; ++j) out[j] += vi * M[i * d + j];
    }
    int id = push(Shape{d}, std::move(out));
    nodes_[id].pull = [this, iv = v.id, im = m.id, id, t, d] {
      const auto& G = nodes_[id].grad;
      const auto& V = nodes_[iv].value;
      const auto& M = nodes_[im].value;
      auto& dV = nodes_[iv].grad;
      auto& dM = nodes_[im].grad;
      for (int i = 0; i < t; ++i) {
        double acc = 0.0;
        for (int j = 0; j < d; ++j) {
          acc += G[j] * M[i * d + j];
          dM[i * d + j] += V[i] * G[j];
        }
        dV[i] += acc;
      }
    };
    return wrap(id);
  }
  // Row-broadcast add: [n,m] + [m]
  Var add_rowvec(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 2 || sb.size() != 1 || sa[1] != sb[0])
      throw std::invalid_argument("add_rowvec: incompatible shapes " + shape_str(sa) + " + " + shape_str(sb));
    int n = sa[0], m = sa[1];
    std::vector<double> out(node(a).value);
    const auto& B = node(b).value;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) out[i * m + j] += B[j];
    int id = push(sa, std::move(out));
    nodes_[id].pull = [this, ia = a.id, ib = b.id, id, n, m] {
      const auto& G = nodes_[id].grad;
      auto& dA = nodes_[ia].grad;
      auto& dB = nodes_[ib].grad;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
          dA[i * m + j] += G[i * m + j];
          dB[j] += G[i * m + j];
        }
    };
    return wrap(id);
  }

  Var dot(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 1 || sb.size() != 1 || sa[0] != sb[0])
      throw std::invalid_argument("dot: incompatible shapes " + shape_str(sa) + " . " + shape_str(sb));
    double s = 0.0;
    const auto& A = node(a).value;
    const auto& B = node(b).value;
    for (size_t i = 0; i < A.size(); ++i) s += A[i] * B[i];
    int id = push(Shape{1}, {s});
    nodes_[id].pull = [this, ia = a.id, ib = b.id, id] {
      double g = nodes_[id].grad[0];
      const auto& A = nodes_[ia].value;
      const auto& B = nodes_[ib].value;
      auto& dA = nodes_[ia].grad;
      auto& dB = nodes_[ib].grad;
      for (size_t i = 0; i < A.size(); ++i) {
        dA[i] += g * B[i];
        dB[i] += g * A[i];
      }
    };
    return wrap(id);
  }

  // v / (||v|| + 1e-12)
  Var normalize(Var a) {
    const Shape& sa = shape(a);
    if (sa.size() != 1) throw std::invalid_argument("normalize: expected vector, got " + shape_str(sa));
    const auto& A = node(a).value;
    double r = 0.0;
    for (double x : A) r += x * x;
    r = std::sqrt(r) + 1e-12;
    std::vector<double> out(A);
    for (double& x : out) x /= r;
    int id = push(sa, std::move(out));
    nodes_[id].pull = [this, ia = a.id, id, r] {
      const auto& G = nodes_[id].grad;
      const auto& Y = nodes_[id].value;
      auto& dA = nodes_[ia].grad;
      double yg = 0.0;
      for (size_t i = 0; i < G.size(); ++i) yg += Y[i] * G[i];
      for (size_t i = 0; i < G.size(); ++i) dA[i] += (G[i] - Y[i] * yg) / r;
    };
    return wrap(id);
  }

  Var cosine(Var a, Var b) { return dot(normalize(a), normalize(b)); }

  // Softmax per row of [n,m].
  Var row_softmax(Var a) {
    const Shape& sa = shape(a);
    if (sa.size() != 2) throw std::invalid_argument("row_softmax: expected matrix, got " + shape_str(sa));
    int n = sa[0], m = sa[1];
    std::vector<double> out(node(a).value);
    for (int i = 0; i < n; ++i) {
      double mx = out[i * m];
      for (int j = 1; j < m; ++j) mx = std::max(mx, out[i * m + j]);
      double z = 0.0;
      for (int j = 0; j < m; ++j) {
        out[i * m + j] = std::exp(out[i * m + j] - mx);
        z += out[i * m + j];
      }
      for (int j = 0; j < m; ++j) out[i * m + j] /= z;
    }
    int id = push(sa, std::move(out));
    nodes_[id].pull = [this, ia = a.id, id, n, m] {
      const auto& G = nodes_[id].grad;
      const auto& Y = nodes_[id].value;
      auto& dA = nodes_[ia].grad;
      for (int i = 0; i < n; ++i) {
        double gy = 0.0;
        for (int j = 0; j < m; ++j) gy += G[i * m + j] * Y[i * m + j];
        for (int j = 0; j < m; ++j) dA[i * m + j] += Y[i * m + j] * (G[i * m + j] - gy);
      }
    };
    return wrap(id);
  }
  // Softmax over a vector.
  Var softmax(Var a) {
    const Shape& sa = shape(a);
    if (sa.size() != 1) throw std::invalid_argument("softmax: expected vector, got " + shape_str(sa));
    int m = sa[0];
    std::vector<double> out(node(a).value);
    double mx = out[0];
    for (double x : out) mx = std::max(mx, x);
    double z = 0.0;
    for (double& x : out) {
      x = std::exp(x - mx);
      z += x;
    }
    for (double& x : out) x /= z;
    int id = push(sa, std::move(out));
    nodes_[id].pull = [this, ia = a.id, id, m] {
      const auto& G = nodes_[id].grad;
      const auto& Y = nodes_[id].value;
      auto& dA = nodes_[ia].grad;
      double gy = 0.0;
      for (int j = 0; j < m; ++j) gy += G[j] * Y[j];
      for (int j = 0; j < m; ++j) dA[j] += Y[j] * (G[j] - gy);
    };
    return wrap(id);
  }

  // --- backward --------------------------------------------------------------

  void backward(Var root) {
    if (root.tape != this || root.id < 0 || root.id >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("backward: root not on this tape");
    if (node(root).value.size() != 1)
      throw std::invalid_argument("backward: root must be scalar, got " + shape_str(shape(root)));
    for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
    nodes_[root.id].grad[0] = 1.0;
    for (int i = root.id; i >= 0; --i)
      if (nodes_[i].pull) nodes_[i].pull();
  }

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::function<void()> pull;  // accumulates this node's grad into its inputs
  };
  std::vector<Node> nodes_;

  int push(Shape shape, std::vector<double> value) {
    Node n;
    n.shape = std::move(shape);
    n.grad.assign(value.size(), 0.0);
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }
  Var wrap(int id) { return Var{this, id}; }
  const Node& node(Var v) const {
    if (v.tape != this) throw std::invalid_argument("tensor op: input from a different tape");
    return nodes_.at(v.id);
  }

  template <typename F, typename DA, typename DB>
  Var ew2(Var a, Var b, const char* name, F f, DA da_fn, DB db_fn) {
    if (shape(a) != shape(b))
      throw std::invalid_argument(std::string(name) + ": shape mismatch " + shape_str(shape(a)) +
                                  " vs " + shape_str(shape(b)));
    const auto& A = node(a).value;
    const auto& B = node(b).value;
    std::vector<double> out(A.size());
    for (size_t i = 0; i < A.size(); ++i) out[i] = f(A[i], B[i]);
    int id = push(shape(a), std::move(out));
    nodes_[id].pull = [this, ia = a.id, ib = b.id, id, da_fn, db_fn] {
      const auto& G = nodes_[id].grad;
      const auto& A = nodes_[ia].value;
      const auto& B = nodes_[ib].value;
      auto& dA = nodes_[ia].grad;
      auto& dB = nodes_[ib].grad;
      for (size_t i = 0; i < G.size(); ++i) {
        dA[i] += G[i] * da_fn(A[i], B[i]);
        dB[i] += G[i] * db_fn(A[i], B[i]);
      }
    };
    return wrap(id);
  }
  template <typename F, typename DF>
  Var ew1(Var a, F f, DF df) {
    const auto& A = node(a).value;
    std::vector<double> out(A.size());
    for (size_t i = 0; i < A.size(); ++i) out[i] = f(A[i]);
    int id = push(shape(a), std::move(out));
    nodes_[id].pull = [this, ia = a.id, id, f, df] {
      const auto& G = nodes_[id].grad;
      const auto& A = nodes_[ia].value;
      const auto& Y = nodes_[id].value;
      auto& dA = nodes_[ia].grad;
      for (size_t i = 0; i < G.size(); ++i) dA[i] += G[i] * df(A[i], Y[i]);
    };
    return wrap(id);
  }
};

// Name-dispatched op application; used by the per-op gradient sweep.
inline Var forward_op(Tape& t, std::string_view kind, const std::vector<Var>& in) {
  auto need = [&](size_t n) {
    if (in.size() != n)
      throw std::invalid_argument("forward_op: op '" + std::string(kind) + "' takes " +
                                  std::to_string(n) + " inputs, got " + std::to_string(in.size()));
  };
  if (kind == "add") { need(2); return t.add(in[0], in[1]); }
  if (kind == "sub") { need(2); return t.sub(in[0], in[1]); }
  if (kind == "mul") { need(2); return t.mul(in[0], in[1]); }
  if (kind == "div") { need(2); return t.div(in[0], in[1]); }
  if (kind == "max2") { need(2); return t.max2(in[0], in[1]); }
  if (kind == "matmul") { need(2); return t.matmul(in[0], in[1]); }
  if (kind == "matmul_t") { need(2); return t.matmul_t(in[0], in[1]); }
  if (kind == "vecmat") { need(2); return t.vecmat(in[0], in[1]); }
  if (kind == "add_rowvec") { need(2); return t.add_rowvec(in[0], in[1]); }
  if (kind == "dot") { need(2); return t.dot(in[0], in[1]); }
  if (kind == "cosine") { need(2); return t.cosine(in[0], in[1]); }
  if (kind == "smul") { need(2); return t.smul(in[0], in[1]); }
  if (kind == "sigmoid") { need(1); return t.sigmoid(in[0]); }
  if (kind == "tanh") { need(1); return t.tanh_(in[0]); }
  if (kind == "softplus") { need(1); return t.softplus(in[0]); }
  if (kind == "exp") { need(1); return t.exp_(in[0]); }
  if (kind == "log") { need(1); return t.log_(in[0]); }
  if (kind == "sqrt") { need(1); return t.sqrt_(in[0]); }
  if (kind == "relu") { need(1); return t.relu(in[0]); }
  if (kind == "huber") { need(1); return t.huber(in[0]); }
  if (kind == "sum") { need(1); return t.sum(in[0]); }
  if (kind == "mean") { need(1); return t.mean(in[0]); }
  if (kind == "mean_rows") { need(1); return t.mean_rows(in[0]); }
  if (kind == "row_softmax") { need(1); return t.row_softmax(in[0]); }
  if (kind == "softmax") { need(1); return t.softmax(in[0]); }
  if (kind == "normalize") { need(1); return t.normalize(in[0]); }
  throw std::invalid_argument("forward_op: unknown op kind '" + std::string(kind) + "'");
}

// Scalar-valued composite of some parameter tensors.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Max relative error between analytic gradients and central differences.
// Callers keep hinge arguments away from their kinks (resample if any hinge
// input has magnitude < 10h).
inline double grad_check(const ScalarFn& fn, const std::vector<Tensor>& params, double h = 1e-4) {
  auto eval = [&](const std::vector<Tensor>& p) {
    Tape t;
    std::vector<Var> leaves;
    leaves.reserve(p.size());
    for (const auto& x : p) leaves.push_back(t.leaf(x));
    return t.sval(fn(t, leaves));
  };

  Tape t;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& x : params) leaves.push_back(t.leaf(x));
  Var root = fn(t, leaves);
  if (t.val(root).size() != 1) throw std::invalid_argument("grad_check: fn must be scalar-valued");
  t.backward(root);
  std::vector<std::vector<double>> analytic;
  for (Var l : leaves) analytic.push_back(t.grad(l));

  double worst = 0.0;
  std::vector<Tensor> work = params;
  for (size_t p = 0; p < params.size(); ++p) {
    for (size_t i = 0; i < params[p].data.size(); ++i) {
      double orig = work[p].data[i];
      work[p].data[i] = orig + h;
      double fp = eval(work);
      work[p].data[i] = orig - h;
      double fm = eval(work);
      work[p].data[i] = orig;
      double num = (fp - fm) / (2.0 * h);
      double ana = analytic[p][i];
      double denom = std::max({std::abs(ana), std::abs(num), 1e-8});
      worst = std::max(worst, std::abs(ana - num) / denom);
    }
  }
  return worst;
}

}  // namespace cu
