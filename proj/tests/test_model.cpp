#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "cu/model.hpp"

namespace fs = std::filesystem;
using namespace cu;

namespace {

bool equal_params(const ParamSet& a, const ParamSet& b) {
  if (a.items.size() != b.items.size()) return false;
  for (size_t i = 0; i < a.items.size(); ++i)
    if (a.items[i].name != b.items[i].name || a.items[i].value.shape != b.items[i].value.shape ||
        a.items[i].value.data != b.items[i].value.data)
      return false;
  return true;
}

Var rand_leaf(Tape& t, Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> data(numel(shape));
  for (double& x : data) x = u(rng);
  return t.leaf(std::move(shape), std::move(data));
}

}  // namespace

TEST_CASE("init is deterministic and fan-in bounded") {
  ModelDims dims{32, 16, 8};
  ParamSet a = init_params(dims, 42);
  ParamSet b = init_params(dims, 42);
  CHECK(equal_params(a, b));
  ParamSet c = init_params(dims, 43);
  CHECK_FALSE(equal_params(a, c));

  auto bound_ok = [&](const char* name, int fan_in) {
    for (double x : a.at(name).data) CHECK(std::abs(x) <= 1.0 / std::sqrt(fan_in));
  };
  bound_ok("proj_v.w", 32);
  bound_ok("proj_q.w", 16);
  bound_ok("attn_v.wq", 8);
  bound_ok("det.w1", 8);
}

TEST_CASE("shape audit at D=8") {
  ModelDims dims{32, 16, 8};
  ParamSet p = init_params(dims, 1);
  CHECK(p.at("proj_v.w").shape == Shape{32, 8});
  CHECK(p.at("proj_q.w").shape == Shape{16, 8});
  for (const char* n : {"attn_v.wq", "attn_v.wk", "attn_v.wv", "attn_q.wq", "attn_q.wk",
                        "attn_q.wv", "det.w1"})
    CHECK(p.at(n).shape == Shape{8, 8});
  CHECK(p.at("det.w2").shape == Shape{8, 2});
  CHECK(p.at("mask.k_raw").shape == Shape{1});
  CHECK(p.scalar_count() == 32u * 8 + 8 + 16 * 8 + 8 + 6 * 64 + 64 + 8 + 16 + 2 + 1);
}

TEST_CASE("sharpness init satisfies softplus(k_raw) == k_init") {
  for (double k_init : {1.0, 3.0, 0.5}) {
    ParamSet p = init_params(ModelDims{4, 4, 4}, 0, k_init);
    double k_raw = p.at("mask.k_raw").data[0];
    CHECK(std::log1p(std::exp(k_raw)) == doctest::Approx(k_init).epsilon(1e-12));
  }
}

TEST_CASE("fusion with one key reduces attention to the single value row") {
  // With T=1 and M=1 the row softmax has one entry, so attention weight is
  // exactly 1 and each fused row is its projection plus the other side's value.
  ModelDims dims{3, 2, 4};
  ParamSet p = init_params(dims, 9);
  Tape t;
  ParamVars pv = insert_leaves(t, p);
  std::mt19937_64 rng(5);
  Var video = rand_leaf(t, {1, 3}, rng);
  Var query = rand_leaf(t, {1, 2}, rng);
  FusedFeatures f = fuse(t, pv, video, query, dims.d);

  Var vp = t.add_rowvec(t.matmul(video, pv.at("proj_v.w")), pv.at("proj_v.b"));
  Var qp = t.add_rowvec(t.matmul(query, pv.at("proj_q.w")), pv.at("proj_q.b"));
  Var expect_v = t.add(vp, t.matmul(qp, pv.at("attn_v.wv")));
  for (int j = 0; j < dims.d; ++j)
    CHECK(t.val(f.V)[j] == doctest::Approx(t.val(expect_v)[j]).epsilon(1e-12));
}

TEST_CASE("fusion output shapes") {
  ModelDims dims{6, 5, 4};
  ParamSet p = init_params(dims, 2);
  Tape t;
  ParamVars pv = insert_leaves(t, p);
  std::mt19937_64 rng(1);
  FusedFeatures f = fuse(t, pv, rand_leaf(t, {7, 6}, rng), rand_leaf(t, {3, 5}, rng), dims.d);
  CHECK(t.shape(f.V) == Shape{7, 4});
  CHECK(t.shape(f.Q) == Shape{3, 4});
  CHECK(t.shape(f.q) == Shape{4});
  CHECK(t.shape(f.v_vd) == Shape{4});
}

TEST_CASE("detector identities") {
  ModelDims dims{4, 4, 4};
  ParamSet p = init_params(dims, 3);
  const int T = 64;

  SUBCASE("zero raw outputs give centered anchor and width T/2+1") {
    for (double& x : p["det.w2"].data) x = 0.0;
    Tape t;
    ParamVars pv = insert_leaves(t, p);
    std::mt19937_64 rng(2);
    Var V = rand_leaf(t, {T, 4}, rng);
    EventPrediction e = detect_event(t, pv, V, 20.0, T);
    CHECK(t.sval(e.delta) == doctest::Approx(0.0));
    CHECK(t.sval(e.width) == doctest::Approx(T / 2.0 + 1.0));
    CHECK(t.sval(e.center) == doctest::Approx(20.0));
  }

  SUBCASE("anchor 32, offset -4, width 10 puts the interval at [23, 33]") {
    // Force the head output through its biases: raw0 = atanh(-4/(T/2)),
    // raw1 = logit((10-1)/T).
    for (double& x : p["det.w2"].data) x = 0.0;
    p["det.b2"].data[0] = std::atanh(-4.0 / (T / 2.0));
    p["det.b2"].data[1] = std::log((9.0 / T) / (1.0 - 9.0 / T));
    Tape t;
    ParamVars pv = insert_leaves(t, p);
    std::mt19937_64 rng(2);
    EventPrediction e = detect_event(t, pv, rand_leaf(t, {T, 4}, rng), 32.0, T);
    CHECK(t.sval(e.delta) == doctest::Approx(-4.0).epsilon(1e-9));
    CHECK(t.sval(e.width) == doctest::Approx(10.0).epsilon(1e-9));
    CHECK(t.sval(e.s_hat) == doctest::Approx(23.0).epsilon(1e-9));
    CHECK(t.sval(e.e_hat) == doctest::Approx(33.0).epsilon(1e-9));
  }

  SUBCASE("e_hat - s_hat equals width exactly") {
    Tape t;
    ParamVars pv = insert_leaves(t, p);
    std::mt19937_64 rng(8);
    EventPrediction e = detect_event(t, pv, rand_leaf(t, {T, 4}, rng), 11.0, T);
    CHECK(t.sval(t.sub(e.e_hat, e.s_hat)) == doctest::Approx(t.sval(e.width)).epsilon(1e-12));
    CHECK(t.sval(e.width) > 1.0);
  }

  SUBCASE("anchor outside the video is rejected") {
    Tape t;
    ParamVars pv = insert_leaves(t, p);
    std::mt19937_64 rng(8);
    Var V = rand_leaf(t, {T, 4}, rng);
    CHECK_THROWS_AS((void)detect_event(t, pv, V, -1.0, T), std::invalid_argument);
    CHECK_THROWS_AS((void)detect_event(t, pv, V, T + 0.5, T), std::invalid_argument);
  }
}

TEST_CASE("plateau mask values") {
  Tape t;
  SUBCASE("hand value at the rising edge") {
    Var m = plateau_mask(t, t.scalar(10.0), t.scalar(20.0), t.scalar(2.0), 64);
    // t=10: sigmoid(2*0.5) * sigmoid(2*9.5)
    CHECK(t.val(m)[10] == doctest::Approx(0.7311).epsilon(1e-4));
  }
  SUBCASE("saturation inside and outside") {
    Var m = plateau_mask(t, t.scalar(10.0), t.scalar(50.0), t.scalar(10.0), 64);
    CHECK(t.val(m)[30] > 0.999);
    CHECK(t.val(m)[2] < 0.001);
    CHECK(t.val(m)[60] < 0.001);
  }
  SUBCASE("mask mass grows with interval width") {
    auto mass = [&](double s, double e) {
      Var m = plateau_mask(t, t.scalar(s), t.scalar(e), t.scalar(3.0), 64);
      double acc = 0.0;
      for (double x : t.val(m)) acc += x;
      return acc;
    };
    CHECK(mass(20.0, 30.0) < mass(15.0, 35.0));
  }
}

TEST_CASE("event pooling identities") {
  Tape t;
  std::mt19937_64 rng(4);
  const int T = 4, D = 3;
  Var V = rand_leaf(t, {T, D}, rng);

  SUBCASE("all-ones mask pools the whole video") {
    Var ones = t.leaf({T}, {1, 1, 1, 1});
    PooledEvent pe = pool_event(t, V, ones, T);
    Var v_vd = t.mean_rows(V);
    for (int j = 0; j < D; ++j) {
      CHECK(t.val(pe.ev)[j] == doctest::Approx(t.val(v_vd)[j]).epsilon(1e-12));
      CHECK(std::abs(t.val(pe.bg)[j]) < 1e-12);
    }
  }
  SUBCASE("half mask splits rows") {
    Var m = t.leaf({T}, {1, 1, 0, 0});
    PooledEvent pe = pool_event(t, V, m, T);
    const auto& v = t.val(V);
    for (int j = 0; j < D; ++j) {
      CHECK(t.val(pe.ev)[j] == doctest::Approx((v[j] + v[D + j]) / 4.0).epsilon(1e-12));
      CHECK(t.val(pe.bg)[j] == doctest::Approx((v[2 * D + j] + v[3 * D + j]) / 4.0).epsilon(1e-12));
    }
  }
  SUBCASE("ev + bg equals the video mean for any mask") {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> mv(T);
    for (double& x : mv) x = u(rng);
    PooledEvent pe = pool_event(t, V, t.leaf({T}, mv), T);
    Var v_vd = t.mean_rows(V);
    Var s = t.add(pe.ev, pe.bg);
    for (int j = 0; j < D; ++j)
      CHECK(t.val(s)[j] == doctest::Approx(t.val(v_vd)[j]).epsilon(1e-10));
  }
  SUBCASE("mask length mismatch rejected") {
    Var bad = t.leaf({3}, {1, 1, 1});
    CHECK_THROWS_AS((void)pool_event(t, V, bad, T), std::invalid_argument);
  }
}

TEST_CASE("full forward gradient check") {
  ModelDims dims{4, 3, 4};
  ParamSet p = init_params(dims, 17);
  const int T = 6, M = 2;
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor video{{T, dims.dv}, {}};
  video.data.resize(T * dims.dv);
  for (double& x : video.data) x = u(rng);
  Tensor query{{M, dims.dq}, {}};
  query.data.resize(M * dims.dq);
  for (double& x : query.data) x = u(rng);

  std::vector<Tensor> leaves;
  std::vector<std::string> names;
  for (const auto& it : p.items) {
    leaves.push_back(it.value);
    names.push_back(it.name);
  }
  leaves.push_back(video);
  leaves.push_back(query);

  cu::ScalarFn fn = [names, T, M, dims](Tape& t, const std::vector<Var>& in) {
    ParamVars pv;
    for (size_t i = 0; i < names.size(); ++i) pv.items.emplace_back(names[i], in[i]);
    Var video = in[names.size()];
    Var query = in[names.size() + 1];
    FusedFeatures f = fuse(t, pv, video, query, dims.d);
    EventPrediction e = detect_event(t, pv, f.V, 3.0, T);
    Var m = plateau_mask(t, e.s_hat, e.e_hat, mask_sharpness(t, pv), T);
    PooledEvent pe = pool_event(t, f.V, m, T);
    return t.add(t.cosine(pe.ev, f.q), t.cosine(pe.bg, f.v_vd));
  };
  CHECK(grad_check(fn, leaves) < 1e-4);
}

TEST_CASE("checkpoint round-trip is exact") {
  ParamSet p = init_params(ModelDims{8, 4, 6}, 77, 2.5);
  fs::path dir = fs::temp_directory_path() / "cu_model_tests";
  fs::create_directories(dir);
  fs::path ck = dir / "rt.ckpt";
  save_checkpoint(p, ck);
  ParamSet back = load_checkpoint(ck);
  CHECK(equal_params(p, back));

  std::ofstream(dir / "garbage.ckpt") << "not a checkpoint";
  CHECK_THROWS(load_checkpoint(dir / "garbage.ckpt"));
  CHECK_THROWS(load_checkpoint(dir / "missing.ckpt"));
}

TEST_CASE("interval clamp keeps width and bounds") {
  const double T = 64.0;
  Interval a = clamp_interval(-5.0, 3.0, T);
  CHECK(a.start == 0.0);
  CHECK(a.end == doctest::Approx(8.0));
  Interval b = clamp_interval(10.0, 10.2, T);  // width floor 1 frame
  CHECK(b.length() == doctest::Approx(1.0));
  Interval c = clamp_interval(-10.0, 100.0, T);  // wider than the video
  CHECK(c.start == 0.0);
  CHECK(c.end == T);
  Interval d = clamp_interval(60.0, 70.0, T);
  CHECK(d.end == T);
  CHECK(d.length() == doctest::Approx(10.0));
}
