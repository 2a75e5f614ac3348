#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <set>

#include "cu/cluster.hpp"

using namespace cu;

namespace {

EmbedMatrix blobs(int per_blob, std::vector<std::vector<double>> centers, double sigma,
                  uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, sigma);
  EmbedMatrix m;
  m.d = static_cast<int>(centers[0].size());
  m.n = per_blob * static_cast<int>(centers.size());
  m.data.reserve(static_cast<size_t>(m.n) * m.d);
  for (const auto& c : centers)
    for (int i = 0; i < per_blob; ++i)
      for (double x : c) m.data.push_back(x + g(rng));
  return m;
}

int nearest(const ClusterModel& m, const double* p) {
  int best = 0;
  double bd = detail::sqdist(p, m.centroid(0), m.d);
  for (int c = 1; c < m.k; ++c) {
    double d = detail::sqdist(p, m.centroid(c), m.d);
    if (d < bd) {
      bd = d;
      best = c;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("two separated blobs are partitioned exactly") {
  EmbedMatrix x = blobs(20, {{0, 0}, {10, 10}}, 0.3, 5);
  ClusterModel m = kmeans(x, 2, 1);
  int first = nearest(m, x.row(0));
  for (int i = 0; i < 20; ++i) CHECK(nearest(m, x.row(i)) == first);
  for (int i = 20; i < 40; ++i) CHECK(nearest(m, x.row(i)) == 1 - first);
}

TEST_CASE("K equal to sample count gives zero inertia") {
  EmbedMatrix x = blobs(1, {{0, 0}, {3, 1}, {7, 2}, {1, 9}}, 0.0, 2);
  x.data[0] += 0.01;  // make points distinct
  ClusterModel m = kmeans(x, 4, 3);
  CHECK(m.inertia_history.back() == doctest::Approx(0.0).epsilon(1e-18));
}

TEST_CASE("inertia is non-increasing across iterations") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    EmbedMatrix x;
    x.n = 60;
    x.d = 4;
    x.data.resize(240);
    for (double& v : x.data) v = u(rng);
    ClusterModel m = kmeans(x, 5, seed + 11);
    REQUIRE(!m.inertia_history.empty());
    for (size_t i = 1; i < m.inertia_history.size(); ++i)
      CHECK(m.inertia_history[i] <= m.inertia_history[i - 1] + 1e-12);
  }
}

TEST_CASE("kmeans input validation") {
  EmbedMatrix x = blobs(3, {{0}, {5}}, 0.1, 1);
  CHECK_THROWS_AS((void)kmeans(x, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)kmeans(x, 7, 0), std::invalid_argument);
}

TEST_CASE("multi-membership by distance ratio") {
  ClusterModel m;
  m.k = 2;
  m.d = 1;
  m.centroids = {0.0, 10.0};

  SUBCASE("rho 1 gives single membership away from ties") {
    EmbedMatrix x{2, 1, {1.0, 9.0}};
    ClusterAssignment a = assign_clusters(m, x, 1.0);
    CHECK(a.members[0] == std::vector<int>{0});
    CHECK(a.members[1] == std::vector<int>{1});
  }
  SUBCASE("equidistant point keeps both memberships at rho 1") {
    EmbedMatrix x{1, 1, {5.0}};
    ClusterAssignment a = assign_clusters(m, x, 1.0);
    CHECK(a.members[0] == std::vector<int>{0, 1});
  }
  SUBCASE("rho 1.5 adds the second centroid only near the boundary") {
    // point 4.5: distances 4.5 and 5.5; 5.5 <= 1.5 * 4.5 -> both
    // point 1.0: distances 1.0 and 9.0; 9.0 >  1.5 * 1.0 -> one
    EmbedMatrix x{2, 1, {4.5, 1.0}};
    ClusterAssignment a = assign_clusters(m, x, 1.5);
    CHECK(a.members[0] == std::vector<int>{0, 1});
    CHECK(a.members[1] == std::vector<int>{0});
  }
  SUBCASE("nearest centroid always listed first") {
    EmbedMatrix x{1, 1, {6.0}};
    ClusterAssignment a = assign_clusters(m, x, 3.0);
    CHECK(a.members[0] == std::vector<int>{1, 0});
  }
  SUBCASE("rho below 1 rejected") {
    EmbedMatrix x{1, 1, {5.0}};
    CHECK_THROWS_AS((void)assign_clusters(m, x, 0.9), std::invalid_argument);
  }
}

TEST_CASE("batch plans hold the cluster quota") {
  EmbedMatrix x = blobs(12, {{0, 0}, {10, 0}, {0, 10}, {10, 10}, {5, 5}}, 0.2, 7);
  ClusterModel m = kmeans(x, 5, 3);
  ClusterAssignment a = assign_clusters(m, x, 1.0);

  BatchPlan plan = make_batches(a, 8, 4, 13, 0);
  CHECK(!plan.empty());
  for (const auto& b : plan) {
    REQUIRE(b.sample_idx.size() == 8);
    std::map<int, int> counts;
    for (int tag : b.cluster_tag) counts[tag]++;
    CHECK(counts.size() == 4);
    for (const auto& [tag, n] : counts) CHECK(n == 2);
    // every sample really belongs to the cluster it represents
    for (size_t i = 0; i < b.sample_idx.size(); ++i) {
      const auto& mem = a.members[b.sample_idx[i]];
      CHECK(std::find(mem.begin(), mem.end(), b.cluster_tag[i]) != mem.end());
    }
  }
}

TEST_CASE("batch size must divide by cluster count with quota >= 2") {
  ClusterAssignment a;
  a.members = {{0}, {0}, {1}, {1}, {2}, {2}, {3}, {3}};
  CHECK_THROWS_WITH_AS(make_batches(a, 6, 4, 1, 0), doctest::Contains("divisible"),
                       std::invalid_argument);
  CHECK_THROWS_AS(make_batches(a, 4, 4, 1, 0), std::invalid_argument);  // B/N == 1
  CHECK_THROWS_AS(make_batches(a, 8, 0, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(make_batches(a, 10, 5, 1, 0), std::invalid_argument);  // only 4 clusters
}

TEST_CASE("singleton cluster falls back to replacement") {
  ClusterAssignment a;
  a.members = {{0}, {0}, {0}, {1}};  // cluster 1 has a single member
  BatchPlan plan = make_batches(a, 4, 2, 9, 0);
  for (const auto& b : plan) {
    int ones = 0;
    for (size_t i = 0; i < b.sample_idx.size(); ++i)
      if (b.cluster_tag[i] == 1) {
        CHECK(b.sample_idx[i] == 3);
        ones++;
      }
    CHECK(ones == 2);  // the lone member repeated
  }
}

TEST_CASE("plans are deterministic in (seed, epoch)") {
  EmbedMatrix x = blobs(10, {{0, 0}, {8, 8}, {0, 8}}, 0.4, 3);
  ClusterModel m = kmeans(x, 3, 5);
  ClusterAssignment a = assign_clusters(m, x, 1.2);
  auto flat = [](const BatchPlan& p) {
    std::vector<int> v;
    for (const auto& b : p) {
      v.insert(v.end(), b.sample_idx.begin(), b.sample_idx.end());
      v.insert(v.end(), b.cluster_tag.begin(), b.cluster_tag.end());
    }
    return v;
  };
  CHECK(flat(make_batches(a, 6, 3, 21, 4)) == flat(make_batches(a, 6, 3, 21, 4)));
  CHECK(flat(make_batches(a, 6, 3, 21, 4)) != flat(make_batches(a, 6, 3, 21, 5)));
  CHECK(flat(make_batches(a, 6, 3, 21, 4)) != flat(make_batches(a, 6, 3, 22, 4)));
}

TEST_CASE("query embeddings prefer sentence features") {
  GenConfig g;
  g.num_samples = 6;
  Corpus c = generate_synthetic(g);
  EmbedMatrix with = embed_queries(c);
  CHECK(with.d == c.ds);
  for (int j = 0; j < with.d; ++j) CHECK(with.row(2)[j] == c.samples[2].sent[j]);

  SUBCASE("token mean when sentence embeds are absent") {
    Corpus nosent = c;
    for (auto& s : nosent.samples) s.sent.clear();
    // make sample 0's tokens identical so the mean equals the row
    for (int r = 1; r < nosent.samples[0].m_len; ++r)
      std::copy_n(nosent.samples[0].query.begin(), nosent.dq,
                  nosent.samples[0].query.begin() + static_cast<size_t>(r) * nosent.dq);
    EmbedMatrix m = embed_queries(nosent);
    CHECK(m.d == nosent.dq);
    for (int j = 0; j < m.d; ++j)
      CHECK(m.row(0)[j] == doctest::Approx(nosent.samples[0].query[j]).epsilon(1e-12));
  }
  SUBCASE("mixed presence rejected with ids") {
    Corpus mixed = c;
    mixed.samples[3].sent.clear();
    CHECK_THROWS_WITH_AS(embed_queries(mixed), doctest::Contains("s0003"), std::runtime_error);
  }
}

TEST_CASE("cluster dump writes one line per sample") {
  GenConfig g;
  g.num_samples = 5;
  Corpus c = generate_synthetic(g);
  EmbedMatrix x = embed_queries(c);
  ClusterModel m = kmeans(x, 2, 1);
  ClusterAssignment a = assign_clusters(m, x);
  auto dir = std::filesystem::temp_directory_path() / "cu_cluster_tests";
  std::filesystem::create_directories(dir);
  save_cluster_dump(c, a, dir / "dump.txt");
  std::ifstream f(dir / "dump.txt");
  std::string line;
  REQUIRE(std::getline(f, line));
  CHECK(line == "cu-clusters/1");
  int rows = 0;
  while (std::getline(f, line))
    if (!line.empty()) rows++;
  CHECK(rows == 5);
}
