#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "cu/stage2.hpp"
#include "cu/trainer.hpp"

namespace fs = std::filesystem;
using namespace cu;

namespace {

fs::path tmpdir(const char* name) {
  fs::path p = fs::temp_directory_path() / "cu_trainer_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Corpus small_labeled_corpus(int n, uint64_t gen_seed, uint64_t label_seed, double dur = 0.0) {
  GenConfig g;
  g.num_samples = n;
  g.seed = gen_seed;
  return simulate_partial_labels(generate_synthetic(g), LabelDist::Uniform, dur, label_seed);
}

}  // namespace

TEST_CASE("flag csv parsing round-trips") {
  LossFlags f = parse_flags("raml,erun");
  CHECK(f.raml);
  CHECK_FALSE(f.raun);
  CHECK_FALSE(f.erml);
  CHECK(f.erun);
  CHECK(flags_to_string(f) == "raml,erun");
  CHECK(flags_to_string(parse_flags("raml,raun,erml,erun")) == "raml,raun,erml,erun");
  CHECK_THROWS_WITH_AS(parse_flags("raml,bogus"), doctest::Contains("bogus"),
                       std::invalid_argument);
  CHECK_FALSE(parse_flags("").any());
}

TEST_CASE("config file round-trips every field") {
  TrainConfig c;
  c.weights = {0.11, 0.22, 1.5, 0.07, 9.0};
  c.flags = parse_flags("raml,erml");
  c.batch = 12;
  c.clusters_per_batch = 3;
  c.k = 7;
  c.rho = 1.37;
  c.lr = 5e-4;
  c.beta1 = 0.85;
  c.beta2 = 0.995;
  c.adam_eps = 1e-9;
  c.epochs = 42;
  c.seed = 1234567;
  c.d = 24;
  c.k_init = 2.5;
  c.clip_norm = 3.0;
  c.stage2_epochs = 77;
  c.stage2_lr = 1e-2;
  c.stage2_batch = 9;
  c.stage2_hidden = 5;
  fs::path p = tmpdir("config") / "c.txt";
  save_config(c, p);
  TrainConfig b = load_config(p);
  CHECK(b.weights.alpha == c.weights.alpha);
  CHECK(b.weights.beta == c.weights.beta);
  CHECK(b.weights.lambda == c.weights.lambda);
  CHECK(b.weights.tau == c.weights.tau);
  CHECK(b.weights.gamma == c.weights.gamma);
  CHECK(flags_to_string(b.flags) == flags_to_string(c.flags));
  CHECK(b.batch == c.batch);
  CHECK(b.clusters_per_batch == c.clusters_per_batch);
  CHECK(b.k == c.k);
  CHECK(b.rho == c.rho);
  CHECK(b.lr == c.lr);
  CHECK(b.beta1 == c.beta1);
  CHECK(b.beta2 == c.beta2);
  CHECK(b.adam_eps == c.adam_eps);
  CHECK(b.epochs == c.epochs);
  CHECK(b.seed == c.seed);
  CHECK(b.d == c.d);
  CHECK(b.k_init == c.k_init);
  CHECK(b.clip_norm == c.clip_norm);
  CHECK(b.stage2_epochs == c.stage2_epochs);
  CHECK(b.stage2_lr == c.stage2_lr);
  CHECK(b.stage2_batch == c.stage2_batch);
  CHECK(b.stage2_hidden == c.stage2_hidden);

  std::ofstream(p) << "frobnicate 1\n";
  CHECK_THROWS(load_config(p));
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.flags = LossFlags{false, false, false, false};
  CHECK_THROWS_WITH_AS(c.validate(), "no loss enabled", std::invalid_argument);
  c = TrainConfig{};
  c.weights.tau = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.rho = 0.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("adam clips the global norm and rejects non-finite updates") {
  ParamSet p;
  p.items.push_back({"w", Tensor{{2}, {1.0, 1.0}}});
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.clip_norm = 1.0;
  AdamState st;
  adam_update(p, {{30.0, 40.0}}, st, cfg);  // norm 50 -> scaled to 1
  CHECK(st.step == 1);
  CHECK(p.at("w").data[0] < 1.0);
  CHECK(std::isfinite(p.at("w").data[0]));

  AdamState st2;
  ParamSet q;
  q.items.push_back({"w", Tensor{{1}, {0.0}}});
  std::vector<std::vector<double>> bad = {{std::numeric_limits<double>::quiet_NaN()}};
  CHECK_THROWS_WITH_AS(adam_update(q, bad, st2, cfg), doctest::Contains("non-finite"),
                       std::runtime_error);
}

TEST_CASE("single-sample training drives the grounding hinge to zero") {
  Corpus c = small_labeled_corpus(1, 3, 5);
  TrainConfig cfg;
  cfg.epochs = 500;
  ImplicitResult res = train_implicit(c, cfg);
  CHECK(res.log.epochs.size() == 500);
  CHECK(res.log.epochs.back().grnd == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(res.log.epochs.back().grnd_sat_rate == doctest::Approx(1.0));
}

TEST_CASE("training rejects unlabeled corpora and disabled losses") {
  GenConfig g;
  g.num_samples = 3;
  Corpus raw = generate_synthetic(g);
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_WITH_AS(train_implicit(raw, cfg), doctest::Contains("no partial label"),
                       std::runtime_error);
  Corpus lab = small_labeled_corpus(3, 1, 1);
  cfg.flags = LossFlags{false, false, false, false};
  CHECK_THROWS_WITH_AS(train_implicit(lab, cfg), "no loss enabled", std::invalid_argument);
}

TEST_CASE("pseudo-label export is valid, deterministic, and anchored") {
  Corpus c = small_labeled_corpus(24, 11, 2);
  TrainConfig cfg;
  cfg.epochs = 1;
  ParamSet untrained = init_params(ModelDims{32, 16, cfg.d}, 5, cfg.k_init);
  auto exported = export_pseudo_labels(untrained, c, cfg.d);
  REQUIRE(exported.size() == c.samples.size());
  for (size_t i = 0; i < exported.size(); ++i) {
    const Interval& iv = exported[i].second;
    CHECK(iv.start >= 0.0);
    CHECK(iv.end <= c.samples[i].t_len);
    CHECK(iv.length() >= 1.0);
  }
  fs::path dir = tmpdir("export");
  save_pseudo_labels(exported, dir / "a.txt");
  save_pseudo_labels(export_pseudo_labels(untrained, c, cfg.d), dir / "b.txt");
  std::ifstream fa(dir / "a.txt"), fb(dir / "b.txt");
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  CHECK(sa.str() == sb.str());

  Corpus unlabeled = c;
  unlabeled.samples[0].label.reset();
  CHECK_THROWS_AS(export_pseudo_labels(untrained, unlabeled, cfg.d), std::runtime_error);
}

TEST_CASE("trained export contains the annotated clips") {
  Corpus c = small_labeled_corpus(48, 7, 3, 4.0);
  TrainConfig cfg;
  cfg.epochs = 40;
  ImplicitResult res = train_implicit(c, cfg);
  auto exported = export_pseudo_labels(res.params, c, cfg.d);
  int contained = 0;
  for (size_t i = 0; i < exported.size(); ++i) {
    const auto& l = *c.samples[i].label;
    const auto& iv = exported[i].second;
    if (l.ts() >= iv.start && l.te() <= iv.end) contained++;
  }
  CHECK(static_cast<double>(contained) / exported.size() >= 0.95);
}

TEST_CASE("implicit training is deterministic in the seed") {
  Corpus c = small_labeled_corpus(16, 9, 4);
  TrainConfig cfg;
  cfg.epochs = 3;
  ImplicitResult a = train_implicit(c, cfg);
  ImplicitResult b = train_implicit(c, cfg);
  REQUIRE(a.params.items.size() == b.params.items.size());
  for (size_t i = 0; i < a.params.items.size(); ++i)
    CHECK(a.params.items[i].value.data == b.params.items[i].value.data);
  cfg.seed = 2;
  ImplicitResult d = train_implicit(c, cfg);
  CHECK(d.params.at("det.w2").data != a.params.at("det.w2").data);
}

TEST_CASE("explicit stage overfits one sample") {
  GenConfig g;
  g.num_samples = 1;
  Corpus c = generate_synthetic(g);
  std::map<std::string, Interval> targets = {{c.samples[0].id, Interval{20.0, 34.0}}};
  TrainConfig cfg;
  cfg.stage2_epochs = 500;
  SaliencyGrounder s2;
  s2.train(c, targets, cfg);
  Interval pred = s2.infer(c.samples[0]);
  CHECK(iou(pred, targets.at(c.samples[0].id)) >= 0.95);
}

TEST_CASE("explicit stage validation and purity") {
  GenConfig g;
  g.num_samples = 4;
  Corpus c = generate_synthetic(g);
  std::map<std::string, Interval> targets;
  for (const auto& s : c.samples) targets[s.id] = *s.gt;

  TrainConfig cfg;
  cfg.stage2_epochs = 0;
  SaliencyGrounder s2;
  CHECK_THROWS_AS(s2.train(c, targets, cfg), std::invalid_argument);

  CHECK_THROWS_AS((void)s2.infer(c.samples[0]), std::runtime_error);  // untrained

  cfg.stage2_epochs = 5;
  s2.train(c, targets, cfg);
  Interval a = s2.infer(c.samples[2]);
  Interval b = s2.infer(c.samples[2]);
  CHECK(a.start == b.start);
  CHECK(a.end == b.end);
  CHECK(a.start >= 0.0);
  CHECK(a.end <= c.samples[2].t_len);
  CHECK(a.length() >= 1.0);

  std::map<std::string, Interval> missing = targets;
  missing.erase(c.samples[1].id);
  SaliencyGrounder s3;
  CHECK_THROWS_AS(s3.train(c, missing, cfg), std::runtime_error);

  CHECK_THROWS_AS((void)make_stage2("transformer"), std::invalid_argument);
}

TEST_CASE("explicit checkpoints round-trip through save/load") {
  GenConfig g;
  g.num_samples = 4;
  Corpus c = generate_synthetic(g);
  std::map<std::string, Interval> targets;
  for (const auto& s : c.samples) targets[s.id] = *s.gt;
  TrainConfig cfg;
  cfg.stage2_epochs = 5;
  SaliencyGrounder s2;
  s2.train(c, targets, cfg);
  fs::path ck = tmpdir("s2") / "m.ckpt";
  s2.save(ck);
  SaliencyGrounder s3;
  s3.load(ck);
  Interval a = s2.infer(c.samples[0]);
  Interval b = s3.infer(c.samples[0]);
  CHECK(a.start == b.start);
  CHECK(a.end == b.end);
}

TEST_CASE("train log serialization") {
  TrainLog log;
  EpochStats e;
  e.epoch = 0;
  e.total = 1.5;
  e.pseudo_miou = 0.62;
  log.epochs.push_back(e);
  fs::path p = tmpdir("log") / "t.log";
  save_train_log(log, p);
  std::ifstream f(p);
  std::string line;
  REQUIRE(std::getline(f, line));
  CHECK(line == "cu-trainlog/1");
  REQUIRE(std::getline(f, line));
  CHECK(line.find("pseudo_miou 0.62") != std::string::npos);
}

TEST_CASE("two-stage pipeline rejects overlapping corpora") {
  GenConfig g;
  g.num_samples = 6;
  Corpus c = generate_synthetic(g);
  TrainConfig cfg;
  cfg.epochs = 1;
  SaliencyGrounder s2;
  CHECK_THROWS_WITH_AS(run_two_stage(c, c, LabelDist::Uniform, 0.0, 1, cfg, &s2),
                       doctest::Contains("share sample id"), std::invalid_argument);
}
