// Operator CLI: corpus generation, label simulation, two-stage training,
// evaluation, and the ablation/robustness experiment grids.
//
// Exit codes: 0 success, 1 data/validation failure, 2 usage error.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "cu/cluster.hpp"
#include "cu/dataio.hpp"
#include "cu/evalkit.hpp"
#include "cu/stage2.hpp"
#include "cu/trainer.hpp"

namespace fs = std::filesystem;

namespace {

struct ConfigCli {
  std::string config_path;
  std::string flags_csv;
  int epochs = -1;
  long long seed = -1;
  CLI::Option* opt_flags = nullptr;
  CLI::Option* opt_epochs = nullptr;
  CLI::Option* opt_seed = nullptr;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "training config file (key value lines)");
    opt_flags = app->add_option("--flags", flags_csv,
                                "enabled contrast losses, e.g. raml,raun,erml,erun");
    opt_epochs = app->add_option("--epochs", epochs, "implicit-stage epochs");
    opt_seed = app->add_option("--seed", seed, "training seed");
  }
  cu::TrainConfig resolve() const {
    cu::TrainConfig cfg;
    if (!config_path.empty()) cfg = cu::load_config(config_path);
    if (opt_flags->count()) cfg.flags = cu::parse_flags(flags_csv);
    if (opt_epochs->count()) cfg.epochs = epochs;
    if (opt_seed->count()) cfg.seed = static_cast<uint64_t>(seed);
    return cfg;
  }
};

cu::Corpus load_labeled_corpus(const std::string& corpus_path, const std::string& labels_path) {
  cu::Corpus c = cu::load_corpus(corpus_path);
  cu::load_partial_labels(c, labels_path);
  return c;
}

std::map<std::string, cu::Interval> load_gt_intervals(const std::string& path) {
  std::map<std::string, cu::Interval> out;
  if (fs::is_directory(path) || fs::path(path).filename() == "manifest.txt") {
    cu::Corpus c = cu::load_corpus(path);
    for (const auto& s : c.samples) {
      if (!s.gt) throw std::runtime_error("sample " + s.id + " has no gt interval");
      out[s.id] = *s.gt;
    }
  } else {
    for (const auto& [id, iv] : cu::load_pseudo_labels(path)) out[id] = iv;
  }
  return out;
}

std::vector<double> parse_thresholds(const std::string& csv) {
  std::vector<double> out;
  std::istringstream is(csv);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

// Content address for an experiment cell: stable across runs, so a finished
// cell (its report exists) is skipped on resume.
std::string cell_hash(const std::string& descriptor) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : descriptor) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

struct Cell {
  std::string tag;
  cu::LabelDist dist = cu::LabelDist::Uniform;
  double dur = 0.0;
  uint64_t label_seed = 0;
  cu::LossFlags flags;
  uint64_t train_seed = 0;
};

// Train the implicit stage on a freshly labeled corpus, export pseudo-labels,
// and evaluate them against gt. One experiment-grid cell, atomic on disk.
cu::EvalReport run_cell(const cu::Corpus& base, const Cell& cell, const cu::TrainConfig& base_cfg,
                        const fs::path& outdir) {
  std::ostringstream desc;
  desc << cell.tag << " dist " << (cell.dist == cu::LabelDist::Uniform ? "uniform" : "gaussian")
       << " dur " << cell.dur << " lseed " << cell.label_seed << " flags "
       << cu::flags_to_string(cell.flags) << " tseed " << cell.train_seed << " epochs "
       << base_cfg.epochs;
  fs::path cell_dir = outdir / cell_hash(desc.str());
  fs::path report_path = cell_dir / "report.txt";
  if (fs::exists(report_path)) {
    std::ifstream f(report_path);
    auto reports = cu::parse_records(f);
    if (reports.size() == 1) return reports.front();
  }
  fs::create_directories(cell_dir);
  {
    std::ofstream f(cell_dir / "cell.txt");
    f << desc.str() << "\n";
  }
  cu::Corpus labeled = cu::simulate_partial_labels(base, cell.dist, cell.dur, cell.label_seed);
  cu::TrainConfig cfg = base_cfg;
  cfg.flags = cell.flags;
  cfg.seed = cell.train_seed;
  auto res = cu::train_implicit(labeled, cfg);
  auto pseudo = cu::export_pseudo_labels(res.params, labeled, cfg.d);
  cu::save_pseudo_labels(pseudo, cell_dir / "pseudo.txt");
  std::map<std::string, cu::Interval> preds(pseudo.begin(), pseudo.end());
  std::map<std::string, cu::Interval> gts;
  for (const auto& s : labeled.samples) gts[s.id] = *s.gt;
  cu::EvalReport rep = cu::evaluate(preds, gts, {0.3, 0.5, 0.7}, cell.tag);
  cu::emit_report({rep}, "records", report_path);
  return rep;
}

int cell_parallelism() {
  if (const char* env = std::getenv("CU_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

std::vector<cu::EvalReport> run_grid(const cu::Corpus& base, const std::vector<Cell>& cells,
                                     const cu::TrainConfig& cfg, const fs::path& outdir) {
  fs::create_directories(outdir);
  std::vector<cu::EvalReport> reports(cells.size());
  std::atomic<size_t> next{0};
  std::vector<std::string> errors;
  std::mutex err_mu;
  int workers = std::min<int>(cell_parallelism(), static_cast<int>(cells.size()));
  auto worker = [&] {
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      try {
        reports[i] = run_cell(base, cells[i], cfg, outdir);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lk(err_mu);
        errors.push_back(cells[i].tag + ": " + e.what());
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (!errors.empty()) {
    std::string msg = "experiment cells failed:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw std::runtime_error(msg);
  }
  return reports;
}

const std::vector<std::pair<std::string, std::string>> kAblationRows = {
    {"A1", "raml"},
    {"A2", "raml,raun"},
    {"A3", "raml,erml"},
    {"A4", "raml,raun,erml"},
    {"A5", "raml,erml,erun"},
    {"A6", "raml,raun,erml,erun"},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"contrast-unity: partially-supervised temporal grounding toolkit"};
  app.require_subcommand(1);

  // ---- gen ----
  auto* gen = app.add_subcommand("gen", "generate a synthetic corpus");
  cu::GenConfig gcfg;
  std::string gen_out, gen_test_out;
  int holdout = 0;
  gen->add_option("--samples", gcfg.num_samples, "number of samples");
  gen->add_option("--t", gcfg.t_len, "frames per video");
  gen->add_option("--dv", gcfg.dv, "video feature dim");
  gen->add_option("--dq", gcfg.dq, "query token dim");
  gen->add_option("--ds", gcfg.ds, "sentence-embed dim (0 disables)");
  gen->add_option("--m", gcfg.m_len, "query tokens per sample");
  gen->add_option("--clusters", gcfg.k_true, "planted semantic clusters");
  gen->add_option("--ev-min", gcfg.ev_min, "min event length (frames)");
  gen->add_option("--ev-max", gcfg.ev_max, "max event length (frames)");
  gen->add_option("--noise", gcfg.noise, "feature noise sigma");
  gen->add_option("--fps", gcfg.fps, "frames per second");
  gen->add_option("--seed", gcfg.seed, "generator seed");
  gen->add_option("--out", gen_out, "output corpus directory")->required();
  gen->add_option("--holdout", holdout, "reserve the last N samples as a held-out corpus");
  gen->add_option("--test-out", gen_test_out, "held-out corpus directory (with --holdout)");

  // ---- label ----
  auto* label = app.add_subcommand("label", "simulate partial labels on a corpus");
  std::string lab_corpus, lab_dist = "uniform", lab_out;
  double lab_dur = 0.0;
  long long lab_seed = 1;
  label->add_option("--corpus", lab_corpus, "corpus directory or manifest")->required();
  label->add_option("--dist", lab_dist, "label distribution")
      ->check(CLI::IsMember({"uniform", "gaussian"}));
  label->add_option("--dur", lab_dur, "clip duration in seconds (0 = single frame)");
  label->add_option("--seed", lab_seed, "sampling seed");
  label->add_option("--out", lab_out, "output label file")->required();

  // ---- train-implicit ----
  auto* ti = app.add_subcommand("train-implicit", "train the implicit stage");
  std::string ti_corpus, ti_labels, ti_out, ti_log;
  ConfigCli ti_cfg;
  ti->add_option("--corpus", ti_corpus, "corpus directory or manifest")->required();
  ti->add_option("--labels", ti_labels, "partial label file")->required();
  ti->add_option("--out", ti_out, "output checkpoint path")->required();
  ti->add_option("--log", ti_log, "training log path");
  ti_cfg.attach(ti);

  // ---- export-pseudo ----
  auto* ep = app.add_subcommand("export-pseudo", "export pseudo-labels from a checkpoint");
  std::string ep_corpus, ep_labels, ep_ckpt, ep_out;
  int ep_d = 16;
  ep->add_option("--corpus", ep_corpus, "corpus directory or manifest")->required();
  ep->add_option("--labels", ep_labels, "partial label file (anchors)")->required();
  ep->add_option("--ckpt", ep_ckpt, "implicit-stage checkpoint")->required();
  ep->add_option("--out", ep_out, "output pseudo-label file")->required();
  ep->add_option("--d", ep_d, "fused feature dimension of the checkpoint");

  // ---- train-explicit ----
  auto* te = app.add_subcommand("train-explicit", "train the explicit stage on pseudo-labels");
  std::string te_corpus, te_pseudo, te_out, te_model = "saliency";
  ConfigCli te_cfg;
  te->add_option("--corpus", te_corpus, "corpus directory or manifest")->required();
  te->add_option("--pseudo", te_pseudo, "pseudo-label file")->required();
  te->add_option("--out", te_out, "output checkpoint path")->required();
  te->add_option("--model", te_model, "stage-2 model")->check(CLI::IsMember({"saliency"}));
  te_cfg.attach(te);

  // ---- infer ----
  auto* inf = app.add_subcommand("infer", "explicit-stage inference (no labels needed)");
  std::string inf_corpus, inf_ckpt, inf_out, inf_model = "saliency";
  inf->add_option("--corpus", inf_corpus, "corpus directory or manifest")->required();
  inf->add_option("--ckpt", inf_ckpt, "explicit-stage checkpoint")->required();
  inf->add_option("--out", inf_out, "output prediction file")->required();
  inf->add_option("--model", inf_model, "stage-2 model")->check(CLI::IsMember({"saliency"}));

  // ---- run-two-stage ----
  auto* rts = app.add_subcommand("run-two-stage", "full pipeline: label, train both stages, eval");
  std::string rts_train, rts_test, rts_dist = "uniform", rts_out;
  double rts_dur = 0.0;
  long long rts_label_seed = 1;
  ConfigCli rts_cfg;
  rts->add_option("--train", rts_train, "training corpus")->required();
  rts->add_option("--test", rts_test, "held-out corpus")->required();
  rts->add_option("--dist", rts_dist, "label distribution")
      ->check(CLI::IsMember({"uniform", "gaussian"}));
  rts->add_option("--dur", rts_dur, "clip duration in seconds");
  rts->add_option("--label-seed", rts_label_seed, "label sampling seed");
  rts->add_option("--out", rts_out, "output directory")->required();
  rts_cfg.attach(rts);

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "evaluate predictions against ground truth");
  std::string ev_pred, ev_gt, ev_thresholds = "0.3,0.5,0.7", ev_format = "table", ev_out, ev_tag = "run";
  ev->add_option("--pred", ev_pred, "prediction/pseudo-label file")->required();
  ev->add_option("--gt", ev_gt, "gt source: corpus dir/manifest or interval file")->required();
  ev->add_option("--thresholds", ev_thresholds, "IoU thresholds, comma separated");
  ev->add_option("--format", ev_format, "output format")->check(CLI::IsMember({"table", "records"}));
  ev->add_option("--out", ev_out, "write report here instead of stdout");
  ev->add_option("--tag", ev_tag, "report row label");

  // ---- ablate ----
  auto* ab = app.add_subcommand("ablate", "run the A1-A6 contrast ablation grid");
  std::string ab_corpus, ab_out;
  int ab_seeds = 3;
  ConfigCli ab_cfg;
  ab->add_option("--corpus", ab_corpus, "corpus directory or manifest")->required();
  ab->add_option("--seeds", ab_seeds, "training seeds per row");
  ab->add_option("--out", ab_out, "experiment output directory")->required();
  ab_cfg.attach(ab);

  // ---- robustness ----
  auto* rb = app.add_subcommand("robustness", "run the label distribution/duration grid");
  std::string rb_corpus, rb_out;
  int rb_seeds = 3;
  ConfigCli rb_cfg;
  rb->add_option("--corpus", rb_corpus, "corpus directory or manifest")->required();
  rb->add_option("--seeds", rb_seeds, "training seeds per row");
  rb->add_option("--out", rb_out, "experiment output directory")->required();
  rb_cfg.attach(rb);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      cu::Corpus c = cu::generate_synthetic(gcfg);
      if (holdout > 0) {
        if (gen_test_out.empty()) throw std::runtime_error("--holdout requires --test-out");
        auto [train, test] = cu::split_corpus(c, holdout);
        cu::save_corpus(train, gen_out);
        cu::save_corpus(test, gen_test_out);
      } else {
        cu::save_corpus(c, gen_out);
      }
    } else if (label->parsed()) {
      cu::Corpus c = cu::load_corpus(lab_corpus);
      c = cu::simulate_partial_labels(c, cu::parse_label_dist(lab_dist), lab_dur,
                                      static_cast<uint64_t>(lab_seed));
      cu::save_partial_labels(c, lab_out);
    } else if (ti->parsed()) {
      cu::Corpus c = load_labeled_corpus(ti_corpus, ti_labels);
      cu::TrainConfig cfg = ti_cfg.resolve();
      auto res = cu::train_implicit(c, cfg);
      cu::save_checkpoint(res.params, ti_out);
      if (!ti_log.empty()) cu::save_train_log(res.log, ti_log);
    } else if (ep->parsed()) {
      cu::Corpus c = load_labeled_corpus(ep_corpus, ep_labels);
      cu::ParamSet params = cu::load_checkpoint(ep_ckpt);
      auto pseudo = cu::export_pseudo_labels(params, c, ep_d);
      cu::save_pseudo_labels(pseudo, ep_out);
    } else if (te->parsed()) {
      cu::Corpus c = cu::load_corpus(te_corpus);
      auto pseudo = cu::load_pseudo_labels(te_pseudo);
      std::map<std::string, cu::Interval> targets(pseudo.begin(), pseudo.end());
      auto model = cu::make_stage2(te_model);
      model->train(c, targets, te_cfg.resolve());
      model->save(te_out);
    } else if (inf->parsed()) {
      cu::Corpus c = cu::load_corpus(inf_corpus);
      auto model = cu::make_stage2(inf_model);
      model->load(inf_ckpt);
      std::vector<std::pair<std::string, cu::Interval>> preds;
      for (const auto& s : c.samples) preds.emplace_back(s.id, model->infer(s));
      cu::save_pseudo_labels(preds, inf_out);
    } else if (rts->parsed()) {
      cu::Corpus train = cu::load_corpus(rts_train);
      cu::Corpus test = cu::load_corpus(rts_test);
      cu::TrainConfig cfg = rts_cfg.resolve();
      cu::SaliencyGrounder s2;
      auto res = cu::run_two_stage(train, test, cu::parse_label_dist(rts_dist), rts_dur,
                                   static_cast<uint64_t>(rts_label_seed), cfg, &s2);
      fs::create_directories(rts_out);
      cu::save_checkpoint(res.implicit_params, fs::path(rts_out) / "implicit.ckpt");
      s2.save(fs::path(rts_out) / "explicit.ckpt");
      cu::save_pseudo_labels(res.pseudo_labels, fs::path(rts_out) / "pseudo.txt");
      cu::save_train_log(res.implicit_log, fs::path(rts_out) / "implicit.log");
      cu::emit_report({res.test_report}, "records", fs::path(rts_out) / "eval.txt");
      std::cout << cu::render_table({res.test_report});
    } else if (ev->parsed()) {
      auto preds_list = cu::load_pseudo_labels(ev_pred);
      std::map<std::string, cu::Interval> preds(preds_list.begin(), preds_list.end());
      auto gts = load_gt_intervals(ev_gt);
      for (const auto& [id, iv] : preds)
        if (!gts.count(id)) throw std::runtime_error("prediction id not in ground truth: " + id);
      cu::EvalReport rep = cu::evaluate(preds, gts, parse_thresholds(ev_thresholds), ev_tag);
      std::string body = ev_format == "table" ? cu::render_table({rep}) : cu::render_records({rep});
      if (ev_out.empty()) {
        std::cout << body;
      } else {
        std::ofstream f(ev_out);
        f << body;
      }
    } else if (ab->parsed() || rb->parsed()) {
      bool ablation = ab->parsed();
      cu::Corpus base = cu::load_corpus(ablation ? ab_corpus : rb_corpus);
      cu::TrainConfig cfg = (ablation ? ab_cfg : rb_cfg).resolve();
      int seeds = ablation ? ab_seeds : rb_seeds;
      fs::path outdir = ablation ? ab_out : rb_out;
      std::vector<Cell> cells;
      for (int s = 1; s <= seeds; ++s) {
        if (ablation) {
          for (const auto& [tag, flags] : kAblationRows)
            cells.push_back(Cell{tag + "-s" + std::to_string(s), cu::LabelDist::Uniform, 0.0,
                                 static_cast<uint64_t>(100 + s), cu::parse_flags(flags),
                                 static_cast<uint64_t>(s)});
        } else {
          auto all = cu::parse_flags("raml,raun,erml,erun");
          for (int r = 1; r <= 3; ++r)
            cells.push_back(Cell{"uniform-" + std::to_string(r) + "-s" + std::to_string(s),
                                 cu::LabelDist::Uniform, 0.0, static_cast<uint64_t>(100 + 7 * r + s),
                                 all, static_cast<uint64_t>(s)});
          cells.push_back(Cell{"gaussian-s" + std::to_string(s), cu::LabelDist::Gaussian, 0.0,
                               static_cast<uint64_t>(100 + s), all, static_cast<uint64_t>(s)});
          for (double d : {2.0, 3.0, 4.0})
            cells.push_back(Cell{std::to_string(static_cast<int>(d)) + "s-s" + std::to_string(s),
                                 cu::LabelDist::Uniform, d, static_cast<uint64_t>(100 + s), all,
                                 static_cast<uint64_t>(s)});
        }
      }
      auto reports = run_grid(base, cells, cfg, outdir);
      cu::emit_report(reports, "records", outdir / "combined.txt");
      std::cout << cu::render_table(reports);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
