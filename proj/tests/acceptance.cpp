// Acceptance suite: one criterion per section, one PASS/FAIL line each.
// Exit code is the number of failed criteria.
//
// The toy-learning criterion trains mini-res on a freshly generated P.1
// dataset; expect the full suite to take tens of minutes on two cores.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "minisvrt/evalx.hpp"
#include "minisvrt/gradcheck.hpp"
#include "minisvrt/models.hpp"
#include "minisvrt/parallel.hpp"
#include "minisvrt/problems.hpp"
#include "minisvrt/raster.hpp"
#include "minisvrt/training.hpp"

namespace fs = std::filesystem;
using namespace minisvrt;

namespace {

int g_failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::printf("criterion %2d [%s] %s%s%s\n", id, pass ? "PASS" : "FAIL", name.c_str(),
              detail.empty() ? "" : " -- ", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return {};
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

char fmt_buf[512];
template <typename... Args>
std::string fmt(const char* f, Args... args) {
  std::snprintf(fmt_buf, sizeof(fmt_buf), f, args...);
  return fmt_buf;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

void criterion_gradients() {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  double worst_op = 0.0, worst_bce = 0.0, worst_model = 0.0;
  for (const auto& r : run_gradcheck_suite()) {
    ok = ok && r.pass;
    if (r.name == "sigmoid_bce")
      worst_bce = std::max(worst_bce, r.max_rel);
    else
      worst_op = std::max(worst_op, r.max_rel);
  }
  for (const auto& name : preset_names()) {
    GradCheckOutcome r = check_model_gradients(name);
    ok = ok && r.pass;
    worst_model = std::max(worst_model, r.max_rel);
  }
  double secs = seconds_since(t0);
  ok = ok && secs < 120.0;
  report(1, "gradient suite (ops < 1e-5, bce < 1e-6, presets < 1e-5, runtime < 2 min)", ok,
         fmt("worst op %.2e, bce %.2e, preset %.2e, %.0f s", worst_op, worst_bce, worst_model,
             secs));
}

// ---------------------------------------------------------------------------
// 2 + 3. Generator soundness and anti-shortcut statistics
// ---------------------------------------------------------------------------

void criteria_generator(const fs::path& dir) {
  auto t0 = std::chrono::steady_clock::now();
  const int kPerCell = 10000;
  const GenConfig cfg;
  bool sound = true;
  std::string first_failure;
  std::map<std::pair<ProblemId, Label>, PoseStats> stats;

  for (ProblemId prob : {ProblemId::kP1, ProblemId::kP5, ProblemId::kP20, ProblemId::kP21}) {
    for (Label label : {Label::kPositive, Label::kNegative}) {
      std::vector<SampleRecord> records(kPerCell);
      std::vector<char> pass(kPerCell, 0);
      std::vector<std::string> why(kPerCell);
      parallel_for(kPerCell, [&](std::size_t i) {
        std::uint64_t seed = derive_seed(0xACCE97, static_cast<std::uint64_t>(prob) * 2 +
                                                        static_cast<std::uint64_t>(label),
                                         i);
        GeneratedSample s = gen_sample(prob, label, seed, cfg);
        pass[i] = verify_sample(s.record, s.image, cfg, &why[i]) ? 1 : 0;
        records[i] = std::move(s.record);
      });
      for (int i = 0; i < kPerCell; ++i)
        if (!pass[i]) {
          sound = false;
          if (first_failure.empty())
            first_failure = fmt("%s/%s #%d: %s", to_string(prob), to_string(label), i,
                                why[i].c_str());
        }
      stats[{prob, label}] = collect_pose_stats(records);
    }
  }

  // Exact balance plus worker-count-independent bytes on a real dataset.
  fs::path a = dir / "regen_a", b = dir / "regen_b";
  fs::remove_all(a);
  fs::remove_all(b);
  DatasetManifest ma = gen_dataset(ProblemId::kP21, 600, 200, 200, 11, a, cfg, 1);
  DatasetManifest mb = gen_dataset(ProblemId::kP21, 600, 200, 200, 11, b, cfg, 16);
  bool balanced = true;
  for (Split split : {Split::kTrain, Split::kVal, Split::kTest}) {
    int pos = 0, neg = 0;
    std::string prefix = std::string(to_string(split)) + "/";
    for (const auto& r : ma.records) {
      if (r.image_path.rfind(prefix, 0) != 0) continue;
      (r.label == Label::kPositive ? pos : neg)++;
    }
    balanced = balanced && pos == neg && pos > 0;
  }
  bool identical = slurp(a / "p21" / "manifest.jsonl") == slurp(b / "p21" / "manifest.jsonl") &&
                   !ma.records.empty();
  for (const auto& r : ma.records)
    identical = identical && slurp(a / "p21" / r.image_path) == slurp(b / "p21" / r.image_path);

  double secs = seconds_since(t0);
  report(2, "generator soundness (80k samples verify, balance, 1-vs-16-worker bytes, < 10 min)",
         sound && balanced && identical && secs < 600.0,
         sound ? fmt("all 80000 verified; balanced=%d identical=%d; %.0f s", balanced ? 1 : 0,
                     identical ? 1 : 0, secs)
               : first_failure);

  // Anti-shortcut: per-shape pose marginals must match across classes.
  bool anti_ok = true;
  std::string anti_detail;
  double worst_ratio = 0.0;
  for (ProblemId prob : {ProblemId::kP1, ProblemId::kP5, ProblemId::kP20, ProblemId::kP21}) {
    const PoseStats& sp = stats[{prob, Label::kPositive}];
    const PoseStats& sn = stats[{prob, Label::kNegative}];
    struct Param {
      const char* name;
      const std::vector<double>* pos;
      const std::vector<double>* neg;
      double lo, hi;
    };
    const double side = cfg.canvas_side;
    std::vector<Param> params = {
        {"tx", &sp.tx, &sn.tx, 0.0, side},
        {"ty", &sp.ty, &sn.ty, 0.0, side},
        {"rotation", &sp.rotation, &sn.rotation, 0.0, kTwoPi},
        {"scale", &sp.scale, &sn.scale, 0.0, 2.0},
        {"mirrored", &sp.mirrored, &sn.mirrored, 0.0, 1.0 + 1e-9},
    };
    for (const auto& p : params) {
      int df = 0;
      double stat = chi_square_two_sample(*p.pos, *p.neg, p.lo, p.hi, 16, &df);
      if (df == 0) continue;  // constant parameter, identical by construction
      double crit = chi_square_critical_alpha01(df);
      worst_ratio = std::max(worst_ratio, stat / crit);
      if (stat >= crit) {
        anti_ok = false;
        if (anti_detail.empty())
          anti_detail = fmt("%s %s: chi2 %.1f >= %.1f", to_string(prob), p.name, stat, crit);
      }
    }
  }
  report(3, "anti-shortcut pose statistics (chi-square, alpha=0.01, 10k/class)", anti_ok,
         anti_ok ? fmt("worst stat/critical ratio %.2f", worst_ratio) : anti_detail);
}

// ---------------------------------------------------------------------------
// 4. Rasterizer oracle
// ---------------------------------------------------------------------------

void criterion_raster(const fs::path& dir) {
  std::vector<std::vector<Point2>> polys{{{10, 10}, {49, 10}, {49, 49}, {10, 49}}};
  ImageGray img = rasterize(polys, 128, 1);
  int black = 0;
  for (auto px : img.pixels)
    if (px == 0) ++black;

  GeneratedSample s = gen_sample(ProblemId::kP5, Label::kPositive, 77);
  fs::path p1 = dir / "roundtrip1.pgm", p2 = dir / "roundtrip2.pgm";
  write_pgm(s.image, p1);
  ImageGray back = read_pgm(p1);
  write_pgm(back, p2);
  bool roundtrip = back == s.image && slurp(p1) == slurp(p2) && !slurp(p1).empty();
  report(4, "rasterizer oracle (square outline = 156 px, PGM round-trip byte-exact)",
         black == 156 && roundtrip, fmt("square black pixels %d; roundtrip=%d", black, roundtrip));
}

// ---------------------------------------------------------------------------
// 5. Convergence-epoch metric
// ---------------------------------------------------------------------------

void criterion_ce() {
  bool ok = true;
  TrainCurve first;
  first.points = {{0.5, 0.60, 0}, {1.0, 0.88, 0}, {1.5, 0.91, 0}, {2.0, 0.95, 0}};
  ok = ok && convergence_epoch(first) == 1.5;
  TrainCurve immediate;
  immediate.points = {{0.5, 0.992, 0}};
  ok = ok && convergence_epoch(immediate) == 0.5;
  TrainCurve never;
  never.points = {{0.5, 0.60, 0}, {1.0, 0.88, 0}};
  ok = ok && !convergence_epoch(never).has_value();

  // absent CE serializes as an empty CSV field and a JSON null
  RunRecord rec;
  rec.problem = "p21";
  rec.preset = "mini-plain";
  rec.curve = never;
  nlohmann::json j = to_json(rec);
  ok = ok && j.at("convergence_epoch").is_null();

  // threshold monotonicity
  Rng rng(4242);
  for (int trial = 0; trial < 500 && ok; ++trial) {
    TrainCurve curve;
    int n = static_cast<int>(rng.uniform_int(1, 16));
    for (int i = 0; i < n; ++i) curve.points.push_back({0.5 * (i + 1), rng.uniform(), 0});
    double t1 = rng.uniform();
    double t2 = rng.uniform(t1, 1.0);
    auto c1 = convergence_epoch(curve, t1);
    auto c2 = convergence_epoch(curve, t2);
    if (c2.has_value()) ok = ok && c1.has_value() && *c1 <= *c2;
  }
  report(5, "convergence-epoch metric (first crossing, absent, monotone)", ok, "");
}

// ---------------------------------------------------------------------------
// 6. Optimizer
// ---------------------------------------------------------------------------

void criterion_optimizer() {
  bool closed_ok = true;
  {
    OptimConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.momentum = 0.9;
    cfg.weight_decay = 0.0;
    Parameter<double> p("p", Tensor<double>::full({1}, 1.0));
    p.grad[0] = 0.5;
    p.grad_ready = true;
    Parameter<double>* ptr = &p;
    sgd_step(std::span<Parameter<double>* const>(&ptr, 1), cfg);
    closed_ok = closed_ok && p.momentum[0] == 0.5 && p.value[0] == 0.95;
    cfg.weight_decay = 1e-4;
    cfg.momentum = 0.9;
    Parameter<double> q("q", Tensor<double>::full({1}, 1.0));
    q.grad_ready = true;
    Parameter<double>* qptr = &q;
    sgd_step(std::span<Parameter<double>* const>(&qptr, 1), cfg);
    closed_ok = closed_ok && q.value[0] == 1.0 - 1e-5;
  }

  // 64-sample memorization with the pinned recipe.
  GenConfig gcfg;
  LoadedSplit memo;
  for (int i = 0; i < 64; ++i) {
    GeneratedSample s = gen_sample(ProblemId::kP1, i % 2 == 0 ? Label::kPositive : Label::kNegative,
                                   derive_seed(0x3E30, 0, static_cast<std::uint64_t>(i)), gcfg);
    memo.images.push_back(downscale(s.image, 64));
    memo.labels.push_back(s.record.label == Label::kPositive ? 1 : 0);
  }
  NormStats norm = compute_norm_stats(memo.images);
  ModelConfig mc = preset_config("mini-res");
  Model<float> model(mc, 5);
  OptimConfig oc;
  oc.learning_rate = 0.01;
  auto trainable = model.trainable_parameters();
  std::vector<std::size_t> idx(64);
  for (std::size_t i = 0; i < 64; ++i) idx[i] = i;
  Tensor<float> targets({64});
  for (int i = 0; i < 64; ++i) targets[i] = static_cast<float>(memo.labels[i]);
  double first_loss = -1.0;
  int halved_at = -1;
  for (int step = 1; step <= 200 && halved_at < 0; ++step) {
    Tensor<float> images = detail::assemble_batch<float>(memo, idx, norm);
    Tape<float> tape;
    auto logits = model.forward(tape, tape.input(std::move(images)), true);
    auto bce = tape.sigmoid_bce(logits, targets);
    double loss = tape.value(bce.loss)[0];
    if (first_loss < 0) first_loss = loss;
    if (loss <= 0.5 * first_loss) {
      halved_at = step;
      break;
    }
    tape.backward(bce.loss);
    sgd_step(std::span<Parameter<float>* const>(trainable), oc);
  }
  report(6, "optimizer (closed-form steps exact; memorization loss halves within 200 steps)",
         closed_ok && halved_at > 0,
         fmt("closed_form=%d, loss halved at step %d", closed_ok ? 1 : 0, halved_at));
}

// ---------------------------------------------------------------------------
// 7. Toy learning (calibrated)
// ---------------------------------------------------------------------------

struct ToyRun {
  RunRecord record;
  NormStats norm;
  bool trained = false;
};

ToyRun criterion_toy_learning(const fs::path& dir, Model<float>& model) {
  // Calibrated gate: the recorded calibration run reaches the 65% gate in
  // the first training epoch, so three epochs leave generous margin while
  // honoring the 30-epoch budget the gate is stated against.
  int max_epochs = 3;
  if (const char* env = std::getenv("MINISVRT_ACCEPT_EPOCHS")) max_epochs = std::atoi(env);

  ToyRun out;
  fs::path data = dir / "toy";
  GenConfig gcfg;  // canvas 128; training loads at 64 px
  if (!fs::exists(data / "p1" / "manifest.jsonl"))
    gen_dataset(ProblemId::kP1, 50000, 5000, 2000, 20240808, data, gcfg, hardware_threads());
  DatasetManifest manifest = read_manifest(data / "p1" / "manifest.jsonl");
  LoadedSplit train_split = load_split_images(manifest, data / "p1", Split::kTrain, 64);
  LoadedSplit val_split = load_split_images(manifest, data / "p1", Split::kVal, 64);
  out.norm = compute_norm_stats(train_split.images);

  OptimConfig oc;
  oc.learning_rate = 0.01;
  oc.batch_size = 64;
  oc.max_epochs = max_epochs;
  oc.seed = 1;
  TrainOptions topts;
  topts.problem = "p1";
  topts.preset = "mini-res";
  topts.checkpoint_path = dir / "toy_run" / "checkpoint.ckpt";
  fs::create_directories(dir / "toy_run");
  topts.verbose = true;
  out.record = train(model, train_split, val_split, nullptr, oc, out.norm, topts);
  out.trained = true;
  {
    std::ofstream csv(dir / "toy_run" / "curve.csv", std::ios::binary);
    csv << curve_to_csv(out.record.curve);
    std::ofstream rj(dir / "toy_run" / "run_record.json", std::ios::binary);
    rj << to_json(out.record).dump(2) << "\n";
  }

  double best = 0.0;
  for (const auto& pt : out.record.curve.points) best = std::max(best, pt.val_accuracy);
  bool ok = best >= 0.65 && max_epochs <= 30 && !out.record.diverged;
  report(7, "toy learning (mini-res on P.1, 50k/5k @64 px, lr 0.01: val acc >= 65%)", ok,
         fmt("best val %.4f within %d epoch(s); ce %s", best, max_epochs,
             out.record.convergence_epoch ? fmt("%.1f", *out.record.convergence_epoch).c_str()
                                          : "-"));
  return out;
}

// ---------------------------------------------------------------------------
// 8. Ablation mechanics
// ---------------------------------------------------------------------------

void criterion_ablation() {
  Model<float> shared(preset_config("mini-cor"), 21);
  Model<float> unrolled(preset_config("mini-cor-wr"), 22);
  bool params_ok = shared.num_params() < unrolled.num_params();

  for (Parameter<float>* dst : unrolled.parameters()) {
    std::string src_name = dst->name;
    auto pos = src_name.find(".pass");
    if (pos != std::string::npos) {
      std::size_t d0 = pos + 5, d1 = d0;
      while (d1 < src_name.size() && std::isdigit(static_cast<unsigned char>(src_name[d1]))) ++d1;
      src_name = src_name.substr(0, d0) + "0" + src_name.substr(d1);
    }
    Parameter<float>* src = shared.find(src_name);
    if (!src || !src->value.same_shape(dst->value)) {
      params_ok = false;
      break;
    }
    for (std::size_t i = 0; i < src->value.numel(); ++i) dst->value[i] = src->value[i];
  }
  Rng rng(88);
  Tensor<float> images({2, 1, 64, 64});
  for (std::size_t i = 0; i < images.numel(); ++i) images[i] = 0.4f * (float)rng.normal();
  Tensor<float> a = shared.forward_logits(images, false);
  Tensor<float> b = unrolled.forward_logits(images, false);
  bool copy_ok = a.numel() == b.numel();
  for (std::size_t i = 0; i < a.numel() && copy_ok; ++i) copy_ok = a[i] == b[i];

  Model<float> ws(preset_config("mini-res-ws"), 33);
  Model<float> plain(preset_config("mini-plain"), 33);
  Tensor<float> c = ws.forward_logits(images, false);
  Tensor<float> d = plain.forward_logits(images, false);
  bool ws_ok = c.numel() == d.numel();
  for (std::size_t i = 0; i < c.numel() && ws_ok; ++i) ws_ok = c[i] == d[i];

  report(8, "ablation mechanics (shared < unrolled params; copies reproduce bit-exact; ws = plain)",
         params_ok && copy_ok && ws_ok,
         fmt("params %zu < %zu; copy_bitexact=%d; ws_equals_plain=%d", shared.num_params(),
             unrolled.num_params(), copy_ok ? 1 : 0, ws_ok ? 1 : 0));
}

// ---------------------------------------------------------------------------
// 9. Chance-level sanity
// ---------------------------------------------------------------------------

void criterion_chance(const fs::path& dir) {
  fs::path data = dir / "toy";
  DatasetManifest manifest = read_manifest(data / "p1" / "manifest.jsonl");
  LoadedSplit test_split = load_split_images(manifest, data / "p1", Split::kTest, 64);
  NormStats norm = compute_norm_stats(test_split.images);
  double band = 3.0 * std::sqrt(0.25 / static_cast<double>(test_split.size()));
  bool ok = true;
  double worst = 0.0;
  for (const auto& name : preset_names()) {
    Model<float> m(preset_config(name), mix64(0xC0FFEE, std::hash<std::string>{}(name)));
    double acc = evaluate(m, test_split, norm);
    worst = std::max(worst, std::abs(acc - 0.5));
    ok = ok && std::abs(acc - 0.5) <= band;
  }
  report(9, "chance-level sanity (untrained presets within the binomial 3-sigma band)", ok,
         fmt("worst |acc-0.5| %.4f vs band %.4f (n=%zu)", worst, band, test_split.size()));
}

// ---------------------------------------------------------------------------
// 10. Transfer report (informational)
// ---------------------------------------------------------------------------

void criterion_report(const fs::path& dir, ToyRun& toy, Model<float>& model) {
  GenConfig gcfg;
  std::vector<XferTarget> targets;
  std::vector<LoadedSplit> splits(4);
  std::vector<ProblemId> probs{ProblemId::kP1, ProblemId::kP5, ProblemId::kP20, ProblemId::kP21};
  for (std::size_t i = 0; i < probs.size(); ++i) {
    fs::path data = dir / "toy";
    if (probs[i] != ProblemId::kP1 && !fs::exists(data / to_string(probs[i]) / "manifest.jsonl"))
      gen_dataset(probs[i], 0, 0, 2000, 20240808, data, gcfg, hardware_threads());
    DatasetManifest m = read_manifest(data / to_string(probs[i]) / "manifest.jsonl");
    splits[i] = load_split_images(m, data / to_string(probs[i]), Split::kTest, 64);
    targets.push_back({probs[i], &splits[i]});
  }
  std::vector<XferSource<float>> sources;
  sources.push_back({"mini-res@p1", "p1", toy.trained ? &model : nullptr, toy.norm});
  XferMatrix matrix =
      xfer_matrix(std::span<XferSource<float>>(sources), std::span<const XferTarget>(targets));
  fs::path report_dir = dir / "report";
  std::vector<RunRecord> records{toy.record};
  emit_report(records, matrix, report_dir);

  bool files_ok = fs::exists(report_dir / "report.json") &&
                  fs::exists(report_dir / "summary.csv") &&
                  fs::exists(report_dir / "curves" / "p1_mini-res.csv");
  bool parse_ok = false;
  std::string cells = "cells:";
  try {
    nlohmann::json rep = nlohmann::json::parse(slurp(report_dir / "report.json"));
    parse_ok = rep.contains("runs") && rep.contains("xfer_matrix") && rep.contains("reference") &&
               rep.at("reference").size() >= 140;
    for (std::size_t c = 0; c < matrix.cols.size(); ++c)
      cells += fmt(" %s=%.3f", to_string(matrix.cols[c]),
                   matrix.cells[0][c] ? *matrix.cells[0][c] : -1.0);
  } catch (...) {
    parse_ok = false;
  }
  std::string header = slurp(report_dir / "summary.csv");
  bool header_ok = header.rfind("problem,preset,test_acc,convergence_epoch\n", 0) == 0;
  report(10, "transfer report (informational: matrix + reference juxtaposition emitted)",
         files_ok && parse_ok && header_ok, cells);
}

}  // namespace

int main() {
  tune_allocator_for_training();
  fs::path dir = "acceptance_workspace";
  if (const char* env = std::getenv("MINISVRT_ACCEPT_DIR")) dir = env;
  fs::create_directories(dir);

  auto t0 = std::chrono::steady_clock::now();
  criterion_gradients();
  criterion_raster(dir);
  criterion_ce();
  criterion_ablation();
  criteria_generator(dir);
  criterion_optimizer();

  ModelConfig toy_cfg = preset_config("mini-res");
  Model<float> toy_model(toy_cfg, mix64(1, 0x1217));
  ToyRun toy = criterion_toy_learning(dir, toy_model);
  criterion_chance(dir);
  criterion_report(dir, toy, toy_model);

  std::printf("acceptance: %d criteria failed (total %.0f s)\n", g_failures, seconds_since(t0));
  return g_failures;
}
