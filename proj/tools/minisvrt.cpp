// Command-line front end: dataset generation, verification, training,
// cross-problem transfer evaluation and the gradient-check suite.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "minisvrt/evalx.hpp"
#include "minisvrt/gradcheck.hpp"
#include "minisvrt/models.hpp"
#include "minisvrt/parallel.hpp"
#include "minisvrt/problems.hpp"
#include "minisvrt/training.hpp"

namespace fs = std::filesystem;
using namespace minisvrt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

nlohmann::json load_config_file(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.contains("config_version") && j.at("config_version").get<int>() != 1)
    throw ConfigError("unsupported config_version in " + path);
  return j;
}

// Flag-over-file precedence: a value given on the command line wins; else a
// value from --config; else the built-in default already in the variable.
template <typename T>
void overlay(const CLI::Option* opt, const nlohmann::json& cfg, const char* key, T& value) {
  if (opt != nullptr && opt->count() > 0) return;
  if (cfg.contains(key)) value = cfg.at(key).get<T>();
}

void write_resolved_config(const fs::path& dir, nlohmann::json resolved) {
  resolved["config_version"] = 1;
  fs::create_directories(dir);
  std::ofstream out(dir / "resolved_config.json", std::ios::binary);
  if (!out) throw IoError("cannot write resolved_config.json in " + dir.string());
  out << resolved.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

struct GenArgs {
  std::string problem = "p1";
  int train = 1000;
  int val = 200;
  int test = 200;
  std::uint64_t seed = 0;
  std::string out = "data";
  int canvas = 128;
  int jobs = 0;
  std::string preset;  // "paper" expands to the published dataset scale
  std::string config_file;
};

int run_gen(GenArgs& a, const std::map<std::string, const CLI::Option*>& opts) {
  nlohmann::json cfg = load_config_file(a.config_file);
  overlay(opts.at("problem"), cfg, "problem", a.problem);
  overlay(opts.at("preset"), cfg, "preset", a.preset);
  if (a.preset == "paper") {
    // published scale: 400k/100k/100k at 128 px
    if (opts.at("train")->count() == 0 && !cfg.contains("train")) a.train = 400000;
    if (opts.at("val")->count() == 0 && !cfg.contains("val")) a.val = 100000;
    if (opts.at("test")->count() == 0 && !cfg.contains("test")) a.test = 100000;
    if (opts.at("canvas")->count() == 0 && !cfg.contains("canvas")) a.canvas = 128;
  } else if (!a.preset.empty()) {
    throw ConfigError("unknown gen preset: " + a.preset);
  }
  overlay(opts.at("train"), cfg, "train", a.train);
  overlay(opts.at("val"), cfg, "val", a.val);
  overlay(opts.at("test"), cfg, "test", a.test);
  overlay(opts.at("seed"), cfg, "seed", a.seed);
  overlay(opts.at("out"), cfg, "out", a.out);
  overlay(opts.at("canvas"), cfg, "canvas", a.canvas);
  overlay(opts.at("jobs"), cfg, "jobs", a.jobs);

  ProblemId prob = problem_from_string(a.problem);
  GenConfig gen_cfg;
  gen_cfg.canvas_side = a.canvas;
  int jobs = a.jobs > 0 ? a.jobs : hardware_threads();
  DatasetManifest m = gen_dataset(prob, a.train, a.val, a.test, a.seed, a.out, gen_cfg, jobs);
  write_resolved_config(fs::path(a.out) / a.problem,
                        {{"command", "gen"},
                         {"problem", a.problem},
                         {"train", a.train},
                         {"val", a.val},
                         {"test", a.test},
                         {"seed", a.seed},
                         {"out", a.out},
                         {"canvas", a.canvas},
                         {"jobs", a.jobs}});
  std::printf("gen: wrote %zu samples to %s\n", m.records.size(),
              (fs::path(a.out) / a.problem).string().c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

struct VerifyArgs {
  std::string data;      // dataset directory containing manifest.jsonl
  std::string manifest;  // alternative: explicit manifest path
  int jobs = 0;
};

int run_verify(VerifyArgs& a) {
  fs::path manifest_path;
  if (!a.manifest.empty())
    manifest_path = a.manifest;
  else if (!a.data.empty())
    manifest_path = fs::path(a.data) / "manifest.jsonl";
  else
    throw ConfigError("verify: pass --data or --manifest");
  DatasetManifest m = read_manifest(manifest_path);
  fs::path dir = manifest_path.parent_path();

  set_max_threads(a.jobs > 0 ? a.jobs : hardware_threads());
  std::vector<std::string> failures(m.records.size());
  std::vector<char> failed(m.records.size(), 0);
  parallel_for(m.records.size(), [&](std::size_t i) {
    std::string reason;
    bool ok;
    try {
      ok = verify_sample_file(dir, m.records[i], GenConfig{}, &reason);
    } catch (const VerificationError& e) {
      ok = false;
      reason = e.what();
    }
    if (!ok) {
      failed[i] = 1;
      failures[i] = reason;
    }
  });
  set_max_threads(0);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    if (!failed[i]) continue;
    ++bad;
    if (bad <= 20)
      std::fprintf(stderr, "verify: sample %zu (%s) failed: %s\n", i,
                   m.records[i].image_path.c_str(), failures[i].c_str());
  }
  std::printf("verify: %zu/%zu samples pass\n", m.records.size() - bad, m.records.size());
  return bad == 0 ? kExitOk : kExitData;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string preset = "mini-res";
  std::string optim;  // "paper-optim" switches to the published recipe
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch = 64;
  int epochs = 10;
  int side = 64;
  std::uint64_t seed = 0;
  std::string out = "run";
  int jobs = 0;
  std::string config_file;
};

int run_train(TrainArgs& a, const std::map<std::string, const CLI::Option*>& opts) {
  nlohmann::json cfg = load_config_file(a.config_file);
  overlay(opts.at("data"), cfg, "data", a.data);
  overlay(opts.at("preset"), cfg, "preset", a.preset);
  overlay(opts.at("optim"), cfg, "optim", a.optim);
  overlay(opts.at("out"), cfg, "out", a.out);
  overlay(opts.at("lr"), cfg, "lr", a.lr);
  overlay(opts.at("momentum"), cfg, "momentum", a.momentum);
  overlay(opts.at("weight_decay"), cfg, "weight_decay", a.weight_decay);
  overlay(opts.at("batch"), cfg, "batch", a.batch);
  overlay(opts.at("epochs"), cfg, "epochs", a.epochs);
  overlay(opts.at("side"), cfg, "side", a.side);
  overlay(opts.at("seed"), cfg, "seed", a.seed);
  overlay(opts.at("jobs"), cfg, "jobs", a.jobs);

  if (a.data.empty()) throw ConfigError("train: --data is required");
  OptimConfig optim;
  bool lr_given = opts.at("lr")->count() > 0 || cfg.contains("lr");
  bool m_given = opts.at("momentum")->count() > 0 || cfg.contains("momentum");
  bool wd_given = opts.at("weight_decay")->count() > 0 || cfg.contains("weight_decay");
  if (a.optim == "paper-optim")
    optim = paper_optim();
  else if (!a.optim.empty())
    throw ConfigError("unknown optim preset: " + a.optim);
  if (a.optim.empty() || lr_given) optim.learning_rate = a.lr;
  if (a.optim.empty() || m_given) optim.momentum = a.momentum;
  if (a.optim.empty() || wd_given) optim.weight_decay = a.weight_decay;
  optim.batch_size = a.batch;
  optim.max_epochs = a.epochs;
  optim.seed = a.seed;
  validate(optim);

  set_max_threads(a.jobs > 0 ? a.jobs : hardware_threads());
  DatasetManifest manifest = read_manifest(fs::path(a.data) / "manifest.jsonl");
  fs::path data_dir(a.data);
  std::printf("train: loading %s splits at %d px\n", to_string(manifest.problem), a.side);
  LoadedSplit train_split = load_split_images(manifest, data_dir, Split::kTrain, a.side);
  LoadedSplit val_split = load_split_images(manifest, data_dir, Split::kVal, a.side);
  LoadedSplit test_split = load_split_images(manifest, data_dir, Split::kTest, a.side);
  NormStats norm = compute_norm_stats(train_split.images);

  ModelConfig model_cfg = preset_config(a.preset);
  model_cfg.input_side = a.side;
  Model<float> model(model_cfg, mix64(a.seed, 0x1217));

  fs::path out_dir(a.out);
  fs::create_directories(out_dir);
  TrainOptions topts;
  topts.problem = to_string(manifest.problem);
  topts.preset = a.preset;
  topts.checkpoint_path = out_dir / "checkpoint.ckpt";
  topts.verbose = true;
  RunRecord rec = train(model, train_split, val_split,
                        test_split.size() > 0 ? &test_split : nullptr, optim, norm, topts);

  {
    std::ofstream out(out_dir / "run_record.json", std::ios::binary);
    out << to_json(rec).dump(2) << "\n";
  }
  {
    std::ofstream out(out_dir / "model_config.json", std::ios::binary);
    out << to_json(model_cfg).dump(2) << "\n";
  }
  {
    std::ofstream out(out_dir / "norm_stats.json", std::ios::binary);
    out << nlohmann::json{{"mean", norm.mean}, {"std", norm.std}}.dump(2) << "\n";
  }
  {
    std::ofstream out(out_dir / "curve.csv", std::ios::binary);
    out << curve_to_csv(rec.curve);
  }
  write_resolved_config(out_dir, {{"command", "train"},
                                  {"data", a.data},
                                  {"preset", a.preset},
                                  {"optim", a.optim},
                                  {"lr", optim.learning_rate},
                                  {"momentum", optim.momentum},
                                  {"weight_decay", optim.weight_decay},
                                  {"batch", optim.batch_size},
                                  {"epochs", optim.max_epochs},
                                  {"side", a.side},
                                  {"seed", a.seed},
                                  {"out", a.out},
                                  {"jobs", a.jobs}});
  if (rec.diverged) {
    std::fprintf(stderr, "train: loss diverged; diagnostic record written\n");
    return kExitNumeric;
  }
  double best_val = 0.0;
  for (const auto& pt : rec.curve.points) best_val = std::max(best_val, pt.val_accuracy);
  std::printf("train: done; best val %.4f, test %.4f, ce %s\n", best_val,
              rec.final_test_accuracy.value_or(-1.0),
              rec.convergence_epoch ? std::to_string(*rec.convergence_epoch).c_str() : "-");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// xfer
// ---------------------------------------------------------------------------

struct XferArgs {
  std::vector<std::string> runs;
  std::vector<std::string> datasets;
  std::string out = "report";
  int jobs = 0;
};

int run_xfer(XferArgs& a) {
  if (a.runs.empty()) throw ConfigError("xfer: at least one --run is required");
  if (a.datasets.empty()) throw ConfigError("xfer: at least one --data is required");
  set_max_threads(a.jobs > 0 ? a.jobs : hardware_threads());

  struct LoadedRun {
    RunRecord record;
    std::unique_ptr<Model<float>> model;  // null if the checkpoint is unloadable
    NormStats norm;
    int side = 0;
  };
  std::vector<LoadedRun> runs;
  for (const auto& dir : a.runs) {
    LoadedRun lr;
    std::ifstream rec_in(fs::path(dir) / "run_record.json", std::ios::binary);
    if (!rec_in) throw IoError("xfer: missing run_record.json in " + dir);
    lr.record = run_record_from_json(nlohmann::json::parse(rec_in));
    try {
      std::ifstream cfg_in(fs::path(dir) / "model_config.json", std::ios::binary);
      if (!cfg_in) throw IoError("missing model_config.json in " + dir);
      ModelConfig mc = model_config_from_json(nlohmann::json::parse(cfg_in));
      lr.side = mc.input_side;
      lr.model = std::make_unique<Model<float>>(mc, 0);
      load_model(*lr.model, fs::path(dir) / "checkpoint.ckpt");
      std::ifstream norm_in(fs::path(dir) / "norm_stats.json", std::ios::binary);
      if (!norm_in) throw IoError("missing norm_stats.json in " + dir);
      nlohmann::json nj = nlohmann::json::parse(norm_in);
      lr.norm = {nj.at("mean").get<double>(), nj.at("std").get<double>()};
    } catch (const std::exception& e) {
      std::fprintf(stderr,
                   "xfer: run %s has no loadable checkpoint (%s); reporting absent cells\n",
                   dir.c_str(), e.what());
      lr.model.reset();
    }
    runs.push_back(std::move(lr));
  }

  // Each target problem's test split, loaded once per required input side.
  std::map<std::pair<std::string, int>, LoadedSplit> split_cache;
  auto test_split_at = [&](const std::string& dataset_dir, int side) -> const LoadedSplit& {
    auto key = std::make_pair(dataset_dir, side);
    auto it = split_cache.find(key);
    if (it != split_cache.end()) return it->second;
    DatasetManifest m = read_manifest(fs::path(dataset_dir) / "manifest.jsonl");
    return split_cache.emplace(key, load_split_images(m, dataset_dir, Split::kTest, side))
        .first->second;
  };

  std::vector<std::pair<ProblemId, std::string>> targets;
  for (const auto& dir : a.datasets) {
    DatasetManifest m = read_manifest(fs::path(dir) / "manifest.jsonl");
    targets.emplace_back(m.problem, dir);
  }

  XferMatrix matrix;
  for (const auto& [prob, dir] : targets) matrix.cols.push_back(prob);
  for (auto& run : runs) {
    matrix.row_names.push_back(run.record.preset + "@" + run.record.problem);
    matrix.train_problems.push_back(run.record.problem);
    std::vector<std::optional<double>> row;
    for (const auto& [prob, dir] : targets) {
      if (!run.model) {
        row.push_back(std::nullopt);
        continue;
      }
      row.push_back(evaluate(*run.model, test_split_at(dir, run.side), run.norm));
    }
    matrix.cells.push_back(std::move(row));
  }

  std::vector<RunRecord> records;
  for (const auto& run : runs) records.push_back(run.record);
  emit_report(records, matrix, a.out);
  std::printf("xfer: report written to %s\n", a.out.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckArgs {
  bool skip_presets = false;
  bool self_test_fault = false;
};

int run_gradcheck(GradcheckArgs& a) {
  GradcheckOptions opt;
  opt.inject_batchnorm_fault = a.self_test_fault;
  bool all_pass = true;
  for (const auto& r : run_gradcheck_suite(opt)) {
    std::printf("%-22s max_rel %.3e  abs(small) %.3e  [%s]\n", r.name.c_str(), r.max_rel,
                r.max_abs_small, r.pass ? "PASS" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  if (!a.skip_presets) {
    for (const auto& name : preset_names()) {
      GradCheckOutcome r = check_model_gradients(name);
      std::printf("%-22s max_rel %.3e  abs(small) %.3e  [%s]\n", r.name.c_str(), r.max_rel,
                  r.max_abs_small, r.pass ? "PASS" : "FAIL");
      all_pass = all_pass && r.pass;
    }
  }
  return all_pass ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator_for_training();
  CLI::App app{"SVRT-style same-different benchmark: generation, training, evaluation"};
  app.require_subcommand(1);

  GenArgs gen_args;
  std::map<std::string, const CLI::Option*> gen_opts;
  CLI::App* gen = app.add_subcommand("gen", "Generate a same-different dataset");
  gen_opts["problem"] = gen->add_option("--problem", gen_args.problem, "p1|p5|p20|p21");
  gen_opts["train"] = gen->add_option("--train", gen_args.train, "training samples (even)");
  gen_opts["val"] = gen->add_option("--val", gen_args.val, "validation samples (even)");
  gen_opts["test"] = gen->add_option("--test", gen_args.test, "test samples (even)");
  gen_opts["seed"] = gen->add_option("--seed", gen_args.seed, "master seed");
  gen_opts["out"] = gen->add_option("--out", gen_args.out, "output directory");
  gen_opts["canvas"] = gen->add_option("--canvas", gen_args.canvas, "canvas side in px");
  gen_opts["jobs"] = gen->add_option("--jobs", gen_args.jobs, "generation workers");
  gen_opts["preset"] =
      gen->add_option("--preset", gen_args.preset, "'paper' = 400k/100k/100k @128");
  gen->add_option("--config", gen_args.config_file, "JSON config file (flags override)");

  VerifyArgs verify_args;
  CLI::App* verify = app.add_subcommand("verify", "Re-verify every sample of a dataset");
  verify->add_option("--data", verify_args.data, "dataset directory (with manifest.jsonl)");
  verify->add_option("--manifest", verify_args.manifest, "explicit manifest path");
  verify->add_option("--jobs", verify_args.jobs, "verification workers");

  TrainArgs train_args;
  std::map<std::string, const CLI::Option*> train_opts;
  CLI::App* tr = app.add_subcommand("train", "Train a preset model on a dataset");
  train_opts["data"] = tr->add_option("--data", train_args.data, "dataset directory");
  train_opts["preset"] = tr->add_option("--preset", train_args.preset, "model preset name");
  train_opts["optim"] =
      tr->add_option("--optim", train_args.optim, "'paper-optim' = lr .1 m .9 wd 1e-4");
  train_opts["lr"] = tr->add_option("--lr", train_args.lr, "learning rate");
  train_opts["momentum"] = tr->add_option("--momentum", train_args.momentum, "momentum");
  train_opts["weight_decay"] =
      tr->add_option("--weight-decay", train_args.weight_decay, "weight decay");
  train_opts["batch"] = tr->add_option("--batch", train_args.batch, "batch size");
  train_opts["epochs"] = tr->add_option("--epochs", train_args.epochs, "max epochs");
  train_opts["side"] =
      tr->add_option("--side", train_args.side, "model input side (downscale at load)");
  train_opts["seed"] = tr->add_option("--seed", train_args.seed, "training seed");
  train_opts["out"] = tr->add_option("--out", train_args.out, "run output directory");
  train_opts["jobs"] = tr->add_option("--jobs", train_args.jobs, "compute workers");
  tr->add_option("--config", train_args.config_file, "JSON config file (flags override)");

  XferArgs xfer_args;
  CLI::App* xfer = app.add_subcommand("xfer", "Zero-shot cross-problem evaluation report");
  xfer->add_option("--run", xfer_args.runs, "run directory (repeatable)");
  xfer->add_option("--data", xfer_args.datasets, "dataset directory (repeatable)");
  xfer->add_option("--out", xfer_args.out, "report output directory");
  xfer->add_option("--jobs", xfer_args.jobs, "evaluation workers");

  GradcheckArgs gc_args;
  CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  gc->add_flag("--skip-presets", gc_args.skip_presets, "check ops only, not preset models");
  gc->add_flag("--self-test-fault", gc_args.self_test_fault,
               "inject a batchnorm gradient fault (harness self-test; must fail)");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return run_gen(gen_args, gen_opts);
    if (verify->parsed()) return run_verify(verify_args);
    if (tr->parsed()) return run_train(train_args, train_opts);
    if (xfer->parsed()) return run_xfer(xfer_args);
    if (gc->parsed()) return run_gradcheck(gc_args);
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const ArgumentError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
