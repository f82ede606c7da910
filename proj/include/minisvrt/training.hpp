#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "minisvrt/errors.hpp"
#include "minisvrt/models.hpp"
#include "minisvrt/problems.hpp"
#include "minisvrt/raster.hpp"
#include "minisvrt/rng.hpp"
#include "minisvrt/tensor.hpp"

namespace minisvrt {

struct OptimConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 64;
  int max_epochs = 10;
  std::uint64_t seed = 0;
};

inline void validate(const OptimConfig& cfg) {
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("optim: learning rate must be positive");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) throw ConfigError("optim: momentum must be in [0,1)");
  if (cfg.weight_decay < 0.0) throw ConfigError("optim: weight decay must be >= 0");
  if (cfg.batch_size < 2) throw ConfigError("optim: batch size must be >= 2");
  if (cfg.max_epochs < 1) throw ConfigError("optim: max epochs must be >= 1");
}

// The published training recipe; the toy default above lowers the learning
// rate because 0.1 destabilizes the small presets at batch 64.
inline OptimConfig paper_optim() {
  OptimConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.momentum = 0.9;
  cfg.weight_decay = 1e-4;
  return cfg;
}

struct CurvePoint {
  double epoch = 0.0;  // multiples of 0.5
  double val_accuracy = 0.0;
  double train_loss = 0.0;
};

struct TrainCurve {
  std::vector<CurvePoint> points;
};

// Pixel statistics of a training split after mapping bytes to [0, 1].
struct NormStats {
  double mean = 0.0;
  double std = 1.0;
};

struct RunRecord {
  std::string problem;
  std::string preset;
  OptimConfig optim;
  TrainCurve curve;
  std::optional<double> final_test_accuracy;
  std::optional<double> convergence_epoch;
  std::string checkpoint_path;
  double wall_time_sec = 0.0;
  bool diverged = false;
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline double accuracy(std::span<const double> probabilities, std::span<const int> labels) {
  if (probabilities.empty() || probabilities.size() != labels.size())
    throw ArgumentError("accuracy: empty or mismatched inputs");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    int pred = probabilities[i] >= 0.5 ? 1 : 0;
    if (pred == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(probabilities.size());
}

// First epoch fraction at which validation accuracy reaches the threshold;
// absent if the curve never gets there.
inline std::optional<double> convergence_epoch(const TrainCurve& curve, double threshold = 0.90) {
  for (const auto& pt : curve.points)
    if (pt.val_accuracy >= threshold) return pt.epoch;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Normalization statistics
// ---------------------------------------------------------------------------

// Exact integer accumulation over pixel bytes, so the result is independent
// of traversal order and worker count.
inline NormStats compute_norm_stats(std::span<const ImageGray> images) {
  if (images.empty()) throw ArgumentError("compute_norm_stats: empty split");
  std::uint64_t sum = 0, sum_sq = 0, count = 0;
  for (const auto& img : images) {
    for (std::uint8_t px : img.pixels) {
      sum += px;
      sum_sq += static_cast<std::uint64_t>(px) * px;
    }
    count += img.pixels.size();
  }
  if (count == 0) throw ArgumentError("compute_norm_stats: no pixels");
  double mean = static_cast<double>(sum) / (255.0 * static_cast<double>(count));
  double ex2 = static_cast<double>(sum_sq) / (255.0 * 255.0 * static_cast<double>(count));
  double var = ex2 - mean * mean;
  double stddev = var > 0.0 ? std::sqrt(var) : 0.0;
  if (!(stddev > 0.0))
    throw ArgumentError("compute_norm_stats: zero pixel variance; cannot normalize");
  return {mean, stddev};
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// SGD with momentum and decoupled-from-nothing classic weight decay:
//   g <- grad + wd * p;  v <- mu * v + g;  p <- p - lr * v.
// Gradients are consumed (cleared) by the step.
template <typename T>
void sgd_step(std::span<Parameter<T>* const> params, const OptimConfig& cfg) {
  for (Parameter<T>* p : params) {
    if (!p->trainable) continue;
    if (!p->grad_ready)
      throw StateError("sgd_step: parameter " + p->name + " has no gradient; run backward first");
  }
  const T lr = static_cast<T>(cfg.learning_rate);
  const T mu = static_cast<T>(cfg.momentum);
  const T wd = static_cast<T>(cfg.weight_decay);
  for (Parameter<T>* p : params) {
    if (!p->trainable) continue;
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      T g = p->grad[i] + wd * p->value[i];
      p->momentum[i] = mu * p->momentum[i] + g;
      p->value[i] -= lr * p->momentum[i];
    }
    p->zero_grad();
  }
}

// ---------------------------------------------------------------------------
// In-memory split, loaded at the model's input resolution
// ---------------------------------------------------------------------------

struct LoadedSplit {
  std::vector<ImageGray> images;
  std::vector<int> labels;  // negative -> 0, positive -> 1

  std::size_t size() const { return images.size(); }
};

inline LoadedSplit load_split_images(const DatasetManifest& manifest,
                                     const std::filesystem::path& manifest_dir, Split split,
                                     int target_side) {
  DatasetStream stream(manifest, manifest_dir, split);
  LoadedSplit out;
  out.images.reserve(stream.size());
  out.labels.reserve(stream.size());
  for (std::size_t i = 0; i < stream.size(); ++i) {
    LoadedSample s = stream.load(i);
    out.images.push_back(s.image.width == target_side ? std::move(s.image)
                                                      : downscale(s.image, target_side));
    out.labels.push_back(s.label);
  }
  return out;
}

namespace detail {

template <typename T>
Tensor<T> assemble_batch(const LoadedSplit& split, std::span<const std::size_t> indices,
                         const NormStats& norm) {
  std::size_t side = static_cast<std::size_t>(split.images.at(indices[0]).width);
  Tensor<T> batch({indices.size(), 1, side, side});
  const T mean = static_cast<T>(norm.mean);
  const T inv_std = static_cast<T>(1.0 / norm.std);
  T* dst = batch.data();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const ImageGray& img = split.images[indices[b]];
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
      dst[b * img.pixels.size() + i] =
          (static_cast<T>(img.pixels[i]) * static_cast<T>(1.0 / 255.0) - mean) * inv_std;
  }
  return batch;
}

}  // namespace detail

// Eval-mode accuracy of a model over a loaded split.
template <typename T>
double eval_accuracy(Model<T>& model, const LoadedSplit& split, const NormStats& norm,
                     std::size_t batch = 256) {
  if (split.size() == 0) throw ArgumentError("eval_accuracy: empty split");
  std::vector<double> probs;
  probs.reserve(split.size());
  std::vector<std::size_t> idx(batch);
  for (std::size_t start = 0; start < split.size(); start += batch) {
    std::size_t n = std::min(batch, split.size() - start);
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
    Tensor<T> images = detail::assemble_batch<T>(split, idx, norm);
    Tensor<T> p = model.predict(images);
    for (std::size_t i = 0; i < n; ++i) probs.push_back(static_cast<double>(p[i]));
  }
  return accuracy(probs, std::span<const int>(split.labels));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::string problem;          // metadata only
  std::string preset;           // metadata only
  std::filesystem::path checkpoint_path;  // best-validation parameters, if set
  bool verbose = false;
};

// Seeded-shuffle mini-batch SGD with a validation pass every half epoch.
// The best-validation parameters are restored into the model at the end
// (and written to checkpoint_path when given). A non-finite loss aborts
// the run and marks the record as diverged.
template <typename T>
RunRecord train(Model<T>& model, const LoadedSplit& train_split, const LoadedSplit& val_split,
                const LoadedSplit* test_split, const OptimConfig& cfg, const NormStats& norm,
                const TrainOptions& opts = {}) {
  validate(cfg);
  if (train_split.size() < 2) throw ArgumentError("train: training split too small");
  if (val_split.size() == 0) throw ArgumentError("train: empty validation split");
  auto t_start = std::chrono::steady_clock::now();

  RunRecord rec;
  rec.problem = opts.problem;
  rec.preset = opts.preset;
  rec.optim = cfg;
  rec.checkpoint_path = opts.checkpoint_path.string();

  auto trainable = model.trainable_parameters();
  auto all_params = model.parameters();
  std::vector<Tensor<T>> best_values;
  double best_val = -1.0;
  auto snapshot_best = [&]() {
    best_values.clear();
    for (Parameter<T>* p : all_params) best_values.push_back(p->value);
  };

  const std::size_t n = train_split.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  bool aborted = false;
  for (int epoch = 0; epoch < cfg.max_epochs && !aborted; ++epoch) {
    Rng shuffle_rng(mix64(cfg.seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.below(i))]);

    std::vector<std::span<const std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch) {
      std::size_t len = std::min(batch, n - start);
      if (len < 2) break;  // batchnorm needs at least 2 samples
      batches.emplace_back(order.data() + start, len);
    }
    const std::size_t half = (batches.size() + 1) / 2;

    double loss_acc = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t bi = 0; bi < batches.size() && !aborted; ++bi) {
      Tensor<T> images = detail::assemble_batch<T>(train_split, batches[bi], norm);
      Tensor<T> targets({batches[bi].size()});
      for (std::size_t i = 0; i < batches[bi].size(); ++i)
        targets[i] = static_cast<T>(train_split.labels[batches[bi][i]]);
      Tape<T> tape;
      auto logits = model.forward(tape, tape.input(std::move(images)), /*training=*/true);
      auto bce = tape.sigmoid_bce(logits, targets);
      double loss = static_cast<double>(tape.value(bce.loss)[0]);
      if (!std::isfinite(loss)) {
        rec.diverged = true;
        aborted = true;
        break;
      }
      loss_acc += loss;
      ++loss_count;
      tape.backward(bce.loss);
      sgd_step(std::span<Parameter<T>* const>(trainable), cfg);

      bool at_half = bi + 1 == half;
      bool at_end = bi + 1 == batches.size();
      if (at_half || at_end) {
        CurvePoint pt;
        pt.epoch = epoch + (at_end ? 1.0 : 0.5);
        pt.train_loss = loss_count > 0 ? loss_acc / static_cast<double>(loss_count) : 0.0;
        pt.val_accuracy = eval_accuracy(model, val_split, norm);
        rec.curve.points.push_back(pt);
        loss_acc = 0.0;
        loss_count = 0;
        if (pt.val_accuracy > best_val) {
          best_val = pt.val_accuracy;
          snapshot_best();
        }
        if (opts.verbose)
          std::fprintf(stderr, "epoch %.1f  val_acc %.4f  train_loss %.4f\n", pt.epoch,
                       pt.val_accuracy, pt.train_loss);
      }
    }
  }

  if (!best_values.empty())
    for (std::size_t i = 0; i < all_params.size(); ++i) all_params[i]->value = best_values[i];
  rec.convergence_epoch = convergence_epoch(rec.curve);
  if (test_split && !rec.diverged)
    rec.final_test_accuracy = eval_accuracy(model, *test_split, norm);
  if (!opts.checkpoint_path.empty()) save_model(model, opts.checkpoint_path);
  rec.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return rec;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const OptimConfig& cfg) {
  return {{"learning_rate", cfg.learning_rate}, {"momentum", cfg.momentum},
          {"weight_decay", cfg.weight_decay},   {"batch_size", cfg.batch_size},
          {"max_epochs", cfg.max_epochs},       {"seed", cfg.seed}};
}

inline OptimConfig optim_from_json(const nlohmann::json& j) {
  OptimConfig cfg;
  cfg.learning_rate = j.at("learning_rate").get<double>();
  cfg.momentum = j.at("momentum").get<double>();
  cfg.weight_decay = j.at("weight_decay").get<double>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.max_epochs = j.at("max_epochs").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

inline nlohmann::json to_json(const RunRecord& rec) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& pt : rec.curve.points)
    curve.push_back(
        {{"epoch", pt.epoch}, {"val_accuracy", pt.val_accuracy}, {"train_loss", pt.train_loss}});
  nlohmann::json j{{"problem", rec.problem},
                   {"preset", rec.preset},
                   {"optim", to_json(rec.optim)},
                   {"curve", curve},
                   {"checkpoint_path", rec.checkpoint_path},
                   {"wall_time_sec", rec.wall_time_sec},
                   {"diverged", rec.diverged}};
  j["final_test_accuracy"] =
      rec.final_test_accuracy ? nlohmann::json(*rec.final_test_accuracy) : nlohmann::json();
  j["convergence_epoch"] =
      rec.convergence_epoch ? nlohmann::json(*rec.convergence_epoch) : nlohmann::json();
  return j;
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord rec;
  rec.problem = j.at("problem").get<std::string>();
  rec.preset = j.at("preset").get<std::string>();
  rec.optim = optim_from_json(j.at("optim"));
  for (const auto& pj : j.at("curve"))
    rec.curve.points.push_back({pj.at("epoch").get<double>(), pj.at("val_accuracy").get<double>(),
                                pj.at("train_loss").get<double>()});
  if (!j.at("final_test_accuracy").is_null())
    rec.final_test_accuracy = j.at("final_test_accuracy").get<double>();
  if (!j.at("convergence_epoch").is_null())
    rec.convergence_epoch = j.at("convergence_epoch").get<double>();
  rec.checkpoint_path = j.at("checkpoint_path").get<std::string>();
  rec.wall_time_sec = j.at("wall_time_sec").get<double>();
  rec.diverged = j.at("diverged").get<bool>();
  return rec;
}

// CSV rendering of a curve: header `epoch,val_acc,train_loss`.
inline std::string curve_to_csv(const TrainCurve& curve) {
  std::string out = "epoch,val_acc,train_loss\n";
  char buf[96];
  for (const auto& pt : curve.points) {
    std::snprintf(buf, sizeof(buf), "%.1f,%.6f,%.6f\n", pt.epoch, pt.val_accuracy, pt.train_loss);
    out += buf;
  }
  return out;
}

}  // namespace minisvrt
