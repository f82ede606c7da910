#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "minisvrt/checkpoint.hpp"
#include "minisvrt/errors.hpp"
#include "minisvrt/rng.hpp"
#include "minisvrt/tensor.hpp"

namespace minisvrt {

// Connectivity of a block: plain feed-forward, additive shortcut, or
// concatenating (non-residual) shortcut.
enum class SkipMode { kNone, kResidual, kDense };

inline const char* to_string(SkipMode m) {
  switch (m) {
    case SkipMode::kNone: return "none";
    case SkipMode::kResidual: return "residual";
    case SkipMode::kDense: return "dense";
  }
  throw ArgumentError("unknown skip mode");
}

inline SkipMode skip_mode_from_string(const std::string& s) {
  if (s == "none") return SkipMode::kNone;
  if (s == "residual") return SkipMode::kResidual;
  if (s == "dense") return SkipMode::kDense;
  throw ArgumentError("unknown skip mode: " + s);
}

// timesteps > 1 applies the block repeatedly; share_weights picks between a
// true recurrence (one parameter set) and its unrolled counterpart
// (independent parameters per timestep).
struct RecurrenceSpec {
  int timesteps = 1;
  bool share_weights = true;
};

struct BlockConfig {
  std::size_t out_channels = 16;
  int convs_per_pass = 1;
  SkipMode skip = SkipMode::kNone;
  RecurrenceSpec recur;
  bool downsample = true;  // 2x maxpool at block exit
};

// Head is fixed: global average pool, then a single dense projection to one
// logit per sample; sigmoid is applied in the loss or at predict time.
// stem_pool halves the resolution right after the stem, the usual CNN stem
// reduction; it widens the receptive field of every block.
struct ModelConfig {
  int input_side = 64;
  std::size_t stem_channels = 16;
  bool stem_pool = false;
  std::vector<BlockConfig> blocks;
};

inline void validate(const ModelConfig& cfg) {
  if (cfg.input_side < 1) throw ConfigError("model config: input side must be positive");
  if (cfg.stem_channels == 0) throw ConfigError("model config: stem channels must be positive");
  if (cfg.blocks.empty()) throw ConfigError("model config: at least one block required");
  int side = cfg.input_side;
  if (cfg.stem_pool) side /= 2;
  for (const auto& b : cfg.blocks) {
    if (b.out_channels == 0) throw ConfigError("model config: block channels must be positive");
    if (b.convs_per_pass < 1) throw ConfigError("model config: convs_per_pass must be >= 1");
    if (b.recur.timesteps < 1) throw ConfigError("model config: timesteps must be >= 1");
    if (b.downsample) side /= 2;
  }
  if (side < 1) throw ConfigError("model config: spatial side shrinks below 1");
}

// ---------------------------------------------------------------------------
// Named presets: the eight points of the connectivity ablation axis at toy
// scale (64 px input, stem 16, blocks 16/32/64/128 with a downsample each).
// ---------------------------------------------------------------------------

inline ModelConfig preset_config(const std::string& name) {
  // Two convs per pass: the receptive field of the last cells then spans the
  // whole 64 px input, which a pairwise shape comparison needs.
  auto base = [](SkipMode skip, int timesteps, bool share) {
    ModelConfig cfg;
    cfg.input_side = 64;
    cfg.stem_channels = 16;
    cfg.stem_pool = true;
    for (std::size_t ch : {16u, 32u, 64u, 128u}) {
      BlockConfig b;
      b.out_channels = ch;
      b.convs_per_pass = 2;
      b.skip = skip;
      b.recur.timesteps = timesteps;
      b.recur.share_weights = share;
      b.downsample = true;
      cfg.blocks.push_back(b);
    }
    return cfg;
  };
  if (name == "mini-plain") return base(SkipMode::kNone, 1, true);
  if (name == "mini-res") return base(SkipMode::kResidual, 1, true);
  if (name == "mini-res-ws") return base(SkipMode::kNone, 1, true);  // = mini-plain
  if (name == "mini-dense") return base(SkipMode::kDense, 1, true);
  if (name == "mini-cor") return base(SkipMode::kResidual, 3, true);
  if (name == "mini-cor-ws") return base(SkipMode::kNone, 3, true);
  if (name == "mini-cor-wr") return base(SkipMode::kResidual, 3, false);
  if (name == "mini-cor-ws-wr") return base(SkipMode::kNone, 3, false);
  throw ConfigError("unknown preset: " + name);
}

inline std::vector<std::string> preset_names() {
  return {"mini-plain", "mini-res",    "mini-res-ws", "mini-dense",
          "mini-cor",   "mini-cor-ws", "mini-cor-wr", "mini-cor-ws-wr"};
}

// ---------------------------------------------------------------------------
// Config JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const ModelConfig& cfg) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : cfg.blocks)
    blocks.push_back({{"out_channels", b.out_channels},
                      {"convs_per_pass", b.convs_per_pass},
                      {"skip", to_string(b.skip)},
                      {"timesteps", b.recur.timesteps},
                      {"share_weights", b.recur.share_weights},
                      {"downsample", b.downsample}});
  return nlohmann::json{{"input_side", cfg.input_side},
                        {"stem_channels", cfg.stem_channels},
                        {"stem_pool", cfg.stem_pool},
                        {"blocks", blocks}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.input_side = j.at("input_side").get<int>();
  cfg.stem_channels = j.at("stem_channels").get<std::size_t>();
  cfg.stem_pool = j.value("stem_pool", false);
  for (const auto& bj : j.at("blocks")) {
    BlockConfig b;
    b.out_channels = bj.at("out_channels").get<std::size_t>();
    b.convs_per_pass = bj.at("convs_per_pass").get<int>();
    b.skip = skip_mode_from_string(bj.at("skip").get<std::string>());
    b.recur.timesteps = bj.at("timesteps").get<int>();
    b.recur.share_weights = bj.at("share_weights").get<bool>();
    b.downsample = bj.at("downsample").get<bool>();
    cfg.blocks.push_back(b);
  }
  validate(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

// Configurable CNN with a block grammar spanning the skip/recurrence
// ablations. Blocks whose input width differs from their output width start
// with a 1x1 entry conv so that every recurrent pass sees a fixed width and
// weight sharing across timesteps stays well-formed.
template <typename T>
class Model {
 public:
  using NodeId = typename Tape<T>::NodeId;

  Model(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    validate(cfg_);
    Rng rng(init_seed);
    stem_.conv = make_conv("stem.conv", cfg_.stem_channels, 1, 3, rng, /*bias=*/false);
    stem_.bn = make_bn("stem.bn", cfg_.stem_channels);
    std::size_t in_ch = cfg_.stem_channels;
    for (std::size_t bi = 0; bi < cfg_.blocks.size(); ++bi) {
      const BlockConfig& bc = cfg_.blocks[bi];
      std::string prefix = "block" + std::to_string(bi);
      BlockUnit block;
      if (in_ch != bc.out_channels)
        block.entry = make_conv(prefix + ".entry", bc.out_channels, in_ch, 1, rng, /*bias=*/true);
      int sets = bc.recur.share_weights ? 1 : bc.recur.timesteps;
      for (int p = 0; p < sets; ++p) {
        PassUnit pass;
        std::string pprefix = prefix + ".pass" + std::to_string(p);
        for (int q = 0; q < bc.convs_per_pass; ++q) {
          ConvBn cb;
          cb.conv = make_conv(pprefix + ".conv" + std::to_string(q), bc.out_channels,
                              bc.out_channels, 3, rng, /*bias=*/false);
          cb.bn = make_bn(pprefix + ".bn" + std::to_string(q), bc.out_channels);
          pass.convs.push_back(cb);
        }
        if (bc.skip == SkipMode::kDense)
          pass.reduce = make_conv(pprefix + ".reduce", bc.out_channels, 2 * bc.out_channels, 1,
                                  rng, /*bias=*/true);
        block.passes.push_back(std::move(pass));
      }
      blocks_.push_back(std::move(block));
      in_ch = bc.out_channels;
    }
    // Small head init keeps initial logits near zero, so training starts at
    // the ln(2) plateau instead of confidently wrong.
    Tensor<T> head_w({in_ch, 1});
    for (std::size_t i = 0; i < head_w.numel(); ++i)
      head_w[i] = static_cast<T>(0.01) * static_cast<T>(rng.normal());
    head_w_ = add_param("head.dense.weight", std::move(head_w));
    head_b_ = add_param("head.dense.bias", Tensor<T>({1}));
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }

  // Wires one forward pass onto the tape and returns the logit node [N, 1].
  NodeId forward(Tape<T>& tape, NodeId images, bool training) {
    const Tensor<T>& x = tape.value(images);
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != static_cast<std::size_t>(cfg_.input_side) ||
        x.dim(3) != static_cast<std::size_t>(cfg_.input_side))
      throw ShapeError("model forward: images must be [N, 1, side, side]");
    NodeId h = conv_bn_relu(tape, images, stem_, training, 1);
    if (cfg_.stem_pool) h = tape.maxpool2(h);
    for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
      const BlockConfig& bc = cfg_.blocks[bi];
      BlockUnit& block = blocks_[bi];
      if (block.entry.w)
        h = tape.conv2d(h, tape.param(*block.entry.w), tape.param(*block.entry.b), 1, 0);
      for (int t = 0; t < bc.recur.timesteps; ++t) {
        PassUnit& pass = block.passes[bc.recur.share_weights ? 0 : static_cast<std::size_t>(t)];
        NodeId shortcut = h;
        NodeId f = h;
        for (auto& cb : pass.convs) {
          f = tape.conv2d(f, tape.param(*cb.conv.w), Tape<T>::kNoNode, 1, 1);
          f = tape.batchnorm2d(f, tape.param(*cb.bn.gamma), tape.param(*cb.bn.beta),
                               &cb.bn.run_mean->value, &cb.bn.run_var->value, training);
          f = tape.relu(f);
        }
        switch (bc.skip) {
          case SkipMode::kNone:
            h = f;
            break;
          case SkipMode::kResidual:
            h = tape.relu(tape.add(shortcut, f));
            break;
          case SkipMode::kDense:
            h = tape.conv2d(tape.concat_channels(shortcut, f), tape.param(*pass.reduce.w),
                            tape.param(*pass.reduce.b), 1, 0);
            break;
        }
      }
      if (bc.downsample) h = tape.maxpool2(h);
    }
    h = tape.global_avg_pool(h);
    return tape.dense(h, tape.param(*head_w_), tape.param(*head_b_));
  }

  // Convenience single-shot forward; returns logits as a flat [N] tensor.
  Tensor<T> forward_logits(const Tensor<T>& images, bool training) {
    Tape<T> tape;
    NodeId out = forward(tape, tape.input(images), training);
    const Tensor<T>& v = tape.value(out);
    Tensor<T> logits({v.numel()});
    for (std::size_t i = 0; i < v.numel(); ++i) logits[i] = v[i];
    return logits;
  }

  // Eval-mode class probabilities, sigma(logit), in [0, 1].
  Tensor<T> predict(const Tensor<T>& images) {
    Tensor<T> z = forward_logits(images, /*training=*/false);
    for (std::size_t i = 0; i < z.numel(); ++i) {
      T v = z[i];
      z[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    }
    return z;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::vector<Parameter<T>*> trainable_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_)
      if (p->trainable) out.push_back(p.get());
    return out;
  }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  // Count of trainable scalars.
  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p->trainable) n += p->value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

 private:
  struct ConvUnit {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;
  };
  struct BnUnit {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;
    Parameter<T>* run_mean = nullptr;
    Parameter<T>* run_var = nullptr;
  };
  struct ConvBn {
    ConvUnit conv;
    BnUnit bn;
  };
  struct PassUnit {
    std::vector<ConvBn> convs;
    ConvUnit reduce;  // dense-skip 1x1 reduction
  };
  struct BlockUnit {
    ConvUnit entry;  // 1x1 width adapter; absent when widths already match
    std::vector<PassUnit> passes;
  };
  struct StemUnit {
    ConvUnit conv;
    BnUnit bn;
  };

  Parameter<T>* add_param(std::string name, Tensor<T> value, bool trainable = true) {
    params_.push_back(std::make_unique<Parameter<T>>(std::move(name), std::move(value), trainable));
    return params_.back().get();
  }

  Tensor<T> kaiming(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    T stddev = std::sqrt(T(2) / static_cast<T>(fan_in));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = stddev * static_cast<T>(rng.normal());
    return t;
  }

  ConvUnit make_conv(const std::string& name, std::size_t out_ch, std::size_t in_ch,
                     std::size_t k, Rng& rng, bool bias) {
    ConvUnit u;
    u.w = add_param(name + ".weight", kaiming({out_ch, in_ch, k, k}, in_ch * k * k, rng));
    if (bias) u.b = add_param(name + ".bias", Tensor<T>({out_ch}));
    return u;
  }

  BnUnit make_bn(const std::string& name, std::size_t channels) {
    BnUnit u;
    u.gamma = add_param(name + ".gamma", Tensor<T>::full({channels}, T(1)));
    u.beta = add_param(name + ".beta", Tensor<T>({channels}));
    u.run_mean = add_param(name + ".running_mean", Tensor<T>({channels}), /*trainable=*/false);
    u.run_var = add_param(name + ".running_var", Tensor<T>::full({channels}, T(1)),
                          /*trainable=*/false);
    return u;
  }

  NodeId conv_bn_relu(Tape<T>& tape, NodeId x, StemUnit& stem, bool training, std::size_t pad) {
    NodeId h = tape.conv2d(x, tape.param(*stem.conv.w), Tape<T>::kNoNode, 1, pad);
    h = tape.batchnorm2d(h, tape.param(*stem.bn.gamma), tape.param(*stem.bn.beta),
                         &stem.bn.run_mean->value, &stem.bn.run_var->value, training);
    return tape.relu(h);
  }

  ModelConfig cfg_;
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  StemUnit stem_;
  std::vector<BlockUnit> blocks_;
  Parameter<T>* head_w_ = nullptr;
  Parameter<T>* head_b_ = nullptr;
};

// Model construction from a preset name.
template <typename T>
std::unique_ptr<Model<T>> build_model(const std::string& preset, std::uint64_t init_seed) {
  return std::make_unique<Model<T>>(preset_config(preset), init_seed);
}

// ---------------------------------------------------------------------------
// Checkpoint binding
// ---------------------------------------------------------------------------

template <typename T>
void save_model(Model<T>& model, const std::filesystem::path& path) {
  std::vector<const Parameter<T>*> params;
  for (Parameter<T>* p : model.parameters()) params.push_back(p);
  save_checkpoint(params, path);
}

template <typename T>
void load_model(Model<T>& model, const std::filesystem::path& path) {
  auto entries = load_checkpoint(path);
  std::size_t applied = 0;
  for (const auto& e : entries) {
    Parameter<T>* p = model.find(e.name);
    if (!p) throw FormatError("load_model: checkpoint has unknown parameter " + e.name);
    if (p->value.shape() != e.value.shape())
      throw FormatError("load_model: shape mismatch for " + e.name);
    for (std::size_t i = 0; i < e.value.numel(); ++i)
      p->value[i] = static_cast<T>(e.value[i]);
    ++applied;
  }
  if (applied != model.parameters().size())
    throw FormatError("load_model: checkpoint does not cover every model parameter");
}

}  // namespace minisvrt
