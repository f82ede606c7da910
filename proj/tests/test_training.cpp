#include <catch2/catch.hpp>

#include <cmath>

#include "minisvrt/training.hpp"

using namespace minisvrt;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.input_side = 8;
  cfg.stem_channels = 4;
  BlockConfig b;
  b.out_channels = 4;
  b.skip = SkipMode::kResidual;
  b.downsample = true;
  cfg.blocks.push_back(b);
  return cfg;
}

// Separable toy data: positives are mostly dark, negatives mostly light.
LoadedSplit separable_split(std::size_t n, int side, std::uint64_t seed) {
  Rng rng(seed);
  LoadedSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    int label = i % 2 == 0 ? 1 : 0;
    ImageGray img = make_blank(side, side, label ? 40 : 210);
    for (auto& px : img.pixels)
      px = static_cast<std::uint8_t>(
          std::clamp<int>(static_cast<int>(px) + static_cast<int>(rng.uniform_int(-30, 30)), 0, 255));
    split.images.push_back(std::move(img));
    split.labels.push_back(label);
  }
  return split;
}

}  // namespace

TEST_CASE("compute_norm_stats closed forms", "[training]") {
  SECTION("half black, half white image") {
    ImageGray img = make_blank(16, 16, 255);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 8; ++x) img.at(x, y) = 0;
    std::vector<ImageGray> split{img};
    NormStats s = compute_norm_stats(split);
    REQUIRE(s.mean == Approx(0.5).margin(1e-12));
    REQUIRE(s.std == Approx(0.5).margin(1e-12));
  }
  SECTION("all-white split cannot be normalized") {
    std::vector<ImageGray> split{make_blank(8, 8, 255)};
    REQUIRE_THROWS_AS(compute_norm_stats(split), ArgumentError);
  }
  SECTION("deterministic across calls") {
    Rng rng(4);
    ImageGray img = make_blank(12, 12);
    for (auto& px : img.pixels) px = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    std::vector<ImageGray> split{img};
    NormStats a = compute_norm_stats(split);
    NormStats b = compute_norm_stats(split);
    REQUIRE(a.mean == b.mean);
    REQUIRE(a.std == b.std);
  }
  SECTION("empty split is an error") {
    std::vector<ImageGray> split;
    REQUIRE_THROWS_AS(compute_norm_stats(split), ArgumentError);
  }
}

TEST_CASE("sgd_step closed forms", "[training]") {
  OptimConfig cfg;
  SECTION("single momentum step") {
    Parameter<double> p("p", Tensor<double>::full({1}, 1.0));
    p.grad[0] = 0.5;
    p.grad_ready = true;
    cfg.learning_rate = 0.1;
    cfg.momentum = 0.9;
    cfg.weight_decay = 0.0;
    Parameter<double>* ptr = &p;
    sgd_step(std::span<Parameter<double>* const>(&ptr, 1), cfg);
    REQUIRE(p.momentum[0] == 0.5);
    REQUIRE(p.value[0] == 0.95);
    REQUIRE_FALSE(p.grad_ready);
    REQUIRE(p.grad[0] == 0.0);
  }
  SECTION("zero learning rate still updates the momentum buffer") {
    Parameter<double> p("p", Tensor<double>::full({1}, 2.0));
    p.grad[0] = 1.0;
    p.grad_ready = true;
    cfg.learning_rate = 0.0;
    cfg.momentum = 0.9;
    cfg.weight_decay = 0.0;
    Parameter<double>* ptr = &p;
    sgd_step(std::span<Parameter<double>* const>(&ptr, 1), cfg);
    REQUIRE(p.value[0] == 2.0);
    REQUIRE(p.momentum[0] == 1.0);
  }
  SECTION("weight decay alone") {
    Parameter<double> p("p", Tensor<double>::full({1}, 1.0));
    p.grad[0] = 0.0;
    p.grad_ready = true;
    cfg.learning_rate = 0.1;
    cfg.momentum = 0.9;
    cfg.weight_decay = 1e-4;
    Parameter<double>* ptr = &p;
    sgd_step(std::span<Parameter<double>* const>(&ptr, 1), cfg);
    REQUIRE(p.value[0] == 1.0 - 1e-5);
  }
  SECTION("stepping without a gradient is a state error") {
    Parameter<double> p("p", Tensor<double>::full({1}, 1.0));
    Parameter<double>* ptr = &p;
    REQUIRE_THROWS_AS(sgd_step(std::span<Parameter<double>* const>(&ptr, 1), cfg), StateError);
  }
  SECTION("non-trainable parameters are untouched") {
    Parameter<double> p("stats", Tensor<double>::full({1}, 3.0), /*trainable=*/false);
    Parameter<double>* ptr = &p;
    sgd_step(std::span<Parameter<double>* const>(&ptr, 1), cfg);  // no grad needed
    REQUIRE(p.value[0] == 3.0);
  }
}

TEST_CASE("convergence_epoch metric", "[training]") {
  SECTION("first crossing") {
    TrainCurve curve;
    curve.points = {{0.5, 0.60, 1.0}, {1.0, 0.88, 0.8}, {1.5, 0.91, 0.6}};
    auto ce = convergence_epoch(curve);
    REQUIRE(ce.has_value());
    REQUIRE(*ce == 1.5);
  }
  SECTION("never crossing is absent") {
    TrainCurve curve;
    curve.points = {{0.5, 0.60, 1.0}, {1.0, 0.88, 0.8}};
    REQUIRE_FALSE(convergence_epoch(curve).has_value());
  }
  SECTION("a first point at 99.2% reproduces a CE of 0.5") {
    TrainCurve curve;
    curve.points = {{0.5, 0.992, 0.1}};
    REQUIRE(*convergence_epoch(curve) == 0.5);
  }
  SECTION("raising the threshold never lowers the convergence epoch") {
    Rng rng(12);
    for (int trial = 0; trial < 200; ++trial) {
      TrainCurve curve;
      int n = static_cast<int>(rng.uniform_int(1, 12));
      for (int i = 0; i < n; ++i)
        curve.points.push_back({0.5 * (i + 1), rng.uniform(), 0.0});
      double t1 = rng.uniform(0.0, 1.0);
      double t2 = rng.uniform(t1, 1.0);
      auto c1 = convergence_epoch(curve, t1);
      auto c2 = convergence_epoch(curve, t2);
      if (c2.has_value()) {
        REQUIRE(c1.has_value());
        REQUIRE(*c1 <= *c2);
      }
    }
  }
}

TEST_CASE("accuracy metric", "[training]") {
  SECTION("all correct") {
    std::vector<double> probs{0.9, 0.1, 0.8};
    std::vector<int> labels{1, 0, 1};
    REQUIRE(accuracy(probs, labels) == 1.0);
  }
  SECTION("constant prediction on a balanced split is chance") {
    std::vector<double> probs(10, 0.9);
    std::vector<int> labels;
    for (int i = 0; i < 10; ++i) labels.push_back(i % 2);
    REQUIRE(accuracy(probs, labels) == 0.5);
  }
  SECTION("hand-counted case") {
    std::vector<double> probs{0.6, 0.4, 0.7};
    std::vector<int> labels{1, 1, 0};
    REQUIRE(accuracy(probs, labels) == Approx(1.0 / 3.0));
  }
  SECTION("empty input is an error") {
    std::vector<double> probs;
    std::vector<int> labels;
    REQUIRE_THROWS_AS(accuracy(probs, labels), ArgumentError);
  }
}

TEST_CASE("train protocol arithmetic and determinism", "[training]") {
  LoadedSplit tr = separable_split(32, 8, 1);
  LoadedSplit va = separable_split(16, 8, 2);
  NormStats norm = compute_norm_stats(tr.images);
  OptimConfig cfg;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.05;
  cfg.seed = 5;
  SECTION("one epoch yields exactly the half- and full-epoch points") {
    cfg.max_epochs = 1;
    Model<float> m(tiny_config(), 3);
    RunRecord rec = train(m, tr, va, nullptr, cfg, norm);
    REQUIRE(rec.curve.points.size() == 2);
    REQUIRE(rec.curve.points[0].epoch == 0.5);
    REQUIRE(rec.curve.points[1].epoch == 1.0);
    REQUIRE_FALSE(rec.final_test_accuracy.has_value());
    REQUIRE_FALSE(rec.diverged);
  }
  SECTION("epoch fractions advance in exact 0.5 steps") {
    cfg.max_epochs = 3;
    Model<float> m(tiny_config(), 3);
    RunRecord rec = train(m, tr, va, nullptr, cfg, norm);
    REQUIRE(rec.curve.points.size() == 6);
    for (std::size_t i = 0; i < rec.curve.points.size(); ++i)
      REQUIRE(rec.curve.points[i].epoch == Approx(0.5 * (i + 1)));
  }
  SECTION("identical runs produce identical curves") {
    cfg.max_epochs = 2;
    Model<float> a(tiny_config(), 7);
    Model<float> b(tiny_config(), 7);
    RunRecord ra = train(a, tr, va, nullptr, cfg, norm);
    RunRecord rb = train(b, tr, va, nullptr, cfg, norm);
    REQUIRE(ra.curve.points.size() == rb.curve.points.size());
    for (std::size_t i = 0; i < ra.curve.points.size(); ++i) {
      REQUIRE(ra.curve.points[i].val_accuracy == rb.curve.points[i].val_accuracy);
      REQUIRE(ra.curve.points[i].train_loss == rb.curve.points[i].train_loss);
    }
  }
  SECTION("test split fills final_test_accuracy") {
    cfg.max_epochs = 1;
    LoadedSplit te = separable_split(16, 8, 9);
    Model<float> m(tiny_config(), 3);
    RunRecord rec = train(m, tr, va, &te, cfg, norm);
    REQUIRE(rec.final_test_accuracy.has_value());
    REQUIRE(*rec.final_test_accuracy == eval_accuracy(m, te, norm));
  }
}

TEST_CASE("optimizer sanity: separable toy memorization", "[training]") {
  // Reduced-size counterpart of the memorization gate: loss halves quickly
  // on trivially separable data.
  LoadedSplit tr = separable_split(32, 8, 21);
  NormStats norm = compute_norm_stats(tr.images);
  Model<float> m(tiny_config(), 11);
  OptimConfig cfg;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.05;
  auto trainable = m.trainable_parameters();
  std::vector<std::size_t> idx(tr.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  double first_loss = -1.0;
  bool halved = false;
  for (int step = 0; step < 200 && !halved; ++step) {
    Tensor<float> images = detail::assemble_batch<float>(tr, idx, norm);
    Tensor<float> targets({tr.size()});
    for (std::size_t i = 0; i < tr.size(); ++i) targets[i] = static_cast<float>(tr.labels[i]);
    Tape<float> tape;
    auto logits = m.forward(tape, tape.input(std::move(images)), true);
    auto bce = tape.sigmoid_bce(logits, targets);
    double loss = tape.value(bce.loss)[0];
    if (first_loss < 0) first_loss = loss;
    if (loss <= 0.5 * first_loss) {
      halved = true;
      break;
    }
    tape.backward(bce.loss);
    sgd_step(std::span<Parameter<float>* const>(trainable), cfg);
  }
  REQUIRE(halved);
}

TEST_CASE("run record serialization round-trips", "[training]") {
  RunRecord rec;
  rec.problem = "p1";
  rec.preset = "mini-res";
  rec.optim.learning_rate = 0.01;
  rec.optim.seed = 99;
  rec.curve.points = {{0.5, 0.7, 0.65}, {1.0, 0.93, 0.31}};
  rec.final_test_accuracy = 0.91;
  rec.convergence_epoch = 1.0;
  rec.checkpoint_path = "runs/p1/checkpoint.ckpt";
  rec.wall_time_sec = 12.5;
  nlohmann::json j = to_json(rec);
  RunRecord back = run_record_from_json(j);
  REQUIRE(back.problem == rec.problem);
  REQUIRE(back.preset == rec.preset);
  REQUIRE(back.optim.seed == 99);
  REQUIRE(back.curve.points.size() == 2);
  REQUIRE(back.curve.points[1].val_accuracy == 0.93);
  REQUIRE(*back.final_test_accuracy == 0.91);
  REQUIRE(*back.convergence_epoch == 1.0);

  RunRecord never;
  never.problem = "p21";
  never.preset = "mini-plain";
  nlohmann::json j2 = to_json(never);
  REQUIRE(j2.at("convergence_epoch").is_null());
  RunRecord back2 = run_record_from_json(j2);
  REQUIRE_FALSE(back2.convergence_epoch.has_value());

  std::string csv = curve_to_csv(rec.curve);
  REQUIRE(csv.rfind("epoch,val_acc,train_loss\n", 0) == 0);
  REQUIRE(csv.find("0.5,0.700000") != std::string::npos);
}
