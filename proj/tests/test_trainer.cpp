#include <cmath>
#include <limits>
#include <sstream>

#include <doctest.h>

#include "caveseg/checkpoint.hpp"
#include "caveseg/dataset.hpp"
#include "caveseg/ops.hpp"
#include "caveseg/trainer.hpp"
#include "testutil.hpp"

using namespace caveseg;
using caveseg::testing::TempDir;

namespace {

double sample_loss(CaveSegModel& model, const SegmentationSample& s) {
  NoGradGuard guard;
  const Tensor logits = model.forward(image_to_tensor(s.image));
  const std::int64_t n = logits.dim(1) * logits.dim(2);
  return cross_entropy(reshape(logits, {model.config().num_classes, n}),
                       s.labels, kIgnoreIndex)
      .values()[0];
}

}  // namespace

TEST_CASE("sgd follows the momentum recursion exactly") {
  // Scalar parameter w=1, constant gradient 1, lr 0.1, momentum 0.9:
  // v1=1 -> w=0.9; v2=1.9 -> w=0.71.
  Tensor w = Tensor::from_data({1}, {1.0}, true);
  OptimizerState state;
  state.learning_rate = 0.1;
  state.momentum = 0.9;

  for (const double expect : {0.9, 0.71}) {
    w.clear_grad();
    Tensor loss = sum(w);  // d(loss)/dw = 1
    backward(loss);
    clear_tape();
    sgd_step({{"w", w}}, state);
    CHECK(w.values()[0] == doctest::Approx(expect).epsilon(1e-15));
  }
}

TEST_CASE("sgd validates its hyperparameters and gradients") {
  Tensor w = Tensor::from_data({1}, {1.0}, true);
  OptimizerState state;

  state.learning_rate = 0.0;
  CHECK_THROWS_AS(sgd_step({{"w", w}}, state), std::invalid_argument);
  state.learning_rate = 0.1;
  state.momentum = 1.0;
  CHECK_THROWS_AS(sgd_step({{"w", w}}, state), std::invalid_argument);
  state.momentum = -0.1;
  CHECK_THROWS_AS(sgd_step({{"w", w}}, state), std::invalid_argument);

  state.momentum = 0.9;
  try {
    sgd_step({{"stages.0.blocks.0.norm1.gamma", w}}, state);
    FAIL("expected a missing-gradient error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("stages.0.blocks.0.norm1.gamma") !=
          std::string::npos);
  }
}

TEST_CASE("velocity persists per parameter name") {
  Tensor a = Tensor::from_data({1}, {0.0}, true);
  OptimizerState state;
  state.learning_rate = 1.0;
  state.momentum = 0.5;
  for (int step = 0; step < 2; ++step) {
    a.clear_grad();
    Tensor loss = sum(a);
    backward(loss);
    clear_tape();
    sgd_step({{"a", a}}, state);
  }
  // v1 = 1, w = -1; v2 = 1.5, w = -2.5.
  CHECK(a.values()[0] == doctest::Approx(-2.5).epsilon(1e-15));
  CHECK(state.velocity.at("a")[0] == doctest::Approx(1.5).epsilon(1e-15));
}

TEST_CASE("one tiny step at lr 1e-6 does not increase the loss") {
  const ClassPalette palette = ClassPalette::caveseg_default();
  ModelConfig cfg = ModelConfig::tiny();
  cfg.input_h = 16;
  cfg.input_w = 16;
  CaveSegModel model(cfg, 13);
  const SegmentationSample s = generate_synthetic(1, 16, 16, {1, 3}, palette);

  const double before = sample_loss(model, s);
  TrainOptions opts;
  opts.epochs = 1;
  opts.learning_rate = 1e-6;
  opts.momentum = 0.9;
  opts.seed = 1;
  std::ostringstream log;
  const TrainReport report = train(model, {s}, {}, opts, &log, "");
  REQUIRE(report.step_losses.size() == 1);
  CHECK(report.step_losses[0] == doctest::Approx(before).epsilon(1e-12));

  const double after = sample_loss(model, s);
  CHECK(after <= before + 1e-12);
  CHECK(log.str().find("step 0 loss") != std::string::npos);
  CHECK(log.str().find("epoch 0 mean_loss") != std::string::npos);
}

TEST_CASE("zero epochs leave the weights untouched") {
  TempDir tmp("train0");
  ModelConfig cfg = ModelConfig::tiny();
  cfg.input_h = 16;
  cfg.input_w = 16;
  CaveSegModel model(cfg, 17);
  std::vector<double> before;
  for (auto& [name, t] : model.parameters())
    before.insert(before.end(), t.values().begin(), t.values().end());

  TrainOptions opts;
  opts.epochs = 0;
  const std::string ckpt = (tmp.path / "init.ckpt").string();
  const TrainReport report = train(model, {}, {}, opts, nullptr, ckpt);
  CHECK(report.step_losses.empty());
  CHECK(report.epochs.empty());

  std::vector<double> after;
  for (auto& [name, t] : model.parameters())
    after.insert(after.end(), t.values().begin(), t.values().end());
  CHECK(before == after);
  CHECK(std::filesystem::exists(ckpt));
}

TEST_CASE("training is deterministic in the seed") {
  const ClassPalette palette = ClassPalette::caveseg_default();
  ModelConfig cfg = ModelConfig::tiny();
  cfg.input_h = 16;
  cfg.input_w = 16;
  std::vector<SegmentationSample> set;
  for (std::uint64_t i = 0; i < 3; ++i)
    set.push_back(generate_synthetic(i, 16, 16, {1, 3, 5}, palette));

  TrainOptions opts;
  opts.epochs = 2;
  opts.learning_rate = 1e-3;
  opts.seed = 21;

  CaveSegModel a(cfg, 5);
  const TrainReport ra = train(a, set, {}, opts, nullptr, "");
  CaveSegModel b(cfg, 5);
  const TrainReport rb = train(b, set, {}, opts, nullptr, "");

  CHECK(ra.step_losses == rb.step_losses);
  auto pa = a.parameters();
  auto pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    CHECK(pa[i].second.values() == pb[i].second.values());
}

TEST_CASE("validation selects the checkpointed epoch") {
  TempDir tmp("trainval");
  const ClassPalette palette = ClassPalette::caveseg_default();
  ModelConfig cfg = ModelConfig::tiny();
  cfg.input_h = 16;
  cfg.input_w = 16;
  CaveSegModel model(cfg, 23);
  const SegmentationSample s = generate_synthetic(2, 16, 16, {1, 3}, palette);

  TrainOptions opts;
  opts.epochs = 2;
  opts.learning_rate = 1e-4;
  const std::string ckpt = (tmp.path / "best.ckpt").string();
  const TrainReport report = train(model, {s}, {s}, opts, nullptr, ckpt);
  REQUIRE(report.epochs.size() == 2);
  CHECK(report.epochs[0].has_val);
  CHECK(report.best_epoch >= 0);
  CHECK(std::filesystem::exists(ckpt));
  // Equal scores break toward the later epoch.
  if (report.epochs[0].val_miou == report.epochs[1].val_miou)
    CHECK(report.best_epoch == 1);
}

TEST_CASE("a non-finite loss aborts and names the step") {
  const ClassPalette palette = ClassPalette::caveseg_default();
  ModelConfig cfg = ModelConfig::tiny();
  cfg.input_h = 16;
  cfg.input_w = 16;
  CaveSegModel model(cfg, 29);
  model.weights().classifier_w.mutable_values()[0] =
      std::numeric_limits<double>::quiet_NaN();
  const SegmentationSample s = generate_synthetic(3, 16, 16, {1, 3}, palette);

  TrainOptions opts;
  opts.epochs = 1;
  try {
    train(model, {s}, {}, opts, nullptr, "");
    FAIL("expected a non-finite loss error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("evaluate scores a model against samples") {
  const ClassPalette palette = ClassPalette::caveseg_default();
  ModelConfig cfg = ModelConfig::tiny();
  cfg.input_h = 16;
  cfg.input_w = 16;
  CaveSegModel model(cfg, 31);
  const SegmentationSample s = generate_synthetic(4, 16, 16, {1, 3}, palette);
  const EvalResult r = evaluate(model, {s});
  CHECK(r.miou >= 0.0);
  CHECK(r.miou <= 1.0);
  CHECK(r.aacc >= 0.0);
  CHECK(r.aacc <= 1.0);
  CHECK(r.iou_per_class.size() == 13);
}
