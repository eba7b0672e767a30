#include "caveseg/trainer.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "caveseg/checkpoint.hpp"
#include "caveseg/metrics.hpp"
#include "caveseg/ops.hpp"
#include "caveseg/rng.hpp"

namespace caveseg {

void sgd_step(const std::vector<std::pair<std::string, Tensor>>& params,
              OptimizerState& state) {
  if (!(state.learning_rate > 0.0))
    throw std::invalid_argument("sgd: learning rate must be positive, got " +
                                std::to_string(state.learning_rate));
  if (!(state.momentum >= 0.0 && state.momentum < 1.0))
    throw std::invalid_argument("sgd: momentum must lie in [0,1), got " +
                                std::to_string(state.momentum));
  for (const auto& [name, tensor] : params) {
    Tensor param = tensor;
    if (param.grad() == nullptr)
      throw std::invalid_argument("sgd: parameter " + name +
                                  " has no gradient; run backward first");
    const std::vector<double>& g = *param.grad();
    std::vector<double>& v = state.velocity[name];
    if (v.empty()) v.assign(g.size(), 0.0);
    if (v.size() != g.size())
      throw std::invalid_argument("sgd: velocity size mismatch for " + name);
    std::vector<double>& w = param.mutable_values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      v[i] = state.momentum * v[i] + g[i];
      w[i] -= state.learning_rate * v[i];
    }
  }
}

EvalResult evaluate(CaveSegModel& model, const std::vector<SegmentationSample>& samples) {
  NoGradGuard guard;
  const int m = model.config().num_classes;
  ConfusionMatrix cm(m);
  for (const SegmentationSample& s : samples) {
    Tensor logits = model.forward(image_to_tensor(s.image));
    cm.accumulate(s.labels, argmax_classes(logits), kIgnoreIndex);
  }
  const ConfusionMatrix::Summary sum = cm.summarize();
  EvalResult r;
  r.miou = sum.miou;
  r.macc = sum.macc;
  r.aacc = sum.aacc;
  const auto ious = cm.iou_per_class();
  r.iou_per_class.resize(static_cast<std::size_t>(m));
  for (int c = 0; c < m; ++c)
    r.iou_per_class[static_cast<std::size_t>(c)] =
        ious[static_cast<std::size_t>(c)].value_or(
            std::numeric_limits<double>::quiet_NaN());
  return r;
}

TrainReport train(CaveSegModel& model, const std::vector<SegmentationSample>& train_set,
                  const std::vector<SegmentationSample>& val,
                  const TrainOptions& opts, std::ostream* log,
                  const std::string& checkpoint_path) {
  if (opts.epochs < 0)
    throw std::invalid_argument("train: epochs must be >= 0, got " +
                                std::to_string(opts.epochs));
  if (train_set.empty() && opts.epochs > 0)
    throw std::invalid_argument("train: empty training set");

  OptimizerState opt;
  opt.learning_rate = opts.learning_rate;
  opt.momentum = opts.momentum;

  TrainReport report;
  report.seed = opts.seed;

  if (opts.epochs == 0) {
    if (!checkpoint_path.empty()) save_checkpoint(model, checkpoint_path);
    return report;
  }

  Rng rng(opts.seed);
  const std::vector<std::pair<std::string, Tensor>> params = model.parameters();
  const int m = model.config().num_classes;
  double best_miou = -1.0;
  std::int64_t step = 0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      const SegmentationSample& s = train_set[idx];
      Tensor logits = model.forward(image_to_tensor(s.image));
      const std::int64_t pixels = logits.shape()[1] * logits.shape()[2];
      Tensor loss = cross_entropy(reshape(logits, {m, pixels}), s.labels,
                                  kIgnoreIndex);
      const double lv = loss.values()[0];
      if (!std::isfinite(lv)) {
        clear_tape();
        throw std::runtime_error("train: non-finite loss at step " +
                                 std::to_string(step));
      }
      backward(loss);
      clear_tape();
      sgd_step(params, opt);
      model.zero_grad();

      report.step_losses.push_back(lv);
      loss_sum += lv;
      if (log) *log << "step " << step << " loss " << lv << '\n';
      ++step;
    }

    EpochSummary es;
    es.epoch = epoch;
    es.mean_loss = loss_sum / static_cast<double>(order.size());
    if (!val.empty()) {
      const EvalResult ev = evaluate(model, val);
      es.has_val = true;
      es.val_miou = ev.miou;
      es.val_macc = ev.macc;
      es.val_aacc = ev.aacc;
      if (ev.miou >= best_miou) {
        best_miou = ev.miou;
        report.best_epoch = epoch;
        if (!checkpoint_path.empty()) save_checkpoint(model, checkpoint_path);
      }
    }
    report.epochs.push_back(es);
    if (log) {
      *log << "epoch " << epoch << " mean_loss " << es.mean_loss;
      if (es.has_val)
        *log << " val_miou " << es.val_miou << " val_macc " << es.val_macc
             << " val_aacc " << es.val_aacc;
      *log << '\n';
    }
  }

  if (val.empty() && !checkpoint_path.empty())
    save_checkpoint(model, checkpoint_path);
  return report;
}

}  // namespace caveseg
