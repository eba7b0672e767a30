#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "caveseg/dataset.hpp"
#include "caveseg/model.hpp"

namespace caveseg {

// Momentum SGD. Velocity buffers are keyed by parameter name so the state
// survives independently of parameter ordering.
struct OptimizerState {
  double learning_rate = 1e-4;
  double momentum = 0.9;
  std::map<std::string, std::vector<double>> velocity;
};

// One update: v <- momentum*v + grad; w <- w - lr*v.
// Every parameter must carry a gradient.
void sgd_step(const std::vector<std::pair<std::string, Tensor>>& params,
              OptimizerState& state);

struct TrainOptions {
  int epochs = 1;
  double learning_rate = 1e-4;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

struct EpochSummary {
  int epoch = 0;
  double mean_loss = 0.0;
  bool has_val = false;
  double val_miou = 0.0;
  double val_macc = 0.0;
  double val_aacc = 0.0;
};

struct TrainReport {
  std::vector<double> step_losses;
  std::vector<EpochSummary> epochs;
  std::uint64_t seed = 0;
  int best_epoch = -1;  // -1 when no validation ran
};

// Runs samples one at a time: forward, pixel-averaged cross entropy,
// backprop, SGD update. Shuffles the training set each epoch from a
// run-level stream seeded with opts.seed. When `val` is nonempty the
// checkpoint tracks the best validation mIoU (ties go to the later epoch);
// otherwise the final weights are saved. A non-finite loss aborts,
// naming the step. checkpoint_path may be empty to skip saving.
TrainReport train(CaveSegModel& model, const std::vector<SegmentationSample>& train_set,
                  const std::vector<SegmentationSample>& val,
                  const TrainOptions& opts, std::ostream* log,
                  const std::string& checkpoint_path);

// Validation pass: mean-over-classes IoU/accuracy and overall accuracy.
struct EvalResult {
  double miou = 0.0;
  double macc = 0.0;
  double aacc = 0.0;
  std::vector<double> iou_per_class;  // NaN for absent classes
};

EvalResult evaluate(CaveSegModel& model, const std::vector<SegmentationSample>& samples);

}  // namespace caveseg
