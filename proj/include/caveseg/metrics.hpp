#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "caveseg/tensor.hpp"

namespace caveseg {

// Row = ground truth class, column = predicted class. Total count equals the
// number of scored (non-ignored) pixels; matrices over disjoint pixel sets
// merge by elementwise sum.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return m_; }
  std::int64_t at(int gt, int pred) const;
  std::int64_t total() const;

  void accumulate(const std::vector<std::int32_t>& gt,
                  const std::vector<std::int32_t>& pred,
                  int ignore_index = 255);
  void merge(const ConfusionMatrix& other);

  // Empty optional where the class union (row + column) is empty.
  std::vector<std::optional<double>> iou_per_class() const;
  // Per-class recall; empty optional where the class has no ground truth.
  std::vector<std::optional<double>> acc_per_class() const;

  struct Summary {
    double miou;
    double macc;
    double aacc;
  };
  // Means over defined classes only; errors when nothing was scored.
  Summary summarize() const;

 private:
  int m_;
  std::vector<std::int64_t> counts_;
};

// Argmax over the class axis of [M,...] logits, row-major over the remaining
// axes; ties resolve to the lowest class id.
std::vector<std::int32_t> argmax_classes(const Tensor& logits);

}  // namespace caveseg
