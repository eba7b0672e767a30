#include "caveseg/metrics.hpp"

#include <stdexcept>
#include <string>

namespace caveseg {

ConfusionMatrix::ConfusionMatrix(int num_classes) : m_(num_classes) {
  if (num_classes < 1)
    throw std::invalid_argument("confusion matrix needs at least one class");
  counts_.assign(static_cast<std::size_t>(m_) * static_cast<std::size_t>(m_), 0);
}

std::int64_t ConfusionMatrix::at(int gt, int pred) const {
  if (gt < 0 || gt >= m_ || pred < 0 || pred >= m_)
    throw std::invalid_argument("confusion matrix index out of range");
  return counts_[static_cast<std::size_t>(gt * m_ + pred)];
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (std::int64_t c : counts_) t += c;
  return t;
}

void ConfusionMatrix::accumulate(const std::vector<std::int32_t>& gt,
                                 const std::vector<std::int32_t>& pred,
                                 int ignore_index) {
  if (gt.size() != pred.size())
    throw std::invalid_argument("confusion matrix: gt has " +
                                std::to_string(gt.size()) + " pixels, pred " +
                                std::to_string(pred.size()));
  // Validate before touching counts_ so a bad pixel cannot leave the matrix
  // half-updated.
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const std::int32_t g = gt[i];
    if (g == ignore_index) continue;
    const std::int32_t p = pred[i];
    if (g < 0 || g >= m_ || p < 0 || p >= m_)
      throw std::runtime_error("confusion matrix: label pair (" +
                               std::to_string(g) + "," + std::to_string(p) +
                               ") outside [0," + std::to_string(m_) +
                               ") at pixel " + std::to_string(i));
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore_index) continue;
    ++counts_[static_cast<std::size_t>(gt[i] * m_ + pred[i])];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.m_ != m_)
    throw std::invalid_argument("confusion matrix: cannot merge " +
                                std::to_string(other.m_) + " classes into " +
                                std::to_string(m_));
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::vector<std::optional<double>> ConfusionMatrix::iou_per_class() const {
  std::vector<std::optional<double>> out(static_cast<std::size_t>(m_));
  for (int c = 0; c < m_; ++c) {
    std::int64_t row = 0, col = 0;
    for (int k = 0; k < m_; ++k) {
      row += counts_[static_cast<std::size_t>(c * m_ + k)];
      col += counts_[static_cast<std::size_t>(k * m_ + c)];
    }
    const std::int64_t diag = counts_[static_cast<std::size_t>(c * m_ + c)];
    const std::int64_t uni = row + col - diag;
    if (uni > 0)
      out[static_cast<std::size_t>(c)] =
          static_cast<double>(diag) / static_cast<double>(uni);
  }
  return out;
}

std::vector<std::optional<double>> ConfusionMatrix::acc_per_class() const {
  std::vector<std::optional<double>> out(static_cast<std::size_t>(m_));
  for (int c = 0; c < m_; ++c) {
    std::int64_t row = 0;
    for (int k = 0; k < m_; ++k)
      row += counts_[static_cast<std::size_t>(c * m_ + k)];
    if (row > 0)
      out[static_cast<std::size_t>(c)] =
          static_cast<double>(counts_[static_cast<std::size_t>(c * m_ + c)]) /
          static_cast<double>(row);
  }
  return out;
}

ConfusionMatrix::Summary ConfusionMatrix::summarize() const {
  const std::int64_t tot = total();
  if (tot == 0)
    throw std::runtime_error("confusion matrix: no scored pixels to summarize");
  Summary s{0.0, 0.0, 0.0};

  const auto ious = iou_per_class();
  int defined = 0;
  for (const auto& v : ious)
    if (v) {
      s.miou += *v;
      ++defined;
    }
  s.miou /= static_cast<double>(defined);

  const auto accs = acc_per_class();
  defined = 0;
  for (const auto& v : accs)
    if (v) {
      s.macc += *v;
      ++defined;
    }
  s.macc /= static_cast<double>(defined);

  std::int64_t diag = 0;
  for (int c = 0; c < m_; ++c) diag += counts_[static_cast<std::size_t>(c * m_ + c)];
  s.aacc = static_cast<double>(diag) / static_cast<double>(tot);
  return s;
}

std::vector<std::int32_t> argmax_classes(const Tensor& logits) {
  if (logits.rank() < 1)
    throw std::invalid_argument("argmax_classes: need a class axis, got " +
                                shape_str(logits.shape()));
  const std::int64_t m = logits.shape()[0];
  const std::int64_t n = logits.numel() / m;
  const auto& v = logits.values();
  std::vector<std::int32_t> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    std::int32_t best = 0;
    double bv = v[static_cast<std::size_t>(i)];
    for (std::int64_t c = 1; c < m; ++c) {
      const double cv = v[static_cast<std::size_t>(c * n + i)];
      if (cv > bv) {
        bv = cv;
        best = static_cast<std::int32_t>(c);
      }
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

}  // namespace caveseg
