#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace caveseg {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Shared storage behind Tensor handles. `grad` stays empty until a backward
// pass first touches it; once populated it accumulates across passes until
// cleared by the owner.
struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
};

// Value-semantics handle over shared tensor storage, 64-bit floats, row-major.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  std::int64_t numel() const {
    return static_cast<std::int64_t>(d_->values.size());
  }
  // Negative axes count from the back.
  std::int64_t dim(int axis) const;

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  const std::vector<double>& values() const { return d_->values; }
  // In-place mutation is reserved for leaves (initialization, optimizer
  // updates); recorded ops never call it.
  std::vector<double>& mutable_values() { return d_->values; }

  // Null until a backward pass has written to this tensor.
  const std::vector<double>* grad() const {
    return d_->grad.empty() ? nullptr : &d_->grad;
  }
  void clear_grad() { d_->grad.clear(); }

  double item() const;
  double at(std::initializer_list<std::int64_t> idx) const;

  const std::shared_ptr<TensorData>& node() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
};

// Thread-local switch: when disabled, ops run forward-only and record nothing.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Per-replay gradient accumulators, keyed by storage identity. Kept separate
// from TensorData::grad so a replay only commits to tensors it actually
// reached.
class Adjoints {
 public:
  const std::vector<double>* find(const TensorData* t) const;
  std::vector<double>& accum(const std::shared_ptr<TensorData>& t);

 private:
  friend class ComputationTape;
  std::unordered_map<TensorData*, std::vector<double>> map_;
};

// Linear record of executed differentiable ops. Replaying it newest-to-oldest
// propagates adjoints in exact reverse execution order; forward values are
// never modified. Single-writer per thread.
class ComputationTape {
 public:
  static ComputationTape& active();

  void record(std::shared_ptr<TensorData> out,
              std::function<void(Adjoints&)> pull);
  void clear();
  std::size_t size() const { return entries_.size(); }

  // Seeds d(loss)/d(loss) = 1, replays, then adds each reached adjoint into
  // the persistent grad of every requires_grad tensor.
  void backward(const Tensor& loss);

 private:
  struct Entry {
    std::shared_ptr<TensorData> out;
    std::function<void(Adjoints&)> pull;
  };
  std::vector<Entry> entries_;
};

void backward(const Tensor& loss);
void clear_tape();

}  // namespace caveseg
