#include "caveseg/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace caveseg {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (std::int64_t d : shape) {
    if (d <= 0)
      throw std::invalid_argument("tensor shape must be positive, got " +
                                  shape_str(shape));
  }
  auto d = std::make_shared<TensorData>();
  d->values.assign(static_cast<std::size_t>(shape_numel(shape)), value);
  d->shape = std::move(shape);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw std::invalid_argument(
        "tensor data length " + std::to_string(values.size()) +
        " does not match shape " + shape_str(shape));
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->values = std::move(values);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw std::invalid_argument("axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(shape()));
  return d_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1)
    throw std::invalid_argument("item() requires a scalar, got shape " +
                                shape_str(shape()));
  return d_->values[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
  if (static_cast<int>(idx.size()) != rank())
    throw std::invalid_argument("index rank mismatch for shape " +
                                shape_str(shape()));
  std::int64_t flat = 0;
  std::size_t k = 0;
  for (std::int64_t i : idx) {
    const std::int64_t d = d_->shape[k];
    if (i < 0 || i >= d)
      throw std::invalid_argument("index out of bounds for shape " +
                                  shape_str(shape()));
    flat = flat * d + i;
    ++k;
  }
  return d_->values[static_cast<std::size_t>(flat)];
}

namespace {
thread_local bool g_grad_enabled = true;
thread_local ComputationTape g_tape;
}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

ComputationTape& ComputationTape::active() { return g_tape; }

void ComputationTape::record(std::shared_ptr<TensorData> out,
                             std::function<void(Adjoints&)> pull) {
  entries_.push_back({std::move(out), std::move(pull)});
}

void ComputationTape::clear() { entries_.clear(); }

const std::vector<double>* Adjoints::find(const TensorData* t) const {
  auto it = map_.find(const_cast<TensorData*>(t));
  return it == map_.end() ? nullptr : &it->second;
}

std::vector<double>& Adjoints::accum(const std::shared_ptr<TensorData>& t) {
  auto [it, inserted] = map_.try_emplace(t.get());
  if (inserted) it->second.assign(t->values.size(), 0.0);
  return it->second;
}

void ComputationTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument(
        "backward requires a scalar loss" +
        (loss.defined() ? ", got shape " + shape_str(loss.shape()) : std::string()));
  Adjoints adj;
  adj.accum(loss.node())[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (adj.find(it->out.get()) != nullptr) it->pull(adj);
  }
  for (auto& [td, g] : adj.map_) {
    if (!td->requires_grad) continue;
    if (td->grad.empty()) td->grad.assign(td->values.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) td->grad[i] += g[i];
  }
}

void backward(const Tensor& loss) { ComputationTape::active().backward(loss); }
void clear_tape() { ComputationTape::active().clear(); }

}  // namespace caveseg
