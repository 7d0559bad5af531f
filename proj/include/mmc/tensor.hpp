#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mmc/errors.hpp"

namespace mmc {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) n *= static_cast<std::size_t>(e);
  return n;
}

std::string shape_str(const Shape& shape);

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  std::uint64_t tape_epoch = 0;  // tape this node currently belongs to
  int node_id = -1;
};

// Dense row-major f64 array with an optional gradient buffer. Tensor is a
// handle: copies share storage, so a parameter tensor held by an optimizer
// and recorded on a tape are the same buffer. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : d(std::make_shared<TensorData>()) {
    validate_shape(shape);
    d->shape = std::move(shape);
    d->value.assign(numel(d->shape), fill);
  }

  Tensor(Shape shape, std::vector<double> values)
      : d(std::make_shared<TensorData>()) {
    validate_shape(shape);
    if (values.size() != numel(shape))
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    d->shape = std::move(shape);
    d->value = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  bool defined() const { return d != nullptr; }
  const Shape& shape() const { return d->shape; }
  int rank() const { return static_cast<int>(d->shape.size()); }
  int dim(int i) const { return d->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return d->value.size(); }

  double* data() { return d->value.data(); }
  const double* data() const { return d->value.data(); }
  std::vector<double>& values() { return d->value; }
  const std::vector<double>& values() const { return d->value; }

  double& operator[](std::size_t i) { return d->value[i]; }
  double operator[](std::size_t i) const { return d->value[i]; }

  double item() const {
    if (size() != 1) throw ValueError("item() requires a scalar tensor");
    return d->value[0];
  }

  bool requires_grad() const { return d->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    d->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !d->grad.empty(); }

  // Gradient buffer, allocated (zero-filled) on first use. Tensor is a
  // handle, so storage stays mutable through a const handle.
  std::vector<double>& grad() const {
    if (d->grad.empty()) d->grad.assign(d->value.size(), 0.0);
    return d->grad;
  }

  void zero_grad() {
    if (!d->grad.empty()) d->grad.assign(d->value.size(), 0.0);
  }

  // Deep copy, detached from any tape, gradient not carried over.
  Tensor clone() const {
    Tensor t(d->shape, d->value);
    t.d->requires_grad = d->requires_grad;
    return t;
  }

  std::shared_ptr<TensorData> d;

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor rank must be >= 1");
    for (int e : shape)
      if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
};

// Reverse-mode tape. Operations append records in execution order, which is
// a topological order by construction; backward() walks it in reverse.
// Recording happens only when some input requires a gradient, so forward
// evaluation with plain tensors costs nothing extra.
class Tape {
 public:
  struct Record {
    std::string op;
    std::vector<int> inputs;
    int output;
    std::function<void()> replay;    // recompute output value from inputs
    std::function<void()> backprop;  // push output grad into input grads
  };

  Tape();

  // Registers t as a node if it is not yet on this tape. Returns its id.
  int ensure_node(const Tensor& t);

  void record(std::string op, const std::vector<Tensor>& inputs, const Tensor& output,
              std::function<void()> replay, std::function<void()> backprop);

  // Accumulates d(loss)/d(leaf) into every requires_grad leaf. Gradients of
  // op outputs are reset per call; leaf gradients accumulate across calls.
  void backward(const Tensor& loss);

  // Re-executes every recorded forward computation in order, rewriting the
  // stored output values from the current leaf values.
  void replay();

  std::size_t num_records() const { return records_.size(); }
  std::size_t num_nodes() const { return nodes_.size(); }
  const std::vector<Record>& records() const { return records_; }

 private:
  std::vector<Record> records_;
  std::vector<Tensor> nodes_;        // keeps every node's storage alive
  std::vector<bool> is_op_output_;
  std::uint64_t epoch_;
};

}  // namespace mmc
