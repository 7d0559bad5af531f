#include "mmc/tensor.hpp"

#include <atomic>

namespace mmc {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {
std::atomic<std::uint64_t> g_tape_epoch{1};
}

Tape::Tape() : epoch_(g_tape_epoch.fetch_add(1)) {}

int Tape::ensure_node(const Tensor& t) {
  if (!t.defined()) throw ValueError("undefined tensor used on tape");
  if (t.d->tape_epoch == epoch_) return t.d->node_id;
  t.d->tape_epoch = epoch_;
  t.d->node_id = static_cast<int>(nodes_.size());
  nodes_.push_back(t);
  is_op_output_.push_back(false);
  return t.d->node_id;
}

void Tape::record(std::string op, const std::vector<Tensor>& inputs, const Tensor& output,
                  std::function<void()> replay, std::function<void()> backprop) {
  Record r;
  r.op = std::move(op);
  r.inputs.reserve(inputs.size());
  for (const Tensor& in : inputs) r.inputs.push_back(ensure_node(in));
  r.output = ensure_node(output);
  is_op_output_[static_cast<std::size_t>(r.output)] = true;
  r.replay = std::move(replay);
  r.backprop = std::move(backprop);
  records_.push_back(std::move(r));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.d->tape_epoch != epoch_)
    throw ValueError("loss tensor is not a node of this tape");
  if (loss.size() != 1) throw ValueError("backward requires a scalar loss");

  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (is_op_output_[i])
      nodes_[i].d->grad.assign(nodes_[i].size(), 0.0);
    else if (nodes_[i].requires_grad())
      nodes_[i].grad();  // ensure leaf accumulator exists
  }
  loss.d->grad.assign(1, 1.0);

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backprop();
}

void Tape::replay() {
  for (const Record& r : records_) r.replay();
}

}  // namespace mmc
