#pragma once

#include <map>
#include <string>
#include <vector>

#include "mmc/tensor.hpp"

namespace mmc {

// Named parameter tensors with per-parameter trainable flags. Iteration is
// name-ordered, so update order is deterministic.
class ParamSet {
 public:
  struct Param {
    Tensor value;
    bool trainable = true;
  };

  void add(const std::string& name, Tensor t, bool trainable = true) {
    if (params_.count(name)) throw ValueError("duplicate parameter name: " + name);
    t.set_requires_grad(trainable);
    params_[name] = Param{std::move(t), trainable};
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValueError("unknown parameter: " + name);
    return it->second.value;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValueError("unknown parameter: " + name);
    return it->second.value;
  }

  bool trainable(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValueError("unknown parameter: " + name);
    return it->second.trainable;
  }

  // Toggles both the trainable flag and gradient tracking.
  void set_trainable(const std::string& name, bool on) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValueError("unknown parameter: " + name);
    it->second.trainable = on;
    it->second.value.set_requires_grad(on);
  }

  void set_trainable_prefix(const std::string& prefix, bool on) {
    for (auto& [name, p] : params_)
      if (name.rfind(prefix, 0) == 0) {
        p.trainable = on;
        p.value.set_requires_grad(on);
      }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.value.zero_grad();
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, p] : params_) out.push_back(name);
    return out;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

 private:
  std::map<std::string, Param> params_;
};

// SGD with momentum: v <- momentum * v + grad; p <- p - lr * v.
// Velocity buffers are keyed by parameter name and created on first step,
// so independent SgdState instances give independent momentum histories.
struct SgdState {
  std::map<std::string, std::vector<double>> velocity;
};

void sgd_step(ParamSet& params, SgdState& state, double lr, double momentum);

}  // namespace mmc
