#include "mmc/optim.hpp"

namespace mmc {

void sgd_step(ParamSet& params, SgdState& state, double lr, double momentum) {
  if (lr < 0.0) throw ValueError("sgd_step: learning rate must be non-negative");
  if (momentum < 0.0) throw ValueError("sgd_step: momentum must be non-negative");
  for (auto& [name, p] : params) {
    if (!p.trainable) continue;
    if (!p.value.has_grad())
      throw MissingGradError("sgd_step: trainable parameter '" + name + "' has no gradient");
    const std::vector<double>& g = p.value.grad();
    std::vector<double>& v = state.velocity[name];
    if (v.empty()) v.assign(p.value.size(), 0.0);
    if (v.size() != p.value.size())
      throw ShapeError("sgd_step: velocity buffer for '" + name + "' has stale shape");
    double* pv = p.value.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      pv[i] -= lr * v[i];
    }
  }
}

}  // namespace mmc
