#include "modnet/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace modnet {

void adam_step(ParamStore& params, const std::vector<std::vector<Scalar>>& grads, AdamState& state) {
  if (state.lr <= 0) throw std::invalid_argument("adam_step: lr must be positive");
  if (static_cast<int>(grads.size()) != params.size() ||
      static_cast<int>(state.first_moment.size()) != params.size())
    throw std::invalid_argument("adam_step: gradient/state count mismatch");
  state.step_count += 1;
  const Scalar bc1 = 1.0 - std::pow(state.beta1, static_cast<Scalar>(state.step_count));
  const Scalar bc2 = 1.0 - std::pow(state.beta2, static_cast<Scalar>(state.step_count));
  for (int p = 0; p < params.size(); ++p) {
    Tensor& t = params.at(p);
    const auto& g = grads[p];
    if (g.size() != t.data.size())
      throw std::invalid_argument("adam_step: shape mismatch for '" + params.name_at(p) + "'");
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    for (size_t i = 0; i < g.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const Scalar mhat = m[i] / bc1;
      const Scalar vhat = v[i] / bc2;
      t.data[i] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

Scalar clip_global_norm(std::vector<std::vector<Scalar>>& grads, Scalar max_norm) {
  Scalar sq = 0;
  for (const auto& g : grads)
    for (Scalar x : g) sq += x * x;
  const Scalar norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const Scalar scale = max_norm / norm;
    for (auto& g : grads)
      for (Scalar& x : g) x *= scale;
  }
  return norm;
}

}  // namespace modnet
