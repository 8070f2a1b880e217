#pragma once

#include <vector>

#include "modnet/params.hpp"
#include "modnet/tensor.hpp"

namespace modnet {

/// Adam optimizer state: per-parameter first/second moments plus the shared
/// step counter and hyperparameters.
struct AdamState {
  Scalar lr = 1e-3;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  Scalar epsilon = 1e-8;
  long step_count = 0;
  std::vector<std::vector<Scalar>> first_moment;
  std::vector<std::vector<Scalar>> second_moment;

  static AdamState for_store(const ParamStore& store, Scalar lr) {
    AdamState st;
    st.lr = lr;
    st.first_moment = store.make_grad_slab();
    st.second_moment = store.make_grad_slab();
    return st;
  }
};

/// One bias-corrected Adam update over a whole store. `grads` is indexed like
/// the store (see ParamStore::make_grad_slab).
void adam_step(ParamStore& params, const std::vector<std::vector<Scalar>>& grads, AdamState& state);

/// Global-norm gradient clip; returns the pre-clip norm.
Scalar clip_global_norm(std::vector<std::vector<Scalar>>& grads, Scalar max_norm);

}  // namespace modnet
