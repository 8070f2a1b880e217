#pragma once

#include <cmath>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "modnet/graph.hpp"
#include "modnet/rng.hpp"
#include "modnet/tensor.hpp"

namespace modnet {

/// Named learnable tensors with stable indices and stable addresses.
class ParamStore {
 public:
  Tensor& add(const std::string& name, std::vector<int> shape) {
    if (by_name_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    tensors_.push_back(Tensor::zeros(std::move(shape), /*requires_grad=*/true));
    names_.push_back(name);
    by_name_[name] = static_cast<int>(tensors_.size()) - 1;
    return tensors_.back();
  }

  bool has(const std::string& name) const { return by_name_.count(name) != 0; }

  Tensor& get(const std::string& name) { return tensors_[index_of(name)]; }
  const Tensor& get(const std::string& name) const { return tensors_[by_name_.at(name)]; }

  int index_of(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  int size() const { return static_cast<int>(tensors_.size()); }
  Tensor& at(int i) { return tensors_[i]; }
  const Tensor& at(int i) const { return tensors_[i]; }
  const std::string& name_at(int i) const { return names_[i]; }

  long total_numel() const {
    long n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& t : tensors_) {
      t.ensure_grad();
      t.zero_grad();
    }
  }

  /// A zeroed gradient buffer shaped like this store.
  std::vector<std::vector<Scalar>> make_grad_slab() const {
    std::vector<std::vector<Scalar>> slab(tensors_.size());
    for (size_t i = 0; i < tensors_.size(); ++i) slab[i].assign(tensors_[i].data.size(), 0.0);
    return slab;
  }

 private:
  std::deque<Tensor> tensors_;  // deque: growth must not move tensors referenced by graphs
  std::vector<std::string> names_;
  std::map<std::string, int> by_name_;
};

/// Per-graph cache of parameter leaf nodes, so one layout referencing the
/// same bundle twice still shares a single node where convenient.
class ParamNodes {
 public:
  ParamNodes(Graph& g, ParamStore& store) : g_(g), store_(store) {}

  NodeId operator()(const std::string& name) {
    int idx = store_.index_of(name);
    auto it = cache_.find(idx);
    if (it != cache_.end()) return it->second;
    NodeId id = g_.param(store_.at(idx), name, idx);
    cache_[idx] = id;
    return id;
  }

  Graph& graph() { return g_; }
  ParamStore& store() { return store_; }

 private:
  Graph& g_;
  ParamStore& store_;
  std::map<int, NodeId> cache_;
};

inline void init_xavier_uniform(Tensor& t, long fan_in, long fan_out, Rng& rng) {
  const Scalar limit = std::sqrt(6.0 / static_cast<Scalar>(fan_in + fan_out));
  for (auto& x : t.data) x = rng.uniform(-limit, limit);
}

}  // namespace modnet
