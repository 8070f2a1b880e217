#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace modnet {

using Scalar = double;

/// Dense row-major tensor with an optional gradient buffer of the same shape.
struct Tensor {
  std::vector<int> shape;
  std::vector<Scalar> data;
  bool requires_grad = false;
  std::vector<Scalar> grad;  // empty means "no gradient stored"

  Tensor() = default;
  Tensor(std::vector<int> shape_, std::vector<Scalar> data_, bool requires_grad_ = false)
      : shape(std::move(shape_)), data(std::move(data_)), requires_grad(requires_grad_) {
    if (numel_of(shape) != static_cast<long>(data.size()))
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static long numel_of(const std::vector<int>& s) {
    long n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(numel_of(t.shape), 0.0);
    t.requires_grad = requires_grad;
    return t;
  }

  static Tensor full(std::vector<int> shape, Scalar v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.data) x = v;
    return t;
  }

  static Tensor from(std::vector<Scalar> v, bool requires_grad = false) {
    const int n = static_cast<int>(v.size());
    return Tensor({n}, std::move(v), requires_grad);
  }

  long numel() const { return static_cast<long>(data.size()); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  }

  Scalar& at(long i) { return data[static_cast<size_t>(i)]; }
  Scalar at(long i) const { return data[static_cast<size_t>(i)]; }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace modnet
