#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "xray/tensor.hpp"

namespace xray {

/// Trainable tensor with its gradient slot and Adam moments. All four tensors
/// share one shape.
template <typename T>
struct BasicParameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;
  BasicTensor<T> adam_m;
  BasicTensor<T> adam_v;
  std::uint64_t step_count = 0;
  bool frozen = false;

  BasicParameter() = default;
  BasicParameter(std::string n, BasicTensor<T> v)
      : name(std::move(n)),
        value(std::move(v)),
        grad(value.shape()),
        adam_m(value.shape()),
        adam_v(value.shape()) {}

  void zero_grad() { grad.fill(T{0}); }
  void reset_optimizer_state() {
    adam_m.fill(T{0});
    adam_v.fill(T{0});
    step_count = 0;
  }

  template <typename U>
  BasicParameter<U> cast() const {
    BasicParameter<U> p(name, value.template cast<U>());
    p.grad = grad.template cast<U>();
    p.adam_m = adam_m.template cast<U>();
    p.adam_v = adam_v.template cast<U>();
    p.step_count = step_count;
    p.frozen = frozen;
    return p;
  }
};

using Parameter = BasicParameter<float>;

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  NonFiniteGradient(const std::string& parameter, double max_abs_grad);
  const std::string& parameter() const noexcept { return parameter_; }
  double max_abs_grad() const noexcept { return max_abs_grad_; }

 private:
  std::string parameter_;
  double max_abs_grad_;
};

/// Bias-corrected Adam update of `param.value`. Increments step_count first.
/// An all-zero gradient decays the moments but leaves the value untouched.
/// The gradient is left in place; callers zero it between steps.
template <typename T>
void adam_step(BasicParameter<T>& param, const AdamHyper& hyper);

}  // namespace xray
