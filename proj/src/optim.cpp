#include "xray/optim.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace xray {

void AdamHyper::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("AdamHyper: lr must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw std::invalid_argument("AdamHyper: beta1 outside (0,1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw std::invalid_argument("AdamHyper: beta2 outside (0,1)");
  if (!(eps > 0.0)) throw std::invalid_argument("AdamHyper: eps must be positive");
}

static std::string non_finite_message(const std::string& parameter, double max_abs) {
  std::ostringstream os;
  os << "non-finite gradient in parameter '" << parameter << "' (max |grad| = " << max_abs << ")";
  return os.str();
}

NonFiniteGradient::NonFiniteGradient(const std::string& parameter, double max_abs_grad)
    : std::runtime_error(non_finite_message(parameter, max_abs_grad)),
      parameter_(parameter),
      max_abs_grad_(max_abs_grad) {}

template <typename T>
void adam_step(BasicParameter<T>& param, const AdamHyper& hyper) {
  if (param.grad.shape() != param.value.shape()) {
    throw DimensionError("adam_step: grad shape " + shape_str(param.grad.shape()) +
                         " != value shape " + shape_str(param.value.shape()) + " for '" +
                         param.name + "'");
  }
  if (!param.grad.all_finite()) {
    double worst = 0.0;
    for (T g : param.grad.data()) {
      const double a = std::abs(static_cast<double>(g));
      if (!std::isfinite(a)) {
        worst = std::numeric_limits<double>::infinity();
        break;
      }
      worst = std::max(worst, a);
    }
    throw NonFiniteGradient(param.name, worst);
  }
  const bool all_zero = param.grad.max_abs() == T{0};
  param.step_count += 1;
  const double t = static_cast<double>(param.step_count);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < param.value.size(); ++i) {
    const double g = param.grad[i];
    const double m = hyper.beta1 * param.adam_m[i] + (1.0 - hyper.beta1) * g;
    const double v = hyper.beta2 * param.adam_v[i] + (1.0 - hyper.beta2) * g * g;
    param.adam_m[i] = static_cast<T>(m);
    param.adam_v[i] = static_cast<T>(v);
    if (all_zero) continue;
    const double update = hyper.lr * (m / bc1) / (std::sqrt(v / bc2) + hyper.eps);
    param.value[i] = static_cast<T>(param.value[i] - update);
  }
}

template void adam_step(BasicParameter<float>&, const AdamHyper&);
template void adam_step(BasicParameter<double>&, const AdamHyper&);

}  // namespace xray
