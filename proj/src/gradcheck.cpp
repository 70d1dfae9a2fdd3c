#include "xray/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace xray {

GradCheckReport finite_difference_check(const Model& model, const LogitLoss& loss_fn,
                                        const Tensor& input, const GradCheckOptions& options) {
  if (!(options.epsilon >= 1e-4 && options.epsilon <= 1e-2)) {
    throw std::invalid_argument("finite_difference_check: epsilon must lie in [1e-4, 1e-2]");
  }
  for (const auto& p : model.params) {
    if (!p.value.all_finite()) {
      throw std::invalid_argument("finite_difference_check: parameter '" + p.name +
                                  "' holds non-finite values");
    }
  }
  BasicModel<double> m = model.cast<double>();
  const Tensor64 x = input.cast<double>();

  m.zero_grad();
  const auto tape = m.forward_train(x);
  const LossAndGrad base = loss_fn(tape.output.logits);
  GradCheckReport report;
  if (!std::isfinite(base.loss)) {
    report.ok = false;
    report.failure = "non-finite loss at the unperturbed point";
    return report;
  }
  m.backward(tape, base.grad_logits);

  ActivationPattern pattern;
  if (options.freeze_activation_pattern) m.forward_pattern(x, pattern, true);
  auto eval = [&]() {
    if (options.freeze_activation_pattern) return loss_fn(m.forward_pattern(x, pattern, false).logits).loss;
    return loss_fn(m.forward(x).logits).loss;
  };
  Rng rng(options.seed);
  for (auto& p : m.params) {
    if (p.frozen) {
      report.skipped_frozen += std::min(options.samples_per_param, p.value.size());
      continue;
    }
    std::vector<std::size_t> idx(p.value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(std::min(options.samples_per_param, idx.size()));
    for (std::size_t i : idx) {
      const double orig = p.value[i];
      p.value[i] = orig + options.epsilon;
      const double lp = eval();
      p.value[i] = orig - options.epsilon;
      const double lm = eval();
      p.value[i] = orig;
      const std::string coord = p.name + "[" + std::to_string(i) + "]";
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        report.ok = false;
        report.failure = "non-finite loss when perturbing " + coord;
        return report;
      }
      const double numeric = (lp - lm) / (2.0 * options.epsilon);
      const double analytic = p.grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.checked;
      if (rel > report.max_relative_error || report.worst_coordinate.empty()) {
        report.max_relative_error = rel;
        report.worst_coordinate = coord;
      }
    }
  }
  return report;
}

LogitLoss squared_error_loss(const Tensor& target) {
  const Tensor64 t = target.cast<double>();
  return [t](const Tensor64& logits) {
    if (logits.shape() != t.shape()) {
      throw DimensionError("squared_error_loss: logits " + shape_str(logits.shape()) +
                           " vs target " + shape_str(t.shape()));
    }
    const double n = static_cast<double>(logits.dim(0));
    LossAndGrad out{0.0, Tensor64(logits.shape())};
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double d = logits[i] - t[i];
      out.loss += 0.5 * d * d / n;
      out.grad_logits[i] = d / n;
    }
    return out;
  };
}

}  // namespace xray
