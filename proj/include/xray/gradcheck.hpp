#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "xray/model.hpp"

namespace xray {

struct LossAndGrad {
  double loss = 0.0;
  Tensor64 grad_logits;
};

/// Scalar loss of the logits together with d(loss)/d(logits).
using LogitLoss = std::function<LossAndGrad(const Tensor64& logits)>;

struct GradCheckOptions {
  double epsilon = 1e-3;
  std::size_t samples_per_param = 8;
  std::uint64_t seed = 0;
  /// Evaluate perturbed losses with the ReLU masks of the unperturbed point, so
  /// the difference quotient stays on one linear region instead of straddling
  /// kinks. Off gives plain central differences.
  bool freeze_activation_pattern = true;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;         // sampled coordinates compared
  std::size_t skipped_frozen = 0;  // coordinates of frozen parameters
  std::string worst_coordinate;    // "name[flat index]"
  bool ok = true;                  // false when a loss evaluation was non-finite
  std::string failure;
};

/// Central-difference verification of the model's backward pass.
///
/// The model and input are promoted to double so that the comparison measures
/// the backward implementation rather than binary32 rounding; the same templated
/// kernels run in both precisions. Up to `samples_per_param` distinct coordinates
/// are drawn per non-frozen parameter (see GradCheckOptions for kink handling). Relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckReport finite_difference_check(const Model& model, const LogitLoss& loss_fn,
                                        const Tensor& input, const GradCheckOptions& options = {});

/// 0.5 * sum((logits - target)^2) / N
LogitLoss squared_error_loss(const Tensor& target);

}  // namespace xray
