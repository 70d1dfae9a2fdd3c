#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "xray/dataset.hpp"
#include "xray/image.hpp"
#include "xray/model.hpp"
#include "xray/optim.hpp"
#include "xray/tensor.hpp"

namespace xray {

enum class WeightMode { as_written, inverse };

std::string to_string(WeightMode mode);
std::optional<WeightMode> parse_weight_mode(std::string_view s);

struct ClassWeights {
  std::vector<double> weights;
  WeightMode mode = WeightMode::inverse;
};

/// as_written: N_i / N_max. inverse: N_max / N_i. The majority class gets 1 in both.
ClassWeights class_weights(const std::vector<std::size_t>& counts, WeightMode mode);
ClassWeights unit_weights(std::size_t num_classes);

template <typename T>
struct SmoothedTarget {
  BasicTensor<T> y_soft;             // [N,C]
  double alpha = 0.0;
  std::vector<std::size_t> labels;   // hot index of each source row
};

template <typename T>
BasicTensor<T> one_hot(const std::vector<std::size_t>& labels, std::size_t num_classes);

/// y_soft = (1 - alpha) * y + alpha / C. Rows of `labels` must be exactly one-hot.
template <typename T>
SmoothedTarget<T> smooth_targets(const BasicTensor<T>& labels, double alpha);

template <typename T>
struct LossResult {
  double loss = 0.0;
  BasicTensor<T> dlogits;     // gradient w.r.t. the softmax inputs
  std::size_t clamped = 0;    // probabilities raised to the 1e-12 floor
};

inline constexpr double kProbabilityFloor = 1e-12;

/// L = -(1/N) sum_n w[true(n)] sum_c y_soft[n,c] log(max(p[n,c], 1e-12))
/// dL/dlogits[n,c] = w[true(n)] (p[n,c] - y_soft[n,c]) / N
template <typename T>
LossResult<T> weighted_smoothed_ce(const BasicTensor<T>& probabilities,
                                   const SmoothedTarget<T>& targets, const ClassWeights& weights);

struct StepDecay {
  double factor = 0.5;
  std::size_t every_n_epochs = 5;
};

struct Plateau {
  double factor = 0.5;
  std::size_t patience = 2;
};

using Schedule = std::variant<StepDecay, Plateau>;

/// lr0 * factor^floor(epoch / every)
double step_decay_lr(double lr0, const StepDecay& s, std::size_t epoch);

/// Epoch-indexed learning rate. `lr()` is the rate for the current epoch;
/// `next(epoch, validation_loss)` closes `epoch` and returns the rate for epoch + 1.
class LrScheduler {
 public:
  LrScheduler(double initial_lr, Schedule schedule);

  double lr() const { return lr_; }
  double next(std::size_t epoch, double validation_loss);
  std::size_t reductions() const { return reductions_; }

 private:
  double lr0_;
  double lr_;
  Schedule schedule_;
  double best_;
  std::size_t bad_epochs_ = 0;
  std::size_t reductions_ = 0;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t steps_per_epoch = 0;  // 0: one pass over the sampling plan
  std::size_t max_epochs = 30;
  double initial_lr = 1e-3;
  Schedule schedule = StepDecay{};
  std::size_t early_stop_patience = 0;  // 0 disables early stopping
  AugmentSpec augment = AugmentSpec::none();
  double label_smoothing = 0.0;
  bool use_class_weights = false;
  WeightMode weight_mode = WeightMode::inverse;
  SamplingTarget sampling = SamplingTarget::natural;
  std::size_t eval_batch_size = 64;

  static TrainConfig filter_preset();
  static TrainConfig classifier_preset();
  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double validation_accuracy = 0.0;
  double learning_rate = 0.0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  bool stopped_early = false;

  /// One JSON object per line.
  std::string to_jsonl() const;
  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t batch, const std::string& detail);
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

struct TrainData {
  const ImageDataset* train = nullptr;
  const ImageDataset* validation = nullptr;
};

struct TrainResult {
  Model model;  // weights of the best epoch
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Resizes to the model input, then gray + [0,1] for 1-channel models or
/// RGB + ImageNet statistics for 3-channel models. Result is [C,H,W].
Tensor preprocess(const ImageBuffer& img, const Shape& input_shape);
/// Stacks preprocessed images into [N,C,H,W].
Tensor make_batch(const std::vector<Tensor>& items);

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<std::size_t> predictions;
  std::vector<std::size_t> labels;
};

/// Inference over a dataset in batches (no augmentation).
Evaluation evaluate_dataset(const Model& model, const ImageDataset& data,
                            const ClassWeights& weights, double label_smoothing,
                            std::size_t batch_size = 64);

/// Adam with the configured schedule; returns the weights of the epoch with the
/// lowest validation loss. Optimizer state is reset at the start.
TrainResult train(Model model, const TrainData& data, const TrainConfig& config,
                  std::uint64_t seed, const EpochCallback& on_epoch = {});

/// 3-class labels (no_finding, lung_opacity, covid19) seen with covid19 folded
/// into lung_opacity.
class Stage1View : public ImageDataset {
 public:
  explicit Stage1View(const ImageDataset& inner) : inner_(inner) {}
  std::size_t size() const override { return inner_.size(); }
  std::size_t label(std::size_t i) const override;
  ImageBuffer image(std::size_t i) const override { return inner_.image(i); }
  std::string id(std::size_t i) const override { return inner_.id(i); }

 private:
  const ImageDataset& inner_;
};

struct TwoStageOptions {
  bool skip_stage1 = false;
  bool freeze_backbone = false;  // stage 2 trains the new head only
};

struct TwoStageResult {
  Model model;
  std::optional<TrainHistory> stage1;
  TrainHistory stage2;
  Model stage1_model;  // stage-1 best weights (fresh init when stage 1 is skipped)
  Model stage2_init;   // state handed to stage 2, after the head swap
};

/// Stage 1 trains a 2-class head on stage-1 labels; stage 2 swaps in a fresh
/// 3-class head, keeps every other weight and fine-tunes. `data` carries
/// 3-class labels.
TwoStageResult train_two_stage(const CovidNetConfig& config, const TrainData& data,
                               const TrainConfig& stage1_cfg, const TrainConfig& stage2_cfg,
                               std::uint64_t seed, const TwoStageOptions& options = {},
                               const EpochCallback& on_epoch = {});

}  // namespace xray
