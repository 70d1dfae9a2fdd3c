#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "xray/ops.hpp"
#include "xray/rng.hpp"
#include "xray/training.hpp"

namespace xray {

std::string to_string(WeightMode mode) {
  return mode == WeightMode::as_written ? "as_written" : "inverse";
}

std::optional<WeightMode> parse_weight_mode(std::string_view s) {
  if (s == "as_written") return WeightMode::as_written;
  if (s == "inverse") return WeightMode::inverse;
  return std::nullopt;
}

ClassWeights class_weights(const std::vector<std::size_t>& counts, WeightMode mode) {
  if (counts.empty()) throw std::invalid_argument("class_weights: no classes");
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] == 0) {
      throw std::invalid_argument("class_weights: class " + std::to_string(i) + " has zero count");
    }
  }
  const double n_max = static_cast<double>(*std::max_element(counts.begin(), counts.end()));
  ClassWeights w;
  w.mode = mode;
  for (std::size_t n : counts) {
    const double ni = static_cast<double>(n);
    w.weights.push_back(mode == WeightMode::as_written ? ni / n_max : n_max / ni);
  }
  return w;
}

ClassWeights unit_weights(std::size_t num_classes) {
  ClassWeights w;
  w.weights.assign(num_classes, 1.0);
  return w;
}

template <typename T>
BasicTensor<T> one_hot(const std::vector<std::size_t>& labels, std::size_t num_classes) {
  BasicTensor<T> out({labels.size(), num_classes});
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] >= num_classes) {
      throw std::invalid_argument("one_hot: label " + std::to_string(labels[n]) + " at row " +
                                  std::to_string(n) + " >= " + std::to_string(num_classes));
    }
    out[n * num_classes + labels[n]] = T{1};
  }
  return out;
}

template <typename T>
SmoothedTarget<T> smooth_targets(const BasicTensor<T>& labels, double alpha) {
  require_rank(labels, 2, "smooth_targets labels");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw std::invalid_argument("smooth_targets: alpha not in [0,1)");
  const std::size_t N = labels.dim(0), C = labels.dim(1);
  SmoothedTarget<T> out;
  out.alpha = alpha;
  out.y_soft = BasicTensor<T>({N, C});
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t hot = C, ones = 0;
    bool clean = true;
    for (std::size_t c = 0; c < C; ++c) {
      const T v = labels[n * C + c];
      if (v == T{1}) {
        hot = c;
        ++ones;
      } else if (v != T{0}) {
        clean = false;
      }
    }
    if (!clean || ones != 1) {
      throw std::invalid_argument("smooth_targets: row " + std::to_string(n) + " is not one-hot");
    }
    out.labels.push_back(hot);
    for (std::size_t c = 0; c < C; ++c) {
      const double y = c == hot ? 1.0 : 0.0;
      out.y_soft[n * C + c] = static_cast<T>((1.0 - alpha) * y + alpha / static_cast<double>(C));
    }
  }
  return out;
}

template <typename T>
LossResult<T> weighted_smoothed_ce(const BasicTensor<T>& probabilities,
                                   const SmoothedTarget<T>& targets, const ClassWeights& weights) {
  require_rank(probabilities, 2, "weighted_smoothed_ce probabilities");
  if (probabilities.shape() != targets.y_soft.shape()) {
    throw DimensionError("weighted_smoothed_ce: probabilities " + shape_str(probabilities.shape()) +
                         " vs targets " + shape_str(targets.y_soft.shape()));
  }
  const std::size_t N = probabilities.dim(0), C = probabilities.dim(1);
  if (weights.weights.size() != C) {
    throw DimensionError("weighted_smoothed_ce: " + std::to_string(weights.weights.size()) +
                         " class weights for " + std::to_string(C) + " classes");
  }
  if (targets.labels.size() != N) throw DimensionError("weighted_smoothed_ce: label count mismatch");
  LossResult<T> out;
  out.dlogits = BasicTensor<T>({N, C});
  if (N == 0) return out;
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(N);
  for (std::size_t n = 0; n < N; ++n) {
    const double w = weights.weights[targets.labels[n]];
    double row = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double y = targets.y_soft[n * C + c];
      const double p = probabilities[n * C + c];
      if (y > 0.0) {
        if (p < kProbabilityFloor) ++out.clamped;
        row += y * std::log(std::max(p, kProbabilityFloor));
      }
      out.dlogits[n * C + c] = static_cast<T>(w * (p - y) * inv_n);
    }
    total -= w * row;
  }
  out.loss = total * inv_n;
  return out;
}

#define XRAY_INSTANTIATE_LOSS(T)                                                             \
  template BasicTensor<T> one_hot<T>(const std::vector<std::size_t>&, std::size_t);          \
  template SmoothedTarget<T> smooth_targets<T>(const BasicTensor<T>&, double);               \
  template LossResult<T> weighted_smoothed_ce<T>(const BasicTensor<T>&, const SmoothedTarget<T>&, \
                                                 const ClassWeights&);
XRAY_INSTANTIATE_LOSS(float)
XRAY_INSTANTIATE_LOSS(double)
#undef XRAY_INSTANTIATE_LOSS

double step_decay_lr(double lr0, const StepDecay& s, std::size_t epoch) {
  if (s.every_n_epochs == 0) throw std::invalid_argument("step decay: every_n_epochs must be >= 1");
  return lr0 * std::pow(s.factor, static_cast<double>(epoch / s.every_n_epochs));
}

LrScheduler::LrScheduler(double initial_lr, Schedule schedule)
    : lr0_(initial_lr),
      lr_(initial_lr),
      schedule_(schedule),
      best_(std::numeric_limits<double>::infinity()) {
  if (!(initial_lr > 0.0)) throw std::invalid_argument("LrScheduler: initial lr must be positive");
  if (auto* s = std::get_if<StepDecay>(&schedule_)) lr_ = step_decay_lr(lr0_, *s, 0);
}

double LrScheduler::next(std::size_t epoch, double validation_loss) {
  if (auto* s = std::get_if<StepDecay>(&schedule_)) {
    const double next_lr = step_decay_lr(lr0_, *s, epoch + 1);
    if (next_lr != lr_) ++reductions_;
    lr_ = next_lr;
    return lr_;
  }
  const auto& p = std::get<Plateau>(schedule_);
  if (validation_loss < best_) {
    best_ = validation_loss;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= p.patience) {
    lr_ *= p.factor;
    ++reductions_;
    bad_epochs_ = 0;
  }
  return lr_;
}

TrainConfig TrainConfig::filter_preset() {
  TrainConfig c;
  c.batch_size = 128;
  c.steps_per_epoch = 5;
  c.max_epochs = 100;
  c.initial_lr = 1e-3;
  c.schedule = StepDecay{0.5, 5};
  c.early_stop_patience = 15;
  c.augment = AugmentSpec::filter_defaults();
  c.sampling = SamplingTarget::natural;
  return c;
}

TrainConfig TrainConfig::classifier_preset() {
  TrainConfig c;
  c.batch_size = 32;
  c.steps_per_epoch = 0;
  c.max_epochs = 100;
  c.initial_lr = 1e-5;
  c.schedule = Plateau{0.5, 2};
  c.early_stop_patience = 5;
  c.augment = AugmentSpec::classifier_defaults();
  c.label_smoothing = 0.1;
  c.use_class_weights = true;
  c.weight_mode = WeightMode::inverse;
  c.sampling = SamplingTarget::equalized;
  return c;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (eval_batch_size == 0) throw std::invalid_argument("TrainConfig: eval_batch_size must be >= 1");
  if (max_epochs == 0) throw std::invalid_argument("TrainConfig: max_epochs must be >= 1");
  if (!(initial_lr > 0.0)) throw std::invalid_argument("TrainConfig: initial_lr must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw std::invalid_argument("TrainConfig: label_smoothing not in [0,1)");
  }
  augment.validate();
}

std::string TrainHistory::to_jsonl() const {
  std::string out;
  for (const auto& e : epochs) {
    nlohmann::json j = {{"epoch", e.epoch},
                        {"train_loss", e.train_loss},
                        {"validation_loss", e.validation_loss},
                        {"validation_accuracy", e.validation_accuracy},
                        {"learning_rate", e.learning_rate},
                        {"best", e.epoch == best_epoch}};
    out += j.dump() + "\n";
  }
  return out;
}

TrainingDiverged::TrainingDiverged(std::size_t epoch, std::size_t batch, const std::string& detail)
    : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batch) + ": " + detail),
      epoch_(epoch),
      batch_(batch) {}

Tensor preprocess(const ImageBuffer& img, const Shape& input_shape) {
  if (input_shape.size() != 3) throw DimensionError("preprocess: input shape must be [C,H,W]");
  ImageBuffer sized = resize_bilinear(img, input_shape[1], input_shape[2]);
  if (input_shape[0] == 1) return normalize(to_gray(sized), NormalizationMode::unit_interval);
  if (input_shape[0] == 3) return normalize(to_rgb(sized), NormalizationMode::imagenet_stats);
  throw DimensionError("preprocess: unsupported channel count " + std::to_string(input_shape[0]));
}

Tensor make_batch(const std::vector<Tensor>& items) {
  if (items.empty()) throw DimensionError("make_batch: empty batch");
  const Shape item = items[0].shape();
  Shape shape{items.size()};
  shape.insert(shape.end(), item.begin(), item.end());
  Tensor out(shape);
  const std::size_t n = items[0].size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != item) {
      throw DimensionError("make_batch: item " + std::to_string(i) + " has shape " +
                           shape_str(items[i].shape()) + ", expected " + shape_str(item));
    }
    std::copy(items[i].raw(), items[i].raw() + n, out.raw() + i * n);
  }
  return out;
}

namespace {

void check_labels(const ImageDataset& data, std::size_t num_classes, const char* which) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.label(i) >= num_classes) {
      throw std::invalid_argument(std::string(which) + " sample " + data.id(i) + " has label " +
                                  std::to_string(data.label(i)) + " but the model has " +
                                  std::to_string(num_classes) + " classes");
    }
  }
}

std::vector<std::size_t> epoch_order(const std::vector<std::size_t>& labels, std::size_t C,
                                     const TrainConfig& cfg, std::uint64_t seed) {
  const std::size_t want = cfg.steps_per_epoch ? cfg.steps_per_epoch * cfg.batch_size : 0;
  if (cfg.sampling == SamplingTarget::equalized) {
    return make_sampling_plan(labels, C, SamplingTarget::equalized, seed, want).indices;
  }
  std::vector<std::size_t> order;
  const std::size_t target = want ? want : labels.size();
  std::uint64_t pass = 0;
  while (order.size() < target) {
    auto plan = make_sampling_plan(labels, C, SamplingTarget::natural, Rng::derive(seed, pass++));
    const std::size_t take = std::min(plan.indices.size(), target - order.size());
    order.insert(order.end(), plan.indices.begin(),
                 plan.indices.begin() + static_cast<std::ptrdiff_t>(take));
  }
  return order;
}

std::string nonfinite_report(const Model& model) {
  std::ostringstream os;
  bool any = false;
  for (const auto& p : model.params) {
    if (!p.value.all_finite() || !p.grad.all_finite()) {
      os << (any ? "; " : "") << p.name << " value_finite=" << p.value.all_finite()
         << " grad_finite=" << p.grad.all_finite();
      any = true;
    }
  }
  if (!any) {
    double worst = 0.0;
    std::string name;
    for (const auto& p : model.params) {
      if (p.grad.max_abs() >= worst) {
        worst = p.grad.max_abs();
        name = p.name;
      }
    }
    os << "all parameters finite; largest gradient " << worst << " in " << name;
  }
  return os.str();
}

}  // namespace

Evaluation evaluate_dataset(const Model& model, const ImageDataset& data,
                            const ClassWeights& weights, double label_smoothing,
                            std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("evaluate_dataset: batch_size must be >= 1");
  Evaluation ev;
  const std::size_t C = model.num_classes();
  check_labels(data, C, "evaluation");
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<Tensor> items;
    std::vector<std::size_t> labels;
    for (std::size_t i = start; i < end; ++i) {
      items.push_back(preprocess(data.image(i), model.input_shape));
      labels.push_back(data.label(i));
    }
    const auto out = model.forward(make_batch(items));
    const auto targets = smooth_targets(one_hot<float>(labels, C), label_smoothing);
    loss_sum += weighted_smoothed_ce(out.probabilities, targets, weights).loss *
                static_cast<double>(labels.size());
    for (std::size_t n = 0; n < labels.size(); ++n) {
      const float* row = out.probabilities.raw() + n * C;
      const auto pred = static_cast<std::size_t>(std::max_element(row, row + C) - row);
      ev.predictions.push_back(pred);
      ev.labels.push_back(labels[n]);
      if (pred == labels[n]) ++correct;
    }
  }
  if (data.size() > 0) {
    ev.loss = loss_sum / static_cast<double>(data.size());
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  }
  return ev;
}

TrainResult train(Model model, const TrainData& data, const TrainConfig& config,
                  std::uint64_t seed, const EpochCallback& on_epoch) {
  config.validate();
  if (!data.train || data.train->size() == 0) throw std::invalid_argument("train: empty training set");
  if (!data.validation || data.validation->size() == 0) {
    throw std::invalid_argument("train: empty validation set");
  }
  const std::size_t C = model.num_classes();
  check_labels(*data.train, C, "training");
  check_labels(*data.validation, C, "validation");

  const auto labels = data.train->labels();
  ClassWeights weights = unit_weights(C);
  if (config.use_class_weights) {
    std::vector<std::size_t> counts(C, 0);
    for (std::size_t l : labels) ++counts[l];
    weights = class_weights(counts, config.weight_mode);
  }

  for (auto& p : model.params) {
    p.reset_optimizer_state();
    p.zero_grad();
  }
  LrScheduler scheduler(config.initial_lr, config.schedule);
  AdamHyper hyper;

  TrainResult result;
  std::vector<Tensor> best_values;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    hyper.lr = scheduler.lr();
    const auto order = epoch_order(labels, C, config, Rng::derive(seed, 2 * epoch));
    const std::uint64_t aug_seed = Rng::derive(seed, 2 * epoch + 1);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0, batch = 0; start < order.size();
         start += config.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Tensor> items;
      std::vector<std::size_t> batch_labels;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        ImageBuffer img = resize_bilinear(data.train->image(idx), model.input_shape[1],
                                          model.input_shape[2]);
        Rng rng(Rng::derive(aug_seed, k));
        items.push_back(preprocess(augment(img, config.augment, rng), model.input_shape));
        batch_labels.push_back(labels[idx]);
      }
      const auto tape = model.forward_train(make_batch(items));
      const auto targets = smooth_targets(one_hot<float>(batch_labels, C), config.label_smoothing);
      const auto loss = weighted_smoothed_ce(tape.output.probabilities, targets, weights);
      if (!std::isfinite(loss.loss)) {
        throw TrainingDiverged(epoch, batch, "loss " + std::to_string(loss.loss) + "; " +
                                                 nonfinite_report(model));
      }
      model.zero_grad();
      model.backward(tape, loss.dlogits);
      try {
        for (auto& p : model.params) {
          if (!p.frozen) adam_step(p, hyper);
        }
      } catch (const NonFiniteGradient& e) {
        throw TrainingDiverged(epoch, batch, e.what());
      }
      loss_sum += loss.loss * static_cast<double>(batch_labels.size());
      seen += batch_labels.size();
    }

    const Evaluation val = evaluate_dataset(model, *data.validation, weights,
                                            config.label_smoothing, config.eval_batch_size);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(seen), val.loss, val.accuracy, hyper.lr};
    result.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (val.loss < best_loss) {
      best_loss = val.loss;
      result.history.best_epoch = epoch;
      since_best = 0;
      best_values.clear();
      for (const auto& p : model.params) best_values.push_back(p.value);
    } else {
      ++since_best;
    }
    if (config.early_stop_patience > 0 && since_best >= config.early_stop_patience) {
      result.history.stopped_early = epoch + 1 < config.max_epochs;
      break;
    }
    scheduler.next(epoch, val.loss);
  }

  if (!best_values.empty()) {
    for (std::size_t i = 0; i < model.params.size(); ++i) model.params[i].value = best_values[i];
  }
  model.zero_grad();
  result.model = std::move(model);
  return result;
}

std::size_t Stage1View::label(std::size_t i) const {
  const std::size_t l = inner_.label(i);
  return l == 2 ? 1 : l;
}

TwoStageResult train_two_stage(const CovidNetConfig& config, const TrainData& data,
                               const TrainConfig& stage1_cfg, const TrainConfig& stage2_cfg,
                               std::uint64_t seed, const TwoStageOptions& options,
                               const EpochCallback& on_epoch) {
  if (!data.train || !data.validation) throw std::invalid_argument("train_two_stage: missing data");
  CovidNetConfig c1 = config;
  c1.num_classes = 2;
  Model model = build_covid_net(c1, Rng::derive(seed, 0));
  TwoStageResult out;
  if (!options.skip_stage1) {
    Stage1View train1(*data.train), val1(*data.validation);
    auto r1 = train(std::move(model), {&train1, &val1}, stage1_cfg, Rng::derive(seed, 1), on_epoch);
    model = std::move(r1.model);
    out.stage1 = std::move(r1.history);
  }
  out.stage1_model = model;
  replace_head(model, 3, covid_class_names(3), Rng::derive(seed, 2));
  if (options.freeze_backbone) {
    const LayerSpec* head = nullptr;
    for (const auto& L : model.layers) {
      if (L.kind == LayerKind::linear) head = &L;
    }
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      const bool in_head = std::find(head->params.begin(), head->params.end(), i) != head->params.end();
      model.params[i].frozen = !in_head;
    }
  }
  out.stage2_init = model;
  auto r2 = train(std::move(model), data, stage2_cfg, Rng::derive(seed, 3), on_epoch);
  for (auto& p : r2.model.params) p.frozen = false;
  out.model = std::move(r2.model);
  out.stage2 = std::move(r2.history);
  return out;
}

}  // namespace xray
