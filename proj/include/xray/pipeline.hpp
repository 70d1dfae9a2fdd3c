#pragma once

#include <cstdint>
#include <functional>
#include <optional>

#include <json.hpp>

#include "xray/dataset.hpp"
#include "xray/evaluation.hpp"
#include "xray/model.hpp"
#include "xray/training.hpp"

namespace xray {

/// Records of one split, labels indexed by `class_names`.
ManifestDataset split_dataset(const Manifest& manifest, const SplitAssignment& split, Split which,
                              const std::vector<std::string>& class_names);

/// Filter training on a filter manifest. Rotated negatives are synthesized
/// first when `negatives_fraction` > 0 (derived records inherit the source split).
TrainResult train_filter_on_manifest(const Manifest& manifest, SplitStrategy strategy,
                                     const FilterNetConfig& net, const TrainConfig& config,
                                     double negatives_fraction, std::uint64_t seed,
                                     const EpochCallback& on_epoch = {});

/// One classifier stage on a classifier manifest (labels are harmonized here).
/// Stage 1 relabels covid19 as lung_opacity and trains 2 classes; stage 2 keeps
/// 3 classes. `init` seeds the weights: for stage 2 a 2-class model gets a fresh
/// 3-class head and keeps everything else.
TrainResult train_covid_stage(const Manifest& manifest, SplitStrategy strategy, int stage,
                              const CovidNetConfig& net, const std::optional<Model>& init,
                              const TrainConfig& config, bool freeze_backbone,
                              std::uint64_t seed, const EpochCallback& on_epoch = {});

/// Evaluates the test split of `runs` reseeded splits. With `retrain`, the
/// callback produces a fresh model for each run's split and seed.
using RetrainFn = std::function<Model(const SplitAssignment&, std::uint64_t seed)>;
nlohmann::json evaluate_runs(const Manifest& manifest, const Model& model, std::size_t runs,
                             SplitStrategy strategy, std::uint64_t seed,
                             const RetrainFn& retrain = {}, StdMode std_mode = StdMode::population);

/// Appends derived rotated records without changing existing splits: each
/// derived record copies its source record's split value.
Manifest with_filter_negatives(const Manifest& manifest, const SplitAssignment& split,
                               double fraction, std::uint64_t seed, SplitAssignment& extended);

}  // namespace xray
