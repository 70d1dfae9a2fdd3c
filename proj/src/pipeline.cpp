#include <unordered_map>

#include "xray/pipeline.hpp"
#include "xray/rng.hpp"

namespace xray {

namespace {

const char* strategy_name(SplitStrategy s) {
  switch (s) {
    case SplitStrategy::by_patient: return "by_patient";
    case SplitStrategy::random: return "random";
    case SplitStrategy::predefined: return "predefined";
  }
  return "?";
}

void freeze_all_but_head(Model& model) {
  const LayerSpec* head = nullptr;
  for (const auto& L : model.layers) {
    if (L.kind == LayerKind::linear) head = &L;
  }
  if (!head) throw ModelConfigError("model has no linear head to keep trainable");
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    model.params[i].frozen =
        std::find(head->params.begin(), head->params.end(), i) == head->params.end();
  }
}

}  // namespace

ManifestDataset split_dataset(const Manifest& manifest, const SplitAssignment& split, Split which,
                              const std::vector<std::string>& class_names) {
  if (split.assignment.size() != manifest.records.size()) {
    throw std::invalid_argument("split_dataset: split covers " +
                                std::to_string(split.assignment.size()) + " records, manifest has " +
                                std::to_string(manifest.records.size()));
  }
  return ManifestDataset(manifest, split.indices(which), class_names);
}

Manifest with_filter_negatives(const Manifest& manifest, const SplitAssignment& split,
                               double fraction, std::uint64_t seed, SplitAssignment& extended) {
  Manifest out = synthesize_filter_negatives(manifest, fraction, seed);
  extended = split;
  std::unordered_map<std::string, std::size_t> source;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    source.emplace(manifest.records[i].key(), i);
  }
  for (std::size_t i = manifest.records.size(); i < out.records.size(); ++i) {
    extended.assignment.push_back(split.assignment.at(source.at(out.records[i].image_path)));
  }
  return out;
}

TrainResult train_filter_on_manifest(const Manifest& manifest, SplitStrategy strategy,
                                     const FilterNetConfig& net, const TrainConfig& config,
                                     double negatives_fraction, std::uint64_t seed,
                                     const EpochCallback& on_epoch) {
  if (manifest.task != Task::filter) throw std::invalid_argument("train-filter: filter manifest required");
  SplitAssignment s = split(manifest, strategy, {}, Rng::derive(seed, 0));
  Manifest m = manifest;
  if (negatives_fraction > 0.0) {
    SplitAssignment ext;
    m = with_filter_negatives(manifest, s, negatives_fraction, Rng::derive(seed, 1), ext);
    s = std::move(ext);
  }
  const auto names = filter_class_names();
  const auto train_ds = split_dataset(m, s, Split::train, names);
  const auto val_ds = split_dataset(m, s, Split::validation, names);
  Model model = build_filter_net(net, Rng::derive(seed, 2));
  return train(std::move(model), {&train_ds, &val_ds}, config, Rng::derive(seed, 3), on_epoch);
}

TrainResult train_covid_stage(const Manifest& manifest, SplitStrategy strategy, int stage,
                              const CovidNetConfig& net, const std::optional<Model>& init,
                              const TrainConfig& config, bool freeze_backbone,
                              std::uint64_t seed, const EpochCallback& on_epoch) {
  if (manifest.task != Task::classifier) {
    throw std::invalid_argument("train-covid: classifier manifest required");
  }
  if (stage != 1 && stage != 2) throw std::invalid_argument("train-covid: stage must be 1 or 2");
  Manifest m = harmonize_labels(manifest);
  if (stage == 1) m = stage1_relabel(m);
  const std::size_t C = stage == 1 ? 2 : 3;
  const SplitAssignment s = split(m, strategy, {}, Rng::derive(seed, 0));

  Model model;
  if (init) {
    model = *init;
    if (model.num_classes() != C) {
      if (stage == 2 && model.num_classes() == 2) {
        replace_head(model, 3, covid_class_names(3), Rng::derive(seed, 4));
      } else {
        throw ModelConfigError("init checkpoint has " + std::to_string(model.num_classes()) +
                               " classes, stage " + std::to_string(stage) + " needs " +
                               std::to_string(C));
      }
    }
  } else {
    CovidNetConfig c = net;
    c.num_classes = C;
    model = build_covid_net(c, Rng::derive(seed, 2));
  }
  if (freeze_backbone) freeze_all_but_head(model);
  const auto names = covid_class_names(C);
  const auto train_ds = split_dataset(m, s, Split::train, names);
  const auto val_ds = split_dataset(m, s, Split::validation, names);
  auto result = train(std::move(model), {&train_ds, &val_ds}, config, Rng::derive(seed, 3), on_epoch);
  for (auto& p : result.model.params) p.frozen = false;
  return result;
}

nlohmann::json evaluate_runs(const Manifest& manifest, const Model& model, std::size_t runs,
                             SplitStrategy strategy, std::uint64_t seed, const RetrainFn& retrain,
                             StdMode std_mode) {
  if (runs == 0) throw std::invalid_argument("evaluate_runs: runs must be >= 1");
  Manifest m = manifest;
  if (m.task == Task::classifier) {
    m = harmonize_labels(m);
    if (model.num_classes() == 2) m = stage1_relabel(m);
  }
  std::vector<ConfusionMatrix> matrices;
  nlohmann::json sizes = nlohmann::json::array();
  for (std::size_t r = 0; r < runs; ++r) {
    const SplitAssignment s = split(m, strategy, {}, Rng::derive(seed, r));
    const Model run_model = retrain ? retrain(s, Rng::derive(seed, 1000 + r)) : model;
    const auto test = split_dataset(m, s, Split::test, run_model.class_names);
    const auto ev = evaluate_dataset(run_model, test, unit_weights(run_model.num_classes()), 0.0);
    matrices.push_back(
        confusion_matrix(ev.predictions, ev.labels, run_model.num_classes(), run_model.class_names));
    sizes.push_back(test.size());
  }
  const RunAggregate agg = aggregate_runs(matrices, std_mode);
  return {{"runs", runs},
          {"strategy", strategy_name(strategy)},
          {"seed", seed},
          {"retrain", static_cast<bool>(retrain)},
          {"test_sizes", sizes},
          {"aggregate", to_json(agg)}};
}

}  // namespace xray
