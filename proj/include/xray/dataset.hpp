#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "xray/image.hpp"

namespace xray {

enum class DatasetId { cohen, figure1, chest_xray, rsna, local };
/// `normal` and `pneumonia` are source labels that harmonize_labels renames.
enum class Label { no_finding, lung_opacity, covid19, valid, nonvalid, normal, pneumonia };
enum class View { AP, PA, other };
enum class Split { train, validation, test };
enum class Task { filter, classifier };

std::string to_string(DatasetId v);
std::string to_string(Label v);
std::string to_string(View v);
std::string to_string(Split v);
std::string to_string(Task v);

std::optional<DatasetId> parse_dataset_id(std::string_view s);
std::optional<Label> parse_label(std::string_view s);
std::optional<View> parse_view(std::string_view s);
std::optional<Split> parse_split(std::string_view s);

struct SampleRecord {
  std::string image_path;
  DatasetId dataset_id = DatasetId::local;
  std::optional<std::string> patient_id;
  Label label = Label::no_finding;
  std::optional<View> view;
  std::optional<Split> split;
  int quarter_turns = 0;  // > 0 for rotated negatives derived from image_path

  /// Unique manifest key: the path, suffixed with "#rot=<k>" for derived records.
  std::string key() const;
};

struct Manifest {
  std::vector<SampleRecord> records;
  Task task = Task::classifier;
  std::filesystem::path base_dir;  // relative image paths resolve against this

  std::map<std::string, std::size_t> class_counts() const;
  std::size_t size() const { return records.size(); }
};

/// Itemized validation failures, one entry per offending row.
class ManifestError : public std::runtime_error {
 public:
  explicit ManifestError(std::vector<std::string> issues);
  const std::vector<std::string>& issues() const noexcept { return issues_; }

 private:
  std::vector<std::string> issues_;
};

/// CSV with header `image_path,dataset_id,patient_id,label,view,split`.
/// The task is inferred from the labels unless given.
Manifest parse_manifest(std::string_view csv, std::optional<Task> task = std::nullopt);
Manifest load_manifest(const std::filesystem::path& path, std::optional<Task> task = std::nullopt);
std::string format_manifest(const Manifest& manifest);
void save_manifest(const std::filesystem::path& path, const Manifest& manifest);

std::filesystem::path resolve_image_path(const Manifest& manifest, const SampleRecord& record);
/// Decodes the record's file and applies its quarter turns.
ImageBuffer load_record_image(const Manifest& manifest, const SampleRecord& record);

enum class SplitStrategy { by_patient, random, predefined };

struct SplitRatios {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

struct SplitAssignment {
  std::vector<Split> assignment;  // parallel to manifest.records
  std::uint64_t seed = 0;
  SplitStrategy strategy = SplitStrategy::random;
  std::vector<std::string> warnings;

  std::vector<std::size_t> indices(Split which) const;
};

/// Seeded partition. Unit counts (patients or samples) for validation and test
/// are floor(ratio * units); train takes the remainder.
SplitAssignment split(const Manifest& manifest, SplitStrategy strategy,
                      const SplitRatios& ratios = {}, std::uint64_t seed = 0);

/// Picks predefined when every record has a split, by_patient when every record
/// has a patient id, random otherwise.
SplitStrategy default_strategy(const Manifest& manifest);

/// Normal -> no_finding, Pneumonia -> lung_opacity.
Manifest harmonize_labels(const Manifest& manifest);
/// covid19 -> lung_opacity.
Manifest stage1_relabel(const Manifest& manifest);
/// Appends 3 nonvalid records (quarter turns 1,2,3) for round(fraction * #valid)
/// seeded picks among the valid records.
Manifest synthesize_filter_negatives(const Manifest& manifest, double fraction,
                                     std::uint64_t seed);

enum class SamplingTarget { equalized, natural };

struct SamplingPlan {
  std::vector<std::size_t> indices;       // positions into the label vector, epoch order
  std::vector<std::size_t> class_draws;   // draws per class this epoch
  std::vector<std::size_t> class_sizes;   // distinct members per class
};

/// equalized: every class receives epoch_length / C draws (remainder to seeded
/// classes), taken as successive reshuffled passes over the class members so a
/// balanced input yields a permutation. natural: one shuffled pass.
/// epoch_length 0 means labels.size().
SamplingPlan make_sampling_plan(const std::vector<std::size_t>& labels, std::size_t num_classes,
                                SamplingTarget target, std::uint64_t seed,
                                std::size_t epoch_length = 0);

/// Index of `label` among `class_names`; throws if absent.
std::size_t class_index_of(Label label, const std::vector<std::string>& class_names);

/// Labeled image source consumed by training and evaluation.
class ImageDataset {
 public:
  virtual ~ImageDataset() = default;
  virtual std::size_t size() const = 0;
  virtual std::size_t label(std::size_t i) const = 0;
  virtual ImageBuffer image(std::size_t i) const = 0;
  virtual std::string id(std::size_t i) const { return std::to_string(i); }

  std::vector<std::size_t> labels() const;
};

class InMemoryDataset : public ImageDataset {
 public:
  InMemoryDataset() = default;
  InMemoryDataset(std::vector<ImageBuffer> images, std::vector<std::size_t> labels);

  void add(ImageBuffer img, std::size_t label, std::string id = {});
  std::size_t size() const override { return images_.size(); }
  std::size_t label(std::size_t i) const override { return labels_.at(i); }
  ImageBuffer image(std::size_t i) const override { return images_.at(i); }
  std::string id(std::size_t i) const override;

 private:
  std::vector<ImageBuffer> images_;
  std::vector<std::size_t> labels_;
  std::vector<std::string> ids_;
};

/// Records `indices` of a manifest, labels mapped through `class_names`.
/// Decoded images are cached.
class ManifestDataset : public ImageDataset {
 public:
  ManifestDataset(Manifest manifest, std::vector<std::size_t> indices,
                  const std::vector<std::string>& class_names);

  std::size_t size() const override { return indices_.size(); }
  std::size_t label(std::size_t i) const override { return labels_.at(i); }
  ImageBuffer image(std::size_t i) const override;
  std::string id(std::size_t i) const override;

 private:
  Manifest manifest_;
  std::vector<std::size_t> indices_;
  std::vector<std::size_t> labels_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<std::size_t, ImageBuffer> cache_;
};

}  // namespace xray
