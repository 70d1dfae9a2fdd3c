#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "xray/dataset.hpp"
#include "xray/model.hpp"

namespace xray {

/// Rows are actual classes, columns predicted.
struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<std::uint64_t> counts;  // row-major C x C
  std::vector<std::string> class_names;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t c, std::vector<std::string> names = {});
  ConfusionMatrix(const std::vector<std::vector<std::uint64_t>>& rows,
                  std::vector<std::string> names = {});

  std::uint64_t& at(std::size_t actual, std::size_t predicted) {
    return counts[actual * num_classes + predicted];
  }
  std::uint64_t at(std::size_t actual, std::size_t predicted) const {
    return counts[actual * num_classes + predicted];
  }
  std::uint64_t row_sum(std::size_t actual) const;
  std::uint64_t col_sum(std::size_t predicted) const;
  std::uint64_t total() const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

ConfusionMatrix confusion_matrix(const std::vector<std::size_t>& predicted,
                                 const std::vector<std::size_t>& actual, std::size_t num_classes,
                                 std::vector<std::string> class_names = {});

/// One-vs-rest rates; nullopt where the denominator is zero.
struct ClassMetrics {
  std::vector<std::optional<double>> sensitivity;
  std::vector<std::optional<double>> specificity;
};

ClassMetrics sensitivity_specificity(const ConfusionMatrix& m);

struct MetricStats {
  std::optional<double> mean;
  std::optional<double> stddev;
  std::size_t defined_runs = 0;
};

enum class StdMode { population, sample };

struct RunAggregate {
  ConfusionMatrix summed;
  ClassMetrics pooled;  // computed on the summed matrix
  std::vector<ClassMetrics> per_run;
  std::vector<MetricStats> sensitivity;  // across runs
  std::vector<MetricStats> specificity;
  StdMode std_mode = StdMode::population;
};

RunAggregate aggregate_runs(const std::vector<ConfusionMatrix>& matrices,
                            StdMode mode = StdMode::population);

nlohmann::json to_json(const ConfusionMatrix& m);
nlohmann::json to_json(const ClassMetrics& m, const std::vector<std::string>& class_names);
nlohmann::json to_json(const RunAggregate& a);

struct EmbeddingExport {
  std::vector<std::vector<float>> vectors;
  std::vector<std::string> labels;
  std::vector<std::string> ids;
  std::vector<std::string> skipped;  // "id: reason" for rows that failed to load
};

/// Global average of the final feature maps, one row per loadable sample, in order.
EmbeddingExport extract_embeddings(const Model& model, const ImageDataset& data,
                                   const std::vector<std::string>& label_names);

/// `vectors.tsv` and `metadata.tsv` (header `label\tid`).
void write_projector(const std::filesystem::path& dir, const EmbeddingExport& e);

struct PcaResult {
  std::vector<std::vector<double>> coordinates;  // N x k'
  std::vector<std::vector<double>> axes;         // k' x F, unit rows
  std::vector<double> eigenvalues;               // k', descending
  std::vector<double> explained_variance_ratio;  // k'
  std::size_t requested = 0;
  bool rank_deficient = false;  // fewer than `requested` axes carry variance
};

/// Centered projection onto the leading principal axes. Each axis is signed so
/// that its largest-magnitude loading is positive.
PcaResult pca_project(const std::vector<std::vector<double>>& vectors, std::size_t k = 3);

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Eigenvalues descending; vectors[i] is the unit eigenvector of values[i].
struct SymmetricEigen {
  std::vector<double> values;
  std::vector<std::vector<double>> vectors;
};
SymmetricEigen symmetric_eigen(const std::vector<std::vector<double>>& a);

}  // namespace xray
