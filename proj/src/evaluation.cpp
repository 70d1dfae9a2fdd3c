#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "xray/checkpoint.hpp"
#include "xray/evaluation.hpp"
#include "xray/ops.hpp"
#include "xray/training.hpp"

namespace xray {

ConfusionMatrix::ConfusionMatrix(std::size_t c, std::vector<std::string> names)
    : num_classes(c), counts(c * c, 0), class_names(std::move(names)) {
  if (!class_names.empty() && class_names.size() != c) {
    throw std::invalid_argument("ConfusionMatrix: class_names size != num_classes");
  }
}

ConfusionMatrix::ConfusionMatrix(const std::vector<std::vector<std::uint64_t>>& rows,
                                 std::vector<std::string> names)
    : ConfusionMatrix(rows.size(), std::move(names)) {
  for (std::size_t a = 0; a < rows.size(); ++a) {
    if (rows[a].size() != num_classes) throw std::invalid_argument("ConfusionMatrix: ragged rows");
    for (std::size_t p = 0; p < num_classes; ++p) at(a, p) = rows[a][p];
  }
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t actual) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < num_classes; ++p) s += at(actual, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t predicted) const {
  std::uint64_t s = 0;
  for (std::size_t a = 0; a < num_classes; ++a) s += at(a, predicted);
  return s;
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

ConfusionMatrix confusion_matrix(const std::vector<std::size_t>& predicted,
                                 const std::vector<std::size_t>& actual, std::size_t num_classes,
                                 std::vector<std::string> class_names) {
  if (predicted.size() != actual.size()) {
    throw std::invalid_argument("confusion_matrix: " + std::to_string(predicted.size()) +
                                " predictions vs " + std::to_string(actual.size()) + " labels");
  }
  ConfusionMatrix m(num_classes, std::move(class_names));
  for (std::size_t i = 0; i < actual.size(); ++i) {
    if (actual[i] >= num_classes || predicted[i] >= num_classes) {
      throw std::out_of_range("confusion_matrix: label out of range at position " +
                              std::to_string(i));
    }
    ++m.at(actual[i], predicted[i]);
  }
  return m;
}

ClassMetrics sensitivity_specificity(const ConfusionMatrix& m) {
  ClassMetrics out;
  const std::uint64_t total = m.total();
  for (std::size_t c = 0; c < m.num_classes; ++c) {
    const std::uint64_t tp = m.at(c, c);
    const std::uint64_t fn = m.row_sum(c) - tp;
    const std::uint64_t fp = m.col_sum(c) - tp;
    const std::uint64_t tn = total - tp - fn - fp;
    auto ratio = [](std::uint64_t num, std::uint64_t den) -> std::optional<double> {
      if (den == 0) return std::nullopt;
      return static_cast<double>(num) / static_cast<double>(den);
    };
    out.sensitivity.push_back(ratio(tp, tp + fn));
    out.specificity.push_back(ratio(tn, tn + fp));
  }
  return out;
}

namespace {

MetricStats stats_of(const std::vector<double>& xs, StdMode mode) {
  MetricStats s;
  s.defined_runs = xs.size();
  if (xs.empty()) return s;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  s.mean = mean;
  if (mode == StdMode::sample && xs.size() < 2) return s;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  const double den = static_cast<double>(mode == StdMode::sample ? xs.size() - 1 : xs.size());
  s.stddev = std::sqrt(ss / den);
  return s;
}

nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::string class_label(const std::vector<std::string>& names, std::size_t c) {
  return c < names.size() ? names[c] : std::to_string(c);
}

}  // namespace

RunAggregate aggregate_runs(const std::vector<ConfusionMatrix>& matrices, StdMode mode) {
  if (matrices.empty()) throw std::invalid_argument("aggregate_runs: no runs");
  RunAggregate agg;
  agg.std_mode = mode;
  agg.summed = ConfusionMatrix(matrices[0].num_classes, matrices[0].class_names);
  for (std::size_t r = 0; r < matrices.size(); ++r) {
    const auto& m = matrices[r];
    if (m.num_classes != agg.summed.num_classes || m.class_names != agg.summed.class_names) {
      throw std::invalid_argument("aggregate_runs: run " + std::to_string(r) +
                                  " has a different class set");
    }
    for (std::size_t i = 0; i < m.counts.size(); ++i) agg.summed.counts[i] += m.counts[i];
    agg.per_run.push_back(sensitivity_specificity(m));
  }
  agg.pooled = sensitivity_specificity(agg.summed);
  for (std::size_t c = 0; c < agg.summed.num_classes; ++c) {
    std::vector<double> sens, spec;
    for (const auto& run : agg.per_run) {
      if (run.sensitivity[c]) sens.push_back(*run.sensitivity[c]);
      if (run.specificity[c]) spec.push_back(*run.specificity[c]);
    }
    agg.sensitivity.push_back(stats_of(sens, mode));
    agg.specificity.push_back(stats_of(spec, mode));
  }
  return agg;
}

nlohmann::json to_json(const ConfusionMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t a = 0; a < m.num_classes; ++a) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t p = 0; p < m.num_classes; ++p) row.push_back(m.at(a, p));
    rows.push_back(row);
  }
  return {{"class_names", m.class_names}, {"counts", rows}};
}

nlohmann::json to_json(const ClassMetrics& m, const std::vector<std::string>& class_names) {
  nlohmann::json out = nlohmann::json::object();
  for (std::size_t c = 0; c < m.sensitivity.size(); ++c) {
    out[class_label(class_names, c)] = {{"sensitivity", opt_json(m.sensitivity[c])},
                                        {"specificity", opt_json(m.specificity[c])}};
  }
  return out;
}

nlohmann::json to_json(const RunAggregate& a) {
  nlohmann::json across = nlohmann::json::object();
  for (std::size_t c = 0; c < a.sensitivity.size(); ++c) {
    auto st = [](const MetricStats& s) {
      return nlohmann::json{{"mean", opt_json(s.mean)},
                            {"std", opt_json(s.stddev)},
                            {"defined_runs", s.defined_runs}};
    };
    across[class_label(a.summed.class_names, c)] = {{"sensitivity", st(a.sensitivity[c])},
                                                    {"specificity", st(a.specificity[c])}};
  }
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : a.per_run) runs.push_back(to_json(r, a.summed.class_names));
  return {{"runs", a.per_run.size()},
          {"std_mode", a.std_mode == StdMode::population ? "population" : "sample"},
          {"summed_confusion_matrix", to_json(a.summed)},
          {"summed_matrix_metrics", to_json(a.pooled, a.summed.class_names)},
          {"mean_over_runs", across},
          {"per_run_metrics", runs}};
}

EmbeddingExport extract_embeddings(const Model& model, const ImageDataset& data,
                                   const std::vector<std::string>& label_names) {
  EmbeddingExport e;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Tensor input;
    try {
      input = preprocess(data.image(i), model.input_shape);
    } catch (const std::exception& ex) {
      e.skipped.push_back(data.id(i) + ": " + ex.what());
      continue;
    }
    Shape batched{1};
    batched.insert(batched.end(), input.shape().begin(), input.shape().end());
    const auto out = model.forward(input.reshaped(batched));
    const Tensor pooled = global_avg_pool(out.final_features);
    e.vectors.emplace_back(pooled.raw(), pooled.raw() + pooled.size());
    const std::size_t l = data.label(i);
    e.labels.push_back(l < label_names.size() ? label_names[l] : std::to_string(l));
    e.ids.push_back(data.id(i));
  }
  return e;
}

void write_projector(const std::filesystem::path& dir, const EmbeddingExport& e) {
  std::ostringstream vec, meta;
  vec.precision(9);
  for (const auto& row : e.vectors) {
    for (std::size_t j = 0; j < row.size(); ++j) vec << (j ? "\t" : "") << row[j];
    vec << "\n";
  }
  meta << "label\tid\n";
  for (std::size_t i = 0; i < e.labels.size(); ++i) meta << e.labels[i] << "\t" << e.ids[i] << "\n";
  write_file_bytes(dir / "vectors.tsv", vec.str());
  write_file_bytes(dir / "metadata.tsv", meta.str());
}

SymmetricEigen symmetric_eigen(const std::vector<std::vector<double>>& input) {
  const std::size_t n = input.size();
  for (const auto& row : input) {
    if (row.size() != n) throw std::invalid_argument("symmetric_eigen: matrix not square");
  }
  std::vector<std::vector<double>> a = input;
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      scale += a[i][i] * a[i][i];
      for (std::size_t j = i + 1; j < n; ++j) off += a[i][j] * a[i][j];
    }
    if (off <= 1e-30 * std::max(scale, 1e-300)) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a[p][q] == 0.0) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a[x][x] > a[y][y]; });
  SymmetricEigen out;
  for (std::size_t i : order) {
    out.values.push_back(a[i][i]);
    std::vector<double> col(n);
    for (std::size_t k = 0; k < n; ++k) col[k] = v[k][i];
    out.vectors.push_back(std::move(col));
  }
  return out;
}

PcaResult pca_project(const std::vector<std::vector<double>>& x, std::size_t k) {
  if (k == 0) throw std::invalid_argument("pca_project: k must be >= 1");
  const std::size_t N = x.size();
  if (N < k) {
    throw std::invalid_argument("pca_project: " + std::to_string(N) + " rows < k = " +
                                std::to_string(k));
  }
  const std::size_t F = x[0].size();
  if (F == 0) throw std::invalid_argument("pca_project: zero-width vectors");
  for (const auto& row : x) {
    if (row.size() != F) throw std::invalid_argument("pca_project: ragged input");
  }
  std::vector<double> mean(F, 0.0);
  for (const auto& row : x) {
    for (std::size_t f = 0; f < F; ++f) mean[f] += row[f];
  }
  for (auto& m : mean) m /= static_cast<double>(N);
  std::vector<std::vector<double>> centered(N, std::vector<double>(F));
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t f = 0; f < F; ++f) centered[n][f] = x[n][f] - mean[f];
  }
  std::vector<std::vector<double>> cov(F, std::vector<double>(F, 0.0));
  const double denom = static_cast<double>(N > 1 ? N - 1 : 1);
  for (std::size_t i = 0; i < F; ++i) {
    for (std::size_t j = i; j < F; ++j) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) s += centered[n][i] * centered[n][j];
      cov[i][j] = cov[j][i] = s / denom;
    }
  }
  const SymmetricEigen eig = symmetric_eigen(cov);
  double trace = 0.0;
  for (double v : eig.values) trace += std::max(v, 0.0);

  PcaResult out;
  out.requested = k;
  const double tol = std::max(eig.values.empty() ? 0.0 : eig.values[0], 0.0) * 1e-12 *
                     static_cast<double>(F);
  for (std::size_t i = 0; i < std::min(k, F); ++i) {
    if (!(eig.values[i] > tol) || trace == 0.0) break;
    std::vector<double> axis = eig.vectors[i];
    std::size_t big = 0;
    for (std::size_t f = 1; f < F; ++f) {
      if (std::abs(axis[f]) > std::abs(axis[big])) big = f;
    }
    if (axis[big] < 0) {
      for (auto& a : axis) a = -a;
    }
    out.axes.push_back(std::move(axis));
    out.eigenvalues.push_back(eig.values[i]);
    out.explained_variance_ratio.push_back(eig.values[i] / trace);
  }
  out.rank_deficient = out.axes.size() < k;
  out.coordinates.assign(N, std::vector<double>(out.axes.size(), 0.0));
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t a = 0; a < out.axes.size(); ++a) {
      double s = 0.0;
      for (std::size_t f = 0; f < F; ++f) s += centered[n][f] * out.axes[a][f];
      out.coordinates[n][a] = s;
    }
  }
  return out;
}

}  // namespace xray
