#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <fstream>
#include <sstream>

#include "support.hpp"
#include "xray/evaluation.hpp"
#include "xray/synthetic.hpp"

using namespace xray;

namespace {

const std::vector<std::vector<std::uint64_t>> kSummedMatrix{
    {53821, 3552, 763}, {3116, 46620, 1380}, {0, 356, 2712}};

using Rows = std::vector<std::vector<double>>;

Eigen::MatrixXd to_eigen(const Rows& r) {
  Eigen::MatrixXd m(r.size(), r[0].size());
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t j = 0; j < r[0].size(); ++j) m(i, j) = r[i][j];
  return m;
}

// Largest principal angle between the row spaces of A and B (both orthonormal rows).
double max_principal_angle(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  const Eigen::MatrixXd residual = B.transpose() - A.transpose() * (A * B.transpose());
  const double s = Eigen::JacobiSVD<Eigen::MatrixXd>(residual).singularValues()(0);
  return std::asin(std::min(1.0, s));
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("confusion matrix") {
  TEST_CASE("perfect classifier is diagonal") {
    const std::vector<std::size_t> y{0, 1, 2, 2, 1, 0, 0};
    const auto m = confusion_matrix(y, y, 3);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t p = 0; p < 3; ++p) CHECK((m.at(a, p) > 0) == (a == p));
    CHECK(m.at(0, 0) == 3);
  }

  TEST_CASE("empty input gives a zero matrix") {
    const auto m = confusion_matrix({}, {}, 3);
    CHECK(m.total() == 0);
    CHECK(m.counts.size() == 9);
  }

  TEST_CASE("six hand-listed pairs") {
    // (actual, predicted): (0,0) (0,1) (1,1) (2,0) (2,2) (2,2)
    const auto m = confusion_matrix({0, 1, 1, 0, 2, 2}, {0, 0, 1, 2, 2, 2}, 3);
    const std::vector<std::uint64_t> hand{1, 1, 0, 0, 1, 0, 1, 0, 2};
    CHECK(m.counts == hand);
    CHECK(m.row_sum(2) == 3);
    CHECK(m.col_sum(0) == 2);
  }

  TEST_CASE("out-of-range and length mismatch") {
    CHECK_THROWS_AS(confusion_matrix({0, 3}, {0, 1}, 3), std::out_of_range);
    CHECK_THROWS(confusion_matrix({0}, {0, 1}, 3));
  }

  TEST_CASE("row sums are actual-class counts") {
    xray::Rng rng(1);
    std::vector<std::size_t> p(200), a(200);
    std::vector<std::uint64_t> counts(4, 0);
    for (std::size_t i = 0; i < 200; ++i) {
      p[i] = rng.below(4);
      a[i] = rng.below(4);
      ++counts[a[i]];
    }
    const auto m = confusion_matrix(p, a, 4);
    for (std::size_t c = 0; c < 4; ++c) CHECK(m.row_sum(c) == counts[c]);
  }
}

TEST_SUITE("sensitivity and specificity") {
  TEST_CASE("large summed matrix") {
    const auto met = sensitivity_specificity(ConfusionMatrix(kSummedMatrix));
    CHECK(std::abs(*met.sensitivity[0] - 0.9258) < 5e-5);
    CHECK(std::abs(*met.sensitivity[1] - 0.9120) < 5e-5);
    CHECK(std::abs(*met.sensitivity[2] - 0.8840) < 5e-5);
    // printed percentages 92.5 / 91.2 / 88.4 within 0.1 pp
    CHECK(std::abs(100 * *met.sensitivity[0] - 92.5) <= 0.1);
    CHECK(std::abs(100 * *met.sensitivity[1] - 91.2) <= 0.1);
    CHECK(std::abs(100 * *met.sensitivity[2] - 88.4) <= 0.1);
    CHECK(*met.specificity[2] == doctest::Approx(107109.0 / 109252.0).epsilon(1e-12));
    CHECK(std::abs(100 * *met.specificity[2] - 98.0) <= 0.1);
  }

  TEST_CASE("identity matrix gives all ones") {
    const auto met = sensitivity_specificity(ConfusionMatrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(*met.sensitivity[c] == 1.0);
      CHECK(*met.specificity[c] == 1.0);
    }
  }

  TEST_CASE("0/0 is undefined, not zero") {
    const auto met = sensitivity_specificity(ConfusionMatrix({{4, 1, 0}, {2, 3, 0}, {0, 0, 0}}));
    CHECK_FALSE(met.sensitivity[2].has_value());
    REQUIRE(met.specificity[2].has_value());
    CHECK(*met.specificity[2] == 1.0);
  }
}

TEST_SUITE("aggregate") {
  TEST_CASE("fifty copies") {
    const ConfusionMatrix m(kSummedMatrix);
    const auto agg = aggregate_runs(std::vector<ConfusionMatrix>(50, m));
    for (std::size_t i = 0; i < 9; ++i) CHECK(agg.summed.counts[i] == 50 * m.counts[i]);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(*agg.sensitivity[c].stddev == doctest::Approx(0.0));
      CHECK(*agg.specificity[c].stddev == doctest::Approx(0.0));
      CHECK(agg.sensitivity[c].defined_runs == 50);
    }
  }

  TEST_CASE("two runs against the two-point formulas") {
    const ConfusionMatrix a({{8, 2}, {1, 9}}), b({{6, 4}, {3, 7}});
    const auto agg = aggregate_runs({a, b});
    // class 0 sensitivity: 0.8 and 0.6
    CHECK(*agg.sensitivity[0].mean == doctest::Approx(0.7));
    CHECK(*agg.sensitivity[0].stddev == doctest::Approx(0.1));  // |x1 - x2| / 2
    // class 0 specificity: 9/10 and 7/10
    CHECK(*agg.specificity[0].mean == doctest::Approx(0.8));
    CHECK(*agg.specificity[0].stddev == doctest::Approx(0.1));
    const auto s = aggregate_runs({a, b}, StdMode::sample);
    CHECK(*s.sensitivity[0].stddev == doctest::Approx(0.2 / std::sqrt(2.0)));
    CHECK(agg.summed == ConfusionMatrix({{14, 6}, {4, 16}}));
    CHECK(*agg.pooled.sensitivity[0] == doctest::Approx(0.7));
  }

  TEST_CASE("single run and run-order invariance") {
    const ConfusionMatrix a({{5, 1, 0}, {2, 7, 1}, {0, 1, 3}}), b({{3, 0, 0}, {0, 4, 0}, {1, 0, 2}});
    const auto one = aggregate_runs({a});
    const auto met = sensitivity_specificity(a);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(*one.sensitivity[c].mean == doctest::Approx(*met.sensitivity[c]));
      CHECK(*one.sensitivity[c].stddev == 0.0);
    }
    CHECK(aggregate_runs({a, b}).summed == aggregate_runs({b, a}).summed);
  }

  TEST_CASE("errors") {
    CHECK_THROWS(aggregate_runs({}));
    CHECK_THROWS(aggregate_runs({ConfusionMatrix(2), ConfusionMatrix(3)}));
  }

  TEST_CASE("report JSON labels both statistics") {
    const auto j = to_json(aggregate_runs({ConfusionMatrix(kSummedMatrix, {"no_finding", "lung_opacity", "covid19"})}));
    CHECK(j.contains("summed_confusion_matrix"));
    CHECK(j.contains("summed_matrix_metrics"));
    CHECK(j.contains("mean_over_runs"));
    CHECK(j["summed_confusion_matrix"]["counts"][2][2] == 2712);
    CHECK(j["mean_over_runs"]["covid19"]["sensitivity"]["std"] == 0.0);
  }
}

TEST_SUITE("embeddings") {
  TEST_CASE("rows, width and determinism") {
    CovidNetConfig cc;
    cc.input_size = 32;
    cc.head_channels = 20;
    const Model m = build_covid_net(cc, 3);
    InMemoryDataset ds;
    xray::Rng rng(4);
    const ImageBuffer img = synth_blob(1, 32, rng);
    ds.add(img, 1, "a");
    ds.add(img, 1, "b");
    ds.add(synth_blob(2, 32, rng), 2, "c");
    const auto e = extract_embeddings(m, ds, covid_class_names(3));
    REQUIRE(e.vectors.size() == 3);
    CHECK(e.vectors[0] == e.vectors[1]);
    CHECK(e.vectors[0].size() == 20);
    CHECK(e.labels == std::vector<std::string>{"lung_opacity", "lung_opacity", "covid19"});
    CHECK(e.ids == std::vector<std::string>{"a", "b", "c"});

    const auto dir = testing::scratch_dir("projector");
    write_projector(dir, e);
    const std::string vec = slurp(dir / "vectors.tsv"), meta = slurp(dir / "metadata.tsv");
    CHECK(std::count(vec.begin(), vec.end(), '\n') == 3);
    CHECK(std::count(meta.begin(), meta.end(), '\n') == 4);
    CHECK(meta.rfind("label\tid\n", 0) == 0);
    const std::string first = vec.substr(0, vec.find('\n'));
    CHECK(std::count(first.begin(), first.end(), '\t') == 19);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("undecodable rows are skipped and logged") {
    const auto dir = testing::scratch_dir("skip");
    Manifest m = write_synthetic_corpus(dir, Task::classifier, {2, 1, 1}, 16, 5);
    write_file_bytes(dir / m.records[1].image_path, "garbage");
    std::vector<std::size_t> all{0, 1, 2, 3};
    const ManifestDataset ds(m, all, covid_class_names(3));
    CovidNetConfig cc;
    cc.input_size = 16;
    cc.stem_pool = 1;
    const auto e = extract_embeddings(build_covid_net(cc, 1), ds, covid_class_names(3));
    CHECK(e.vectors.size() == 3);
    REQUIRE(e.skipped.size() == 1);
    CHECK(e.skipped[0].find(m.records[1].image_path) != std::string::npos);
    std::filesystem::remove_all(dir);
  }
}

TEST_SUITE("pca") {
  TEST_CASE("rank-1 data in 5-D") {
    xray::Rng rng(7);
    const std::vector<double> dir{0.3, -1.2, 0.5, 2.0, 0.1};
    Rows x;
    for (int i = 0; i < 40; ++i) {
      const double t = rng.uniform(-3, 3);
      std::vector<double> row(5);
      for (int j = 0; j < 5; ++j) row[j] = 1.0 + t * dir[j];
      x.push_back(row);
    }
    const auto r = pca_project(x, 3);
    CHECK(r.explained_variance_ratio[0] >= 0.999);
    CHECK(r.rank_deficient);
    CHECK(r.axes.size() < 3);
  }

  TEST_CASE("projected columns are uncorrelated") {
    xray::Rng rng(8);
    Rows x(60, std::vector<double>(6));
    for (auto& row : x)
      for (std::size_t j = 0; j < 6; ++j) row[j] = rng.normal() * (1.0 + j) + (j ? row[j - 1] : 0.0);
    const auto r = pca_project(x, 3);
    REQUIRE(r.coordinates[0].size() == 3);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = a + 1; b < 3; ++b) {
        double sab = 0, saa = 0, sbb = 0;
        for (const auto& c : r.coordinates) {
          sab += c[a] * c[b];
          saa += c[a] * c[a];
          sbb += c[b] * c[b];
        }
        CHECK(std::abs(sab / std::sqrt(saa * sbb)) < 1e-6);
      }
    for (std::size_t k = 1; k < 3; ++k) CHECK(r.eigenvalues[k] <= r.eigenvalues[k - 1]);
  }

  TEST_CASE("random 50x8 against a dense eigensolver") {
    xray::Rng rng(9);
    Rows x(50, std::vector<double>(8));
    for (auto& row : x)
      for (std::size_t j = 0; j < 8; ++j) row[j] = rng.uniform(-1, 1) * (8.0 - j);
    const auto r = pca_project(x, 3);

    const Eigen::MatrixXd X = to_eigen(x);
    const Eigen::MatrixXd Xc = X.rowwise() - X.colwise().mean();
    const Eigen::MatrixXd cov = Xc.transpose() * Xc / (X.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    Eigen::MatrixXd top(3, 8);
    for (int k = 0; k < 3; ++k) top.row(k) = es.eigenvectors().col(7 - k).transpose();
    CHECK(max_principal_angle(to_eigen(r.axes), top) < 1e-4);
    for (int k = 0; k < 3; ++k) CHECK(r.eigenvalues[k] == doctest::Approx(es.eigenvalues()(7 - k)).epsilon(1e-9));
    CHECK(r.explained_variance_ratio[0] == doctest::Approx(es.eigenvalues()(7) / es.eigenvalues().sum()).epsilon(1e-9));

    // sign convention: largest-magnitude loading is positive
    for (const auto& axis : r.axes) {
      const auto it = std::max_element(axis.begin(), axis.end(),
                                       [](double a, double b) { return std::abs(a) < std::abs(b); });
      CHECK(*it > 0);
    }
  }

  TEST_CASE("translation invariance") {
    xray::Rng rng(10);
    Rows x(20, std::vector<double>(4));
    for (auto& row : x)
      for (auto& v : row) v = rng.normal();
    Rows shifted = x;
    for (auto& row : shifted)
      for (std::size_t j = 0; j < 4; ++j) row[j] += 100.0 * (j + 1);
    const auto a = pca_project(x, 2), b = pca_project(shifted, 2);
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t k = 0; k < 2; ++k) CHECK(std::abs(a.coordinates[i][k] - b.coordinates[i][k]) < 1e-8);
  }

  TEST_CASE("fewer samples than components is an error") {
    CHECK_THROWS(pca_project(Rows{{1, 2, 3}, {4, 5, 6}}, 3));
  }

  TEST_CASE("Jacobi eigen-decomposition matches Eigen") {
    xray::Rng rng(11);
    Rows a(6, std::vector<double>(6));
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j <= i; ++j) a[i][j] = a[j][i] = rng.uniform(-2, 2);
    const auto se = symmetric_eigen(a);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(a));
    for (int k = 0; k < 6; ++k) CHECK(se.values[k] == doctest::Approx(es.eigenvalues()(5 - k)).epsilon(1e-10));
    const Eigen::MatrixXd A = to_eigen(a);
    for (int k = 0; k < 6; ++k) {
      Eigen::VectorXd v(6);
      for (int j = 0; j < 6; ++j) v(j) = se.vectors[k][j];
      CHECK((A * v - se.values[k] * v).norm() < 1e-9);
    }
  }
}
