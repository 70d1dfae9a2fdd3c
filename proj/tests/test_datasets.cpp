#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "support.hpp"
#include "xray/dataset.hpp"
#include "xray/synthetic.hpp"

using namespace xray;

namespace {

const char* kHeader = "image_path,dataset_id,patient_id,label,view,split\n";

void add_rows(std::ostringstream& os, const std::string& ds, const std::string& label, std::size_t n,
              bool with_patient) {
  static std::size_t serial = 0;
  for (std::size_t i = 0; i < n; ++i, ++serial) {
    os << ds << "/" << serial << ".png," << ds << ",";
    if (with_patient) os << "pt" << serial;
    os << "," << label << ",PA,\n";
  }
}

// Per-dataset class counts of the three public sources, with their raw labels.
std::string source_counts_csv() {
  std::ostringstream os;
  os << kHeader;
  add_rows(os, "chest_xray", "Normal", 1150, false);
  add_rows(os, "chest_xray", "Pneumonia", 3100, false);
  add_rows(os, "rsna", "no_finding", 8851, false);
  add_rows(os, "rsna", "lung_opacity", 6012, false);
  add_rows(os, "cohen", "no_finding", 4, true);
  add_rows(os, "cohen", "lung_opacity", 82, true);
  add_rows(os, "cohen", "covid19", 394, true);
  return os.str();
}

Manifest patients_manifest(std::size_t patients, std::size_t per_patient, std::size_t classes = 3) {
  std::ostringstream os;
  os << kHeader;
  const char* labels[3] = {"no_finding", "lung_opacity", "covid19"};
  for (std::size_t p = 0; p < patients; ++p)
    for (std::size_t k = 0; k < per_patient; ++k)
      os << "img_" << p << "_" << k << ".png,local,p" << p << "," << labels[p % classes] << ",,\n";
  return parse_manifest(os.str());
}

std::map<std::string, std::set<Split>> splits_per_patient(const Manifest& m, const SplitAssignment& s) {
  std::map<std::string, std::set<Split>> out;
  for (std::size_t i = 0; i < m.records.size(); ++i) out[*m.records[i].patient_id].insert(s.assignment[i]);
  return out;
}

}  // namespace

TEST_SUITE("manifest") {
  TEST_CASE("3-row CSV") {
    const Manifest m = parse_manifest(std::string(kHeader) +
                                      "a.png,cohen,p1,covid19,PA,\n"
                                      "b.png,rsna,,lung_opacity,AP,train\n"
                                      "\"c,d.png\",chest_xray,,no_finding,,\n");
    CHECK(m.size() == 3);
    CHECK(m.task == Task::classifier);
    CHECK(m.records[0].patient_id == std::optional<std::string>("p1"));
    CHECK(m.records[1].view == View::AP);
    CHECK(m.records[1].split == Split::train);
    CHECK(m.records[2].image_path == "c,d.png");
    CHECK_FALSE(m.records[2].patient_id.has_value());
    CHECK_FALSE(m.records[2].view.has_value());
  }

  TEST_CASE("unmapped label names the row") {
    try {
      parse_manifest(std::string(kHeader) + "a.png,rsna,,no_finding,,\nb.png,rsna,,COVID,,\n");
      FAIL("expected ManifestError");
    } catch (const ManifestError& e) {
      REQUIRE(e.issues().size() == 1);
      CHECK(e.issues()[0].find("row 3") != std::string::npos);
      CHECK(e.issues()[0].find("COVID") != std::string::npos);
    }
  }

  TEST_CASE("itemized errors: duplicate path, missing patient id, unknown dataset") {
    try {
      parse_manifest(std::string(kHeader) +
                     "a.png,rsna,,no_finding,,\n"
                     "a.png,rsna,,no_finding,,\n"
                     "b.png,figure1,,covid19,,\n"
                     "c.png,nih,,covid19,,\n");
      FAIL("expected ManifestError");
    } catch (const ManifestError& e) {
      CHECK(e.issues().size() == 3);
      std::string all;
      for (const auto& s : e.issues()) all += s + "\n";
      CHECK(all.find("duplicate") != std::string::npos);
      CHECK(all.find("patient_id") != std::string::npos);
      CHECK(all.find("nih") != std::string::npos);
    }
  }

  TEST_CASE("missing required column") {
    CHECK_THROWS_AS(parse_manifest("image_path,label\na.png,valid\n"), ManifestError);
  }

  TEST_CASE("source counts after harmonization") {
    const Manifest raw = parse_manifest(source_counts_csv());
    CHECK(raw.size() == 19593);
    const Manifest m = harmonize_labels(raw);
    const auto counts = m.class_counts();
    CHECK(counts.size() == 3);
    CHECK(counts.at("no_finding") == 1150 + 8851 + 4);
    CHECK(counts.at("lung_opacity") == 3100 + 6012 + 82);
    CHECK(counts.at("covid19") == 394);

    const auto s1 = stage1_relabel(m).class_counts();
    CHECK(s1.size() == 2);
    CHECK(s1.at("no_finding") == 10005);
    CHECK(s1.at("lung_opacity") == 9194 + 394);
  }

  TEST_CASE("filter task is inferred and foreign labels rejected") {
    const Manifest f = parse_manifest(std::string(kHeader) + "a.png,local,,valid,,\nb.png,local,,nonvalid,,\n");
    CHECK(f.task == Task::filter);
    CHECK_THROWS_AS(parse_manifest(std::string(kHeader) + "a.png,local,,valid,,\nb.png,local,,covid19,,\n"),
                    ManifestError);
  }

  TEST_CASE("format and parse round trip") {
    const Manifest m = parse_manifest(std::string(kHeader) +
                                      "a.png,cohen,p1,covid19,PA,test\n"
                                      "\"q\"\"uote.png\",rsna,,lung_opacity,,\n");
    const Manifest back = parse_manifest(format_manifest(m));
    REQUIRE(back.size() == 2);
    CHECK(back.records[1].image_path == "q\"uote.png");
    CHECK(back.records[0].split == Split::test);
    CHECK(format_manifest(back) == format_manifest(m));
  }

  TEST_CASE("label parsing") {
    CHECK(parse_label("Normal") == Label::normal);
    CHECK(parse_label("Viral_Pneumonia") == Label::pneumonia);
    CHECK(parse_label("COVID-19") == std::nullopt);
    CHECK(parse_label("COVID") == std::nullopt);
    CHECK(parse_label("covid19") == Label::covid19);
  }
}

TEST_SUITE("harmonize") {
  TEST_CASE("Normal becomes no_finding, Pneumonia lung_opacity, idempotent") {
    const Manifest raw = parse_manifest(std::string(kHeader) +
                                        "a.png,chest_xray,,Normal,,\n"
                                        "b.png,chest_xray,,Pneumonia,,\n"
                                        "c.png,cohen,p,covid19,,\n");
    const Manifest h = harmonize_labels(raw);
    CHECK(h.records[0].label == Label::no_finding);
    CHECK(h.records[1].label == Label::lung_opacity);
    CHECK(h.records[2].label == Label::covid19);
    CHECK(format_manifest(harmonize_labels(h)) == format_manifest(h));
    CHECK(h.size() == raw.size());
    CHECK(raw.records[0].label == Label::normal);  // input untouched
  }

  TEST_CASE("stage1 relabel") {
    const Manifest m = harmonize_labels(parse_manifest(source_counts_csv()));
    const Manifest s1 = stage1_relabel(m);
    CHECK(s1.size() == m.size());
    CHECK(format_manifest(stage1_relabel(s1)) == format_manifest(s1));
    CHECK(m.class_counts().at("covid19") == 394);  // original untouched
    const Manifest none = parse_manifest(std::string(kHeader) + "a.png,rsna,,no_finding,,\n");
    CHECK(format_manifest(stage1_relabel(none)) == format_manifest(none));
  }
}

TEST_SUITE("split") {
  TEST_CASE("10 patients split 8/1/1") {
    const Manifest m = patients_manifest(10, 1);
    const auto s = split(m, SplitStrategy::by_patient, {}, 3);
    CHECK(s.indices(Split::train).size() == 8);
    CHECK(s.indices(Split::validation).size() == 1);
    CHECK(s.indices(Split::test).size() == 1);
  }

  TEST_CASE("patients stay atomic") {
    const Manifest m = patients_manifest(30, 5);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto s = split(m, SplitStrategy::by_patient, {}, seed);
      for (const auto& [pid, sp] : splits_per_patient(m, s)) CHECK(sp.size() == 1);
      std::size_t total = 0;
      for (Split w : {Split::train, Split::validation, Split::test}) total += s.indices(w).size();
      CHECK(total == m.size());
    }
  }

  TEST_CASE("deterministic per seed, different across seeds") {
    const Manifest m = patients_manifest(100, 1);
    const auto a = split(m, SplitStrategy::by_patient, {}, 42);
    const auto b = split(m, SplitStrategy::by_patient, {}, 42);
    const auto c = split(m, SplitStrategy::by_patient, {}, 43);
    CHECK(a.assignment == b.assignment);
    CHECK(a.assignment != c.assignment);
    const auto r1 = split(m, SplitStrategy::random, {}, 42);
    CHECK(r1.assignment == split(m, SplitStrategy::random, {}, 42).assignment);
  }

  TEST_CASE("random strategy cuts on sample counts") {
    const Manifest m = patients_manifest(7, 3);  // 21 samples
    const auto s = split(m, SplitStrategy::random, {}, 1);
    CHECK(s.indices(Split::validation).size() == 2);
    CHECK(s.indices(Split::test).size() == 2);
    CHECK(s.indices(Split::train).size() == 17);
  }

  TEST_CASE("predefined reads the split column") {
    const Manifest m = parse_manifest(std::string(kHeader) +
                                      "a.png,chest_xray,,Normal,,train\n"
                                      "b.png,chest_xray,,Normal,,test\n"
                                      "c.png,chest_xray,,Pneumonia,,validation\n");
    const auto s = split(m, SplitStrategy::predefined);
    CHECK(s.assignment == std::vector<Split>{Split::train, Split::test, Split::validation});
    CHECK(default_strategy(m) == SplitStrategy::predefined);
    const Manifest partial = parse_manifest(std::string(kHeader) + "a.png,rsna,,no_finding,,train\nb.png,rsna,,no_finding,,\n");
    CHECK_THROWS_AS(split(partial, SplitStrategy::predefined), ManifestError);
  }

  TEST_CASE("by_patient requires patient ids") {
    const Manifest m = parse_manifest(std::string(kHeader) + "a.png,rsna,,no_finding,,\n");
    CHECK_THROWS_AS(split(m, SplitStrategy::by_patient), ManifestError);
    CHECK(default_strategy(m) == SplitStrategy::random);
  }

  TEST_CASE("empty class in a split is a warning, not an error") {
    // 3 covid patients among 10: validation holds one patient, so at least two classes miss it
    const Manifest m = patients_manifest(10, 1);
    const auto s = split(m, SplitStrategy::by_patient, {}, 5);
    CHECK_FALSE(s.warnings.empty());
  }
}

TEST_SUITE("filter negatives") {
  Manifest valid_manifest(std::size_t n) {
    std::ostringstream os;
    os << kHeader;
    for (std::size_t i = 0; i < n; ++i) os << "v" << i << ".png,local,p" << i << ",valid,PA,\n";
    return parse_manifest(os.str());
  }

  TEST_CASE("fraction 0 leaves the manifest unchanged") {
    const Manifest m = valid_manifest(10);
    CHECK(format_manifest(synthesize_filter_negatives(m, 0.0, 1)) == format_manifest(m));
  }

  TEST_CASE("fraction 1 on 100 sources gives 300 derived records") {
    const Manifest m = valid_manifest(100);
    const Manifest out = synthesize_filter_negatives(m, 1.0, 2);
    CHECK(out.size() == 400);
    std::size_t derived = 0;
    std::map<std::string, std::set<int>> turns;
    for (const auto& r : out.records) {
      if (r.quarter_turns == 0) continue;
      ++derived;
      CHECK(r.label == Label::nonvalid);
      turns[r.image_path].insert(r.quarter_turns);
    }
    CHECK(derived == 300);
    for (const auto& [path, t] : turns) CHECK(t == std::set<int>{1, 2, 3});
  }

  TEST_CASE("same seed same selection; fraction above 1 rejected") {
    const Manifest m = valid_manifest(50);
    CHECK(format_manifest(synthesize_filter_negatives(m, 0.3, 9)) ==
          format_manifest(synthesize_filter_negatives(m, 0.3, 9)));
    CHECK(synthesize_filter_negatives(m, 0.3, 9).size() == 50 + 3 * 15);
    CHECK_THROWS(synthesize_filter_negatives(m, 1.5, 9));
  }

  TEST_CASE("derived records load as quarter-turned images") {
    const auto dir = testing::scratch_dir("negatives");
    const Manifest m = write_synthetic_corpus(dir, Task::filter, {3}, 16, 7);
    Manifest only_valid = m;
    only_valid.records.erase(std::remove_if(only_valid.records.begin(), only_valid.records.end(),
                                            [](const SampleRecord& r) { return r.label != Label::valid; }),
                             only_valid.records.end());
    const Manifest out = synthesize_filter_negatives(only_valid, 1.0, 1);
    for (const auto& r : out.records) {
      if (r.quarter_turns == 0) continue;
      SampleRecord src = r;
      src.quarter_turns = 0;
      CHECK(load_record_image(out, r) == rotate_quarter(load_record_image(out, src), r.quarter_turns));
    }
    // derived rows survive a CSV round trip
    const Manifest back = parse_manifest(format_manifest(out));
    CHECK(back.size() == out.size());
    std::filesystem::remove_all(dir);
  }
}

TEST_SUITE("sampling") {
  std::vector<std::size_t> labels_of(std::vector<std::size_t> sizes) {
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < sizes.size(); ++c) labels.insert(labels.end(), sizes[c], c);
    return labels;
  }

  TEST_CASE("balanced classes give a permutation") {
    const auto labels = labels_of({100, 100, 100});
    const auto plan = make_sampling_plan(labels, 3, SamplingTarget::equalized, 4);
    auto idx = plan.indices;
    std::sort(idx.begin(), idx.end());
    for (std::size_t i = 0; i < idx.size(); ++i) CHECK(idx[i] == i);
  }

  TEST_CASE("(90,9,1) equalized at epoch length 270") {
    const auto labels = labels_of({90, 9, 1});
    std::vector<double> mean(3, 0.0);
    double covid_repeat = 0;
    const int epochs = 1000;
    for (int e = 0; e < epochs; ++e) {
      const auto plan = make_sampling_plan(labels, 3, SamplingTarget::equalized, e, 270);
      REQUIRE(plan.indices.size() == 270);
      std::vector<std::size_t> draws(3, 0);
      for (std::size_t i : plan.indices) ++draws[labels[i]];
      for (int c = 0; c < 3; ++c) mean[c] += static_cast<double>(draws[c]) / epochs;
      covid_repeat += static_cast<double>(std::count(plan.indices.begin(), plan.indices.end(), 99)) / epochs;
    }
    for (int c = 0; c < 3; ++c) CHECK(std::abs(mean[c] - 90.0) <= 0.05 * 90.0);
    CHECK(std::abs(covid_repeat - 90.0) <= 0.05 * 90.0);
  }

  TEST_CASE("natural plan visits every index once") {
    const auto labels = labels_of({5, 17, 2});
    const auto plan = make_sampling_plan(labels, 3, SamplingTarget::natural, 8);
    auto idx = plan.indices;
    std::sort(idx.begin(), idx.end());
    CHECK(idx.size() == labels.size());
    for (std::size_t i = 0; i < idx.size(); ++i) CHECK(idx[i] == i);
  }

  TEST_CASE("empty class under equalized is an error") {
    CHECK_THROWS(make_sampling_plan(labels_of({4, 0, 3}), 3, SamplingTarget::equalized, 1));
  }

  TEST_CASE("plans are pure functions of the seed") {
    const auto labels = labels_of({30, 6, 2});
    CHECK(make_sampling_plan(labels, 3, SamplingTarget::equalized, 77).indices ==
          make_sampling_plan(labels, 3, SamplingTarget::equalized, 77).indices);
  }
}

TEST_SUITE("datasets") {
  TEST_CASE("manifest dataset maps labels through class names") {
    const auto dir = testing::scratch_dir("mds");
    const Manifest m = write_synthetic_corpus(dir, Task::classifier, {2, 2, 2}, 16, 3);
    const auto names = std::vector<std::string>{"no_finding", "lung_opacity", "covid19"};
    std::vector<std::size_t> all(m.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const ManifestDataset ds(m, all, names);
    CHECK(ds.size() == 6);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      CHECK(names[ds.label(i)] == to_string(m.records[i].label));
      CHECK(ds.image(i).height == 16);
    }
    CHECK_THROWS(ManifestDataset(m, all, {"no_finding", "lung_opacity"}));
    std::filesystem::remove_all(dir);
  }
}
