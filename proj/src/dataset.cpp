#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "xray/checkpoint.hpp"
#include "xray/dataset.hpp"
#include "xray/rng.hpp"

namespace xray {

namespace {

constexpr const char* kHeader[] = {"image_path", "dataset_id", "patient_id",
                                   "label",      "view",       "split"};

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// RFC 4180-ish: quoted fields may contain commas, doubled quotes and newlines.
std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (c != '\r') {
      field += c;
      any = true;
    }
  }
  if (quoted) throw ManifestError({"unterminated quoted field"});
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

bool is_filter_label(Label l) { return l == Label::valid || l == Label::nonvalid; }

// Splits "path#rot=k" into path and k.
std::pair<std::string, int> split_rotation(const std::string& path) {
  const auto pos = path.rfind("#rot=");
  if (pos == std::string::npos) return {path, 0};
  const std::string tail = path.substr(pos + 5);
  if (tail.size() != 1 || tail[0] < '1' || tail[0] > '3') return {path, -1};
  return {path.substr(0, pos), tail[0] - '0'};
}

std::size_t units_for(double ratio, std::size_t units) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(units) + 1e-9));
}

}  // namespace

std::string to_string(DatasetId v) {
  switch (v) {
    case DatasetId::cohen: return "cohen";
    case DatasetId::figure1: return "figure1";
    case DatasetId::chest_xray: return "chest_xray";
    case DatasetId::rsna: return "rsna";
    case DatasetId::local: return "local";
  }
  return "?";
}

std::string to_string(Label v) {
  switch (v) {
    case Label::no_finding: return "no_finding";
    case Label::lung_opacity: return "lung_opacity";
    case Label::covid19: return "covid19";
    case Label::valid: return "valid";
    case Label::nonvalid: return "nonvalid";
    case Label::normal: return "normal";
    case Label::pneumonia: return "pneumonia";
  }
  return "?";
}

std::string to_string(View v) {
  switch (v) {
    case View::AP: return "AP";
    case View::PA: return "PA";
    case View::other: return "other";
  }
  return "?";
}

std::string to_string(Split v) {
  switch (v) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

std::string to_string(Task v) { return v == Task::filter ? "filter" : "classifier"; }

std::optional<DatasetId> parse_dataset_id(std::string_view s) {
  const std::string l = lower(trim(s));
  if (l == "cohen") return DatasetId::cohen;
  if (l == "figure1") return DatasetId::figure1;
  if (l == "chest_xray") return DatasetId::chest_xray;
  if (l == "rsna") return DatasetId::rsna;
  if (l == "local") return DatasetId::local;
  return std::nullopt;
}

std::optional<Label> parse_label(std::string_view s) {
  const std::string l = lower(trim(s));
  if (l == "no_finding") return Label::no_finding;
  if (l == "lung_opacity") return Label::lung_opacity;
  if (l == "covid19") return Label::covid19;
  if (l == "valid") return Label::valid;
  if (l == "nonvalid") return Label::nonvalid;
  if (l == "normal") return Label::normal;
  if (l == "pneumonia" || l == "viral_pneumonia" || l == "bacterial_pneumonia" ||
      l == "pneumonia_viral" || l == "pneumonia_bacterial" || l == "pneumonia (viral)" ||
      l == "pneumonia (bacterial)") {
    return Label::pneumonia;
  }
  return std::nullopt;
}

std::optional<View> parse_view(std::string_view s) {
  const std::string l = lower(trim(s));
  if (l == "ap") return View::AP;
  if (l == "pa") return View::PA;
  if (l == "other") return View::other;
  return std::nullopt;
}

std::optional<Split> parse_split(std::string_view s) {
  const std::string l = lower(trim(s));
  if (l == "train") return Split::train;
  if (l == "validation" || l == "val") return Split::validation;
  if (l == "test") return Split::test;
  return std::nullopt;
}

std::string SampleRecord::key() const {
  if (quarter_turns == 0) return image_path;
  return image_path + "#rot=" + std::to_string(quarter_turns);
}

std::map<std::string, std::size_t> Manifest::class_counts() const {
  std::map<std::string, std::size_t> counts;
  for (const auto& r : records) ++counts[to_string(r.label)];
  return counts;
}

static std::string join_issues(const std::vector<std::string>& issues) {
  std::string msg = "manifest validation failed:";
  for (const auto& i : issues) msg += "\n  " + i;
  return msg;
}

ManifestError::ManifestError(std::vector<std::string> issues)
    : std::runtime_error(join_issues(issues)), issues_(std::move(issues)) {}

Manifest parse_manifest(std::string_view csv, std::optional<Task> task) {
  if (csv.substr(0, 3) == "\xEF\xBB\xBF") csv.remove_prefix(3);
  const auto rows = parse_csv(csv);
  if (rows.empty()) throw ManifestError({"empty manifest: missing header"});

  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < rows[0].size(); ++i) col[lower(trim(rows[0][i]))] = i;
  std::vector<std::string> issues;
  for (const char* h : {"image_path", "dataset_id", "label"}) {
    if (!col.count(h)) issues.push_back(std::string("header: missing column '") + h + "'");
  }
  if (!issues.empty()) throw ManifestError(issues);

  auto get = [&](const std::vector<std::string>& row, const char* name) -> std::string {
    const auto it = col.find(name);
    if (it == col.end() || it->second >= row.size()) return {};
    return trim(row[it->second]);
  };

  Manifest m;
  std::set<std::string> keys;
  // Row numbers are 1-based file lines, the header being row 1.
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const std::string where = "row " + std::to_string(r + 1);
    if (row.size() == 1 && trim(row[0]).empty()) continue;
    SampleRecord rec;
    const auto [path, turns] = split_rotation(get(row, "image_path"));
    rec.image_path = path;
    if (turns < 0) {
      issues.push_back(where + ": bad rotation suffix in '" + get(row, "image_path") + "'");
      continue;
    }
    rec.quarter_turns = turns;
    if (rec.image_path.empty()) issues.push_back(where + ": empty image_path");

    const std::string ds = get(row, "dataset_id");
    if (auto d = parse_dataset_id(ds)) {
      rec.dataset_id = *d;
    } else {
      issues.push_back(where + ": unknown dataset_id '" + ds + "'");
    }
    const std::string lab = get(row, "label");
    if (auto l = parse_label(lab)) {
      rec.label = *l;
    } else {
      issues.push_back(where + ": unknown label '" + lab + "'");
    }
    const std::string pid = get(row, "patient_id");
    if (!pid.empty()) rec.patient_id = pid;
    if (!rec.patient_id &&
        (rec.dataset_id == DatasetId::cohen || rec.dataset_id == DatasetId::figure1)) {
      issues.push_back(where + ": missing patient_id required for dataset " +
                       to_string(rec.dataset_id));
    }
    const std::string view = get(row, "view");
    if (!view.empty()) {
      if (auto v = parse_view(view)) {
        rec.view = *v;
      } else {
        issues.push_back(where + ": unknown view '" + view + "'");
      }
    }
    const std::string sp = get(row, "split");
    if (!sp.empty()) {
      if (auto s = parse_split(sp)) {
        rec.split = *s;
      } else {
        issues.push_back(where + ": unknown split '" + sp + "'");
      }
    }
    if (!rec.image_path.empty() && !keys.insert(rec.key()).second) {
      issues.push_back(where + ": duplicate path '" + rec.key() + "'");
    }
    m.records.push_back(std::move(rec));
  }

  if (issues.empty()) {
    if (!task) {
      const bool all_filter = std::all_of(m.records.begin(), m.records.end(),
                                          [](const auto& r) { return is_filter_label(r.label); });
      task = (!m.records.empty() && all_filter) ? Task::filter : Task::classifier;
    }
    m.task = *task;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
      if (is_filter_label(m.records[i].label) != (m.task == Task::filter)) {
        issues.push_back("record " + std::to_string(i + 1) + " ('" + m.records[i].key() +
                         "'): label " + to_string(m.records[i].label) + " not in the " +
                         to_string(m.task) + " label set");
      }
    }
  }
  if (!issues.empty()) throw ManifestError(issues);
  return m;
}

Manifest load_manifest(const std::filesystem::path& path, std::optional<Task> task) {
  if (!std::filesystem::exists(path)) {
    throw ManifestError({"manifest not found: " + path.string()});
  }
  Manifest m = parse_manifest(read_file_bytes(path), task);
  m.base_dir = path.parent_path();
  return m;
}

std::string format_manifest(const Manifest& manifest) {
  std::ostringstream out;
  for (std::size_t i = 0; i < 6; ++i) out << (i ? "," : "") << kHeader[i];
  out << "\n";
  for (const auto& r : manifest.records) {
    out << csv_field(r.key()) << ',' << to_string(r.dataset_id) << ','
        << csv_field(r.patient_id.value_or("")) << ',' << to_string(r.label) << ','
        << (r.view ? to_string(*r.view) : "") << ',' << (r.split ? to_string(*r.split) : "")
        << "\n";
  }
  return out.str();
}

void save_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  write_file_bytes(path, format_manifest(manifest));
}

std::filesystem::path resolve_image_path(const Manifest& manifest, const SampleRecord& record) {
  std::filesystem::path p(record.image_path);
  if (p.is_relative() && !manifest.base_dir.empty()) p = manifest.base_dir / p;
  return p;
}

ImageBuffer load_record_image(const Manifest& manifest, const SampleRecord& record) {
  const auto path = resolve_image_path(manifest, record);
  ImageBuffer img = decode_image(read_file_bytes(path));
  return rotate_quarter(img, record.quarter_turns);
}

std::vector<std::size_t> SplitAssignment::indices(Split which) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] == which) out.push_back(i);
  }
  return out;
}

SplitStrategy default_strategy(const Manifest& manifest) {
  const auto& rs = manifest.records;
  if (!rs.empty() && std::all_of(rs.begin(), rs.end(), [](const auto& r) { return r.split; })) {
    return SplitStrategy::predefined;
  }
  if (!rs.empty() &&
      std::all_of(rs.begin(), rs.end(), [](const auto& r) { return r.patient_id; })) {
    return SplitStrategy::by_patient;
  }
  return SplitStrategy::random;
}

SplitAssignment split(const Manifest& manifest, SplitStrategy strategy, const SplitRatios& ratios,
                      std::uint64_t seed) {
  for (double r : {ratios.train, ratios.validation, ratios.test}) {
    if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("split: ratio outside [0,1]");
  }
  if (std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-6) {
    throw std::invalid_argument("split: ratios must sum to 1");
  }
  SplitAssignment out;
  out.seed = seed;
  out.strategy = strategy;
  const auto& rs = manifest.records;
  out.assignment.assign(rs.size(), Split::train);

  // unit id per record: patient for by_patient, the record itself otherwise
  std::vector<std::size_t> unit_of(rs.size());
  std::size_t num_units = 0;
  if (strategy == SplitStrategy::predefined) {
    std::vector<std::string> missing;
    for (std::size_t i = 0; i < rs.size(); ++i) {
      if (!rs[i].split) missing.push_back("record " + std::to_string(i + 1) + " ('" +
                                          rs[i].key() + "'): no split column value");
      else out.assignment[i] = *rs[i].split;
    }
    if (!missing.empty()) throw ManifestError(missing);
  } else {
    if (strategy == SplitStrategy::by_patient) {
      std::vector<std::string> missing;
      std::set<std::string> ids;
      for (std::size_t i = 0; i < rs.size(); ++i) {
        if (!rs[i].patient_id) {
          missing.push_back("record " + std::to_string(i + 1) + " ('" + rs[i].key() +
                            "'): by_patient split requires patient_id");
        } else {
          ids.insert(*rs[i].patient_id);
        }
      }
      if (!missing.empty()) throw ManifestError(missing);
      const std::vector<std::string> sorted(ids.begin(), ids.end());
      num_units = sorted.size();
      for (std::size_t i = 0; i < rs.size(); ++i) {
        unit_of[i] = static_cast<std::size_t>(
            std::lower_bound(sorted.begin(), sorted.end(), *rs[i].patient_id) - sorted.begin());
      }
    } else {
      num_units = rs.size();
      std::iota(unit_of.begin(), unit_of.end(), std::size_t{0});
    }
    std::vector<std::size_t> order(num_units);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(order);
    const std::size_t n_val = units_for(ratios.validation, num_units);
    const std::size_t n_test = units_for(ratios.test, num_units);
    const std::size_t n_train = num_units - n_val - n_test;
    std::vector<Split> unit_split(num_units);
    for (std::size_t k = 0; k < num_units; ++k) {
      unit_split[order[k]] = k < n_train           ? Split::train
                             : k < n_train + n_val ? Split::validation
                                                   : Split::test;
    }
    for (std::size_t i = 0; i < rs.size(); ++i) out.assignment[i] = unit_split[unit_of[i]];
  }

  // Classes big enough to appear everywhere but missing from a split.
  std::map<std::string, std::set<std::string>> units_per_class;
  std::map<std::string, std::array<std::size_t, 3>> per_split;
  for (std::size_t i = 0; i < rs.size(); ++i) {
    const std::string cls = to_string(rs[i].label);
    units_per_class[cls].insert(strategy == SplitStrategy::by_patient ? *rs[i].patient_id
                                                                      : rs[i].key());
    ++per_split[cls][static_cast<std::size_t>(out.assignment[i])];
  }
  for (const auto& [cls, units] : units_per_class) {
    if (units.size() < 3) continue;
    for (Split s : {Split::train, Split::validation, Split::test}) {
      if (per_split[cls][static_cast<std::size_t>(s)] == 0) {
        out.warnings.push_back("class " + cls + " (" + std::to_string(units.size()) +
                               " units) has no samples in " + to_string(s));
      }
    }
  }
  return out;
}

Manifest harmonize_labels(const Manifest& manifest) {
  if (manifest.task != Task::classifier) {
    throw std::invalid_argument("harmonize_labels: classifier manifest required");
  }
  Manifest out = manifest;
  for (auto& r : out.records) {
    if (r.label == Label::normal) r.label = Label::no_finding;
    if (r.label == Label::pneumonia) r.label = Label::lung_opacity;
  }
  return out;
}

Manifest stage1_relabel(const Manifest& manifest) {
  if (manifest.task != Task::classifier) {
    throw std::invalid_argument("stage1_relabel: classifier manifest required");
  }
  Manifest out = manifest;
  for (auto& r : out.records) {
    if (r.label == Label::covid19) r.label = Label::lung_opacity;
  }
  return out;
}

Manifest synthesize_filter_negatives(const Manifest& manifest, double fraction,
                                     std::uint64_t seed) {
  if (manifest.task != Task::filter) {
    throw std::invalid_argument("synthesize_filter_negatives: filter manifest required");
  }
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("synthesize_filter_negatives: fraction must lie in [0,1]");
  }
  std::vector<std::size_t> sources;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    if (r.label == Label::valid && r.quarter_turns == 0) sources.push_back(i);
  }
  const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(sources.size())));
  Manifest out = manifest;
  if (n == 0) return out;
  Rng rng(seed);
  rng.shuffle(sources);
  sources.resize(n);
  std::sort(sources.begin(), sources.end());
  std::set<std::string> keys;
  for (const auto& r : manifest.records) keys.insert(r.key());
  for (std::size_t idx : sources) {
    for (int k = 1; k <= 3; ++k) {
      SampleRecord d = manifest.records[idx];
      d.label = Label::nonvalid;
      d.quarter_turns = k;
      if (!keys.insert(d.key()).second) continue;
      out.records.push_back(std::move(d));
    }
  }
  return out;
}

SamplingPlan make_sampling_plan(const std::vector<std::size_t>& labels, std::size_t num_classes,
                                SamplingTarget target, std::uint64_t seed,
                                std::size_t epoch_length) {
  if (num_classes == 0) throw std::invalid_argument("make_sampling_plan: no classes");
  SamplingPlan plan;
  std::vector<std::vector<std::size_t>> members(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw std::invalid_argument("make_sampling_plan: label " + std::to_string(labels[i]) +
                                  " at index " + std::to_string(i) + " >= num_classes");
    }
    members[labels[i]].push_back(i);
  }
  plan.class_sizes.resize(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) plan.class_sizes[c] = members[c].size();
  Rng rng(seed);

  if (target == SamplingTarget::natural) {
    plan.indices.resize(labels.size());
    std::iota(plan.indices.begin(), plan.indices.end(), std::size_t{0});
    rng.shuffle(plan.indices);
    plan.class_draws = plan.class_sizes;
    return plan;
  }

  for (std::size_t c = 0; c < num_classes; ++c) {
    if (members[c].empty()) {
      throw std::invalid_argument("make_sampling_plan: class " + std::to_string(c) +
                                  " is empty under equalized sampling");
    }
  }
  const std::size_t L = epoch_length ? epoch_length : labels.size();
  plan.class_draws.assign(num_classes, L / num_classes);
  std::vector<std::size_t> class_order(num_classes);
  std::iota(class_order.begin(), class_order.end(), std::size_t{0});
  rng.shuffle(class_order);
  for (std::size_t k = 0; k < L % num_classes; ++k) ++plan.class_draws[class_order[k]];

  plan.indices.reserve(L);
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t remaining = plan.class_draws[c];
    std::vector<std::size_t> pass = members[c];
    while (remaining > 0) {
      rng.shuffle(pass);
      const std::size_t take = std::min(remaining, pass.size());
      plan.indices.insert(plan.indices.end(), pass.begin(), pass.begin() + static_cast<std::ptrdiff_t>(take));
      remaining -= take;
    }
  }
  rng.shuffle(plan.indices);
  return plan;
}

std::size_t class_index_of(Label label, const std::vector<std::string>& class_names) {
  const std::string name = to_string(label);
  const auto it = std::find(class_names.begin(), class_names.end(), name);
  if (it == class_names.end()) {
    std::string all;
    for (const auto& c : class_names) all += (all.empty() ? "" : ",") + c;
    throw std::invalid_argument("label " + name + " not among classes [" + all + "]");
  }
  return static_cast<std::size_t>(it - class_names.begin());
}

std::vector<std::size_t> ImageDataset::labels() const {
  std::vector<std::size_t> out(size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = label(i);
  return out;
}

InMemoryDataset::InMemoryDataset(std::vector<ImageBuffer> images, std::vector<std::size_t> labels)
    : images_(std::move(images)), labels_(std::move(labels)) {
  if (images_.size() != labels_.size()) {
    throw std::invalid_argument("InMemoryDataset: " + std::to_string(images_.size()) +
                                " images vs " + std::to_string(labels_.size()) + " labels");
  }
  ids_.resize(images_.size());
}

void InMemoryDataset::add(ImageBuffer img, std::size_t label, std::string id) {
  images_.push_back(std::move(img));
  labels_.push_back(label);
  ids_.push_back(std::move(id));
}

std::string InMemoryDataset::id(std::size_t i) const {
  const auto& s = ids_.at(i);
  return s.empty() ? std::to_string(i) : s;
}

ManifestDataset::ManifestDataset(Manifest manifest, std::vector<std::size_t> indices,
                                 const std::vector<std::string>& class_names)
    : manifest_(std::move(manifest)), indices_(std::move(indices)) {
  labels_.reserve(indices_.size());
  for (std::size_t idx : indices_) {
    labels_.push_back(class_index_of(manifest_.records.at(idx).label, class_names));
  }
}

ImageBuffer ManifestDataset::image(std::size_t i) const {
  const std::size_t idx = indices_.at(i);
  {
    std::lock_guard lock(mutex_);
    if (auto it = cache_.find(idx); it != cache_.end()) return it->second;
  }
  ImageBuffer img = load_record_image(manifest_, manifest_.records[idx]);
  std::lock_guard lock(mutex_);
  cache_.emplace(idx, img);
  return img;
}

std::string ManifestDataset::id(std::size_t i) const {
  return manifest_.records.at(indices_.at(i)).key();
}

}  // namespace xray
