#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <random>
#include <regex>
#include <sstream>

#include "xray/checkpoint.hpp"
#include "xray/rng.hpp"
#include "xray/service.hpp"
#include "xray/training.hpp"

namespace fs = std::filesystem;

namespace xray {

namespace {

using ScoreList = std::vector<std::pair<std::string, double>>;

nlohmann::json scores_json(const ScoreList& s) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : s) j[k] = v;
  return j;
}

// Object keys come back sorted; `order` restores the model's class order.
ScoreList scores_from(const nlohmann::json& j, const nlohmann::json& order) {
  ScoreList out;
  if (order.is_array()) {
    for (const auto& name : order) {
      const auto key = name.get<std::string>();
      out.emplace_back(key, j.at(key).get<double>());
    }
  } else {
    for (auto it = j.begin(); it != j.end(); ++it) out.emplace_back(it.key(), it.value().get<double>());
  }
  return out;
}

nlohmann::json names_of(const ScoreList& s) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& kv : s) a.push_back(kv.first);
  return a;
}

bool valid_request_id(const std::string& id) {
  static const std::regex re("^[A-Za-z0-9_-]{1,64}$");
  return std::regex_match(id, re);
}

std::string lower_extension(const std::string& filename) {
  std::string ext = fs::path(filename).extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext;
}

// Probabilities re-normalized in double so the reported scores sum to 1.
ScoreList to_scores(const Tensor& probs, const std::vector<std::string>& names) {
  double sum = 0.0;
  for (std::size_t c = 0; c < names.size(); ++c) sum += probs[c];
  ScoreList out;
  for (std::size_t c = 0; c < names.size(); ++c) out.emplace_back(names[c], probs[c] / sum);
  return out;
}

std::string model_identity(const fs::path& dir) {
  return fnv1a_hex(read_file_bytes(dir / "weights.ckpt"));
}

Model load_service_model(const fs::path& dir, const char* role) {
  if (!fs::exists(dir / "config.json") || !fs::exists(dir / "weights.ckpt")) {
    throw ServiceStartupError(std::string(role) + " checkpoint missing: expected " +
                              (dir / "config.json").string() + " and " +
                              (dir / "weights.ckpt").string());
  }
  try {
    return load_model(dir);
  } catch (const std::exception& e) {
    throw ServiceStartupError(std::string(role) + " checkpoint at " + dir.string() +
                              " failed to load: " + e.what());
  }
}

}  // namespace

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto secs = std::chrono::time_point_cast<std::chrono::seconds>(now);
  const auto micros =
      std::chrono::duration_cast<std::chrono::microseconds>(now - secs).count();
  const std::time_t t = std::chrono::system_clock::to_time_t(secs);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%S") << '.' << std::setw(6) << std::setfill('0')
     << micros << 'Z';
  return os.str();
}

nlohmann::json to_json(const AnalysisResult& r) {
  nlohmann::json j = {{"request_id", r.request_id},
                      {"original_filename", r.original_filename},
                      {"received_at", r.received_at},
                      {"completed_at", r.completed_at},
                      {"image_height", r.image_height},
                      {"image_width", r.image_width},
                      {"valid", r.valid},
                      {"filter_scores", scores_json(r.filter_scores)},
                      {"filter_classes", names_of(r.filter_scores)},
                      {"summary", r.summary},
                      {"upload_path", r.upload_path},
                      {"trace", r.trace}};
  if (r.class_scores) {
    j["class_scores"] = scores_json(*r.class_scores);
    j["classes"] = names_of(*r.class_scores);
  }
  if (r.cam_path) j["cam_path"] = *r.cam_path;
  if (r.overlay_path) j["overlay_path"] = *r.overlay_path;
  return j;
}

AnalysisResult result_from_json(const nlohmann::json& j) {
  AnalysisResult r;
  r.request_id = j.at("request_id").get<std::string>();
  r.original_filename = j.value("original_filename", "");
  r.received_at = j.value("received_at", "");
  r.completed_at = j.value("completed_at", "");
  r.image_height = j.value("image_height", std::size_t{0});
  r.image_width = j.value("image_width", std::size_t{0});
  r.valid = j.at("valid").get<bool>();
  r.filter_scores = scores_from(j.at("filter_scores"), j.value("filter_classes", nlohmann::json()));
  if (j.contains("class_scores")) {
    r.class_scores = scores_from(j.at("class_scores"), j.value("classes", nlohmann::json()));
  }
  r.summary = j.at("summary").get<std::string>();
  if (j.contains("cam_path")) r.cam_path = j.at("cam_path").get<std::string>();
  if (j.contains("overlay_path")) r.overlay_path = j.at("overlay_path").get<std::string>();
  r.upload_path = j.value("upload_path", "");
  r.trace = j.value("trace", std::vector<std::string>{});
  return r;
}

nlohmann::json to_api_json(const AnalysisResult& r) {
  nlohmann::json j = {{"request_id", r.request_id},
                      {"original_filename", r.original_filename},
                      {"received_at", r.received_at},
                      {"completed_at", r.completed_at},
                      {"image_height", r.image_height},
                      {"image_width", r.image_width},
                      {"valid", r.valid},
                      {"filter_scores", scores_json(r.filter_scores)},
                      {"summary", r.summary},
                      {"trace", r.trace}};
  if (r.class_scores) j["class_scores"] = scores_json(*r.class_scores);
  const std::string base = "/api/v1/artifacts/" + r.request_id;
  if (r.cam_path) j["cam_url"] = base + "/cam.png";
  if (r.overlay_path) j["overlay_url"] = base + "/overlay.png";
  j["upload_url"] = base + "/upload";
  return j;
}

ResultStore::ResultStore(fs::path dir, std::size_t max_records)
    : dir_(std::move(dir)), max_records_(max_records) {
  std::error_code ec;
  fs::create_directories(dir_ / "artifacts", ec);
  if (ec) {
    throw ServiceStartupError("cannot create store directory " + dir_.string() + ": " +
                              ec.message());
  }
  const fs::path log = dir_ / "results.jsonl";
  if (!fs::exists(log)) return;
  std::ifstream in(log);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      auto rec = std::make_shared<const AnalysisResult>(result_from_json(nlohmann::json::parse(line)));
      if (by_id_.count(rec->request_id)) continue;
      by_id_.emplace(rec->request_id, rec);
      order_.push_back(rec);
    } catch (const std::exception&) {
      // a torn final line from a crash mid-append; later lines are still read
    }
  }
  if (max_records_ > 0 && order_.size() > max_records_) {
    const auto drop = static_cast<std::ptrdiff_t>(order_.size() - max_records_);
    for (auto it = order_.begin(); it != order_.begin() + drop; ++it) by_id_.erase((*it)->request_id);
    order_.erase(order_.begin(), order_.begin() + drop);
  }
}

fs::path ResultStore::artifact_dir(const std::string& request_id) const {
  return dir_ / "artifacts" / request_id;
}

bool ResultStore::append(const AnalysisResult& r) {
  auto rec = std::make_shared<const AnalysisResult>(r);
  std::unique_lock lock(mutex_);
  if (by_id_.count(r.request_id)) return false;
  std::ofstream out(dir_ / "results.jsonl", std::ios::app | std::ios::binary);
  out << to_json(r).dump() << '\n';
  out.flush();
  if (!out) throw std::runtime_error("result store: append to " + dir_.string() + " failed");
  by_id_.emplace(r.request_id, rec);
  order_.push_back(rec);
  evict_locked();
  return true;
}

void ResultStore::evict_locked() {
  while (max_records_ > 0 && order_.size() > max_records_) {
    const auto victim = order_.front();
    order_.erase(order_.begin());
    by_id_.erase(victim->request_id);
    std::error_code ec;
    fs::remove_all(artifact_dir(victim->request_id), ec);
  }
}

std::optional<AnalysisResult> ResultStore::get(const std::string& request_id) const {
  std::shared_lock lock(mutex_);
  const auto it = by_id_.find(request_id);
  if (it == by_id_.end()) return std::nullopt;
  return *it->second;
}

std::vector<AnalysisResult> ResultStore::history(std::size_t limit) const {
  std::vector<std::shared_ptr<const AnalysisResult>> all;
  {
    std::shared_lock lock(mutex_);
    all = order_;
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a->completed_at != b->completed_at) return a->completed_at > b->completed_at;
    return a->request_id < b->request_id;
  });
  std::vector<AnalysisResult> out;
  for (std::size_t i = 0; i < std::min(limit, all.size()); ++i) out.push_back(*all[i]);
  return out;
}

std::size_t ResultStore::size() const {
  std::shared_lock lock(mutex_);
  return order_.size();
}

bool ResultStore::writable() const {
  static std::atomic<std::uint64_t> probe_counter{0};
  const fs::path probe = dir_ / (".probe-" + std::to_string(probe_counter++));
  {
    std::ofstream out(probe, std::ios::binary);
    if (!out) return false;
    out << "ok";
    if (!out.flush()) return false;
  }
  std::error_code ec;
  fs::remove(probe, ec);
  return true;
}

const std::array<std::array<std::uint8_t, 3>, 256>& heat_ramp() {
  static const auto table = [] {
    std::array<std::array<std::uint8_t, 3>, 256> t{};
    auto ch = [](double v) {
      return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
    };
    for (int i = 0; i < 256; ++i) {
      const double x = i / 255.0;
      t[i] = {ch(1.5 - std::abs(4 * x - 3)), ch(1.5 - std::abs(4 * x - 2)),
              ch(1.5 - std::abs(4 * x - 1))};
    }
    return t;
  }();
  return table;
}

ImageBuffer render_heatmap(const Tensor& cam) {
  require_rank(cam, 2, "render_heatmap");
  const std::size_t H = cam.dim(0), W = cam.dim(1);
  ImageBuffer out(H, W, 3);
  const auto& ramp = heat_ramp();
  for (std::size_t i = 0; i < H * W; ++i) {
    const double v = std::clamp(static_cast<double>(cam[i]), 0.0, 1.0);
    const auto idx = static_cast<std::size_t>(std::lround(v * 255.0));
    std::copy(ramp[idx].begin(), ramp[idx].end(), &out.pixels[i * 3]);
  }
  return out;
}

ImageBuffer blend_overlay(const ImageBuffer& base, const ImageBuffer& heat, double alpha) {
  if (base.height != heat.height || base.width != heat.width) {
    throw DimensionError("blend_overlay: base " + std::to_string(base.height) + "x" +
                         std::to_string(base.width) + " vs heatmap " +
                         std::to_string(heat.height) + "x" + std::to_string(heat.width));
  }
  const ImageBuffer gray = to_gray(base);
  const ImageBuffer h = to_rgb(heat);
  ImageBuffer out(base.height, base.width, 3);
  for (std::size_t i = 0; i < base.height * base.width; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = (1.0 - alpha) * gray.pixels[i] + alpha * h.pixels[i * 3 + c];
      out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
    }
  }
  return out;
}

TriageService::TriageService(const ServiceConfig& config)
    : config_(config),
      filter_(load_service_model(config.model_dir / "filter", "filter")),
      classifier_(load_service_model(config.model_dir / "covid", "classifier")),
      filter_checkpoint_(model_identity(config.model_dir / "filter")),
      classifier_checkpoint_(model_identity(config.model_dir / "covid")),
      store_(config.store_dir, config.max_records) {
  if (filter_.num_classes() != 2 || filter_.class_names != filter_class_names()) {
    throw ServiceStartupError("filter checkpoint must have classes [valid, nonvalid]");
  }
  std::random_device rd;
  id_salt_ = (static_cast<std::uint64_t>(rd()) << 32) ^ rd() ^
             static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count());
}

TriageService::TriageService(Model filter, Model classifier, const ServiceConfig& config)
    : config_(config),
      filter_(std::move(filter)),
      classifier_(std::move(classifier)),
      filter_checkpoint_(fnv1a_hex(encode_checkpoint(model_state(filter_)))),
      classifier_checkpoint_(fnv1a_hex(encode_checkpoint(model_state(classifier_)))),
      store_(config.store_dir, config.max_records) {
  if (filter_.num_classes() != 2) throw ServiceStartupError("filter model must have 2 classes");
  std::random_device rd;
  id_salt_ = (static_cast<std::uint64_t>(rd()) << 32) ^ rd() ^
             static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count());
}

std::string TriageService::new_request_id() {
  std::uint64_t n;
  {
    std::lock_guard lock(id_mutex_);
    n = id_counter_++;
  }
  std::ostringstream os;
  os << std::hex << std::setfill('0') << std::setw(16) << Rng::splitmix64(id_salt_ ^ n)
     << std::setw(16) << Rng::splitmix64(Rng::derive(id_salt_, n));
  return os.str();
}

AnalysisResult TriageService::analyze(std::string_view bytes, const std::string& filename,
                                      std::optional<std::string> request_id) {
  AnalysisResult r;
  r.received_at = utc_timestamp();
  if (request_id) {
    if (!valid_request_id(*request_id)) {
      throw ServiceError(400, "bad_request", "request_id must match [A-Za-z0-9_-]{1,64}");
    }
    if (auto existing = store_.get(*request_id)) return *existing;
  }
  if (bytes.size() > config_.max_upload_bytes) {
    throw ServiceError(413, "payload_too_large",
                       "upload of " + std::to_string(bytes.size()) + " bytes exceeds the limit of " +
                           std::to_string(config_.max_upload_bytes));
  }
  const std::string ext = lower_extension(filename);
  if (ext != ".png" && ext != ".jpg" && ext != ".jpeg") {
    throw ServiceError(415, "not_an_image",
                       "extension '" + ext + "' is not one of .png, .jpg, .jpeg");
  }
  r.trace.push_back("extension");
  ImageBuffer img;
  try {
    img = decode_image(bytes);
  } catch (const NotAnImage& e) {
    throw ServiceError(415, "not_an_image", e.what());
  }
  r.trace.push_back("decode");
  r.request_id = request_id ? *request_id : new_request_id();
  r.original_filename = fs::path(filename).filename().string();
  r.image_height = img.height;
  r.image_width = img.width;

  const Tensor fin = preprocess(img, filter_.input_shape);
  const auto fout = filter_.forward(fin.reshaped({1, fin.dim(0), fin.dim(1), fin.dim(2)}));
  r.filter_scores = to_scores(fout.probabilities, filter_.class_names);
  r.valid = r.filter_scores[0].second > config_.filter_threshold;
  r.trace.push_back("filter");

  const fs::path adir = store_.artifact_dir(r.request_id);
  const std::string rel = "artifacts/" + r.request_id + "/";
  r.upload_path = rel + "upload" + ext;
  write_file_bytes(adir / ("upload" + ext), std::string(bytes));

  if (!r.valid) {
    r.summary = "invalid_image";
  } else {
    const Tensor cin = preprocess(img, classifier_.input_shape);
    const auto cout = classifier_.forward(cin.reshaped({1, cin.dim(0), cin.dim(1), cin.dim(2)}));
    r.class_scores = to_scores(cout.probabilities, classifier_.class_names);
    const auto best = std::max_element(
        r.class_scores->begin(), r.class_scores->end(),
        [](const auto& a, const auto& b) { return a.second < b.second; });
    const auto cls = static_cast<std::size_t>(best - r.class_scores->begin());
    r.summary = best->first;
    r.trace.push_back("classifier");

    const Tensor& feats = cout.final_features;
    const Tensor f0 = feats.reshaped({feats.dim(1), feats.dim(2), feats.dim(3)});
    const Tensor cam = compute_cam(f0, classifier_.head_weights(), cls, img.height, img.width);
    const ImageBuffer heat = render_heatmap(cam);
    write_file_bytes(adir / "cam.png", encode_png(heat));
    write_file_bytes(adir / "overlay.png", encode_png(blend_overlay(img, heat, 0.4)));
    r.cam_path = rel + "cam.png";
    r.overlay_path = rel + "overlay.png";
    r.trace.push_back("cam");
  }
  r.trace.push_back("persist");
  r.completed_at = utc_timestamp();
  if (!store_.append(r)) {
    // a concurrent request with the same id won the race
    if (auto existing = store_.get(r.request_id)) return *existing;
  }
  return r;
}

std::optional<AnalysisResult> TriageService::get_result(const std::string& request_id) const {
  return store_.get(request_id);
}

std::vector<AnalysisResult> TriageService::history(std::size_t limit) const {
  return store_.history(limit);
}

std::pair<bool, nlohmann::json> TriageService::health() const {
  nlohmann::json reasons = nlohmann::json::array();
  const bool writable = store_.writable();
  if (!writable) reasons.push_back("store directory " + store_.dir().string() + " is not writable");
  const bool ok = reasons.empty();
  nlohmann::json j = {
      {"status", ok ? "ok" : "degraded"},
      {"reasons", reasons},
      {"models",
       {{"filter", {{"checkpoint", filter_checkpoint_}, {"classes", filter_.class_names}}},
        {"classifier",
         {{"checkpoint", classifier_checkpoint_}, {"classes", classifier_.class_names}}}}},
      {"store", {{"path", store_.dir().string()}, {"writable", writable}, {"records", store_.size()}}}};
  return {ok, j};
}

}  // namespace xray
