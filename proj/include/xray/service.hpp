#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "xray/image.hpp"
#include "xray/model.hpp"

namespace httplib {
class Server;
}

namespace xray {

inline constexpr std::size_t kDefaultMaxUploadBytes = 10u * 1024u * 1024u;

/// Error surfaced to API clients as {code, message} with an HTTP status.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const noexcept { return status_; }
  const std::string& code() const noexcept { return code_; }

 private:
  int status_;
  std::string code_;
};

/// Startup failure (missing or unreadable checkpoint, bad store path).
class ServiceStartupError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AnalysisResult {
  std::string request_id;
  std::string original_filename;
  std::string received_at;   // UTC, ISO 8601 with microseconds
  std::string completed_at;
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  bool valid = false;
  std::vector<std::pair<std::string, double>> filter_scores;
  std::optional<std::vector<std::pair<std::string, double>>> class_scores;
  std::string summary;  // invalid_image or the argmax class name
  std::optional<std::string> cam_path;      // relative to the store dir
  std::optional<std::string> overlay_path;
  std::string upload_path;
  std::vector<std::string> trace;  // pipeline stages executed, in order

  friend bool operator==(const AnalysisResult&, const AnalysisResult&) = default;
};

nlohmann::json to_json(const AnalysisResult& r);
AnalysisResult result_from_json(const nlohmann::json& j);
/// Public API body: the stored record plus artifact URLs.
nlohmann::json to_api_json(const AnalysisResult& r);

std::string utc_timestamp();

/// Append-only JSON-lines store (`results.jsonl`) with per-request artifact
/// directories (`artifacts/<id>/`). Records survive restarts.
class ResultStore {
 public:
  explicit ResultStore(std::filesystem::path dir, std::size_t max_records = 0);

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path artifact_dir(const std::string& request_id) const;

  /// false when the id is already stored (the existing record is kept).
  bool append(const AnalysisResult& r);
  std::optional<AnalysisResult> get(const std::string& request_id) const;
  /// Newest first by completed_at; ties by request_id.
  std::vector<AnalysisResult> history(std::size_t limit) const;
  std::size_t size() const;
  bool writable() const;

 private:
  void evict_locked();

  std::filesystem::path dir_;
  std::size_t max_records_;
  mutable std::shared_mutex mutex_;
  std::vector<std::shared_ptr<const AnalysisResult>> order_;  // append order
  std::unordered_map<std::string, std::shared_ptr<const AnalysisResult>> by_id_;
};

/// 256-entry blue-cyan-yellow-red ramp: for t = i / 255,
/// r = clamp(1.5 - |4t - 3|), g = clamp(1.5 - |4t - 2|), b = clamp(1.5 - |4t - 1|).
const std::array<std::array<std::uint8_t, 3>, 256>& heat_ramp();
/// RGB heatmap of a [H,W] map with values in [0,1].
ImageBuffer render_heatmap(const Tensor& cam);
/// (1 - alpha) * gray(base) + alpha * heat, per channel.
ImageBuffer blend_overlay(const ImageBuffer& base, const ImageBuffer& heat, double alpha = 0.4);

struct ServiceConfig {
  std::filesystem::path model_dir;  // holds filter/ and covid/
  std::filesystem::path store_dir;
  std::size_t max_upload_bytes = kDefaultMaxUploadBytes;
  double filter_threshold = 0.5;
  std::size_t max_records = 0;  // 0 keeps everything
};

/// Models are loaded once and shared read-only by concurrent requests.
class TriageService {
 public:
  explicit TriageService(const ServiceConfig& config);
  TriageService(Model filter, Model classifier, const ServiceConfig& config);

  /// Extension allowlist, decode, filter gate, classifier, CAM, persistence.
  /// A repeated client request_id returns the stored record.
  AnalysisResult analyze(std::string_view bytes, const std::string& filename,
                         std::optional<std::string> request_id = std::nullopt);
  std::optional<AnalysisResult> get_result(const std::string& request_id) const;
  std::vector<AnalysisResult> history(std::size_t limit) const;
  /// {status: ok|degraded, reasons, models, store}
  std::pair<bool, nlohmann::json> health() const;

  const ResultStore& store() const { return store_; }
  const ServiceConfig& config() const { return config_; }
  const Model& filter_model() const { return filter_; }
  const Model& classifier_model() const { return classifier_; }

 private:
  std::string new_request_id();

  ServiceConfig config_;
  Model filter_;
  Model classifier_;
  std::string filter_checkpoint_;
  std::string classifier_checkpoint_;
  ResultStore store_;
  std::mutex id_mutex_;
  std::uint64_t id_counter_ = 0;
  std::uint64_t id_salt_ = 0;
};

/// HTTP front end for a TriageService.
class HttpServer {
 public:
  explicit HttpServer(TriageService& service,
                      std::optional<std::filesystem::path> static_dir = std::nullopt);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds; port 0 picks a free port. Returns the bound port or -1.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  bool listen_after_bind();
  void stop();
  bool is_running() const;
  void wait_until_ready() const;

 private:
  void install_routes();

  TriageService& service_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace xray
