#include <httplib.h>

#include "xray/checkpoint.hpp"
#include "xray/service.hpp"

namespace xray {

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code,
                const std::string& message) {
  send_json(res, status, {{"code", code}, {"message", message}});
}

std::string code_for_status(int status) {
  switch (status) {
    case 400: return "bad_request";
    case 404: return "not_found";
    case 405: return "method_not_allowed";
    case 413: return "payload_too_large";
    case 415: return "not_an_image";
    default: return status >= 500 ? "internal_error" : "http_error";
  }
}

// Slack above the upload limit for multipart framing, so that an oversized
// file still reaches the handler and gets the JSON error body.
constexpr std::size_t kMultipartSlack = 64 * 1024;

}  // namespace

HttpServer::HttpServer(TriageService& service, std::optional<std::filesystem::path> static_dir)
    : service_(service), server_(std::make_unique<httplib::Server>()) {
  server_->set_payload_max_length(service_.config().max_upload_bytes + kMultipartSlack);
  if (static_dir) {
    if (!server_->set_mount_point("/", static_dir->string())) {
      throw ServiceStartupError("static directory " + static_dir->string() + " does not exist");
    }
  }
  install_routes();
}

HttpServer::~HttpServer() { stop(); }

void HttpServer::install_routes() {
  auto& svr = *server_;

  svr.set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
  });

  svr.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
    send_error(res, res.status, code_for_status(res.status), httplib::status_message(res.status));
    return httplib::Server::HandlerResponse::Handled;
  });

  svr.set_exception_handler([](const httplib::Request&, httplib::Response& res,
                               std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const ServiceError& e) {
      send_error(res, e.status(), e.code(), e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal_error", e.what());
    } catch (...) {
      send_error(res, 500, "internal_error", "unknown error");
    }
  });

  svr.Post("/api/v1/analyze", [this](const httplib::Request& req, httplib::Response& res) {
    if (!req.is_multipart_form_data()) {
      return send_error(res, 400, "bad_request", "expected multipart/form-data with field 'image'");
    }
    if (!req.has_file("image")) {
      return send_error(res, 400, "bad_request", "missing multipart field 'image'");
    }
    const auto file = req.get_file_value("image");
    std::optional<std::string> request_id;
    if (req.has_file("request_id")) request_id = req.get_file_value("request_id").content;
    const AnalysisResult r = service_.analyze(file.content, file.filename, request_id);
    send_json(res, 200, to_api_json(r));
  });

  svr.Get(R"(/api/v1/results/([A-Za-z0-9_-]+))",
          [this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            if (auto r = service_.get_result(id)) return send_json(res, 200, to_api_json(*r));
            send_error(res, 404, "not_found", "no result with request_id '" + id + "'");
          });

  svr.Get("/api/v1/history", [this](const httplib::Request& req, httplib::Response& res) {
    std::size_t limit = 20;
    if (req.has_param("limit")) {
      const std::string s = req.get_param_value("limit");
      try {
        std::size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used != s.size() || v < 1) throw std::invalid_argument(s);
        limit = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        return send_error(res, 400, "bad_request", "limit must be an integer >= 1");
      }
    }
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : service_.history(limit)) arr.push_back(to_api_json(r));
    send_json(res, 200, arr);
  });

  svr.Get(R"(/api/v1/artifacts/([A-Za-z0-9_-]+)/(cam\.png|overlay\.png|upload))",
          [this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            const std::string what = req.matches[2];
            const auto r = service_.get_result(id);
            std::optional<std::string> rel;
            std::string type = "image/png";
            if (r) {
              if (what == "cam.png") rel = r->cam_path;
              if (what == "overlay.png") rel = r->overlay_path;
              if (what == "upload") {
                rel = r->upload_path;
                if (rel->ends_with(".jpg") || rel->ends_with(".jpeg")) type = "image/jpeg";
              }
            }
            if (!rel) {
              return send_error(res, 404, "not_found", "no " + what + " artifact for '" + id + "'");
            }
            const auto path = service_.store().dir() / *rel;
            if (!std::filesystem::exists(path)) {
              return send_error(res, 404, "not_found", "artifact file missing for '" + id + "'");
            }
            res.set_content(read_file_bytes(path), type);
          });

  svr.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
    const auto [ok, body] = service_.health();
    send_json(res, ok ? 200 : 503, body);
  });
}

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return server_->bind_to_any_port(host);
  return server_->bind_to_port(host, port) ? port : -1;
}

bool HttpServer::listen_after_bind() { return server_->listen_after_bind(); }

void HttpServer::stop() {
  if (server_ && server_->is_running()) server_->stop();
}

bool HttpServer::is_running() const { return server_->is_running(); }

void HttpServer::wait_until_ready() const { server_->wait_until_ready(); }

}  // namespace xray
