#include <doctest.h>

#include <httplib.h>

#include <atomic>
#include <fstream>
#include <set>
#include <thread>

#include "support.hpp"
#include "xray/model.hpp"
#include "xray/service.hpp"
#include "xray/synthetic.hpp"
#include "xray/training.hpp"

using namespace xray;
using nlohmann::json;

namespace {

constexpr std::size_t kSize = 32;

// Filter trained once per process on upright vs quarter-turned images.
const Model& trained_filter() {
  static const Model m = [] {
    const auto tr = make_filter_dataset(60, kSize, 21), va = make_filter_dataset(20, kSize, 22);
    TrainConfig c;
    c.batch_size = 32;
    c.max_epochs = 25;
    c.initial_lr = 3e-3;
    c.schedule = StepDecay{0.5, 10};
    c.augment = AugmentSpec::filter_defaults();
    FilterNetConfig f;
    f.input_size = kSize;
    return train(build_filter_net(f, 4), {&tr, &va}, c, 12).model;
  }();
  return m;
}

Model small_classifier() {
  CovidNetConfig cc;
  cc.input_size = kSize;
  cc.stem_pool = 1;
  return build_covid_net(cc, 5);
}

ImageBuffer upright_fixture(std::uint64_t seed, std::size_t size = 48) {
  Rng rng(seed);
  return synth_upright(size, rng);
}

std::string png(const ImageBuffer& img) { return encode_png(img); }

ServiceConfig config_for(const std::filesystem::path& dir) {
  ServiceConfig c;
  c.model_dir = dir / "models";
  c.store_dir = dir / "store";
  return c;
}

// Server on an ephemeral loopback port, listening in a background thread.
struct LiveServer {
  HttpServer server;
  int port;
  std::thread thread;

  explicit LiveServer(TriageService& svc) : server(svc), port(server.bind("127.0.0.1", 0)) {
    REQUIRE(port > 0);
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~LiveServer() {
    server.stop();
    thread.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(60, 0);
    return c;
  }
};

httplib::Result upload(httplib::Client& cli, const std::string& bytes, const std::string& name,
                       const std::string& request_id = {}) {
  httplib::MultipartFormDataItems items{{"image", bytes, name, "application/octet-stream"}};
  if (!request_id.empty()) items.push_back({"request_id", request_id, "", ""});
  return cli.Post("/api/v1/analyze", items);
}

double score_sum(const json& scores) {
  double s = 0;
  for (const auto& [k, v] : scores.items()) s += v.get<double>();
  return s;
}

}  // namespace

TEST_SUITE("service") {
  TEST_CASE("fixtures: trained filter accepts upright and rejects quarter turns") {
    const Model& f = trained_filter();
    for (std::uint64_t s : {101u, 102u, 103u}) {
      const ImageBuffer up = upright_fixture(s);
      const Tensor x = preprocess(up, f.input_shape);
      CHECK(f.forward(x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)})).probabilities[0] > 0.5f);
      const Tensor r = preprocess(rotate_quarter(up, 1), f.input_shape);
      CHECK(f.forward(r.reshaped({1, r.dim(0), r.dim(1), r.dim(2)})).probabilities[1] > 0.5f);
    }
  }

  TEST_CASE("valid upload round trip over HTTP") {
    const auto dir = testing::scratch_dir("svc_valid");
    TriageService svc(trained_filter(), small_classifier(), config_for(dir));
    LiveServer live(svc);
    auto cli = live.client();

    const ImageBuffer img = upright_fixture(101, 48);
    auto res = upload(cli, png(img), "chest.PNG");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
    const json j = json::parse(res->body);
    CHECK(j["valid"] == true);
    CHECK(j["original_filename"] == "chest.PNG");
    REQUIRE(j.contains("class_scores"));
    CHECK(j["class_scores"].size() == 3);
    CHECK(std::abs(score_sum(j["class_scores"]) - 1.0) <= 1e-6);
    CHECK(std::abs(score_sum(j["filter_scores"]) - 1.0) <= 1e-6);
    CHECK(j["trace"] == json({"extension", "decode", "filter", "classifier", "cam", "persist"}));
    CHECK(j["image_height"] == 48);
    CHECK(j["image_width"] == 48);

    std::string best;
    double top = -1;
    for (const auto& [k, v] : j["class_scores"].items())
      if (v.get<double>() > top) {
        top = v.get<double>();
        best = k;
      }
    CHECK(j["summary"] == best);

    // heatmap and overlay have the upload's pixel dimensions
    const std::string id = j["request_id"];
    auto cam = cli.Get("/api/v1/artifacts/" + id + "/cam.png");
    REQUIRE(cam);
    CHECK(cam->status == 200);
    CHECK(cam->get_header_value("Content-Type") == "image/png");
    const ImageBuffer heat = decode_image(cam->body);
    CHECK(heat.height == 48);
    CHECK(heat.width == 48);
    auto ov = cli.Get(j["overlay_url"].get<std::string>());
    REQUIRE(ov);
    const ImageBuffer overlay = decode_image(ov->body);
    CHECK(overlay.height == 48);
    CHECK(overlay.width == 48);
    auto up = cli.Get("/api/v1/artifacts/" + id + "/upload");
    REQUIRE(up);
    CHECK(up->body == png(img));

    auto got = cli.Get("/api/v1/results/" + id);
    REQUIRE(got);
    CHECK(got->status == 200);
    CHECK(json::parse(got->body) == j);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("rotated upload is flagged invalid and never classified") {
    const auto dir = testing::scratch_dir("svc_rot");
    TriageService svc(trained_filter(), small_classifier(), config_for(dir));
    LiveServer live(svc);
    auto cli = live.client();
    auto res = upload(cli, png(rotate_quarter(upright_fixture(102), 1)), "turned.png");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    const json j = json::parse(res->body);
    CHECK(j["valid"] == false);
    CHECK(j["summary"] == "invalid_image");
    CHECK_FALSE(j.contains("class_scores"));
    CHECK_FALSE(j.contains("cam_url"));
    CHECK(j["trace"] == json({"extension", "decode", "filter", "persist"}));
    auto cam = cli.Get("/api/v1/artifacts/" + j["request_id"].get<std::string>() + "/cam.png");
    REQUIRE(cam);
    CHECK(cam->status == 404);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("rejections: not an image, bad extension, oversize, bad requests") {
    const auto dir = testing::scratch_dir("svc_reject");
    ServiceConfig cfg = config_for(dir);
    cfg.max_upload_bytes = 4096;
    TriageService svc(trained_filter(), small_classifier(), cfg);
    LiveServer live(svc);
    auto cli = live.client();

    auto text = upload(cli, "just some notes, not pixels\n", "notes.png");
    REQUIRE(text);
    CHECK(text->status == 415);
    const json e = json::parse(text->body);
    CHECK(e["code"] == "not_an_image");
    CHECK(e["message"].get<std::string>().find("text") != std::string::npos);

    auto gif = upload(cli, "GIF89a....", "anim.gif");
    REQUIRE(gif);
    CHECK(gif->status == 415);

    auto big = upload(cli, std::string(5000, 'x'), "big.png");
    REQUIRE(big);
    CHECK(big->status == 413);
    CHECK(json::parse(big->body)["code"] == "payload_too_large");

    auto nofield = cli.Post("/api/v1/analyze", httplib::MultipartFormDataItems{{"other", "x", "a.png", ""}});
    REQUIRE(nofield);
    CHECK(nofield->status == 400);
    CHECK(json::parse(nofield->body)["code"] == "bad_request");

    auto badid = upload(cli, png(upright_fixture(1, 16)), "a.png", "no spaces allowed");
    REQUIRE(badid);
    CHECK(badid->status == 400);

    auto missing = cli.Get("/api/v1/results/doesnotexist");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    CHECK(json::parse(missing->body)["code"] == "not_found");

    auto unknown = cli.Get("/api/v2/nothing");
    REQUIRE(unknown);
    CHECK(unknown->status == 404);
    CHECK(json::parse(unknown->body).contains("code"));

    CHECK(svc.store().size() == 0);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("history ordering, limit and the empty store") {
    const auto dir = testing::scratch_dir("svc_hist");
    TriageService svc(trained_filter(), small_classifier(), config_for(dir));
    LiveServer live(svc);
    auto cli = live.client();

    auto empty = cli.Get("/api/v1/history");
    REQUIRE(empty);
    CHECK(empty->status == 200);
    CHECK(json::parse(empty->body) == json::array());

    std::vector<std::string> ids;
    for (std::uint64_t s = 0; s < 4; ++s) {
      auto r = upload(cli, png(upright_fixture(200 + s, 24)), "x.png");
      REQUIRE(r);
      ids.push_back(json::parse(r->body)["request_id"]);
    }
    auto h = cli.Get("/api/v1/history?limit=3");
    REQUIRE(h);
    const json arr = json::parse(h->body);
    REQUIRE(arr.size() == 3);
    CHECK(arr[0]["request_id"] == ids[3]);
    CHECK(arr[1]["request_id"] == ids[2]);
    CHECK(arr[2]["request_id"] == ids[1]);
    for (std::size_t i = 1; i < arr.size(); ++i)
      CHECK(arr[i - 1]["completed_at"].get<std::string>() >= arr[i]["completed_at"].get<std::string>());

    auto bad = cli.Get("/api/v1/history?limit=zero");
    REQUIRE(bad);
    CHECK(bad->status == 400);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("client request_id is idempotent") {
    const auto dir = testing::scratch_dir("svc_idem");
    TriageService svc(trained_filter(), small_classifier(), config_for(dir));
    const auto a = svc.analyze(png(upright_fixture(5, 24)), "a.png", std::string("case-17"));
    const auto b = svc.analyze(png(upright_fixture(6, 24)), "b.png", std::string("case-17"));
    CHECK(a == b);
    CHECK(a.request_id == "case-17");
    CHECK(svc.store().size() == 1);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("records survive a restart") {
    const auto dir = testing::scratch_dir("svc_restart");
    std::string id;
    AnalysisResult before;
    {
      TriageService svc(trained_filter(), small_classifier(), config_for(dir));
      before = svc.analyze(png(upright_fixture(7, 24)), "a.jpg.png");
      svc.analyze(png(rotate_quarter(upright_fixture(8, 24), 3)), "b.png");
      id = before.request_id;
    }
    TriageService again(trained_filter(), small_classifier(), config_for(dir));
    CHECK(again.store().size() == 2);
    const auto after = again.get_result(id);
    REQUIRE(after);
    CHECK(*after == before);
    CHECK(std::filesystem::exists(dir / "store" / before.upload_path));
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("max_records evicts the oldest record and its artifacts") {
    const auto dir = testing::scratch_dir("svc_evict");
    ServiceConfig cfg = config_for(dir);
    cfg.max_records = 2;
    TriageService svc(trained_filter(), small_classifier(), cfg);
    const auto first = svc.analyze(png(upright_fixture(9, 16)), "a.png");
    svc.analyze(png(upright_fixture(10, 16)), "b.png");
    svc.analyze(png(upright_fixture(11, 16)), "c.png");
    CHECK(svc.store().size() == 2);
    CHECK_FALSE(svc.get_result(first.request_id));
    CHECK_FALSE(std::filesystem::exists(svc.store().artifact_dir(first.request_id)));
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("32 concurrent uploads give 32 distinct records") {
    const auto dir = testing::scratch_dir("svc_conc");
    TriageService svc(trained_filter(), small_classifier(), config_for(dir));
    LiveServer live(svc);
    const std::string body = png(upright_fixture(300, 32));
    std::vector<std::string> ids(32);
    std::vector<int> status(32, 0);
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < 32; ++i) {
      pool.emplace_back([&, i] {
        auto cli = live.client();
        auto r = upload(cli, body, "c" + std::to_string(i) + ".png");
        if (!r) return;
        status[i] = r->status;
        if (r->status == 200) ids[i] = json::parse(r->body)["request_id"];
      });
    }
    for (auto& t : pool) t.join();
    for (int s : status) CHECK(s == 200);
    CHECK(std::set<std::string>(ids.begin(), ids.end()).size() == 32);
    CHECK(svc.store().size() == 32);
    auto cli = live.client();
    auto h = cli.Get("/api/v1/history?limit=100");
    REQUIRE(h);
    CHECK(json::parse(h->body).size() == 32);
    std::ifstream log(dir / "store" / "results.jsonl");
    std::size_t lines = 0;
    for (std::string line; std::getline(log, line);) {
      CHECK_NOTHROW((void)json::parse(line));
      ++lines;
    }
    CHECK(lines == 32);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("health: ok, then degraded when the store disappears") {
    const auto dir = testing::scratch_dir("svc_health");
    TriageService svc(trained_filter(), small_classifier(), config_for(dir));
    LiveServer live(svc);
    auto cli = live.client();
    auto ok = cli.Get("/healthz");
    REQUIRE(ok);
    CHECK(ok->status == 200);
    const json j = json::parse(ok->body);
    CHECK(j["status"] == "ok");
    CHECK(j["models"]["filter"]["classes"] == json({"valid", "nonvalid"}));
    CHECK(j["models"]["classifier"]["checkpoint"].get<std::string>().size() == 16);

    std::filesystem::remove_all(dir / "store");
    auto bad = cli.Get("/healthz");
    REQUIRE(bad);
    CHECK(bad->status == 503);
    const json d = json::parse(bad->body);
    CHECK(d["status"] == "degraded");
    CHECK(d["reasons"].size() == 1);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("startup from a model directory") {
    const auto dir = testing::scratch_dir("svc_startup");
    const ServiceConfig cfg = config_for(dir);
    CHECK_THROWS_AS(TriageService{cfg}, ServiceStartupError);
    save_model(cfg.model_dir / "filter", trained_filter());
    try {
      TriageService s(cfg);
      FAIL("expected ServiceStartupError");
    } catch (const ServiceStartupError& e) {
      CHECK(std::string(e.what()).find("covid") != std::string::npos);
    }
    save_model(cfg.model_dir / "covid", small_classifier());
    TriageService svc(cfg);
    const auto r = svc.analyze(png(upright_fixture(101)), "a.png");
    TriageService mem(trained_filter(), small_classifier(), config_for(testing::scratch_dir("svc_mem")));
    const auto m = mem.analyze(png(upright_fixture(101)), "a.png");
    CHECK(r.filter_scores == m.filter_scores);
    CHECK(r.class_scores == m.class_scores);
    CHECK(svc.health().second["models"]["filter"]["checkpoint"] ==
          fnv1a_hex(read_file_bytes(cfg.model_dir / "filter" / "weights.ckpt")));

    // a 3-class model in the filter slot is refused
    std::filesystem::remove_all(cfg.model_dir / "filter");
    save_model(cfg.model_dir / "filter", small_classifier());
    CHECK_THROWS_AS(TriageService{cfg}, ServiceStartupError);
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(mem.store().dir().parent_path());
  }
}

TEST_SUITE("heatmap") {
  TEST_CASE("ramp endpoints follow the piecewise formula") {
    const auto& ramp = heat_ramp();
    auto oracle = [](double t, double off) {
      return static_cast<int>(std::floor(std::clamp(1.5 - std::abs(4 * t - off), 0.0, 1.0) * 255 + 0.5));
    };
    for (std::size_t i : {0u, 64u, 128u, 191u, 255u}) {
      const double t = i / 255.0;
      CHECK(std::abs(ramp[i][0] - oracle(t, 3)) <= 1);
      CHECK(std::abs(ramp[i][1] - oracle(t, 2)) <= 1);
      CHECK(std::abs(ramp[i][2] - oracle(t, 1)) <= 1);
    }
    CHECK(ramp[0][2] > 100);   // cold end is blue
    CHECK(ramp[255][0] > 100); // hot end is red
  }

  TEST_CASE("overlay blend and dimension check") {
    const ImageBuffer base(2, 2, 1, 100), heat(2, 2, 3, 200);
    const ImageBuffer o = blend_overlay(base, heat, 0.25);
    for (auto p : o.pixels) CHECK(p == 125);
    CHECK_THROWS(blend_overlay(ImageBuffer(3, 2, 1), heat));
  }
}
