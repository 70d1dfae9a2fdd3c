#include <doctest.h>

#include <bit>
#include <cstdlib>
#include <fstream>

#include <json.hpp>

#include "support.hpp"
#include "xray/gradcheck.hpp"
#include "xray/model.hpp"
#include "xray/ops.hpp"

using namespace xray;
using testing::max_abs_diff;
using testing::random_tensor;

namespace {

// Closed-form census of the filter net's declared layers.
std::size_t filter_param_oracle(const FilterNetConfig& c) {
  const std::size_t stem = c.scaled_stem_channels();
  std::size_t total = stem * 1 * 9 + stem;
  std::size_t cin = stem;
  for (std::size_t i = 0; i < c.num_ds_blocks; ++i) {
    const std::size_t cout = c.block_channels(i);
    total += cin * 9 + cout * cin + cout;
    cin = cout;
  }
  return total + 2 * cin + 2;
}

std::size_t out_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  return (in + 2 * p - k) / s + 1;
}

// final_features spatial size from the covid layer table
std::size_t covid_final_extent(const CovidNetConfig& c) {
  std::size_t e = out_extent(c.input_size, 3, c.stem_stride, 1);
  if (c.stem_pool > 1) e = (e - c.stem_pool) / c.stem_pool + 1;
  for (std::size_t t = 0; t + 1 < CovidNetConfig::num_blocks; ++t) e = (e - 2) / 2 + 1;
  return e;
}

Tensor feature_plane(const Tensor& batch_features, std::size_t n) {
  const std::size_t F = batch_features.dim(1), H = batch_features.dim(2), W = batch_features.dim(3);
  std::vector<float> v(batch_features.raw() + n * F * H * W, batch_features.raw() + (n + 1) * F * H * W);
  return Tensor({F, H, W}, std::move(v));
}

CovidNetConfig small_covid(std::size_t size = 32) {
  CovidNetConfig c;
  c.input_size = size;
  return c;
}

}  // namespace

TEST_SUITE("filter net") {
  TEST_CASE("default config maps [1,1,224,224] to two logits") {
    const Model m = build_filter_net(FilterNetConfig{}, 1);
    CHECK(m.input_shape == Shape{1, 224, 224});
    const auto out = m.forward(Tensor({1, 1, 224, 224}));
    CHECK(out.logits.shape() == Shape{1, 2});
    CHECK(out.probabilities.shape() == Shape{1, 2});
    CHECK(m.class_names == std::vector<std::string>{"valid", "nonvalid"});
  }

  TEST_CASE("width multiplier 2 doubles every block") {
    FilterNetConfig a, b;
    b.width_multiplier = 2.0;
    const Model ma = build_filter_net(a), mb = build_filter_net(b);
    CHECK(mb.param("stem.conv.weight").value.dim(0) == 2 * ma.param("stem.conv.weight").value.dim(0));
    for (std::size_t i = 1; i <= a.num_ds_blocks; ++i) {
      const std::string n = "block" + std::to_string(i) + ".separable.pointwise";
      CHECK(mb.param(n).value.dim(0) == 2 * ma.param(n).value.dim(0));
    }
  }

  TEST_CASE("parameter count matches the closed form") {
    for (double wm : {0.5, 1.0, 2.0}) {
      for (std::size_t blocks : {1u, 4u, 5u}) {
        FilterNetConfig c;
        c.width_multiplier = wm;
        c.num_ds_blocks = blocks;
        c.input_size = 64;
        CHECK(build_filter_net(c).parameter_count() == filter_param_oracle(c));
      }
    }
    CHECK(filter_param_oracle(FilterNetConfig{}) == (8 * 9 + 8) + (8 * 9 + 16 * 8 + 16) +
                                                        (16 * 9 + 16 * 16 + 16) + (16 * 9 + 32 * 16 + 32) +
                                                        (32 * 9 + 32 * 32 + 32) + (32 * 2 + 2));
  }

  TEST_CASE("invalid configs are construction errors") {
    FilterNetConfig c;
    c.num_ds_blocks = 0;
    CHECK_THROWS_AS(build_filter_net(c), ModelConfigError);
    c = {};
    c.width_multiplier = 0.01;
    CHECK_THROWS_AS(build_filter_net(c), ModelConfigError);
    c = {};
    c.stem_channels = 0;
    CHECK_THROWS_AS(build_filter_net(c), ModelConfigError);
  }
}

TEST_SUITE("covid net") {
  TEST_CASE("block 1 output channels = input channels + 4 * 12") {
    const Model m = build_covid_net(CovidNetConfig{}, 1);
    const auto shapes = m.layer_output_shapes();
    std::size_t stem_out = 0;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
      if (m.layers[i].name == "stem.pool") stem_out = shapes[i][1];
      if (m.layers[i].name == "block1") {
        CHECK(stem_out == 24);
        CHECK(shapes[i][1] == stem_out + 4 * 12);
      }
    }
    // census: dense layer l of block 1 reads stem + l*growth channels
    for (std::size_t l = 0; l < 4; ++l) {
      const auto& w = m.param("block1.layer" + std::to_string(l + 1) + ".conv.weight").value;
      CHECK(w.dim(1) == 24 + l * 12);
      CHECK(w.dim(0) == 12);
    }
  }

  TEST_CASE("2 and 3 classes differ only in the head") {
    CovidNetConfig c2, c3;
    c2.num_classes = 2;
    const Model a = build_covid_net(c2, 5), b = build_covid_net(c3, 5);
    REQUIRE(a.params.size() == b.params.size());
    for (std::size_t i = 0; i < a.params.size(); ++i) {
      const bool head = a.params[i].name.rfind("classifier.", 0) == 0;
      if (head) {
        CHECK(a.params[i].value.dim(0) == 2);
        CHECK(b.params[i].value.dim(0) == 3);
      } else {
        CHECK(a.params[i].value == b.params[i].value);
      }
    }
  }

  TEST_CASE("final features follow the layer table") {
    for (std::size_t size : {224u, 64u, 48u}) {
      const CovidNetConfig c = small_covid(size);
      const Model m = build_covid_net(c, 2);
      xray::Rng rng(3);
      const auto out = m.forward(random_tensor({1, 3, size, size}, rng));
      const std::size_t e = covid_final_extent(c);
      CHECK(out.final_features.shape() == Shape{1, c.head_channels, e, e});
    }
    CHECK(covid_final_extent(CovidNetConfig{}) == 7);  // 224/2 -> /4 -> /2 -> /2
  }

  TEST_CASE("transitions halve channels") {
    const Model m = build_covid_net(CovidNetConfig{}, 1);
    CHECK(m.param("transition1.conv.weight").value.dim(0) == 72 / 2);
    CHECK(m.param("block2.layer1.conv.weight").value.dim(1) == 36);
    CHECK(m.param("transition2.conv.weight").value.dim(0) == (36 + 48) / 2);
  }
}

TEST_SUITE("forward") {
  TEST_CASE("identical rows give identical outputs; batch invariance") {
    const Model m = build_covid_net(small_covid(), 7);
    xray::Rng rng(8);
    Tensor batch = random_tensor({4, 3, 32, 32}, rng);
    const std::size_t per = 3 * 32 * 32;
    std::copy(batch.raw(), batch.raw() + per, batch.raw() + per);  // row 1 := row 0
    const auto out = m.forward(batch);
    for (std::size_t c = 0; c < 3; ++c) CHECK(out.logits[c] == out.logits[3 + c]);

    const Tensor single({1, 3, 32, 32}, std::vector<float>(batch.raw() + 2 * per, batch.raw() + 3 * per));
    const auto one = m.forward(single);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(one.probabilities[c] - out.probabilities[6 + c]) < 1e-6);
    for (std::size_t n = 0; n < 4; ++n) {
      double s = 0;
      for (std::size_t c = 0; c < 3; ++c) s += out.probabilities[n * 3 + c];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }

  TEST_CASE("permutation equivariance over the batch axis") {
    const Model m = build_filter_net([] { FilterNetConfig c; c.input_size = 32; return c; }(), 9);
    xray::Rng rng(10);
    const Tensor batch = random_tensor({3, 1, 32, 32}, rng);
    const std::size_t per = 32 * 32;
    Tensor perm(batch.shape());
    const std::size_t order[3] = {2, 0, 1};
    for (std::size_t i = 0; i < 3; ++i) std::copy(batch.raw() + order[i] * per, batch.raw() + (order[i] + 1) * per, perm.raw() + i * per);
    const auto a = m.forward(batch), b = m.forward(perm);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t c = 0; c < 2; ++c) CHECK(std::abs(b.logits[i * 2 + c] - a.logits[order[i] * 2 + c]) < 1e-6);
  }

  TEST_CASE("shape mismatch names expected and actual") {
    const Model m = build_filter_net([] { FilterNetConfig c; c.input_size = 32; return c; }());
    try {
      m.forward(Tensor({1, 3, 32, 32}));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[N,1,32,32]") != std::string::npos);
      CHECK(msg.find("[1,3,32,32]") != std::string::npos);
    }
  }

  TEST_CASE("golden logits reproduce bitwise") {
    const std::string path = std::string(XRAY_TEST_DATA) + "/golden_logits.json";
    xray::Rng rng(2024);
    const Tensor xf = random_tensor({2, 1, 32, 32}, rng, 0, 1);
    const Tensor xc = random_tensor({2, 3, 32, 32}, rng, -2, 2);
    FilterNetConfig fc;
    fc.input_size = 32;
    const Tensor lf = build_filter_net(fc, 11).forward(xf).logits;
    const Tensor lc = build_covid_net(small_covid(), 12).forward(xc).logits;
    auto bits = [](const Tensor& t) {
      nlohmann::json a = nlohmann::json::array();
      for (float v : t.data()) a.push_back(std::bit_cast<std::uint32_t>(v));
      return a;
    };
    if (std::getenv("XRAY_WRITE_GOLDEN")) {
      std::ofstream(path) << nlohmann::json{{"filter", bits(lf)}, {"covid", bits(lc)}}.dump(1) << "\n";
    }
    std::ifstream in(path);
    REQUIRE(in.good());
    const auto golden = nlohmann::json::parse(in);
    CHECK(golden["filter"] == bits(lf));
    CHECK(golden["covid"] == bits(lc));
  }
}

TEST_SUITE("cam") {
  TEST_CASE("constant features give a uniform 0.5 map") {
    xray::Rng rng(1);
    const Tensor cam = compute_cam(Tensor({4, 5, 5}, 2.0f), random_tensor({3, 4}, rng), 1, 40, 30);
    CHECK(cam.shape() == Shape{40, 30});
    for (float v : cam.data()) CHECK(v == 0.5f);
  }

  TEST_CASE("one-hot weights select a feature plane") {
    xray::Rng rng(2);
    const Tensor feats = random_tensor({3, 4, 4}, rng);
    Tensor w({2, 3});
    w[1 * 3 + 2] = 1.0f;
    const Tensor cam = compute_cam(feats, w, 1, 16, 16);
    Tensor plane({4, 4}, std::vector<float>(feats.raw() + 32, feats.raw() + 48));
    Tensor up = resize_map_bilinear(plane, 16, 16);
    const auto [lo, hi] = std::minmax_element(up.data().begin(), up.data().end());
    const float l = *lo, h = *hi;
    for (auto& v : up.data()) v = (v - l) / (h - l);
    CHECK(max_abs_diff(cam, up) < 1e-6);
    CHECK(*std::min_element(cam.data().begin(), cam.data().end()) == 0.0f);
    CHECK(*std::max_element(cam.data().begin(), cam.data().end()) == 1.0f);
  }

  TEST_CASE("GAP of the raw map equals the logit contribution") {
    const Model m = build_covid_net(small_covid(48), 13);
    xray::Rng rng(14);
    const auto out = m.forward(random_tensor({2, 3, 48, 48}, rng));
    const Tensor& W = m.head_weights();
    const Tensor& b = m.param("classifier.bias").value;
    for (std::size_t n = 0; n < 2; ++n) {
      const Tensor f = feature_plane(out.final_features, n);
      for (std::size_t c = 0; c < 3; ++c) {
        const Tensor raw = cam_raw_map(f, W, c);
        double gap = 0;
        for (float v : raw.data()) gap += v;
        gap /= static_cast<double>(raw.size());
        CHECK(std::abs(gap + b[c] - out.logits[n * 3 + c]) < 1e-5);
      }
    }
  }

  TEST_CASE("raw maps are linear in the features") {
    xray::Rng rng(15);
    const Tensor a = random_tensor({5, 3, 3}, rng), b = random_tensor({5, 3, 3}, rng);
    Tensor ab = a;
    for (std::size_t i = 0; i < ab.size(); ++i) ab[i] += b[i];
    const Tensor w = random_tensor({2, 5}, rng);
    const Tensor ra = cam_raw_map(a, w, 0), rb = cam_raw_map(b, w, 0), rab = cam_raw_map(ab, w, 0);
    for (std::size_t i = 0; i < rab.size(); ++i) CHECK(std::abs(rab[i] - (ra[i] + rb[i])) < 1e-5);
  }

  TEST_CASE("output dimensions and class bounds") {
    xray::Rng rng(16);
    const Tensor f = random_tensor({4, 7, 7}, rng);
    const Tensor w = random_tensor({3, 4}, rng);
    for (auto [h, wd] : {std::pair<std::size_t, std::size_t>{224, 224}, {300, 171}, {7, 7}, {1, 5}}) {
      const Tensor cam = compute_cam(f, w, 2, h, wd);
      CHECK(cam.shape() == Shape{h, wd});
      for (float v : cam.data()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
      }
    }
    CHECK_THROWS_AS(compute_cam(f, w, 3, 8, 8), std::out_of_range);
  }
}

TEST_SUITE("model io") {
  TEST_CASE("replace_head keeps everything else bitwise") {
    CovidNetConfig c = small_covid();
    c.num_classes = 2;
    const Model before = build_covid_net(c, 20);
    Model after = before;
    replace_head(after, 3, covid_class_names(3), 21);
    CHECK(after.num_classes() == 3);
    CHECK(after.head_weights().dim(0) == 3);
    for (std::size_t i = 0; i < before.params.size(); ++i) {
      if (before.params[i].name.rfind("classifier.", 0) == 0) continue;
      CHECK(after.params[i].value == before.params[i].value);
    }
    CHECK(std::get<CovidNetConfig>(after.config).num_classes == 3);
  }

  TEST_CASE("save and load round trip") {
    const auto dir = testing::scratch_dir("model");
    const Model m = build_covid_net(small_covid(), 22);
    save_model(dir, m);
    CHECK(std::filesystem::exists(dir / "config.json"));
    CHECK(std::filesystem::exists(dir / "weights.ckpt"));
    const Model back = load_model(dir);
    CHECK(back.class_names == m.class_names);
    CHECK(back.input_shape == m.input_shape);
    REQUIRE(back.params.size() == m.params.size());
    for (std::size_t i = 0; i < m.params.size(); ++i) CHECK(back.params[i].value == m.params[i].value);
    xray::Rng rng(23);
    const Tensor x = random_tensor({1, 3, 32, 32}, rng);
    CHECK(back.forward(x).logits == m.forward(x).logits);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("mismatched checkpoint is rejected") {
    Model m = build_covid_net(small_covid(), 1);
    auto state = model_state(build_filter_net([] { FilterNetConfig c; c.input_size = 32; return c; }()));
    CHECK_THROWS_AS(load_model_state(m, state), CheckpointError);
  }
}

TEST_SUITE("gradients of built models") {
  TEST_CASE("filter and covid nets at 32 px") {
    FilterNetConfig fc;
    fc.input_size = 32;
    xray::Rng rng(30);
    const auto rf = finite_difference_check(build_filter_net(fc, 31),
                                            squared_error_loss(random_tensor({2, 2}, rng)),
                                            random_tensor({2, 1, 32, 32}, rng));
    CHECK(rf.ok);
    CHECK(rf.max_relative_error < 1e-3);
    const auto rc = finite_difference_check(build_covid_net(small_covid(), 32),
                                            squared_error_loss(random_tensor({2, 3}, rng)),
                                            random_tensor({2, 3, 32, 32}, rng));
    CHECK(rc.ok);
    CHECK(rc.max_relative_error < 1e-3);
  }
}
