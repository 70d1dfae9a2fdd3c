#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>
#include "xray/model.hpp"

namespace xray {

Tensor cam_raw_map(const Tensor& features, const Tensor& head_weights, std::size_t class_index) {
  require_rank(features, 3, "cam features");
  require_rank(head_weights, 2, "cam head weights");
  const std::size_t F = features.dim(0), HW = features.dim(1) * features.dim(2);
  if (head_weights.dim(1) != F) {
    throw DimensionError("cam: head weights axis 1 (" + std::to_string(head_weights.dim(1)) +
                         ") != feature axis 0 (" + std::to_string(F) + ")");
  }
  if (class_index >= head_weights.dim(0)) {
    throw std::out_of_range("cam: class_index " + std::to_string(class_index) + " >= " +
                            std::to_string(head_weights.dim(0)) + " classes");
  }
  std::vector<double> acc(HW, 0.0);
  for (std::size_t f = 0; f < F; ++f) {
    const double w = head_weights[class_index * F + f];
    const float* plane = features.raw() + f * HW;
    for (std::size_t i = 0; i < HW; ++i) acc[i] += w * plane[i];
  }
  Tensor out({features.dim(1), features.dim(2)});
  for (std::size_t i = 0; i < HW; ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

Tensor resize_map_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w) {
  require_rank(map, 2, "resize_map_bilinear input");
  if (out_h == 0 || out_w == 0) throw DimensionError("resize_map_bilinear: zero output extent");
  const std::size_t H = map.dim(0), W = map.dim(1);
  if (H == out_h && W == out_w) return map;
  Tensor out({out_h, out_w});
  const double sy_scale = static_cast<double>(H) / static_cast<double>(out_h);
  const double sx_scale = static_cast<double>(W) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = std::clamp((static_cast<double>(y) + 0.5) * sy_scale - 0.5, 0.0,
                                 static_cast<double>(H - 1));
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double wy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = std::clamp((static_cast<double>(x) + 0.5) * sx_scale - 0.5, 0.0,
                                   static_cast<double>(W - 1));
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double wx = sx - static_cast<double>(x0);
      const double top = (1.0 - wx) * map[y0 * W + x0] + wx * map[y0 * W + x1];
      const double bot = (1.0 - wx) * map[y1 * W + x0] + wx * map[y1 * W + x1];
      out[y * out_w + x] = static_cast<float>((1.0 - wy) * top + wy * bot);
    }
  }
  return out;
}

Tensor compute_cam(const Tensor& features, const Tensor& head_weights, std::size_t class_index,
                   std::size_t out_h, std::size_t out_w) {
  const Tensor raw = cam_raw_map(features, head_weights, class_index);
  const auto [rmin, rmax] = std::minmax_element(raw.data().begin(), raw.data().end());
  if (*rmin == *rmax) return Tensor({out_h, out_w}, 0.5f);
  Tensor up = resize_map_bilinear(raw, out_h, out_w);
  const auto [umin, umax] = std::minmax_element(up.data().begin(), up.data().end());
  const float lo = *umin, hi = *umax;
  if (!(hi > lo)) return Tensor({out_h, out_w}, 0.5f);
  const float inv = 1.0f / (hi - lo);
  for (auto& v : up.data()) v = std::clamp((v - lo) * inv, 0.0f, 1.0f);
  return up;
}

std::vector<NamedTensor> model_state(const Model& model) {
  std::vector<NamedTensor> out;
  out.reserve(model.params.size());
  for (const auto& p : model.params) out.push_back({p.name, p.value});
  return out;
}

void load_model_state(Model& model, const std::vector<NamedTensor>& state) {
  if (state.size() != model.params.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(state.size()) +
                          " tensors but the model has " + std::to_string(model.params.size()) +
                          " parameters");
  }
  for (const auto& nt : state) {
    auto idx = model.find_param(nt.name);
    if (!idx) throw CheckpointError("checkpoint tensor '" + nt.name + "' has no matching parameter");
    auto& p = model.params[*idx];
    if (p.value.shape() != nt.tensor.shape()) {
      throw CheckpointError("checkpoint tensor '" + nt.name + "' has shape " +
                            shape_str(nt.tensor.shape()) + ", model expects " +
                            shape_str(p.value.shape()));
    }
    p = Parameter(p.name, nt.tensor);
  }
}

namespace {

nlohmann::json config_to_json(const Model& model) {
  nlohmann::json j;
  if (const auto* f = std::get_if<FilterNetConfig>(&model.config)) {
    j = {{"architecture", "filter"},
         {"stem_channels", f->stem_channels},
         {"num_ds_blocks", f->num_ds_blocks},
         {"width_multiplier", f->width_multiplier},
         {"input_size", f->input_size},
         {"num_classes", FilterNetConfig::num_classes}};
  } else if (const auto* c = std::get_if<CovidNetConfig>(&model.config)) {
    j = {{"architecture", "covid"},
         {"growth_rate", c->growth_rate},
         {"layers_per_block", c->layers_per_block},
         {"num_blocks", CovidNetConfig::num_blocks},
         {"head_channels", c->head_channels},
         {"num_classes", c->num_classes},
         {"input_size", c->input_size},
         {"stem_channels", c->resolved_stem_channels()},
         {"stem_stride", c->stem_stride},
         {"stem_pool", c->stem_pool}};
  } else {
    throw ModelConfigError("only filter and covid architectures can be serialized");
  }
  j["class_names"] = model.class_names;
  return j;
}

Model model_from_json(const nlohmann::json& j) {
  const auto arch = j.at("architecture").get<std::string>();
  Model m;
  if (arch == "filter") {
    FilterNetConfig f;
    f.stem_channels = j.value("stem_channels", f.stem_channels);
    f.num_ds_blocks = j.value("num_ds_blocks", f.num_ds_blocks);
    f.width_multiplier = j.value("width_multiplier", f.width_multiplier);
    f.input_size = j.value("input_size", f.input_size);
    m = build_filter_net(f);
  } else if (arch == "covid") {
    CovidNetConfig c;
    c.growth_rate = j.value("growth_rate", c.growth_rate);
    c.layers_per_block = j.value("layers_per_block", c.layers_per_block);
    c.head_channels = j.value("head_channels", c.head_channels);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.input_size = j.value("input_size", c.input_size);
    c.stem_channels = j.value("stem_channels", c.stem_channels);
    c.stem_stride = j.value("stem_stride", c.stem_stride);
    c.stem_pool = j.value("stem_pool", c.stem_pool);
    m = build_covid_net(c);
  } else {
    throw ModelConfigError("unknown architecture '" + arch + "'");
  }
  if (j.contains("class_names")) {
    auto names = j.at("class_names").get<std::vector<std::string>>();
    if (names.size() != m.num_classes()) {
      throw ModelConfigError("config class_names size does not match num_classes");
    }
    m.class_names = std::move(names);
  }
  return m;
}

}  // namespace

void save_model(const std::filesystem::path& dir, const Model& model) {
  std::filesystem::create_directories(dir);
  write_file_bytes(dir / "config.json", config_to_json(model).dump(2) + "\n");
  save_checkpoint(dir / "weights.ckpt", model_state(model));
}

Model load_model(const std::filesystem::path& dir) {
  const auto cfg_path = dir / "config.json";
  const auto ckpt_path = dir / "weights.ckpt";
  if (!std::filesystem::exists(cfg_path)) {
    throw CheckpointError("model config not found: " + cfg_path.string());
  }
  if (!std::filesystem::exists(ckpt_path)) {
    throw CheckpointError("model checkpoint not found: " + ckpt_path.string());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(cfg_path));
  } catch (const nlohmann::json::exception& e) {
    throw ModelConfigError("invalid model config " + cfg_path.string() + ": " + e.what());
  }
  Model m = model_from_json(j);
  load_model_state(m, load_checkpoint(ckpt_path));
  return m;
}

}  // namespace xray
