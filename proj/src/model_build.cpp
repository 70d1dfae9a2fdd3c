#include <cmath>

#include "xray/model.hpp"
#include "xray/ops.hpp"

namespace xray {

void FilterNetConfig::validate() const {
  if (stem_channels == 0) throw ModelConfigError("filter net: stem_channels must be >= 1");
  if (num_ds_blocks == 0) throw ModelConfigError("filter net: num_ds_blocks must be >= 1");
  if (!(width_multiplier > 0.0) || !std::isfinite(width_multiplier)) {
    throw ModelConfigError("filter net: width_multiplier must be positive");
  }
  if (scaled_stem_channels() == 0) {
    throw ModelConfigError("filter net: width_multiplier leaves the stem with zero channels");
  }
  for (std::size_t i = 0; i < num_ds_blocks; ++i) {
    if (block_channels(i) == 0) {
      throw ModelConfigError("filter net: block " + std::to_string(i + 1) + " has zero channels");
    }
  }
  if (input_size == 0) throw ModelConfigError("filter net: input_size must be positive");
}

std::size_t FilterNetConfig::scaled_stem_channels() const {
  return static_cast<std::size_t>(std::lround(width_multiplier * static_cast<double>(stem_channels)));
}

std::size_t FilterNetConfig::block_channels(std::size_t block) const {
  const double base = static_cast<double>(stem_channels) * std::ldexp(1.0, static_cast<int>(block / 2 + 1));
  return static_cast<std::size_t>(std::lround(width_multiplier * base));
}

void CovidNetConfig::validate() const {
  if (growth_rate == 0) throw ModelConfigError("covid net: growth_rate must be >= 1");
  if (layers_per_block == 0) throw ModelConfigError("covid net: layers_per_block must be >= 1");
  if (head_channels == 0) throw ModelConfigError("covid net: head_channels must be >= 1");
  if (num_classes < 2) throw ModelConfigError("covid net: num_classes must be >= 2");
  if (input_size == 0) throw ModelConfigError("covid net: input_size must be positive");
  if (stem_stride == 0 || stem_pool == 0) {
    throw ModelConfigError("covid net: stem_stride and stem_pool must be >= 1");
  }
}

std::size_t CovidNetConfig::resolved_stem_channels() const {
  return stem_channels ? stem_channels : 2 * growth_rate;
}

ModelBuilder::ModelBuilder(Shape input_shape, std::uint64_t seed)
    : shape_(input_shape), rng_(seed) {
  if (input_shape.size() != 3) throw ModelConfigError("model input shape must be [C,H,W]");
  model_.input_shape = std::move(input_shape);
}

std::size_t ModelBuilder::add_param(const std::string& name, Shape shape, double stddev) {
  if (model_.find_param(name)) throw ModelConfigError("duplicate parameter name '" + name + "'");
  Tensor value(std::move(shape));
  if (stddev > 0.0) {
    for (auto& v : value.data()) v = static_cast<float>(stddev * rng_.normal());
  }
  model_.params.emplace_back(name, std::move(value));
  return model_.params.size() - 1;
}

ModelBuilder& ModelBuilder::conv(const std::string& name, std::size_t out_channels,
                                 std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (shape_.size() != 3) throw ModelConfigError(name + ": conv needs a [C,H,W] activation");
  if (out_channels == 0) throw ModelConfigError(name + ": zero output channels");
  const std::size_t cin = shape_[0];
  LayerSpec L{LayerKind::conv, name, stride, padding, 0, {}};
  try {
    shape_ = {out_channels, conv_output_extent(shape_[1], kernel, stride, padding),
              conv_output_extent(shape_[2], kernel, stride, padding)};
  } catch (const DimensionError& e) {
    throw ModelConfigError(name + ": " + e.what());
  }
  L.params.push_back(add_param(name + ".weight", {out_channels, cin, kernel, kernel},
                               std::sqrt(2.0 / static_cast<double>(cin * kernel * kernel))));
  L.params.push_back(add_param(name + ".bias", {out_channels}, 0.0));
  model_.layers.push_back(std::move(L));
  return *this;
}

ModelBuilder& ModelBuilder::separable(const std::string& name, std::size_t out_channels,
                                      std::size_t kernel, std::size_t stride) {
  if (shape_.size() != 3) throw ModelConfigError(name + ": separable conv needs [C,H,W]");
  if (out_channels == 0) throw ModelConfigError(name + ": zero output channels");
  const std::size_t cin = shape_[0];
  const std::size_t pad = kernel / 2;
  LayerSpec L{LayerKind::separable, name, stride, pad, 0, {}};
  try {
    shape_ = {out_channels, conv_output_extent(shape_[1], kernel, stride, pad),
              conv_output_extent(shape_[2], kernel, stride, pad)};
  } catch (const DimensionError& e) {
    throw ModelConfigError(name + ": " + e.what());
  }
  L.params.push_back(add_param(name + ".depthwise", {cin, 1, kernel, kernel},
                               std::sqrt(2.0 / static_cast<double>(kernel * kernel))));
  L.params.push_back(add_param(name + ".pointwise", {out_channels, cin, 1, 1},
                               std::sqrt(2.0 / static_cast<double>(cin))));
  L.params.push_back(add_param(name + ".bias", {out_channels}, 0.0));
  model_.layers.push_back(std::move(L));
  return *this;
}

ModelBuilder& ModelBuilder::relu(const std::string& name) {
  model_.layers.push_back({LayerKind::relu, name, 1, 0, 0, {}});
  return *this;
}

ModelBuilder& ModelBuilder::avg_pool(const std::string& name, std::size_t window,
                                     std::size_t stride) {
  if (shape_.size() != 3 || window == 0 || stride == 0 || window > shape_[1] ||
      window > shape_[2]) {
    throw ModelConfigError(name + ": pooling window " + std::to_string(window) +
                           " does not fit activation " + shape_str(shape_));
  }
  shape_ = {shape_[0], (shape_[1] - window) / stride + 1, (shape_[2] - window) / stride + 1};
  model_.layers.push_back({LayerKind::avg_pool, name, stride, 0, window, {}});
  return *this;
}

ModelBuilder& ModelBuilder::dense_block(const std::string& name, std::size_t layers,
                                        std::size_t growth) {
  if (shape_.size() != 3) throw ModelConfigError(name + ": dense block needs [C,H,W]");
  if (layers == 0 || growth == 0) throw ModelConfigError(name + ": empty dense block");
  LayerSpec L{LayerKind::dense_block, name, 1, 1, 0, {}};
  for (std::size_t i = 0; i < layers; ++i) {
    const std::size_t cin = shape_[0];
    const std::string prefix = name + ".layer" + std::to_string(i + 1) + ".conv";
    L.params.push_back(add_param(prefix + ".weight", {growth, cin, 3, 3},
                                 std::sqrt(2.0 / static_cast<double>(cin * 9))));
    L.params.push_back(add_param(prefix + ".bias", {growth}, 0.0));
    shape_[0] += growth;
  }
  model_.layers.push_back(std::move(L));
  return *this;
}

ModelBuilder& ModelBuilder::global_avg_pool(const std::string& name) {
  if (shape_.size() != 3) throw ModelConfigError(name + ": global pooling needs [C,H,W]");
  shape_ = {shape_[0]};
  model_.layers.push_back({LayerKind::global_avg_pool, name, 1, 0, 0, {}});
  return *this;
}

ModelBuilder& ModelBuilder::linear(const std::string& name, std::size_t out_features) {
  if (shape_.size() != 1) throw ModelConfigError(name + ": linear needs a flat [F] activation");
  const std::size_t f = shape_[0];
  LayerSpec L{LayerKind::linear, name, 1, 0, 0, {}};
  L.params.push_back(add_param(name + ".weight", {out_features, f},
                               std::sqrt(1.0 / static_cast<double>(f))));
  L.params.push_back(add_param(name + ".bias", {out_features}, 0.0));
  shape_ = {out_features};
  model_.layers.push_back(std::move(L));
  return *this;
}

Model ModelBuilder::build(std::vector<std::string> class_names, ArchitectureConfig config) {
  if (shape_.size() == 1 && class_names.size() != shape_[0]) {
    throw ModelConfigError("model emits " + std::to_string(shape_[0]) + " outputs but " +
                           std::to_string(class_names.size()) + " class names were given");
  }
  model_.class_names = std::move(class_names);
  model_.config = std::move(config);
  return std::move(model_);
}

std::vector<std::string> filter_class_names() { return {"valid", "nonvalid"}; }

std::vector<std::string> covid_class_names(std::size_t num_classes) {
  if (num_classes == 2) return {"no_finding", "lung_opacity"};
  if (num_classes == 3) return {"no_finding", "lung_opacity", "covid19"};
  std::vector<std::string> names;
  for (std::size_t i = 0; i < num_classes; ++i) names.push_back("class" + std::to_string(i));
  return names;
}

Model build_filter_net(const FilterNetConfig& config, std::uint64_t seed) {
  config.validate();
  ModelBuilder b({1, config.input_size, config.input_size}, seed);
  b.conv("stem.conv", config.scaled_stem_channels(), 3, 2, 1).relu("stem.relu");
  for (std::size_t i = 0; i < config.num_ds_blocks; ++i) {
    const std::string name = "block" + std::to_string(i + 1);
    b.separable(name + ".separable", config.block_channels(i), 3, i % 2 == 1 ? 2 : 1)
        .relu(name + ".relu");
  }
  b.global_avg_pool("pool").linear("classifier", FilterNetConfig::num_classes);
  return b.build(filter_class_names(), config);
}

Model build_covid_net(const CovidNetConfig& config, std::uint64_t seed) {
  config.validate();
  ModelBuilder b({3, config.input_size, config.input_size}, seed);
  b.conv("stem.conv", config.resolved_stem_channels(), 3, config.stem_stride, 1);
  if (config.stem_pool > 1) b.avg_pool("stem.pool", config.stem_pool, config.stem_pool);
  for (std::size_t blk = 1; blk <= CovidNetConfig::num_blocks; ++blk) {
    b.dense_block("block" + std::to_string(blk), config.layers_per_block, config.growth_rate);
    if (blk < CovidNetConfig::num_blocks) {
      const std::string t = "transition" + std::to_string(blk);
      const std::size_t halved = b.channels() / 2;
      if (halved == 0) throw ModelConfigError(t + ": channel halving reaches zero");
      b.relu(t + ".relu").conv(t + ".conv", halved, 1, 1, 0).avg_pool(t + ".pool", 2, 2);
    }
  }
  b.relu("head.relu_in")
      .conv("head.conv", config.head_channels, 1, 1, 0)
      .relu("head.relu")
      .global_avg_pool("head.pool")
      .linear("classifier", config.num_classes);
  return b.build(covid_class_names(config.num_classes), config);
}

void replace_head(Model& model, std::size_t num_classes, std::vector<std::string> class_names,
                  std::uint64_t seed) {
  if (class_names.size() != num_classes) {
    throw ModelConfigError("replace_head: class_names size != num_classes");
  }
  LayerSpec* head = nullptr;
  for (auto it = model.layers.rbegin(); it != model.layers.rend(); ++it) {
    if (it->kind == LayerKind::linear) {
      head = &*it;
      break;
    }
  }
  if (!head) throw ModelConfigError("replace_head: model has no linear head");
  auto& w = model.params[head->params[0]];
  auto& b = model.params[head->params[1]];
  const std::size_t f = w.value.dim(1);
  Rng rng(seed);
  Tensor fresh({num_classes, f});
  const double stddev = std::sqrt(1.0 / static_cast<double>(f));
  for (auto& v : fresh.data()) v = static_cast<float>(stddev * rng.normal());
  w = Parameter(w.name, std::move(fresh));
  b = Parameter(b.name, Tensor({num_classes}));
  model.class_names = std::move(class_names);
  if (auto* cfg = std::get_if<CovidNetConfig>(&model.config)) cfg->num_classes = num_classes;
}

}  // namespace xray
