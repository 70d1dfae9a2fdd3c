#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "xray/checkpoint.hpp"
#include "xray/optim.hpp"
#include "xray/rng.hpp"
#include "xray/tensor.hpp"

namespace xray {

class ModelConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// MobileNet-style validity filter: stride-2 stem conv, depthwise-separable
/// blocks (odd-indexed blocks stride 2), global average pooling, linear head.
/// Block i produces round(width_multiplier * stem_channels * 2^(i/2 + 1)) channels.
struct FilterNetConfig {
  std::size_t stem_channels = 8;
  std::size_t num_ds_blocks = 4;
  double width_multiplier = 1.0;
  std::size_t input_size = 224;
  static constexpr std::size_t num_classes = 2;

  void validate() const;
  std::size_t scaled_stem_channels() const;
  std::size_t block_channels(std::size_t block) const;
};

/// Dense-block classifier. Layer table:
///   stem: conv3x3/stem_stride (3 -> stem_channels), avg_pool(stem_pool)
///   3 x [dense block: layers_per_block x (ReLU -> conv3x3 -> growth_rate, concatenated)]
///   separated by 2 transitions: ReLU -> conv1x1 (channels / 2) -> avg_pool 2x2/2
///   head: ReLU -> conv1x1 (head_channels) -> ReLU -> global average pool -> linear
struct CovidNetConfig {
  std::size_t growth_rate = 12;
  std::size_t layers_per_block = 4;
  static constexpr std::size_t num_blocks = 3;
  std::size_t head_channels = 64;
  std::size_t num_classes = 3;
  std::size_t input_size = 224;
  std::size_t stem_channels = 0;  // 0 selects 2 * growth_rate
  std::size_t stem_stride = 2;
  std::size_t stem_pool = 4;

  void validate() const;
  std::size_t resolved_stem_channels() const;
};

using ArchitectureConfig = std::variant<std::monostate, FilterNetConfig, CovidNetConfig>;

enum class LayerKind { conv, separable, relu, avg_pool, dense_block, global_avg_pool, linear };

const char* layer_kind_name(LayerKind kind);

/// Layer descriptor. `params` indexes the model's parameter list:
///   conv: weight, bias      separable: depthwise, pointwise, bias
///   linear: weight, bias    dense_block: (weight, bias) per composite layer
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t window = 0;
  std::vector<std::size_t> params;
};

template <typename T>
struct ForwardOutput {
  BasicTensor<T> logits;
  BasicTensor<T> probabilities;
  BasicTensor<T> final_features;  // the tensor fed to global average pooling
};

/// ReLU on/off masks in application order, used to evaluate the network on a
/// fixed linear region.
struct ActivationPattern {
  std::vector<std::vector<std::uint8_t>> masks;
};

template <typename T>
struct ForwardTape {
  std::vector<std::vector<BasicTensor<T>>> saved;
  ForwardOutput<T> output;
};

template <typename T>
class BasicModel {
 public:
  ArchitectureConfig config;
  Shape input_shape;  // [C,H,W]
  std::vector<std::string> class_names;
  std::vector<LayerSpec> layers;
  std::vector<BasicParameter<T>> params;

  ForwardOutput<T> forward(const BasicTensor<T>& batch) const;
  ForwardTape<T> forward_train(const BasicTensor<T>& batch) const;
  /// Forward pass that records (`record` = true) or replays the ReLU masks.
  ForwardOutput<T> forward_pattern(const BasicTensor<T>& batch, ActivationPattern& pattern,
                                   bool record) const;
  /// Accumulates parameter gradients for d(loss)/d(logits) into each grad slot.
  void backward(const ForwardTape<T>& tape, const BasicTensor<T>& grad_logits);

  void zero_grad();
  std::size_t num_classes() const { return class_names.size(); }
  std::size_t parameter_count() const;
  std::optional<std::size_t> find_param(const std::string& name) const;
  BasicParameter<T>& param(const std::string& name);
  const BasicParameter<T>& param(const std::string& name) const;
  /// Weight matrix [C,F] of the final linear layer.
  const BasicTensor<T>& head_weights() const;
  /// Output shape of every layer for a batch of one, in layer order.
  std::vector<Shape> layer_output_shapes() const;

  template <typename U>
  BasicModel<U> cast() const {
    BasicModel<U> m;
    m.config = config;
    m.input_shape = input_shape;
    m.class_names = class_names;
    m.layers = layers;
    for (const auto& p : params) m.params.push_back(p.template cast<U>());
    return m;
  }

 private:
  ForwardOutput<T> run(const BasicTensor<T>& batch, ForwardTape<T>* tape,
                       ActivationPattern* pattern = nullptr, bool replay = false) const;
  void check_input(const BasicTensor<T>& batch) const;
};

using Model = BasicModel<float>;

extern template class BasicModel<float>;
extern template class BasicModel<double>;

/// Incremental construction of a layer list with seeded He-normal initialization.
class ModelBuilder {
 public:
  ModelBuilder(Shape input_shape, std::uint64_t seed);

  std::size_t channels() const { return shape_[0]; }
  const Shape& current_shape() const { return shape_; }

  ModelBuilder& conv(const std::string& name, std::size_t out_channels, std::size_t kernel,
                     std::size_t stride, std::size_t padding);
  ModelBuilder& separable(const std::string& name, std::size_t out_channels, std::size_t kernel,
                          std::size_t stride);
  ModelBuilder& relu(const std::string& name);
  ModelBuilder& avg_pool(const std::string& name, std::size_t window, std::size_t stride);
  ModelBuilder& dense_block(const std::string& name, std::size_t layers, std::size_t growth);
  ModelBuilder& global_avg_pool(const std::string& name);
  ModelBuilder& linear(const std::string& name, std::size_t out_features);

  Model build(std::vector<std::string> class_names, ArchitectureConfig config = {});

 private:
  std::size_t add_param(const std::string& name, Shape shape, double stddev);

  Model model_;
  Shape shape_;  // current activation shape without batch axis
  Rng rng_;
};

Model build_filter_net(const FilterNetConfig& config, std::uint64_t seed = 0);
Model build_covid_net(const CovidNetConfig& config, std::uint64_t seed = 0);

/// Class names for the two classifier stages and the filter.
std::vector<std::string> filter_class_names();
std::vector<std::string> covid_class_names(std::size_t num_classes);

/// Swaps the final linear layer for a freshly initialized one with
/// `num_classes` outputs; every other parameter is kept bitwise.
void replace_head(Model& model, std::size_t num_classes, std::vector<std::string> class_names,
                  std::uint64_t seed);

/// m[y,x] = sum_f head_weights[class,f] * features[f,y,x]
Tensor cam_raw_map(const Tensor& features, const Tensor& head_weights, std::size_t class_index);

/// Raw map, bilinearly upsampled (half-pixel centers) and min-max normalized
/// to [0,1]. A constant raw map yields 0.5 everywhere.
Tensor compute_cam(const Tensor& features, const Tensor& head_weights, std::size_t class_index,
                   std::size_t out_h, std::size_t out_w);

/// Bilinear resize of a 2-D float map with the image resize convention.
Tensor resize_map_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w);

std::vector<NamedTensor> model_state(const Model& model);
void load_model_state(Model& model, const std::vector<NamedTensor>& state);

/// `dir/config.json` and `dir/weights.ckpt`.
void save_model(const std::filesystem::path& dir, const Model& model);
Model load_model(const std::filesystem::path& dir);

}  // namespace xray
