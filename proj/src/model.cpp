#include "xray/model.hpp"

#include <numeric>

#include "xray/ops.hpp"

namespace xray {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::separable: return "separable";
    case LayerKind::relu: return "relu";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::dense_block: return "dense_block";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::linear: return "linear";
  }
  return "unknown";
}

namespace {

template <typename T>
void accumulate(BasicParameter<T>& p, const BasicTensor<T>& g) {
  T* dst = p.grad.raw();
  const T* src = g.raw();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

template <typename T>
void add_channel_bias(BasicTensor<T>& x, const BasicTensor<T>& bias) {
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      T* p = x.raw() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) p[i] += bias[c];
    }
  }
}

template <typename T>
BasicTensor<T> channel_sums(const BasicTensor<T>& g) {
  const std::size_t N = g.dim(0), C = g.dim(1), HW = g.dim(2) * g.dim(3);
  BasicTensor<T> out({C});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = g.raw() + (n * C + c) * HW;
      T s{0};
      for (std::size_t i = 0; i < HW; ++i) s += p[i];
      out[c] += s;
    }
  }
  return out;
}

}  // namespace

template <typename T>
void BasicModel<T>::check_input(const BasicTensor<T>& batch) const {
  Shape expected{0};
  expected.insert(expected.end(), input_shape.begin(), input_shape.end());
  bool ok = batch.rank() == expected.size();
  for (std::size_t i = 1; ok && i < expected.size(); ++i) ok = batch.dim(i) == expected[i];
  if (!ok) {
    std::string exp = "[N";
    for (auto d : input_shape) exp += "," + std::to_string(d);
    exp += "]";
    throw DimensionError("model input: expected " + exp + ", got " + shape_str(batch.shape()));
  }
}

template <typename T>
ForwardOutput<T> BasicModel<T>::run(const BasicTensor<T>& batch, ForwardTape<T>* tape,
                                    ActivationPattern* pattern, bool replay) const {
  check_input(batch);
  std::size_t relu_site = 0;
  auto activate = [&](const BasicTensor<T>& in) {
    if (!pattern) return relu(in);
    if (replay) {
      if (relu_site >= pattern->masks.size() || pattern->masks[relu_site].size() != in.size()) {
        throw std::logic_error("activation pattern does not match the network");
      }
      const auto& mask = pattern->masks[relu_site++];
      BasicTensor<T> out = in;
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (!mask[i]) out[i] = T{0};
      }
      return out;
    }
    std::vector<std::uint8_t> mask(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) mask[i] = in[i] > T{0};
    pattern->masks.push_back(std::move(mask));
    ++relu_site;
    return relu(in);
  };
  if (tape) tape->saved.assign(layers.size(), {});
  ForwardOutput<T> out;
  BasicTensor<T> x = batch;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const LayerSpec& L = layers[li];
    if (tape && L.kind != LayerKind::dense_block) tape->saved[li].push_back(x);
    switch (L.kind) {
      case LayerKind::conv:
        x = conv2d(x, params[L.params[0]].value, params[L.params[1]].value, L.stride, L.padding);
        break;
      case LayerKind::separable:
        x = depthwise_separable_conv(x, params[L.params[0]].value, params[L.params[1]].value,
                                     L.stride, static_cast<int>(L.padding));
        add_channel_bias(x, params[L.params[2]].value);
        break;
      case LayerKind::relu:
        x = activate(x);
        break;
      case LayerKind::avg_pool:
        x = avg_pool2d(x, L.window, L.stride);
        break;
      case LayerKind::dense_block:
        for (std::size_t k = 0; k + 1 < L.params.size(); k += 2) {
          if (tape) tape->saved[li].push_back(x);
          auto y = conv2d(activate(x), params[L.params[k]].value, params[L.params[k + 1]].value, 1, 1);
          x = concat_channels(x, y);
        }
        break;
      case LayerKind::global_avg_pool:
        out.final_features = x;
        x = global_avg_pool(x);
        break;
      case LayerKind::linear:
        x = linear(x, params[L.params[0]].value, params[L.params[1]].value);
        break;
    }
  }
  out.logits = std::move(x);
  if (out.logits.rank() == 2 && out.logits.dim(1) >= 2) out.probabilities = softmax(out.logits);
  if (tape) tape->output = out;
  return out;
}

template <typename T>
ForwardOutput<T> BasicModel<T>::forward(const BasicTensor<T>& batch) const {
  return run(batch, nullptr);
}

template <typename T>
ForwardOutput<T> BasicModel<T>::forward_pattern(const BasicTensor<T>& batch,
                                                ActivationPattern& pattern, bool record) const {
  if (record) pattern.masks.clear();
  return run(batch, nullptr, &pattern, !record);
}

template <typename T>
ForwardTape<T> BasicModel<T>::forward_train(const BasicTensor<T>& batch) const {
  ForwardTape<T> tape;
  run(batch, &tape);
  return tape;
}

template <typename T>
void BasicModel<T>::backward(const ForwardTape<T>& tape, const BasicTensor<T>& grad_logits) {
  if (grad_logits.shape() != tape.output.logits.shape()) {
    throw DimensionError("backward: grad_logits shape " + shape_str(grad_logits.shape()) +
                         " != logits shape " + shape_str(tape.output.logits.shape()));
  }
  BasicTensor<T> g = grad_logits;
  for (std::size_t li = layers.size(); li-- > 0;) {
    const LayerSpec& L = layers[li];
    const auto& saved = tape.saved[li];
    switch (L.kind) {
      case LayerKind::conv: {
        auto cg = conv2d_backward(saved[0], params[L.params[0]].value, L.stride, L.padding, g);
        accumulate(params[L.params[0]], cg.kernel);
        accumulate(params[L.params[1]], cg.bias);
        g = std::move(cg.input);
        break;
      }
      case LayerKind::separable: {
        accumulate(params[L.params[2]], channel_sums(g));
        auto sg = depthwise_separable_conv_backward(saved[0], params[L.params[0]].value,
                                                    params[L.params[1]].value, L.stride,
                                                    static_cast<int>(L.padding), g);
        accumulate(params[L.params[0]], sg.depthwise_kernel);
        accumulate(params[L.params[1]], sg.pointwise_kernel);
        g = std::move(sg.input);
        break;
      }
      case LayerKind::relu:
        g = relu_backward(saved[0], g);
        break;
      case LayerKind::avg_pool:
        g = avg_pool2d_backward(saved[0].shape(), L.window, L.stride, g);
        break;
      case LayerKind::dense_block: {
        for (std::size_t k = saved.size(); k-- > 0;) {
          const auto& stack = saved[k];
          const std::size_t prev = stack.dim(1);
          const std::size_t growth = g.dim(1) - prev;
          auto d_new = slice_channels(g, prev, growth);
          auto d_prev = slice_channels(g, 0, prev);
          const std::size_t wi = L.params[2 * k], bi = L.params[2 * k + 1];
          auto cg = conv2d_backward(relu(stack), params[wi].value, 1, 1, d_new);
          accumulate(params[wi], cg.kernel);
          accumulate(params[bi], cg.bias);
          auto dr = relu_backward(stack, cg.input);
          for (std::size_t i = 0; i < d_prev.size(); ++i) d_prev[i] += dr[i];
          g = std::move(d_prev);
        }
        break;
      }
      case LayerKind::global_avg_pool:
        g = global_avg_pool_backward(saved[0].shape(), g);
        break;
      case LayerKind::linear: {
        auto lg = linear_backward(saved[0], params[L.params[0]].value, g);
        accumulate(params[L.params[0]], lg.kernel);
        accumulate(params[L.params[1]], lg.bias);
        g = std::move(lg.input);
        break;
      }
    }
  }
}

template <typename T>
void BasicModel<T>::zero_grad() {
  for (auto& p : params) p.zero_grad();
}

template <typename T>
std::size_t BasicModel<T>::parameter_count() const {
  return std::accumulate(params.begin(), params.end(), std::size_t{0},
                         [](std::size_t acc, const auto& p) { return acc + p.value.size(); });
}

template <typename T>
std::optional<std::size_t> BasicModel<T>::find_param(const std::string& name) const {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name == name) return i;
  }
  return std::nullopt;
}

template <typename T>
BasicParameter<T>& BasicModel<T>::param(const std::string& name) {
  auto i = find_param(name);
  if (!i) throw std::out_of_range("no parameter named '" + name + "'");
  return params[*i];
}

template <typename T>
const BasicParameter<T>& BasicModel<T>::param(const std::string& name) const {
  auto i = find_param(name);
  if (!i) throw std::out_of_range("no parameter named '" + name + "'");
  return params[*i];
}

template <typename T>
const BasicTensor<T>& BasicModel<T>::head_weights() const {
  for (std::size_t li = layers.size(); li-- > 0;) {
    if (layers[li].kind == LayerKind::linear) return params[layers[li].params[0]].value;
  }
  throw std::logic_error("model has no linear head");
}

template <typename T>
std::vector<Shape> BasicModel<T>::layer_output_shapes() const {
  Shape s{1};
  s.insert(s.end(), input_shape.begin(), input_shape.end());
  std::vector<Shape> out;
  for (const auto& L : layers) {
    switch (L.kind) {
      case LayerKind::conv: {
        const auto& w = params[L.params[0]].value.shape();
        s = {1, w[0], conv_output_extent(s[2], w[2], L.stride, L.padding),
             conv_output_extent(s[3], w[3], L.stride, L.padding)};
        break;
      }
      case LayerKind::separable: {
        const auto& dw = params[L.params[0]].value.shape();
        const auto& pw = params[L.params[1]].value.shape();
        s = {1, pw[0], conv_output_extent(s[2], dw[2], L.stride, L.padding),
             conv_output_extent(s[3], dw[3], L.stride, L.padding)};
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::avg_pool:
        s = {1, s[1], (s[2] - L.window) / L.stride + 1, (s[3] - L.window) / L.stride + 1};
        break;
      case LayerKind::dense_block:
        for (std::size_t k = 0; k < L.params.size(); k += 2) s[1] += params[L.params[k]].value.dim(0);
        break;
      case LayerKind::global_avg_pool:
        s = {1, s[1]};
        break;
      case LayerKind::linear:
        s = {1, params[L.params[0]].value.dim(0)};
        break;
    }
    out.push_back(s);
  }
  return out;
}

template class BasicModel<float>;
template class BasicModel<double>;

}  // namespace xray
