#include "xray/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace xray {

namespace {

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t m = 0; m < M; ++m) {
    T* crow = C + m * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[m * K + k];
      const T* brow = B + k * N;
      for (std::size_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  T tail{0};
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// C[M,K] += A[M,N] * B[K,N]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t k = 0; k < K; ++k) C[m * K + k] += dot(A + m * N, B + k * N, N);
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t m = 0; m < M; ++m) {
    const T* brow = B + m * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[m * K + k];
      T* crow = C + k * N;
      for (std::size_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

struct ConvGeom {
  std::size_t N, Cin, H, W, Cout, kh, kw, Ho, Wo, stride, pad;
  std::size_t K() const { return Cin * kh * kw; }
  std::size_t P() const { return Ho * Wo; }
  bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <typename T>
ConvGeom conv_geometry(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                       std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  ConvGeom g{};
  g.N = input.dim(0);
  g.Cin = input.dim(1);
  g.H = input.dim(2);
  g.W = input.dim(3);
  g.Cout = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (kernel.dim(1) != g.Cin) {
    throw DimensionError("conv2d: kernel axis 1 (input channels) is " +
                         std::to_string(kernel.dim(1)) + " but input axis 1 (channels) is " +
                         std::to_string(g.Cin));
  }
  if (g.kh > g.H + 2 * padding) {
    throw DimensionError("conv2d: kernel axis 2 (height " + std::to_string(g.kh) +
                         ") exceeds padded input axis 2 (" + std::to_string(g.H + 2 * padding) +
                         ")");
  }
  if (g.kw > g.W + 2 * padding) {
    throw DimensionError("conv2d: kernel axis 3 (width " + std::to_string(g.kw) +
                         ") exceeds padded input axis 3 (" + std::to_string(g.W + 2 * padding) +
                         ")");
  }
  g.Ho = conv_output_extent(g.H, g.kh, stride, padding);
  g.Wo = conv_output_extent(g.W, g.kw, stride, padding);
  return g;
}

template <typename T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  const std::size_t P = g.P();
  for (std::size_t c = 0; c < g.Cin; ++c) {
    const T* plane = img + c * g.H * g.W;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * P;
        for (std::size_t oh = 0; oh < g.Ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.pad);
          T* dst = row + oh * g.Wo;
          if (ih < 0 || ih >= static_cast<long>(g.H)) {
            std::fill(dst, dst + g.Wo, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * g.W;
          for (std::size_t ow = 0; ow < g.Wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(g.W)) ? T{0}
                                                                 : src[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* img) {
  const std::size_t P = g.P();
  for (std::size_t c = 0; c < g.Cin; ++c) {
    T* plane = img + c * g.H * g.W;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * P;
        for (std::size_t oh = 0; oh < g.Ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.H)) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * g.W;
          for (std::size_t ow = 0; ow < g.Wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.pad);
            if (iw >= 0 && iw < static_cast<long>(g.W)) {
              dst[static_cast<std::size_t>(iw)] += row[oh * g.Wo + ow];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void require_nchw(const BasicTensor<T>& t, const char* what) {
  require_rank(t, 4, what);
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t stride,
                               std::size_t padding) {
  if (stride == 0) throw DimensionError("stride must be >= 1");
  if (k > in + 2 * padding) {
    throw DimensionError("kernel extent " + std::to_string(k) + " exceeds padded input extent " +
                         std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - k) / stride + 1;
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding) {
  const ConvGeom g = conv_geometry(input, kernel, stride, padding);
  const bool has_bias = !bias.empty();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.Cout)) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) +
                         " does not match kernel axis 0 (output channels " +
                         std::to_string(g.Cout) + ")");
  }
  BasicTensor<T> out({g.N, g.Cout, g.Ho, g.Wo});
  const std::size_t K = g.K(), P = g.P();
  std::vector<T> col(g.is_pointwise() ? 0 : K * P);
  for (std::size_t n = 0; n < g.N; ++n) {
    const T* img = input.raw() + n * g.Cin * g.H * g.W;
    const T* colp = img;
    if (!g.is_pointwise()) {
      im2col(img, g, col.data());
      colp = col.data();
    }
    T* o = out.raw() + n * g.Cout * P;
    if (has_bias) {
      for (std::size_t co = 0; co < g.Cout; ++co) std::fill(o + co * P, o + (co + 1) * P, bias[co]);
    }
    gemm_nn(g.Cout, P, K, kernel.raw(), colp, o);
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                             std::size_t stride, std::size_t padding,
                             const BasicTensor<T>& grad_output) {
  const ConvGeom g = conv_geometry(input, kernel, stride, padding);
  if (grad_output.shape() != Shape{g.N, g.Cout, g.Ho, g.Wo}) {
    throw DimensionError("conv2d_backward: grad_output shape " + shape_str(grad_output.shape()) +
                         " != forward output shape " + shape_str({g.N, g.Cout, g.Ho, g.Wo}));
  }
  ConvGrads<T> grads{BasicTensor<T>(input.shape()), BasicTensor<T>(kernel.shape()),
                     BasicTensor<T>({g.Cout})};
  const std::size_t K = g.K(), P = g.P();
  std::vector<T> col(g.is_pointwise() ? 0 : K * P);
  std::vector<T> dcol(g.is_pointwise() ? 0 : K * P);
  for (std::size_t n = 0; n < g.N; ++n) {
    const T* img = input.raw() + n * g.Cin * g.H * g.W;
    const T* dout = grad_output.raw() + n * g.Cout * P;
    for (std::size_t co = 0; co < g.Cout; ++co) {
      T s{0};
      for (std::size_t p = 0; p < P; ++p) s += dout[co * P + p];
      grads.bias[co] += s;
    }
    T* dimg = grads.input.raw() + n * g.Cin * g.H * g.W;
    if (g.is_pointwise()) {
      gemm_nt(g.Cout, K, P, dout, img, grads.kernel.raw());
      gemm_tn(g.Cout, K, P, kernel.raw(), dout, dimg);
    } else {
      im2col(img, g, col.data());
      gemm_nt(g.Cout, K, P, dout, col.data(), grads.kernel.raw());
      std::fill(dcol.begin(), dcol.end(), T{0});
      gemm_tn(g.Cout, K, P, kernel.raw(), dout, dcol.data());
      col2im(dcol.data(), g, dimg);
    }
  }
  return grads;
}

template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                std::size_t stride, std::size_t padding) {
  require_nchw(input, "depthwise_conv2d input");
  require_rank(kernel, 4, "depthwise_conv2d kernel");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (kernel.dim(0) != C || kernel.dim(1) != 1) {
    throw DimensionError("depthwise_conv2d: kernel axes 0,1 must be [" + std::to_string(C) +
                         ",1] to match input axis 1 (channels), got " +
                         shape_str(kernel.shape()));
  }
  const std::size_t kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t Ho = conv_output_extent(H, kh, stride, padding);
  const std::size_t Wo = conv_output_extent(W, kw, stride, padding);
  BasicTensor<T> out({N, C, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* plane = input.raw() + (n * C + c) * H * W;
      const T* k = kernel.raw() + c * kh * kw;
      T* o = out.raw() + (n * C + c) * Ho * Wo;
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          T s{0};
          for (std::size_t i = 0; i < kh; ++i) {
            const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(padding);
            if (ih < 0 || ih >= static_cast<long>(H)) continue;
            for (std::size_t j = 0; j < kw; ++j) {
              const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(padding);
              if (iw < 0 || iw >= static_cast<long>(W)) continue;
              s += k[i * kw + j] * plane[static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw)];
            }
          }
          o[oh * Wo + ow] = s;
        }
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const BasicTensor<T>& input,
                                       const BasicTensor<T>& kernel, std::size_t stride,
                                       std::size_t padding, const BasicTensor<T>& grad_output) {
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t Ho = conv_output_extent(H, kh, stride, padding);
  const std::size_t Wo = conv_output_extent(W, kw, stride, padding);
  if (grad_output.shape() != Shape{N, C, Ho, Wo}) {
    throw DimensionError("depthwise_conv2d_backward: grad_output shape " +
                         shape_str(grad_output.shape()) + " != " + shape_str({N, C, Ho, Wo}));
  }
  ConvGrads<T> grads{BasicTensor<T>(input.shape()), BasicTensor<T>(kernel.shape()), {}};
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* plane = input.raw() + (n * C + c) * H * W;
      T* dplane = grads.input.raw() + (n * C + c) * H * W;
      const T* k = kernel.raw() + c * kh * kw;
      T* dk = grads.kernel.raw() + c * kh * kw;
      const T* dout = grad_output.raw() + (n * C + c) * Ho * Wo;
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const T g = dout[oh * Wo + ow];
          for (std::size_t i = 0; i < kh; ++i) {
            const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(padding);
            if (ih < 0 || ih >= static_cast<long>(H)) continue;
            for (std::size_t j = 0; j < kw; ++j) {
              const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(padding);
              if (iw < 0 || iw >= static_cast<long>(W)) continue;
              const std::size_t idx = static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw);
              dk[i * kw + j] += g * plane[idx];
              dplane[idx] += g * k[i * kw + j];
            }
          }
        }
      }
    }
  }
  return grads;
}

namespace {
std::size_t resolve_padding(const Shape& kernel_shape, int padding) {
  return padding < 0 ? kernel_shape[2] / 2 : static_cast<std::size_t>(padding);
}

template <typename T>
void check_separable(const BasicTensor<T>& input, const BasicTensor<T>& dw,
                     const BasicTensor<T>& pw) {
  require_nchw(input, "depthwise_separable_conv input");
  require_rank(dw, 4, "depthwise kernel");
  require_rank(pw, 4, "pointwise kernel");
  if (dw.dim(0) != input.dim(1)) {
    throw DimensionError("depthwise_separable_conv: depthwise kernel axis 0 (" +
                         std::to_string(dw.dim(0)) + ") != input axis 1 (channels " +
                         std::to_string(input.dim(1)) + ")");
  }
  if (pw.dim(1) != dw.dim(0) || pw.dim(2) != 1 || pw.dim(3) != 1) {
    throw DimensionError("depthwise_separable_conv: pointwise kernel must be [Cout," +
                         std::to_string(dw.dim(0)) + ",1,1] to consume the depthwise stage, got " +
                         shape_str(pw.shape()));
  }
}
}  // namespace

template <typename T>
BasicTensor<T> depthwise_separable_conv(const BasicTensor<T>& input,
                                        const BasicTensor<T>& depthwise_kernel,
                                        const BasicTensor<T>& pointwise_kernel,
                                        std::size_t stride, int padding) {
  check_separable(input, depthwise_kernel, pointwise_kernel);
  const auto pad = resolve_padding(depthwise_kernel.shape(), padding);
  auto mid = depthwise_conv2d(input, depthwise_kernel, stride, pad);
  return conv2d(mid, pointwise_kernel, BasicTensor<T>{}, 1, 0);
}

template <typename T>
SeparableGrads<T> depthwise_separable_conv_backward(const BasicTensor<T>& input,
                                                    const BasicTensor<T>& depthwise_kernel,
                                                    const BasicTensor<T>& pointwise_kernel,
                                                    std::size_t stride, int padding,
                                                    const BasicTensor<T>& grad_output) {
  check_separable(input, depthwise_kernel, pointwise_kernel);
  const auto pad = resolve_padding(depthwise_kernel.shape(), padding);
  auto mid = depthwise_conv2d(input, depthwise_kernel, stride, pad);
  auto pw = conv2d_backward(mid, pointwise_kernel, 1, 0, grad_output);
  auto dw = depthwise_conv2d_backward(input, depthwise_kernel, stride, pad, pw.input);
  return {std::move(dw.input), std::move(dw.kernel), std::move(pw.kernel)};
}

template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& input, std::size_t window, std::size_t stride) {
  require_nchw(input, "avg_pool2d input");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (window == 0 || window > H || window > W) {
    throw DimensionError("avg_pool2d: window " + std::to_string(window) +
                         " exceeds spatial extent (axes 2,3 = " + std::to_string(H) + "," +
                         std::to_string(W) + ")");
  }
  if (stride == 0) throw DimensionError("avg_pool2d: stride must be >= 1");
  const std::size_t Ho = (H - window) / stride + 1, Wo = (W - window) / stride + 1;
  const T scale = T{1} / static_cast<T>(window * window);
  BasicTensor<T> out({N, C, Ho, Wo});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = input.raw() + nc * H * W;
    T* o = out.raw() + nc * Ho * Wo;
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        T s{0};
        for (std::size_t i = 0; i < window; ++i) {
          const T* row = plane + (oh * stride + i) * W + ow * stride;
          for (std::size_t j = 0; j < window; ++j) s += row[j];
        }
        o[oh * Wo + ow] = s * scale;
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> avg_pool2d_backward(const Shape& input_shape, std::size_t window,
                                   std::size_t stride, const BasicTensor<T>& grad_output) {
  const std::size_t N = input_shape[0], C = input_shape[1], H = input_shape[2],
                    W = input_shape[3];
  const std::size_t Ho = (H - window) / stride + 1, Wo = (W - window) / stride + 1;
  if (grad_output.shape() != Shape{N, C, Ho, Wo}) {
    throw DimensionError("avg_pool2d_backward: grad_output shape " +
                         shape_str(grad_output.shape()) + " != " + shape_str({N, C, Ho, Wo}));
  }
  const T scale = T{1} / static_cast<T>(window * window);
  BasicTensor<T> din(input_shape);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T* plane = din.raw() + nc * H * W;
    const T* g = grad_output.raw() + nc * Ho * Wo;
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        const T v = g[oh * Wo + ow] * scale;
        for (std::size_t i = 0; i < window; ++i) {
          T* row = plane + (oh * stride + i) * W + ow * stride;
          for (std::size_t j = 0; j < window; ++j) row[j] += v;
        }
      }
    }
  }
  return din;
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input) {
  require_nchw(input, "global_avg_pool input");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  BasicTensor<T> out({N, C});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = input.raw() + nc * HW;
    T s{0};
    for (std::size_t i = 0; i < HW; ++i) s += plane[i];
    out[nc] = s / static_cast<T>(HW);
  }
  return out;
}

template <typename T>
BasicTensor<T> global_avg_pool_backward(const Shape& input_shape,
                                        const BasicTensor<T>& grad_output) {
  const std::size_t N = input_shape[0], C = input_shape[1], HW = input_shape[2] * input_shape[3];
  if (grad_output.shape() != Shape{N, C}) {
    throw DimensionError("global_avg_pool_backward: grad_output shape " +
                         shape_str(grad_output.shape()) + " != " + shape_str({N, C}));
  }
  BasicTensor<T> din(input_shape);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T v = grad_output[nc] / static_cast<T>(HW);
    std::fill(din.raw() + nc * HW, din.raw() + (nc + 1) * HW, v);
  }
  return din;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  BasicTensor<T> out = input;
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return out;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_output) {
  if (input.shape() != grad_output.shape()) {
    throw DimensionError("relu_backward: grad_output shape " + shape_str(grad_output.shape()) +
                         " != input shape " + shape_str(input.shape()));
  }
  BasicTensor<T> din = grad_output;
  for (std::size_t i = 0; i < din.size(); ++i) {
    if (!(input[i] > T{0})) din[i] = T{0};
  }
  return din;
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  require_rank(input, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const std::size_t N = input.dim(0), F = input.dim(1), C = weight.dim(0);
  if (weight.dim(1) != F) {
    throw DimensionError("linear: weight axis 1 (" + std::to_string(weight.dim(1)) +
                         ") != input axis 1 (features " + std::to_string(F) + ")");
  }
  if (bias.rank() != 1 || bias.dim(0) != C) {
    throw DimensionError("linear: bias shape " + shape_str(bias.shape()) +
                         " != [" + std::to_string(C) + "]");
  }
  BasicTensor<T> out({N, C});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      out[n * C + c] = bias[c] + dot(weight.raw() + c * F, input.raw() + n * F, F);
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> linear_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                             const BasicTensor<T>& grad_output) {
  const std::size_t N = input.dim(0), F = input.dim(1), C = weight.dim(0);
  if (grad_output.shape() != Shape{N, C}) {
    throw DimensionError("linear_backward: grad_output shape " + shape_str(grad_output.shape()) +
                         " != " + shape_str({N, C}));
  }
  ConvGrads<T> g{BasicTensor<T>(input.shape()), BasicTensor<T>(weight.shape()),
                 BasicTensor<T>({C})};
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T go = grad_output[n * C + c];
      g.bias[c] += go;
      for (std::size_t f = 0; f < F; ++f) {
        g.kernel[c * F + f] += go * input[n * F + f];
        g.input[n * F + f] += go * weight[c * F + f];
      }
    }
  }
  return g;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  require_rank(logits, 2, "softmax logits");
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  BasicTensor<T> out(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = logits.raw() + n * C;
    T* o = out.raw() + n * C;
    const T mx = *std::max_element(row, row + C);
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      o[c] = std::exp(row[c] - mx);
      sum += o[c];
    }
    for (std::size_t c = 0; c < C; ++c) o[c] = static_cast<T>(o[c] / sum);
  }
  return out;
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_nchw(a, "concat_channels lhs");
  require_nchw(b, "concat_channels rhs");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw DimensionError("concat_channels: axes 0,2,3 must agree, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  BasicTensor<T> out({N, Ca + Cb, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.raw() + n * Ca * HW, Ca * HW, out.raw() + n * (Ca + Cb) * HW);
    std::copy_n(b.raw() + n * Cb * HW, Cb * HW, out.raw() + (n * (Ca + Cb) + Ca) * HW);
  }
  return out;
}

template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& t, std::size_t begin, std::size_t count) {
  require_nchw(t, "slice_channels input");
  const std::size_t N = t.dim(0), C = t.dim(1), HW = t.dim(2) * t.dim(3);
  if (count == 0 || begin + count > C) {
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") outside axis 1 extent " +
                         std::to_string(C));
  }
  BasicTensor<T> out({N, count, t.dim(2), t.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(t.raw() + (n * C + begin) * HW, count * HW, out.raw() + n * count * HW);
  }
  return out;
}

#define XRAY_INSTANTIATE_OPS(T)                                                              \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                 const BasicTensor<T>&, std::size_t, std::size_t);          \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&,       \
                                        std::size_t, std::size_t, const BasicTensor<T>&);   \
  template BasicTensor<T> depthwise_conv2d(const BasicTensor<T>&, const BasicTensor<T>&,    \
                                           std::size_t, std::size_t);                       \
  template ConvGrads<T> depthwise_conv2d_backward(const BasicTensor<T>&,                    \
                                                  const BasicTensor<T>&, std::size_t,       \
                                                  std::size_t, const BasicTensor<T>&);      \
  template BasicTensor<T> depthwise_separable_conv(const BasicTensor<T>&,                   \
                                                   const BasicTensor<T>&,                   \
                                                   const BasicTensor<T>&, std::size_t, int);\
  template SeparableGrads<T> depthwise_separable_conv_backward(                             \
      const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, std::size_t, int, \
      const BasicTensor<T>&);                                                               \
  template BasicTensor<T> avg_pool2d(const BasicTensor<T>&, std::size_t, std::size_t);      \
  template BasicTensor<T> avg_pool2d_backward(const Shape&, std::size_t, std::size_t,       \
                                              const BasicTensor<T>&);                       \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                           \
  template BasicTensor<T> global_avg_pool_backward(const Shape&, const BasicTensor<T>&);    \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                      \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);      \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                 const BasicTensor<T>&);                                    \
  template ConvGrads<T> linear_backward(const BasicTensor<T>&, const BasicTensor<T>&,       \
                                        const BasicTensor<T>&);                             \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                   \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);    \
  template BasicTensor<T> slice_channels(const BasicTensor<T>&, std::size_t, std::size_t);

XRAY_INSTANTIATE_OPS(float)
XRAY_INSTANTIATE_OPS(double)

#undef XRAY_INSTANTIATE_OPS

}  // namespace xray
