#pragma once

#include <cstddef>

#include "xray/tensor.hpp"

namespace xray {

// Forward and backward kernels over [N,C,H,W] activations. Convolutions are
// cross-correlations (no kernel flip). Backward functions take the forward
// input and the upstream gradient and return gradients w.r.t. every operand.

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> kernel;
  BasicTensor<T> bias;  // empty for bias-free kernels
};

std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t stride,
                               std::size_t padding);

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding);

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                             std::size_t stride, std::size_t padding,
                             const BasicTensor<T>& grad_output);

/// One spatial kernel per channel, no cross-channel mixing. kernel: [C,1,kh,kw].
template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                std::size_t stride, std::size_t padding);

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const BasicTensor<T>& input,
                                       const BasicTensor<T>& kernel, std::size_t stride,
                                       std::size_t padding, const BasicTensor<T>& grad_output);

/// Depthwise convolution followed by a bias-free 1x1 convolution.
/// `padding` < 0 selects same-style padding kh/2.
template <typename T>
BasicTensor<T> depthwise_separable_conv(const BasicTensor<T>& input,
                                        const BasicTensor<T>& depthwise_kernel,
                                        const BasicTensor<T>& pointwise_kernel,
                                        std::size_t stride, int padding = -1);

template <typename T>
struct SeparableGrads {
  BasicTensor<T> input;
  BasicTensor<T> depthwise_kernel;
  BasicTensor<T> pointwise_kernel;
};

template <typename T>
SeparableGrads<T> depthwise_separable_conv_backward(const BasicTensor<T>& input,
                                                    const BasicTensor<T>& depthwise_kernel,
                                                    const BasicTensor<T>& pointwise_kernel,
                                                    std::size_t stride, int padding,
                                                    const BasicTensor<T>& grad_output);

template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& input, std::size_t window, std::size_t stride);

template <typename T>
BasicTensor<T> avg_pool2d_backward(const Shape& input_shape, std::size_t window,
                                   std::size_t stride, const BasicTensor<T>& grad_output);

/// [N,C,H,W] -> [N,C]
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> global_avg_pool_backward(const Shape& input_shape,
                                        const BasicTensor<T>& grad_output);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_output);

/// input [N,F], weight [C,F], bias [C] -> [N,C]
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias);

template <typename T>
ConvGrads<T> linear_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                             const BasicTensor<T>& grad_output);

/// Row-wise softmax over [N,C] with max subtraction.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

/// Concatenates [N,Ca,H,W] and [N,Cb,H,W] along channels.
template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Channels [begin, begin+count) of an [N,C,H,W] tensor.
template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& t, std::size_t begin, std::size_t count);

}  // namespace xray
