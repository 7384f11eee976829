#pragma once

#include <cstdint>
#include <span>

#include "semshift/tensor.hpp"

/// Differentiable operations used by the models and losses. Every op accepts
/// and returns row-major tensors; spatial layouts are channel-first.
namespace semshift::ops {

/// Cross-correlation of input[cin,h,w] with kernel[cout,cin,kh,kw] plus bias[cout].
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0);

/// weight[dout,din] * input[din] + bias[dout].
template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

/// max(x, slope * x). The derivative at exactly zero is taken to be `slope`.
template <std::floating_point T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope);

/// Softmax over the leading (channel) axis, independently at each location.
template <std::floating_point T>
Tensor<T> softmax_channel(const Tensor<T>& input);

/// Align-corners bilinear resize of input[c,h,w] to [c,out_h,out_w].
template <std::floating_point T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, std::size_t out_h, std::size_t out_w);

/// log(max(x, eps)); zero gradient where the clamp is active.
template <std::floating_point T>
Tensor<T> log_clamped(const Tensor<T>& input, T eps);

/// Picks input[channel[l], l] at every location l where channel[l] >= 0, in
/// location order. Locations with a negative channel are skipped.
template <std::floating_point T>
Tensor<T> gather_channels(const Tensor<T>& input, std::span<const std::int32_t> channel);

/// sum_l weights[l] * input[:, l] for input[n, ...spatial]; weights are constants.
template <std::floating_point T>
Tensor<T> weighted_spatial_sum(const Tensor<T>& input, std::span<const T> weights);

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& input);

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& input);

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& input, T factor);

/// Elementwise sum of equally shaped tensors.
template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise product of equally shaped tensors.
template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace semshift::ops
