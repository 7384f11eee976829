#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "semshift/tensor.hpp"

namespace semshift {

inline constexpr double kLeakySlope = 0.2;

template <std::floating_point T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;  // shares storage with the owning module
};

template <std::floating_point T>
using ParameterList = std::vector<NamedParameter<T>>;

template <std::floating_point T>
std::vector<Tensor<T>> tensors_of(const ParameterList<T>& params);

/// Convolution layer; weights are Kaiming fan-in initialized, biases zero.
template <std::floating_point T>
struct Conv2d {
  Tensor<T> weight;  // [cout, cin, k, k]
  Tensor<T> bias;    // [cout]
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv2d() = default;
  Conv2d(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride, std::size_t padding,
         std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  void append_parameters(ParameterList<T>& out, const std::string& prefix) const;
};

template <std::floating_point T>
struct Linear {
  Tensor<T> weight;  // [dout, din]
  Tensor<T> bias;    // [dout]

  Linear() = default;
  Linear(std::size_t din, std::size_t dout, std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  void append_parameters(ParameterList<T>& out, const std::string& prefix) const;
};

struct GeneratorConfig {
  std::size_t feature_channels = 64;  // n
  std::size_t output_stride = 4;      // s, a power of two up to 16
  std::vector<std::size_t> hidden_widths{32, 64, 64};
};

/// Feature generator: 3x3 conv trunk, leaky ReLU between layers, none after
/// the last. The first log2(s) layers have stride 2.
template <std::floating_point T>
class Generator {
 public:
  Generator(const GeneratorConfig& config, std::uint64_t seed);

  /// image[3,H,W] -> F[n, H/s, W/s]; H and W must be divisible by s.
  Tensor<T> forward(const Tensor<T>& image) const;

  const GeneratorConfig& config() const { return config_; }
  ParameterList<T> parameters() const;

 private:
  GeneratorConfig config_;
  std::vector<Conv2d<T>> layers_;
};

/// Weight std of the classifier head. Kaiming scale here gives large initial
/// logits that can push training into saturation at the toy learning rate.
inline constexpr double kHeadInitStd = 0.01;

/// 1x1 conv n -> c, align-corners upsample to the image size, channel softmax.
/// Weights are drawn from N(0, kHeadInitStd^2).
template <std::floating_point T>
class ClassifierHead {
 public:
  ClassifierHead(std::size_t feature_channels, std::size_t num_classes, std::uint64_t seed);

  /// F[n,h,w] -> P[c,H,W].
  Tensor<T> forward(const Tensor<T>& features, std::size_t height, std::size_t width) const;
  /// Pre-upsample logits [c,h,w].
  Tensor<T> logits(const Tensor<T>& features) const { return conv_.forward(features); }

  std::size_t num_classes() const { return conv_.bias.numel(); }
  ParameterList<T> parameters() const;

 private:
  Conv2d<T> conv_;
};

struct GlobalDiscriminatorConfig {
  std::vector<std::size_t> hidden_widths{32, 64};
};

/// Score map P[c,H,W] -> per-location domain confidence [2,H/8,W/8].
/// Channel 0 is source, channel 1 target. Every layer is a 4x4 stride-2 conv.
template <std::floating_point T>
class GlobalDiscriminator {
 public:
  GlobalDiscriminator(std::size_t num_classes, const GlobalDiscriminatorConfig& config, std::uint64_t seed);

  Tensor<T> forward(const Tensor<T>& scores) const;
  ParameterList<T> parameters() const;

 private:
  std::vector<Conv2d<T>> layers_;
};

inline constexpr std::size_t kSemanticHiddenWidth = 1024;

/// Semantic-vector discriminator V[n] -> 2c-simplex. Channels [0,c) are the
/// source classes, [c,2c) the target classes.
template <std::floating_point T>
class SemanticDiscriminatorFC {
 public:
  SemanticDiscriminatorFC(std::size_t feature_channels, std::size_t num_classes, std::uint64_t seed,
                          std::size_t hidden = kSemanticHiddenWidth);

  Tensor<T> forward(const Tensor<T>& vector) const;
  std::size_t num_classes() const { return fc2_.bias.numel() / 2; }
  ParameterList<T> parameters() const;

  const Linear<T>& fc1() const { return fc1_; }
  const Linear<T>& fc2() const { return fc2_; }

 private:
  Linear<T> fc1_, fc2_;
};

/// Per-pixel variant built from 1x1 convolutions: F[n,h,w] -> [2c,h,w].
template <std::floating_point T>
class SemanticDiscriminatorConv {
 public:
  SemanticDiscriminatorConv(std::size_t feature_channels, std::size_t num_classes, std::uint64_t seed,
                            std::size_t hidden = kSemanticHiddenWidth);

  /// Copies the weights of an FC discriminator into 1x1 kernels.
  static SemanticDiscriminatorConv from_fc(const SemanticDiscriminatorFC<T>& fc);

  Tensor<T> forward(const Tensor<T>& features) const;
  std::size_t num_classes() const { return conv2_.bias.numel() / 2; }
  ParameterList<T> parameters() const;

 private:
  SemanticDiscriminatorConv() = default;
  Conv2d<T> conv1_, conv2_;
};

}  // namespace semshift
