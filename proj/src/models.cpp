#include "semshift/models.hpp"

#include <bit>
#include <cmath>

#include "semshift/ops.hpp"
#include "semshift/rng.hpp"

namespace semshift {

namespace {

template <std::floating_point T>
Tensor<T> kaiming(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double gain = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope));
  std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(values), true);
}

template <std::floating_point T>
Tensor<T> leaky(const Tensor<T>& x) {
  return ops::leaky_relu(x, static_cast<T>(kLeakySlope));
}

// Module-specific stream keys keep initializations independent.
constexpr std::uint64_t kGeneratorKey = 0x47;
constexpr std::uint64_t kHeadKey = 0x4348;
constexpr std::uint64_t kGlobalKey = 0x4447;
constexpr std::uint64_t kSemanticKey = 0x4453;

}  // namespace

template <std::floating_point T>
std::vector<Tensor<T>> tensors_of(const ParameterList<T>& params) {
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

template <std::floating_point T>
Conv2d<T>::Conv2d(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride_, std::size_t padding_,
                  std::mt19937_64& rng)
    : weight(kaiming<T>({cout, cin, kernel, kernel}, cin * kernel * kernel, rng)),
      bias(Tensor<T>::zeros({cout}, true)),
      stride(stride_),
      padding(padding_) {}

template <std::floating_point T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  return ops::conv2d(x, weight, bias, stride, padding);
}

template <std::floating_point T>
void Conv2d<T>::append_parameters(ParameterList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

template <std::floating_point T>
Linear<T>::Linear(std::size_t din, std::size_t dout, std::mt19937_64& rng)
    : weight(kaiming<T>({dout, din}, din, rng)), bias(Tensor<T>::zeros({dout}, true)) {}

template <std::floating_point T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  return ops::linear(x, weight, bias);
}

template <std::floating_point T>
void Linear<T>::append_parameters(ParameterList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

template <std::floating_point T>
Generator<T>::Generator(const GeneratorConfig& config, std::uint64_t seed) : config_(config) {
  const auto s = config.output_stride;
  if (s == 0 || !std::has_single_bit(s) || s > 16) {
    throw std::invalid_argument("generator output_stride must be a power of two in [1,16], got " + std::to_string(s));
  }
  const auto downsamples = static_cast<std::size_t>(std::countr_zero(s));
  if (downsamples > config.hidden_widths.size() + 1) {
    throw std::invalid_argument("generator has too few layers for output_stride " + std::to_string(s));
  }
  if (config.feature_channels == 0) throw std::invalid_argument("generator feature_channels must be positive");
  std::mt19937_64 rng(mix_seed(seed, kGeneratorKey));
  std::size_t cin = 3;
  const auto depth = config.hidden_widths.size() + 1;
  for (std::size_t i = 0; i < depth; ++i) {
    const auto cout = i + 1 < depth ? config.hidden_widths[i] : config.feature_channels;
    layers_.emplace_back(cin, cout, 3, i < downsamples ? 2 : 1, 1, rng);
    cin = cout;
  }
}

template <std::floating_point T>
Tensor<T> Generator<T>::forward(const Tensor<T>& image) const {
  const auto s = config_.output_stride;
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) % s != 0 || image.dim(2) % s != 0 ||
      image.dim(1) == 0 || image.dim(2) == 0) {
    throw ShapeError("generator expects [3,H,W] with H, W divisible by " + std::to_string(s) + ", got " +
                     shape_to_string(image.shape()));
  }
  Tensor<T> x = image;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].forward(x);
    if (i + 1 < layers_.size()) x = leaky(x);
  }
  return x;
}

template <std::floating_point T>
ParameterList<T> Generator<T>::parameters() const {
  ParameterList<T> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].append_parameters(out, "G.conv" + std::to_string(i));
  return out;
}

template <std::floating_point T>
ClassifierHead<T>::ClassifierHead(std::size_t feature_channels, std::size_t num_classes, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, kHeadKey));
  conv_ = Conv2d<T>(feature_channels, num_classes, 1, 1, 0, rng);
  std::normal_distribution<double> dist(0.0, kHeadInitStd);
  for (auto& w : conv_.weight.mutable_values()) w = static_cast<T>(dist(rng));
}

template <std::floating_point T>
Tensor<T> ClassifierHead<T>::forward(const Tensor<T>& features, std::size_t height, std::size_t width) const {
  return ops::softmax_channel(ops::bilinear_upsample(conv_.forward(features), height, width));
}

template <std::floating_point T>
ParameterList<T> ClassifierHead<T>::parameters() const {
  ParameterList<T> out;
  conv_.append_parameters(out, "CH.conv");
  return out;
}

template <std::floating_point T>
GlobalDiscriminator<T>::GlobalDiscriminator(std::size_t num_classes, const GlobalDiscriminatorConfig& config,
                                            std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, kGlobalKey));
  std::size_t cin = num_classes;
  for (auto width : config.hidden_widths) {
    layers_.emplace_back(cin, width, 4, 2, 1, rng);
    cin = width;
  }
  layers_.emplace_back(cin, 2, 4, 2, 1, rng);
}

template <std::floating_point T>
Tensor<T> GlobalDiscriminator<T>::forward(const Tensor<T>& scores) const {
  Tensor<T> x = scores;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].forward(x);
    if (i + 1 < layers_.size()) x = leaky(x);
  }
  return ops::softmax_channel(x);
}

template <std::floating_point T>
ParameterList<T> GlobalDiscriminator<T>::parameters() const {
  ParameterList<T> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].append_parameters(out, "Dg.conv" + std::to_string(i));
  return out;
}

template <std::floating_point T>
SemanticDiscriminatorFC<T>::SemanticDiscriminatorFC(std::size_t feature_channels, std::size_t num_classes,
                                                    std::uint64_t seed, std::size_t hidden) {
  std::mt19937_64 rng(mix_seed(seed, kSemanticKey));
  fc1_ = Linear<T>(feature_channels, hidden, rng);
  fc2_ = Linear<T>(hidden, 2 * num_classes, rng);
}

template <std::floating_point T>
Tensor<T> SemanticDiscriminatorFC<T>::forward(const Tensor<T>& vector) const {
  return ops::softmax_channel(fc2_.forward(leaky(fc1_.forward(vector))));
}

template <std::floating_point T>
ParameterList<T> SemanticDiscriminatorFC<T>::parameters() const {
  ParameterList<T> out;
  fc1_.append_parameters(out, "Ds.fc1");
  fc2_.append_parameters(out, "Ds.fc2");
  return out;
}

template <std::floating_point T>
SemanticDiscriminatorConv<T>::SemanticDiscriminatorConv(std::size_t feature_channels, std::size_t num_classes,
                                                        std::uint64_t seed, std::size_t hidden) {
  // Same stream as the FC variant, so both start from identical weights.
  std::mt19937_64 rng(mix_seed(seed, kSemanticKey));
  conv1_ = Conv2d<T>(feature_channels, hidden, 1, 1, 0, rng);
  conv2_ = Conv2d<T>(hidden, 2 * num_classes, 1, 1, 0, rng);
}

template <std::floating_point T>
SemanticDiscriminatorConv<T> SemanticDiscriminatorConv<T>::from_fc(const SemanticDiscriminatorFC<T>& fc) {
  auto as_conv = [](const Linear<T>& l) {
    Conv2d<T> c;
    const auto dout = l.weight.dim(0), din = l.weight.dim(1);
    const auto w = l.weight.values();
    const auto b = l.bias.values();
    c.weight = Tensor<T>::from({dout, din, 1, 1}, std::vector<T>(w.begin(), w.end()), true);
    c.bias = Tensor<T>::from({dout}, std::vector<T>(b.begin(), b.end()), true);
    return c;
  };
  SemanticDiscriminatorConv out;
  out.conv1_ = as_conv(fc.fc1());
  out.conv2_ = as_conv(fc.fc2());
  return out;
}

template <std::floating_point T>
Tensor<T> SemanticDiscriminatorConv<T>::forward(const Tensor<T>& features) const {
  return ops::softmax_channel(conv2_.forward(leaky(conv1_.forward(features))));
}

template <std::floating_point T>
ParameterList<T> SemanticDiscriminatorConv<T>::parameters() const {
  ParameterList<T> out;
  conv1_.append_parameters(out, "Ds.conv1");
  conv2_.append_parameters(out, "Ds.conv2");
  return out;
}

#define SEMSHIFT_INSTANTIATE(T)                                                    \
  template std::vector<Tensor<T>> tensors_of<T>(const ParameterList<T>&);          \
  template struct Conv2d<T>;                                                       \
  template struct Linear<T>;                                                       \
  template class Generator<T>;                                                     \
  template class ClassifierHead<T>;                                                \
  template class GlobalDiscriminator<T>;                                           \
  template class SemanticDiscriminatorFC<T>;                                       \
  template class SemanticDiscriminatorConv<T>;

SEMSHIFT_INSTANTIATE(float)
SEMSHIFT_INSTANTIATE(double)

}  // namespace semshift
