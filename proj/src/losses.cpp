#include "semshift/losses.hpp"

#include "semshift/ops.hpp"

namespace semshift {

namespace {

// -log of the gathered probabilities, reduced.
template <std::floating_point T>
Tensor<T> reduce_nll(const Tensor<T>& probs, const std::vector<std::int32_t>& channel, std::size_t count,
                     Reduction reduction) {
  if (count == 0) return Tensor<T>::scalar(T{0});
  const auto picked = ops::log_clamped(ops::gather_channels(probs, channel), static_cast<T>(kLogEps));
  const T factor = reduction == Reduction::Mean ? T{-1} / static_cast<T>(count) : T{-1};
  return ops::scale(ops::sum(picked), factor);
}

void check_label_shape(std::size_t locations, const LabelMap& labels, const char* who) {
  if (labels.labels.size() != locations) {
    throw ShapeError(std::string(who) + ": label map " + std::to_string(labels.height) + "x" +
                     std::to_string(labels.width) + " does not match the input's spatial size");
  }
}

template <std::floating_point T>
void check_spatial(const Tensor<T>& x, const LabelMap& labels, const char* who) {
  if (x.rank() != 3 || x.dim(1) != labels.height || x.dim(2) != labels.width) {
    throw ShapeError(std::string(who) + ": input " + shape_to_string(x.shape()) + " does not match label map " +
                     std::to_string(labels.height) + "x" + std::to_string(labels.width));
  }
}

}  // namespace

template <std::floating_point T>
std::size_t SemanticVectorSet<T>::num_present() const {
  return static_cast<std::size_t>(std::count(present.begin(), present.end(), true));
}

template <std::floating_point T>
Tensor<T> labeled_nll(const Tensor<T>& probs, std::span<const std::uint8_t> labels, std::size_t offset,
                      Reduction reduction) {
  if (probs.rank() == 0 || probs.dim(0) <= offset) {
    throw ShapeError("labeled_nll: channel offset " + std::to_string(offset) + " out of range for " +
                     shape_to_string(probs.shape()));
  }
  const auto limit = probs.dim(0) - offset;
  std::vector<std::int32_t> channel(labels.size(), -1);
  std::size_t count = 0;
  for (std::size_t l = 0; l < labels.size(); ++l) {
    const auto k = labels[l];
    if (k == kIgnoreLabel) continue;
    if (k >= limit) {
      throw std::invalid_argument("label " + std::to_string(k) + " out of range for " + std::to_string(limit) +
                                  " classes");
    }
    channel[l] = static_cast<std::int32_t>(k + offset);
    ++count;
  }
  return reduce_nll(probs, channel, count, reduction);
}

template <std::floating_point T>
Tensor<T> channel_nll(const Tensor<T>& probs, std::size_t channel, Reduction reduction) {
  if (probs.rank() == 0 || channel >= probs.dim(0)) {
    throw ShapeError("channel_nll: channel " + std::to_string(channel) + " out of range for " +
                     shape_to_string(probs.shape()));
  }
  const auto L = probs.numel() / probs.dim(0);
  return reduce_nll(probs, std::vector<std::int32_t>(L, static_cast<std::int32_t>(channel)), L, reduction);
}

template <std::floating_point T>
Tensor<T> semantic_nll(const std::vector<Tensor<T>>& outputs, const std::vector<bool>& present, std::size_t offset,
                       Reduction reduction) {
  if (outputs.size() != present.size()) throw std::invalid_argument("semantic_nll: outputs/present size mismatch");
  Tensor<T> total;
  std::size_t count = 0;
  for (std::size_t k = 0; k < present.size(); ++k) {
    if (!present[k]) continue;
    const std::int32_t ch = static_cast<std::int32_t>(k + offset);
    const auto term = ops::log_clamped(ops::gather_channels(outputs[k], std::span(&ch, 1)), static_cast<T>(kLogEps));
    total = total.defined() ? ops::add(total, term) : term;
    ++count;
  }
  if (count == 0) return Tensor<T>::scalar(T{0});
  const T factor = reduction == Reduction::Mean ? T{-1} / static_cast<T>(count) : T{-1};
  return ops::scale(ops::sum(total), factor);
}

template <std::floating_point T>
Tensor<T> seg_loss(const Tensor<T>& scores, const LabelMap& labels, Reduction reduction) {
  check_spatial(scores, labels, "seg_loss");
  return labeled_nll(scores, std::span<const std::uint8_t>(labels.labels), 0, reduction);
}

template <std::floating_point T>
Tensor<T> gadv_loss(const GlobalDiscriminator<T>& dg, const Tensor<T>& source_scores, Reduction reduction) {
  Tensor<T> out;
  {
    FreezeGuard<T> freeze(tensors_of(dg.parameters()));
    out = dg.forward(source_scores);
  }
  return channel_nll(out, static_cast<std::size_t>(DomainFlag::Target), reduction);
}

template <std::floating_point T>
Tensor<T> gd_loss(const GlobalDiscriminator<T>& dg, const Tensor<T>& scores, DomainFlag z, Reduction reduction) {
  return channel_nll(dg.forward(scores.detach()), static_cast<std::size_t>(z), reduction);
}

template <std::floating_point T>
SemanticVectorSet<T> class_average(const Tensor<T>& features, const LabelMap& labels, std::size_t num_classes) {
  if (features.rank() != 3) throw ShapeError("class_average: expected F[n,h,w], got " + shape_to_string(features.shape()));
  check_label_shape(features.dim(1) * features.dim(2), labels, "class_average");
  std::vector<std::size_t> counts(num_classes, 0);
  for (auto k : labels.labels) {
    if (k == kIgnoreLabel) continue;
    if (k >= num_classes) {
      throw std::invalid_argument("class_average: label " + std::to_string(k) + " out of range for " +
                                  std::to_string(num_classes) + " classes");
    }
    ++counts[k];
  }
  SemanticVectorSet<T> set;
  set.vectors.resize(num_classes);
  set.present.assign(num_classes, false);
  std::vector<T> weights(labels.labels.size());
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (counts[k] == 0) continue;
    const T w = T{1} / static_cast<T>(counts[k]);
    for (std::size_t l = 0; l < weights.size(); ++l) weights[l] = labels.labels[l] == k ? w : T{0};
    set.vectors[k] = ops::weighted_spatial_sum(features, std::span<const T>(weights));
    set.present[k] = true;
  }
  return set;
}

template <std::floating_point T>
Tensor<T> sadv_fc_loss(const SemanticDiscriminatorFC<T>& ds, const SemanticVectorSet<T>& source, Reduction reduction) {
  std::vector<Tensor<T>> outputs(source.num_classes());
  {
    FreezeGuard<T> freeze(tensors_of(ds.parameters()));
    for (std::size_t k = 0; k < outputs.size(); ++k) {
      if (source.present[k]) outputs[k] = ds.forward(source.vectors[k]);
    }
  }
  return semantic_nll(outputs, source.present, ds.num_classes(), reduction);
}

template <std::floating_point T>
Tensor<T> sd_fc_loss(const SemanticDiscriminatorFC<T>& ds, const SemanticVectorSet<T>& vectors, DomainFlag z,
                     Reduction reduction) {
  std::vector<Tensor<T>> outputs(vectors.num_classes());
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    if (vectors.present[k]) outputs[k] = ds.forward(vectors.vectors[k].detach());
  }
  return semantic_nll(outputs, vectors.present, static_cast<std::size_t>(z) * ds.num_classes(), reduction);
}

template <std::floating_point T>
Tensor<T> sadv_conv_loss(const SemanticDiscriminatorConv<T>& ds, const Tensor<T>& source_features,
                         const LabelMap& labels, Reduction reduction) {
  check_spatial(source_features, labels, "sadv_conv_loss");
  Tensor<T> out;
  {
    FreezeGuard<T> freeze(tensors_of(ds.parameters()));
    out = ds.forward(source_features);
  }
  return labeled_nll(out, std::span<const std::uint8_t>(labels.labels), ds.num_classes(), reduction);
}

template <std::floating_point T>
Tensor<T> sd_conv_loss(const SemanticDiscriminatorConv<T>& ds, const Tensor<T>& features, const LabelMap& labels,
                       DomainFlag z, Reduction reduction) {
  check_spatial(features, labels, "sd_conv_loss");
  const auto offset = static_cast<std::size_t>(z) * ds.num_classes();
  // labeled_nll bounds labels by C - offset; for z = 0 that admits labels in
  // [c, 2c), so check against c explicitly.
  for (auto k : labels.labels) {
    if (k != kIgnoreLabel && k >= ds.num_classes()) {
      throw std::invalid_argument("sd_conv_loss: label " + std::to_string(k) + " out of range");
    }
  }
  return labeled_nll(ds.forward(features.detach()), std::span<const std::uint8_t>(labels.labels), offset, reduction);
}

#define SEMSHIFT_INSTANTIATE(T)                                                                                   \
  template struct SemanticVectorSet<T>;                                                                           \
  template Tensor<T> labeled_nll<T>(const Tensor<T>&, std::span<const std::uint8_t>, std::size_t, Reduction);     \
  template Tensor<T> channel_nll<T>(const Tensor<T>&, std::size_t, Reduction);                                    \
  template Tensor<T> semantic_nll<T>(const std::vector<Tensor<T>>&, const std::vector<bool>&, std::size_t,        \
                                     Reduction);                                                                  \
  template Tensor<T> seg_loss<T>(const Tensor<T>&, const LabelMap&, Reduction);                                   \
  template Tensor<T> gadv_loss<T>(const GlobalDiscriminator<T>&, const Tensor<T>&, Reduction);                    \
  template Tensor<T> gd_loss<T>(const GlobalDiscriminator<T>&, const Tensor<T>&, DomainFlag, Reduction);          \
  template SemanticVectorSet<T> class_average<T>(const Tensor<T>&, const LabelMap&, std::size_t);                 \
  template Tensor<T> sadv_fc_loss<T>(const SemanticDiscriminatorFC<T>&, const SemanticVectorSet<T>&, Reduction);  \
  template Tensor<T> sd_fc_loss<T>(const SemanticDiscriminatorFC<T>&, const SemanticVectorSet<T>&, DomainFlag,    \
                                   Reduction);                                                                    \
  template Tensor<T> sadv_conv_loss<T>(const SemanticDiscriminatorConv<T>&, const Tensor<T>&, const LabelMap&,    \
                                       Reduction);                                                                \
  template Tensor<T> sd_conv_loss<T>(const SemanticDiscriminatorConv<T>&, const Tensor<T>&, const LabelMap&,      \
                                     DomainFlag, Reduction);

SEMSHIFT_INSTANTIATE(float)
SEMSHIFT_INSTANTIATE(double)

}  // namespace semshift
