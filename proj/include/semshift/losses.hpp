#pragma once

#include <vector>

#include "semshift/datagen.hpp"
#include "semshift/models.hpp"
#include "semshift/tensor.hpp"

namespace semshift {

inline constexpr double kLogEps = 1e-12;

/// Mean normalizes every loss by its support (pixels, locations or present
/// classes); Sum keeps the raw sums.
enum class Reduction { Mean, Sum };

/// z: 0 for source features, 1 for target features.
enum class DomainFlag : int { Source = 0, Target = 1 };

/// Class-averaged features and which classes occur in the label map.
template <std::floating_point T>
struct SemanticVectorSet {
  std::vector<Tensor<T>> vectors;  // [n] each; undefined where absent
  std::vector<bool> present;

  std::size_t num_classes() const { return present.size(); }
  std::size_t num_present() const;
};

// Building blocks on discriminator or head outputs. Every one is
// -log(max(p, eps)) reduced over the selected entries, and returns an
// unconnected zero when nothing is selected.

/// probs[C, ...spatial]: selects channel labels[l] + offset at every location
/// whose label is not kIgnoreLabel. Labels must be < C - offset.
template <std::floating_point T>
Tensor<T> labeled_nll(const Tensor<T>& probs, std::span<const std::uint8_t> labels, std::size_t offset,
                      Reduction reduction = Reduction::Mean);

/// probs[C, ...spatial]: selects the same channel everywhere.
template <std::floating_point T>
Tensor<T> channel_nll(const Tensor<T>& probs, std::size_t channel, Reduction reduction = Reduction::Mean);

/// outputs[k] is a 2c-simplex for class k, used only where present[k];
/// selects channel k + offset.
template <std::floating_point T>
Tensor<T> semantic_nll(const std::vector<Tensor<T>>& outputs, const std::vector<bool>& present, std::size_t offset,
                       Reduction reduction = Reduction::Mean);

/// Cross-entropy of score maps P[c,H,W] against hard labels Y[H,W].
template <std::floating_point T>
Tensor<T> seg_loss(const Tensor<T>& scores, const LabelMap& labels, Reduction reduction = Reduction::Mean);

/// Pushes source score maps toward the target channel of D_g. D_g's
/// parameters are constants in the returned graph.
template <std::floating_point T>
Tensor<T> gadv_loss(const GlobalDiscriminator<T>& dg, const Tensor<T>& source_scores,
                    Reduction reduction = Reduction::Mean);

/// Domain classification loss of D_g; the score map is detached.
template <std::floating_point T>
Tensor<T> gd_loss(const GlobalDiscriminator<T>& dg, const Tensor<T>& scores, DomainFlag z,
                  Reduction reduction = Reduction::Mean);

/// Masked mean of F[n,h,w] over the pixels of each class of y[h,w].
template <std::floating_point T>
SemanticVectorSet<T> class_average(const Tensor<T>& features, const LabelMap& labels, std::size_t num_classes);

/// Source class-k vectors pushed toward target channel k + c.
template <std::floating_point T>
Tensor<T> sadv_fc_loss(const SemanticDiscriminatorFC<T>& ds, const SemanticVectorSet<T>& source,
                       Reduction reduction = Reduction::Mean);

/// Class-and-domain classification loss of D_s on class vectors (detached).
template <std::floating_point T>
Tensor<T> sd_fc_loss(const SemanticDiscriminatorFC<T>& ds, const SemanticVectorSet<T>& vectors, DomainFlag z,
                     Reduction reduction = Reduction::Mean);

/// Per-pixel counterpart of sadv_fc_loss on F[n,h,w] with labels y[h,w].
template <std::floating_point T>
Tensor<T> sadv_conv_loss(const SemanticDiscriminatorConv<T>& ds, const Tensor<T>& source_features,
                         const LabelMap& labels, Reduction reduction = Reduction::Mean);

template <std::floating_point T>
Tensor<T> sd_conv_loss(const SemanticDiscriminatorConv<T>& ds, const Tensor<T>& features, const LabelMap& labels,
                       DomainFlag z, Reduction reduction = Reduction::Mean);

}  // namespace semshift
