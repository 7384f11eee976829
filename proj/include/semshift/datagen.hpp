#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <utility>
#include <vector>

#include "semshift/tensor.hpp"

namespace semshift {

inline constexpr std::uint8_t kIgnoreLabel = 255;

struct Resolution {
  std::size_t height = 0;
  std::size_t width = 0;
  bool operator==(const Resolution&) const = default;
};

/// Row-major per-pixel class ids; kIgnoreLabel marks excluded pixels.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) {}

  std::uint8_t at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
  std::uint8_t& at(std::size_t r, std::size_t c) { return labels[r * width + c]; }
  bool operator==(const LabelMap&) const = default;
};

/// Planar RGB image [3,H,W]. Values are multiples of 1/255 in [0,1] so the
/// 8-bit export is lossless.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w) : height(h), width(w), pixels(3 * h * w, 0.0f) {}

  float at(std::size_t ch, std::size_t r, std::size_t c) const { return pixels[(ch * height + r) * width + c]; }
  float& at(std::size_t ch, std::size_t r, std::size_t c) { return pixels[(ch * height + r) * width + c]; }
  bool operator==(const Image&) const = default;
};

template <std::floating_point T>
Tensor<T> image_tensor(const Image& image);

enum class Domain { Source, Target };
const char* domain_name(Domain d);

struct Rgb {
  double r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

/// Rotates the hue of an RGB color (components in [0,1]) by `radians`.
Rgb rotate_hue(const Rgb& color, double radians);

/// Appearance and layout statistics of one synthetic domain. palette[0] is the
/// background; class k >= 1 is drawn as shape (k - 1) % 3 (circle, square,
/// triangle) in palette[k].
struct DomainSpec {
  std::vector<Rgb> palette;
  double palette_hue_shift = 0.0;
  double noise_sigma = 0.0;
  std::pair<double, double> shape_scale_range{0.25, 0.38};
  std::vector<double> class_frequency;
  std::uint64_t seed = 0;

  std::size_t num_classes() const { return palette.size(); }
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

struct Sample {
  std::uint64_t id = 0;
  Domain domain = Domain::Source;
  Image image;
  LabelMap label;
};

/// Renders one sample. Pure function of (spec, resolution, id).
Sample generate_sample(const DomainSpec& spec, Resolution resolution, Domain domain, std::uint64_t id);

/// Samples with ids first_id .. first_id + count - 1.
std::vector<Sample> generate_domain(const DomainSpec& spec, std::size_t count, Resolution resolution,
                                    Domain domain = Domain::Source, std::uint64_t first_id = 0);

/// Nearest-neighbour sampling at output pixel centres.
LabelMap downsample_labels(const LabelMap& label, std::size_t h, std::size_t w);

struct SplitPlan {
  std::size_t n_source = 0;
  std::size_t n_target_labeled = 0;
  std::size_t n_target_unlabeled = 0;
  std::size_t n_target_val = 0;
  std::uint64_t seed = 0;
};

/// Ground truth that the training pipeline must not consume. Every open()
/// is counted on a counter shared by the owning bundle.
class SealedLabel {
 public:
  SealedLabel(LabelMap label, std::shared_ptr<std::atomic<std::uint64_t>> reads)
      : label_(std::move(label)), reads_(std::move(reads)) {}

  const LabelMap& open() const {
    reads_->fetch_add(1, std::memory_order_relaxed);
    return label_;
  }
  std::size_t height() const { return label_.height; }
  std::size_t width() const { return label_.width; }

 private:
  friend void export_dataset(const struct DatasetBundle&, const std::filesystem::path&);

  LabelMap label_;
  std::shared_ptr<std::atomic<std::uint64_t>> reads_;
};

struct UnlabeledSample {
  std::uint64_t id = 0;
  Domain domain = Domain::Target;
  Image image;
  SealedLabel label;
};

struct DatasetBundle {
  std::vector<Sample> source_train;
  std::vector<Sample> target_labeled;
  std::vector<UnlabeledSample> target_unlabeled;
  std::vector<Sample> target_val;
  std::shared_ptr<std::atomic<std::uint64_t>> sealed_reads = std::make_shared<std::atomic<std::uint64_t>>(0);

  std::uint64_t sealed_label_reads() const { return sealed_reads->load(); }
  /// Throws std::logic_error if any id appears in more than one split.
  void check_disjoint() const;
};

/// Source ids are 0..n_source-1; target ids follow. The target pool is
/// permuted once by plan.seed: validation takes the first n_target_val, the
/// labeled subset the next n_target_labeled, the unlabeled subset the rest.
/// Validation membership therefore only depends on the target pool size, and
/// labeled subsets are nested across budgets with the same pool.
DatasetBundle make_splits(const SplitPlan& plan, const DomainSpec& source_spec, const DomainSpec& target_spec,
                          Resolution resolution);

/// Source and target specs of the built-in toy benchmark (c = 4).
DomainSpec toy_source_spec();
DomainSpec toy_target_spec();

}  // namespace semshift
