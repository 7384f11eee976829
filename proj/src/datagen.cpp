#include "semshift/datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>

#include "semshift/rng.hpp"

namespace semshift {

namespace {

constexpr std::size_t kSlotsPerAxis = 2;
constexpr std::size_t kSlots = kSlotsPerAxis * kSlotsPerAxis;
constexpr std::size_t kTextureBlock = 8;
// Every shape of nominal size L covers the area of a circle of diameter L.
constexpr double kShapeAreaFactor = std::numbers::pi / 4.0;
// Triangles are isosceles with base == height; that bounding box is the widest.
const double kTriangleExtent = std::sqrt(std::numbers::pi / 2.0);
constexpr double kMaxScale = 0.39;

enum class ShapeKind { Circle, Square, Triangle };

ShapeKind shape_for_class(std::size_t k) { return static_cast<ShapeKind>((k - 1) % 3); }

float quantize(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::round(clamped * 255.0) / 255.0);
}

/// Probability that a slot is empty, chosen so that the expected foreground
/// pixel fraction (conditioned on at least one shape) equals `foreground`.
/// With per-shape mean area fraction m, the conditional expectation is
/// 4m / (1 + q + q^2 + q^3).
double empty_slot_probability(double foreground, double mean_shape_fraction) {
  const double m = mean_shape_fraction;
  if (foreground <= 0.0) return 1.0;
  if (foreground > kSlots * m * (1 + 1e-9) || foreground <= m) {
    throw std::invalid_argument("class_frequency foreground share " + std::to_string(foreground) +
                                " is not reachable with shape_scale_range (feasible interval (" +
                                std::to_string(m) + ", " + std::to_string(kSlots * m) + "])");
  }
  auto expected = [m](double q) { return kSlots * m / (1 + q + q * q + q * q * q); };
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (expected(mid) > foreground ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

bool inside_shape(ShapeKind kind, bool flipped, double y, double x, double y0, double x0, double extent) {
  const double u = (x - x0) / extent;  // [0,1] across the bounding box
  const double v = (y - y0) / extent;
  if (u < 0 || u > 1 || v < 0 || v > 1) return false;
  switch (kind) {
    case ShapeKind::Circle: {
      const double du = u - 0.5, dv = v - 0.5;
      return du * du + dv * dv <= 0.25;
    }
    case ShapeKind::Square:
      return true;
    case ShapeKind::Triangle: {
      const double depth = flipped ? 1.0 - v : v;  // 0 at apex, 1 at base
      return std::abs(u - 0.5) <= 0.5 * depth;
    }
  }
  return false;
}

double shape_extent(ShapeKind kind, double nominal) {
  switch (kind) {
    case ShapeKind::Circle:
      return nominal;
    case ShapeKind::Square:
      return nominal * std::sqrt(kShapeAreaFactor);
    case ShapeKind::Triangle:
      return nominal * kTriangleExtent;
  }
  return nominal;
}

}  // namespace

template <std::floating_point T>
Tensor<T> image_tensor(const Image& image) {
  std::vector<T> v(image.pixels.begin(), image.pixels.end());
  return Tensor<T>::from(Shape{3, image.height, image.width}, std::move(v));
}

template Tensor<float> image_tensor<float>(const Image&);
template Tensor<double> image_tensor<double>(const Image&);

const char* domain_name(Domain d) { return d == Domain::Source ? "source" : "target"; }

Rgb rotate_hue(const Rgb& color, double radians) {
  const double r = color.r, g = color.g, b = color.b;
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double chroma = mx - mn;
  if (chroma <= 0.0) return color;
  double hue;  // in sextants [0,6)
  if (mx == r) {
    hue = std::fmod((g - b) / chroma, 6.0);
  } else if (mx == g) {
    hue = (b - r) / chroma + 2.0;
  } else {
    hue = (r - g) / chroma + 4.0;
  }
  hue += radians / (std::numbers::pi / 3.0);
  hue = std::fmod(hue, 6.0);
  if (hue < 0) hue += 6.0;
  const double x = chroma * (1.0 - std::abs(std::fmod(hue, 2.0) - 1.0));
  double r1 = 0, g1 = 0, b1 = 0;
  switch (static_cast<int>(hue)) {
    case 0: r1 = chroma, g1 = x; break;
    case 1: r1 = x, g1 = chroma; break;
    case 2: g1 = chroma, b1 = x; break;
    case 3: g1 = x, b1 = chroma; break;
    case 4: r1 = x, b1 = chroma; break;
    default: r1 = chroma, b1 = x; break;
  }
  return {r1 + mn, g1 + mn, b1 + mn};
}

void DomainSpec::validate() const {
  const auto c = palette.size();
  if (c < 2) throw std::invalid_argument("domain spec needs at least 2 classes (background + 1 shape)");
  if (c > kIgnoreLabel) throw std::invalid_argument("too many classes for 8-bit labels");
  if (class_frequency.size() != c) {
    throw std::invalid_argument("class_frequency has " + std::to_string(class_frequency.size()) +
                                " entries for " + std::to_string(c) + " classes");
  }
  double total = 0;
  for (double f : class_frequency) {
    if (!(f >= 0)) throw std::invalid_argument("class_frequency entries must be nonnegative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("class_frequency must sum to 1");
  if (!(noise_sigma >= 0)) throw std::invalid_argument("noise_sigma must be nonnegative");
  const auto [lo, hi] = shape_scale_range;
  if (!(lo > 0 && lo <= hi && hi <= kMaxScale)) {
    throw std::invalid_argument("shape_scale_range must satisfy 0 < min <= max <= " + std::to_string(kMaxScale));
  }
  for (const auto& col : palette) {
    for (double v : {col.r, col.g, col.b}) {
      if (!(v >= 0 && v <= 1)) throw std::invalid_argument("palette components must lie in [0,1]");
    }
  }
}

Sample generate_sample(const DomainSpec& spec, Resolution res, Domain domain, std::uint64_t id) {
  spec.validate();
  const auto H = res.height, W = res.width;
  if (H < 16 || W < 16) throw std::invalid_argument("resolution must be at least 16x16");
  const auto c = spec.num_classes();

  const auto [s_lo, s_hi] = spec.shape_scale_range;
  const double mean_s2 = s_hi > s_lo ? (s_hi * s_hi * s_hi - s_lo * s_lo * s_lo) / (3.0 * (s_hi - s_lo)) : s_lo * s_lo;
  const double side = static_cast<double>(std::min(H, W));
  const double mean_fraction = kShapeAreaFactor * mean_s2 * side * side / static_cast<double>(H * W);
  const double q_empty = empty_slot_probability(1.0 - spec.class_frequency[0], mean_fraction);

  std::vector<double> slot_weights(c);
  slot_weights[0] = q_empty;
  for (std::size_t k = 1; k < c; ++k) {
    slot_weights[k] = q_empty >= 1.0 ? 0.0
                                     : spec.class_frequency[k] * (1 - std::pow(q_empty, kSlots)) / (kSlots * mean_fraction);
  }

  std::mt19937_64 rng(mix_seed(spec.seed, id));
  std::discrete_distribution<std::size_t> slot_class(slot_weights.begin(), slot_weights.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::array<std::size_t, kSlots> classes{};
  for (;;) {
    for (auto& k : classes) k = slot_class(rng);
    const bool any = std::any_of(classes.begin(), classes.end(), [](auto k) { return k != 0; });
    if (any || q_empty >= 1.0) break;
  }

  Sample sample;
  sample.id = id;
  sample.domain = domain;
  sample.label = LabelMap(H, W, 0);
  const std::size_t cell_h = H / kSlotsPerAxis, cell_w = W / kSlotsPerAxis;
  for (std::size_t slot = 0; slot < kSlots; ++slot) {
    const auto k = classes[slot];
    if (k == 0) continue;
    const auto kind = shape_for_class(k);
    const double nominal = (s_lo + (s_hi - s_lo) * unit(rng)) * side;
    const double extent = shape_extent(kind, nominal);
    const double cy = static_cast<double>((slot / kSlotsPerAxis) * cell_h);
    const double cx = static_cast<double>((slot % kSlotsPerAxis) * cell_w);
    const double y0 = cy + unit(rng) * std::max(0.0, static_cast<double>(cell_h) - extent);
    const double x0 = cx + unit(rng) * std::max(0.0, static_cast<double>(cell_w) - extent);
    const bool flipped = unit(rng) < 0.5;
    const auto r_end = std::min(H, static_cast<std::size_t>(cy) + cell_h);
    const auto c_end = std::min(W, static_cast<std::size_t>(cx) + cell_w);
    for (auto r = static_cast<std::size_t>(cy); r < r_end; ++r) {
      for (auto col = static_cast<std::size_t>(cx); col < c_end; ++col) {
        if (inside_shape(kind, flipped, r + 0.5, col + 0.5, y0, x0, extent)) {
          sample.label.at(r, col) = static_cast<std::uint8_t>(k);
        }
      }
    }
  }

  std::vector<Rgb> colors(c);
  for (std::size_t k = 0; k < c; ++k) colors[k] = rotate_hue(spec.palette[k], spec.palette_hue_shift);

  const double sigma = spec.noise_sigma;
  std::vector<double> texture;
  const std::size_t blocks_y = (H + kTextureBlock - 1) / kTextureBlock;
  const std::size_t blocks_x = (W + kTextureBlock - 1) / kTextureBlock;
  if (sigma > 0) {
    std::normal_distribution<double> n(0.0, sigma);
    texture.resize(blocks_y * blocks_x);
    for (auto& t : texture) t = n(rng);
  }

  sample.image = Image(H, W);
  std::normal_distribution<double> pixel_noise(0.0, sigma > 0 ? sigma : 1.0);
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t col = 0; col < W; ++col) {
      const auto k = sample.label.at(r, col);
      const auto& base = colors[k];
      const double shade = (sigma > 0 && k == 0) ? texture[(r / kTextureBlock) * blocks_x + col / kTextureBlock] : 0.0;
      const double rgb[3] = {base.r, base.g, base.b};
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double noise = sigma > 0 ? pixel_noise(rng) : 0.0;
        sample.image.at(ch, r, col) = quantize(rgb[ch] + shade + noise);
      }
    }
  }
  return sample;
}

std::vector<Sample> generate_domain(const DomainSpec& spec, std::size_t count, Resolution resolution, Domain domain,
                                    std::uint64_t first_id) {
  if (count == 0) throw std::invalid_argument("generate_domain: count must be positive");
  spec.validate();
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(spec, resolution, domain, first_id + i));
  return out;
}

LabelMap downsample_labels(const LabelMap& label, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) throw std::invalid_argument("downsample_labels: target size must be nonzero");
  if (h > label.height || w > label.width) {
    throw std::invalid_argument("downsample_labels: target " + std::to_string(h) + "x" + std::to_string(w) +
                                " exceeds source " + std::to_string(label.height) + "x" +
                                std::to_string(label.width));
  }
  LabelMap out(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    const auto sr = (2 * r + 1) * label.height / (2 * h);
    for (std::size_t c = 0; c < w; ++c) {
      const auto sc = (2 * c + 1) * label.width / (2 * w);
      out.at(r, c) = label.at(sr, sc);
    }
  }
  return out;
}

void DatasetBundle::check_disjoint() const {
  std::unordered_set<std::uint64_t> ids;
  auto claim = [&](std::uint64_t id) {
    if (!ids.insert(id).second) throw std::logic_error("sample id " + std::to_string(id) + " appears in two splits");
  };
  for (const auto& s : source_train) claim(s.id);
  for (const auto& s : target_labeled) claim(s.id);
  for (const auto& s : target_unlabeled) claim(s.id);
  for (const auto& s : target_val) claim(s.id);
}

DatasetBundle make_splits(const SplitPlan& plan, const DomainSpec& source_spec, const DomainSpec& target_spec,
                          Resolution resolution) {
  source_spec.validate();
  target_spec.validate();
  if (source_spec.num_classes() != target_spec.num_classes()) {
    throw std::invalid_argument("source and target domains disagree on the number of classes");
  }
  DatasetBundle bundle;
  for (std::size_t i = 0; i < plan.n_source; ++i) {
    bundle.source_train.push_back(generate_sample(source_spec, resolution, Domain::Source, i));
  }
  const auto pool = plan.n_target_val + plan.n_target_labeled + plan.n_target_unlabeled;
  std::vector<std::uint64_t> order(pool);
  std::iota(order.begin(), order.end(), std::uint64_t{plan.n_source});
  std::mt19937_64 rng(mix_seed(plan.seed, 0x5911'7000ULL));
  std::shuffle(order.begin(), order.end(), rng);

  std::size_t next = 0;
  for (std::size_t i = 0; i < plan.n_target_val; ++i) {
    bundle.target_val.push_back(generate_sample(target_spec, resolution, Domain::Target, order[next++]));
  }
  for (std::size_t i = 0; i < plan.n_target_labeled; ++i) {
    bundle.target_labeled.push_back(generate_sample(target_spec, resolution, Domain::Target, order[next++]));
  }
  for (std::size_t i = 0; i < plan.n_target_unlabeled; ++i) {
    auto s = generate_sample(target_spec, resolution, Domain::Target, order[next++]);
    bundle.target_unlabeled.push_back(
        UnlabeledSample{s.id, s.domain, std::move(s.image), SealedLabel(std::move(s.label), bundle.sealed_reads)});
  }
  bundle.check_disjoint();
  return bundle;
}

DomainSpec toy_source_spec() {
  DomainSpec spec;
  spec.palette = {
      {0.62, 0.52, 0.38},  // background
      {0.86, 0.30, 0.24},  // circle
      {0.92, 0.72, 0.22},  // square
      {0.68, 0.30, 0.62},  // triangle
  };
  spec.palette_hue_shift = 0.0;
  spec.noise_sigma = 0.06;
  spec.shape_scale_range = {0.25, 0.38};
  spec.class_frequency = {0.79, 0.07, 0.07, 0.07};
  spec.seed = 1;
  return spec;
}

DomainSpec toy_target_spec() {
  auto spec = toy_source_spec();
  spec.palette_hue_shift = std::numbers::pi / 2.0;
  spec.seed = 2;
  return spec;
}

}  // namespace semshift
