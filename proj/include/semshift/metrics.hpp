#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "semshift/datagen.hpp"

namespace semshift {

/// counts[g][p]: pixels of ground-truth class g predicted as p. Ignore
/// pixels in the ground truth are skipped.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);

  std::size_t num_classes() const { return c_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * c_ + pred]; }
  std::uint64_t total() const;

  /// Throws std::invalid_argument on a shape mismatch, a prediction >= c
  /// (including kIgnoreLabel), or a ground-truth label >= c that is not
  /// kIgnoreLabel.
  void accumulate(const LabelMap& pred, const LabelMap& gt);
  void merge(const ConfusionMatrix& other);

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t c_;
  std::vector<std::uint64_t> counts_;
};

struct IouReport {
  std::map<std::size_t, double> per_class;  // evaluable classes only
  double mean = 0.0;
};

/// IoU_k = cm[k][k] / (row_k + col_k - cm[k][k]) over `classes`; classes with
/// an empty union are left out of per_class and of the mean. Throws
/// std::invalid_argument if the subset is empty or no class is evaluable.
IouReport miou(const ConfusionMatrix& cm, const std::set<std::size_t>& classes);
IouReport miou(const ConfusionMatrix& cm);

}  // namespace semshift
