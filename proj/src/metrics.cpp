#include "semshift/metrics.hpp"

#include <numeric>
#include <stdexcept>
#include <string>

namespace semshift {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : c_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw std::invalid_argument("confusion matrix needs at least one class");
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw std::invalid_argument("confusion matrix: prediction " + std::to_string(pred.height) + "x" +
                                std::to_string(pred.width) + " vs ground truth " + std::to_string(gt.height) + "x" +
                                std::to_string(gt.width));
  }
  // Validate first so a bad map leaves the matrix untouched.
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    if (pred.labels[i] >= c_) {
      throw std::invalid_argument("confusion matrix: predicted class " + std::to_string(pred.labels[i]) +
                                  " out of range");
    }
    if (gt.labels[i] >= c_ && gt.labels[i] != kIgnoreLabel) {
      throw std::invalid_argument("confusion matrix: ground-truth class " + std::to_string(gt.labels[i]) +
                                  " out of range");
    }
  }
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    if (gt.labels[i] == kIgnoreLabel) continue;
    ++counts_[gt.labels[i] * c_ + pred.labels[i]];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.c_ != c_) throw std::invalid_argument("confusion matrix: merging different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

IouReport miou(const ConfusionMatrix& cm, const std::set<std::size_t>& classes) {
  if (classes.empty()) throw std::invalid_argument("miou: class subset is empty");
  const auto c = cm.num_classes();
  IouReport report;
  double total = 0;
  for (auto k : classes) {
    if (k >= c) throw std::invalid_argument("miou: class " + std::to_string(k) + " out of range");
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < c; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const auto inter = cm.at(k, k);
    const auto uni = row + col - inter;
    if (uni == 0) continue;
    const double iou = static_cast<double>(inter) / static_cast<double>(uni);
    report.per_class[k] = iou;
    total += iou;
  }
  if (report.per_class.empty()) throw std::invalid_argument("miou: no class in the subset is evaluable");
  report.mean = total / static_cast<double>(report.per_class.size());
  return report;
}

IouReport miou(const ConfusionMatrix& cm) {
  std::set<std::size_t> all;
  for (std::size_t k = 0; k < cm.num_classes(); ++k) all.insert(k);
  return miou(cm, all);
}

}  // namespace semshift
