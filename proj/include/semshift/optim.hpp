#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "semshift/checkpoint.hpp"
#include "semshift/models.hpp"

namespace semshift {

/// base_lr * (1 - i / max_iter)^power for 0 <= i <= max_iter.
double poly_lr(double base_lr, std::int64_t i, std::int64_t max_iter, double power = 0.9);

/// SGD with Nesterov momentum in the accumulate-then-look-ahead form
///   v <- mu v + g,   w <- w - lr (g + mu v) - lr wd w
/// with decoupled weight decay evaluated at the pre-step weights.
template <std::floating_point T>
class SgdNesterov {
 public:
  SgdNesterov(ParameterList<T> params, double momentum, double weight_decay);

  /// Applies one update from the parameters' current grads. Parameters
  /// without a grad are treated as having a zero gradient.
  void step(double lr);
  void zero_grad();

  void save(Checkpoint& ck, const std::string& prefix) const;
  void load(const Checkpoint& ck, const std::string& prefix);

 private:
  ParameterList<T> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_, weight_decay_;
};

/// Adam with bias correction:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   w <- w - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
template <std::floating_point T>
class Adam {
 public:
  Adam(ParameterList<T> params, double beta1, double beta2, double eps = 1e-8);

  void step(double lr);
  void zero_grad();
  std::uint64_t steps() const { return t_; }

  void save(Checkpoint& ck, const std::string& prefix) const;
  void load(const Checkpoint& ck, const std::string& prefix);

 private:
  ParameterList<T> params_;
  std::vector<std::vector<T>> m_, v_;
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
};

}  // namespace semshift
