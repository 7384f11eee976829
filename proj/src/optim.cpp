#include "semshift/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace semshift {

double poly_lr(double base_lr, std::int64_t i, std::int64_t max_iter, double power) {
  if (max_iter <= 0) throw std::invalid_argument("poly_lr: max_iter must be positive");
  if (i < 0 || i > max_iter) {
    throw std::invalid_argument("poly_lr: iteration " + std::to_string(i) + " outside [0, " +
                                std::to_string(max_iter) + "]");
  }
  return base_lr * std::pow(1.0 - static_cast<double>(i) / static_cast<double>(max_iter), power);
}

namespace {

template <std::floating_point T>
std::vector<std::vector<T>> zero_buffers(const ParameterList<T>& params) {
  std::vector<std::vector<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.tensor.numel(), T{0});
  return out;
}

template <std::floating_point T>
void zero_all(ParameterList<T>& params) {
  for (auto& p : params) {
    if (p.tensor.has_grad()) p.tensor.zero_grad();
  }
}

}  // namespace

template <std::floating_point T>
SgdNesterov<T>::SgdNesterov(ParameterList<T> params, double momentum, double weight_decay)
    : params_(std::move(params)), velocity_(zero_buffers(params_)), momentum_(momentum), weight_decay_(weight_decay) {
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("SGD momentum must be in [0,1)");
  if (!(weight_decay >= 0)) throw std::invalid_argument("SGD weight decay must be nonnegative");
}

template <std::floating_point T>
void SgdNesterov<T>::step(double lr) {
  const T mu = static_cast<T>(momentum_);
  const T rate = static_cast<T>(lr);
  const T decay = static_cast<T>(lr * weight_decay_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].tensor;
    auto w = p.mutable_values();
    T* __restrict v = velocity_[i].data();
    T* __restrict wp = w.data();
    const std::size_t n = w.size();
    if (p.has_grad()) {
      const T* __restrict g = p.grad().data();
      for (std::size_t j = 0; j < n; ++j) {
        v[j] = mu * v[j] + g[j];
        wp[j] = wp[j] - rate * (g[j] + mu * v[j]) - decay * wp[j];
      }
    } else {
      for (std::size_t j = 0; j < n; ++j) {
        v[j] = mu * v[j];
        wp[j] = wp[j] - rate * (mu * v[j]) - decay * wp[j];
      }
    }
  }
}

template <std::floating_point T>
void SgdNesterov<T>::zero_grad() {
  zero_all(params_);
}

template <std::floating_point T>
void SgdNesterov<T>::save(Checkpoint& ck, const std::string& prefix) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ck.put<T>(prefix + params_[i].name + ".velocity", params_[i].tensor.shape(), velocity_[i]);
  }
}

template <std::floating_point T>
void SgdNesterov<T>::load(const Checkpoint& ck, const std::string& prefix) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ck.read_into<T>(prefix + params_[i].name + ".velocity", params_[i].tensor.shape(), velocity_[i]);
  }
}

template <std::floating_point T>
Adam<T>::Adam(ParameterList<T> params, double beta1, double beta2, double eps)
    : params_(std::move(params)),
      m_(zero_buffers(params_)),
      v_(zero_buffers(params_)),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("Adam betas must be in [0,1)");
  if (!(eps > 0)) throw std::invalid_argument("Adam eps must be positive");
}

template <std::floating_point T>
void Adam<T>::step(double lr) {
  ++t_;
  const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
  const T c1 = static_cast<T>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
  const T c2 = static_cast<T>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
  const T rate = static_cast<T>(lr), eps = static_cast<T>(eps_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].tensor;
    auto w = p.mutable_values();
    T* __restrict m = m_[i].data();
    T* __restrict v = v_[i].data();
    T* __restrict wp = w.data();
    const std::size_t n = w.size();
    if (p.has_grad()) {
      const T* __restrict g = p.grad().data();
      for (std::size_t j = 0; j < n; ++j) {
        m[j] = b1 * m[j] + (T{1} - b1) * g[j];
        v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
        wp[j] -= rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
      }
    } else {
      for (std::size_t j = 0; j < n; ++j) {
        m[j] = b1 * m[j];
        v[j] = b2 * v[j];
        wp[j] -= rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
      }
    }
  }
}

template <std::floating_point T>
void Adam<T>::zero_grad() {
  zero_all(params_);
}

template <std::floating_point T>
void Adam<T>::save(Checkpoint& ck, const std::string& prefix) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ck.put<T>(prefix + params_[i].name + ".m", params_[i].tensor.shape(), m_[i]);
    ck.put<T>(prefix + params_[i].name + ".v", params_[i].tensor.shape(), v_[i]);
  }
  const std::vector<double> t{static_cast<double>(t_)};
  ck.put<double>(prefix + "step", {1}, t);
}

template <std::floating_point T>
void Adam<T>::load(const Checkpoint& ck, const std::string& prefix) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ck.read_into<T>(prefix + params_[i].name + ".m", params_[i].tensor.shape(), m_[i]);
    ck.read_into<T>(prefix + params_[i].name + ".v", params_[i].tensor.shape(), v_[i]);
  }
  std::vector<double> t(1);
  ck.read_into<double>(prefix + "step", {1}, t);
  t_ = static_cast<std::uint64_t>(t[0]);
}

template class SgdNesterov<float>;
template class SgdNesterov<double>;
template class Adam<float>;
template class Adam<double>;

}  // namespace semshift
