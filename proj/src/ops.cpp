#include "semshift/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace semshift::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

struct ConvGeometry {
  std::size_t cin, hin, win, cout, kh, kw, stride, padding, hout, wout;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t locations() const { return hout * wout; }
  bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

template <typename T>
void im2col(std::span<const T> in, const ConvGeometry& g, std::span<T> col) {
  const auto L = g.locations();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col.data() + ((c * g.kh + ki) * g.kw + kj) * L;
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            const bool inside = iy >= 0 && iy < static_cast<std::ptrdiff_t>(g.hin) && ix >= 0 &&
                                ix < static_cast<std::ptrdiff_t>(g.win);
            row[oy * g.wout + ox] = inside ? in[(c * g.hin + iy) * g.win + ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accumulate(std::span<const T> col, const ConvGeometry& g, std::span<T> out) {
  const auto L = g.locations();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col.data() + ((c * g.kh + ki) * g.kw + kj) * L;
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.hin)) continue;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.win)) continue;
            out[(c * g.hin + iy) * g.win + ix] += row[oy * g.wout + ox];
          }
        }
      }
    }
  }
}

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_to_string(s));
  }
}

}  // namespace

template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  require_rank(input.shape(), 3, "conv2d input");
  require_rank(kernel.shape(), 4, "conv2d kernel");
  require_rank(bias.shape(), 1, "conv2d bias");
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  ConvGeometry g{};
  g.cin = input.dim(0);
  g.hin = input.dim(1);
  g.win = input.dim(2);
  g.cout = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.padding = padding;
  if (kernel.dim(1) != g.cin) {
    throw ShapeError("conv2d: input " + shape_to_string(input.shape()) + " has " + std::to_string(g.cin) +
                     " channels but kernel " + shape_to_string(kernel.shape()) + " expects " +
                     std::to_string(kernel.dim(1)));
  }
  if (bias.dim(0) != g.cout) {
    throw ShapeError("conv2d: bias " + shape_to_string(bias.shape()) + " does not match " +
                     std::to_string(g.cout) + " output channels");
  }
  if (g.hin + 2 * padding < g.kh || g.win + 2 * padding < g.kw) {
    throw ShapeError("conv2d: kernel " + shape_to_string(kernel.shape()) + " does not fit input " +
                     shape_to_string(input.shape()) + " with padding " + std::to_string(padding));
  }
  g.hout = (g.hin + 2 * padding - g.kh) / stride + 1;
  g.wout = (g.win + 2 * padding - g.kw) / stride + 1;

  const auto K = g.patch();
  const auto L = g.locations();
  Buffer<T> col;
  if (!g.is_pointwise()) {
    col.resize(K * L);
    im2col<T>(input.values(), g, col);
  }
  const T* col_data = g.is_pointwise() ? input.values().data() : col.data();

  Buffer<T> out(g.cout * L);
  {
    MatMap<T> o(out.data(), g.cout, L);
    ConstMatMap<T> w(kernel.values().data(), g.cout, K);
    ConstMatMap<T> x(col_data, K, L);
    o.noalias() = w * x;
    ConstVecMap<T> b(bias.values().data(), g.cout);
    o.colwise() += b;
  }

  return make_result<T>(
      "conv2d", Shape{g.cout, g.hout, g.wout}, std::move(out), {input, kernel, bias},
      [g, input, kernel, col = std::move(col)](std::span<const T> gout, detail::GradOutputs<T>& gin) {
        const auto K = g.patch();
        const auto L = g.locations();
        ConstMatMap<T> go(gout.data(), g.cout, L);
        const T* col_data = g.is_pointwise() ? input.values().data() : col.data();
        if (!gin[1].empty()) {
          MatMap<T> gk(gin[1].data(), g.cout, K);
          ConstMatMap<T> x(col_data, K, L);
          gk.noalias() += go * x.transpose();
        }
        if (!gin[2].empty()) {
          VecMap<T> gb(gin[2].data(), g.cout);
          gb += go.rowwise().sum();
        }
        if (!gin[0].empty()) {
          ConstMatMap<T> w(kernel.values().data(), g.cout, K);
          if (g.is_pointwise()) {
            MatMap<T> gx(gin[0].data(), K, L);
            gx.noalias() += w.transpose() * go;
          } else {
            Buffer<T> gcol(K * L);
            MatMap<T> gc(gcol.data(), K, L);
            gc.noalias() = w.transpose() * go;
            col2im_accumulate<T>(gcol, g, gin[0]);
          }
        }
      });
}

template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(input.shape(), 1, "linear input");
  require_rank(weight.shape(), 2, "linear weight");
  require_rank(bias.shape(), 1, "linear bias");
  const auto din = input.dim(0);
  const auto dout = weight.dim(0);
  if (weight.dim(1) != din) {
    throw ShapeError("linear: input " + shape_to_string(input.shape()) + " incompatible with weight " +
                     shape_to_string(weight.shape()));
  }
  if (bias.dim(0) != dout) {
    throw ShapeError("linear: bias " + shape_to_string(bias.shape()) + " incompatible with weight " +
                     shape_to_string(weight.shape()));
  }
  Buffer<T> out(dout);
  {
    VecMap<T> y(out.data(), dout);
    ConstMatMap<T> w(weight.values().data(), dout, din);
    ConstVecMap<T> x(input.values().data(), din);
    ConstVecMap<T> b(bias.values().data(), dout);
    y.noalias() = w * x;
    y += b;
  }
  return make_result<T>("linear", Shape{dout}, std::move(out), {input, weight, bias},
                        [din, dout, input, weight](std::span<const T> gout, detail::GradOutputs<T>& gin) {
                          ConstVecMap<T> gy(gout.data(), dout);
                          if (!gin[0].empty()) {
                            ConstMatMap<T> w(weight.values().data(), dout, din);
                            VecMap<T> gx(gin[0].data(), din);
                            gx.noalias() += w.transpose() * gy;
                          }
                          if (!gin[1].empty()) {
                            ConstVecMap<T> x(input.values().data(), din);
                            MatMap<T> gw(gin[1].data(), dout, din);
                            gw.noalias() += gy * x.transpose();
                          }
                          if (!gin[2].empty()) {
                            VecMap<T> gb(gin[2].data(), dout);
                            gb += gy;
                          }
                        });
}

template <std::floating_point T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope) {
  if (!(slope >= T{0} && slope < T{1})) throw std::invalid_argument("leaky_relu: slope must lie in [0,1)");
  const auto x = input.values();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : slope * x[i];
  return make_result<T>("leaky_relu", input.shape(), std::move(out), {input},
                        [input, slope](std::span<const T> gout, detail::GradOutputs<T>& gin) {
                          const auto x = input.values();
                          for (std::size_t i = 0; i < x.size(); ++i) {
                            gin[0][i] += x[i] > T{0} ? gout[i] : slope * gout[i];
                          }
                        });
}

template <std::floating_point T>
Tensor<T> softmax_channel(const Tensor<T>& input) {
  if (input.rank() == 0 || input.dim(0) == 0) {
    throw ShapeError("softmax_channel: needs at least one channel, got " + shape_to_string(input.shape()));
  }
  const auto C = input.dim(0);
  const auto L = input.numel() / C;
  const auto x = input.values();
  Buffer<T> out(x.size());
  for (std::size_t l = 0; l < L; ++l) {
    T peak = x[l];
    for (std::size_t c = 1; c < C; ++c) peak = std::max(peak, x[c * L + l]);
    T total{0};
    for (std::size_t c = 0; c < C; ++c) {
      const T e = std::exp(x[c * L + l] - peak);
      out[c * L + l] = e;
      total += e;
    }
    for (std::size_t c = 0; c < C; ++c) out[c * L + l] /= total;
  }
  Buffer<T> y = out;
  return make_result<T>("softmax_channel", input.shape(), std::move(out), {input},
                        [C, L, y = std::move(y)](std::span<const T> gout, detail::GradOutputs<T>& gin) {
                          for (std::size_t l = 0; l < L; ++l) {
                            T dot{0};
                            for (std::size_t c = 0; c < C; ++c) dot += gout[c * L + l] * y[c * L + l];
                            for (std::size_t c = 0; c < C; ++c) {
                              gin[0][c * L + l] += y[c * L + l] * (gout[c * L + l] - dot);
                            }
                          }
                        });
}

namespace {

struct AxisWeights {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

AxisWeights align_corners_axis(std::size_t in, std::size_t out) {
  AxisWeights a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.frac.resize(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double src = out > 1 ? static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1)
                               : 0.0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    lo = std::min(lo, in - 1);
    a.lo[i] = lo;
    a.hi[i] = std::min(lo + 1, in - 1);
    a.frac[i] = src - static_cast<double>(lo);
  }
  return a;
}

}  // namespace

template <std::floating_point T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  require_rank(input.shape(), 3, "bilinear_upsample input");
  const auto C = input.dim(0);
  const auto h = input.dim(1);
  const auto w = input.dim(2);
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_upsample: zero-size output requested");
  if (h == 0 || w == 0) throw ShapeError("bilinear_upsample: empty input " + shape_to_string(input.shape()));
  if (out_h < h || out_w < w) {
    throw ShapeError("bilinear_upsample: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " smaller than input " + shape_to_string(input.shape()));
  }
  auto rows = align_corners_axis(h, out_h);
  auto cols = align_corners_axis(w, out_w);
  const auto x = input.values();
  Buffer<T> out(C * out_h * out_w);
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = x.data() + c * h * w;
    T* dst = out.data() + c * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T fy = static_cast<T>(rows.frac[i]);
      const T* r0 = src + rows.lo[i] * w;
      const T* r1 = src + rows.hi[i] * w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const T fx = static_cast<T>(cols.frac[j]);
        const T top = r0[cols.lo[j]] * (T{1} - fx) + r0[cols.hi[j]] * fx;
        const T bottom = r1[cols.lo[j]] * (T{1} - fx) + r1[cols.hi[j]] * fx;
        dst[i * out_w + j] = top * (T{1} - fy) + bottom * fy;
      }
    }
  }
  return make_result<T>(
      "bilinear_upsample", Shape{C, out_h, out_w}, std::move(out), {input},
      [C, h, w, out_h, out_w, rows = std::move(rows), cols = std::move(cols)](std::span<const T> gout,
                                                                              detail::GradOutputs<T>& gin) {
        for (std::size_t c = 0; c < C; ++c) {
          T* g = gin[0].data() + c * h * w;
          const T* go = gout.data() + c * out_h * out_w;
          for (std::size_t i = 0; i < out_h; ++i) {
            const T fy = static_cast<T>(rows.frac[i]);
            T* r0 = g + rows.lo[i] * w;
            T* r1 = g + rows.hi[i] * w;
            for (std::size_t j = 0; j < out_w; ++j) {
              const T fx = static_cast<T>(cols.frac[j]);
              const T v = go[i * out_w + j];
              r0[cols.lo[j]] += v * (T{1} - fy) * (T{1} - fx);
              r0[cols.hi[j]] += v * (T{1} - fy) * fx;
              r1[cols.lo[j]] += v * fy * (T{1} - fx);
              r1[cols.hi[j]] += v * fy * fx;
            }
          }
        }
      });
}

template <std::floating_point T>
Tensor<T> log_clamped(const Tensor<T>& input, T eps) {
  const auto x = input.values();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::log(std::max(x[i], eps));
  return make_result<T>("log_clamped", input.shape(), std::move(out), {input},
                        [input, eps](std::span<const T> gout, detail::GradOutputs<T>& gin) {
                          const auto x = input.values();
                          for (std::size_t i = 0; i < x.size(); ++i) {
                            if (x[i] > eps) gin[0][i] += gout[i] / x[i];
                          }
                        });
}

template <std::floating_point T>
Tensor<T> gather_channels(const Tensor<T>& input, std::span<const std::int32_t> channel) {
  if (input.rank() == 0) throw ShapeError("gather_channels: input must have a channel axis");
  const auto C = input.dim(0);
  const auto L = input.numel() / C;
  if (channel.size() != L) {
    throw ShapeError("gather_channels: " + std::to_string(channel.size()) + " indices for input " +
                     shape_to_string(input.shape()));
  }
  std::vector<std::size_t> picked;
  picked.reserve(L);
  for (std::size_t l = 0; l < L; ++l) {
    if (channel[l] < 0) continue;
    if (static_cast<std::size_t>(channel[l]) >= C) {
      throw std::out_of_range("gather_channels: channel " + std::to_string(channel[l]) + " out of range for " +
                              std::to_string(C) + " channels");
    }
    picked.push_back(static_cast<std::size_t>(channel[l]) * L + l);
  }
  const auto x = input.values();
  Buffer<T> out(picked.size());
  for (std::size_t i = 0; i < picked.size(); ++i) out[i] = x[picked[i]];
  const auto m = picked.size();
  return make_result<T>("gather_channels", Shape{m}, std::move(out), {input},
                        [picked = std::move(picked)](std::span<const T> gout, detail::GradOutputs<T>& gin) {
                          for (std::size_t i = 0; i < picked.size(); ++i) gin[0][picked[i]] += gout[i];
                        });
}

template <std::floating_point T>
Tensor<T> weighted_spatial_sum(const Tensor<T>& input, std::span<const T> weights) {
  if (input.rank() < 2) throw ShapeError("weighted_spatial_sum: expected [n, ...spatial], got " +
                                         shape_to_string(input.shape()));
  const auto n = input.dim(0);
  const auto L = input.numel() / n;
  if (weights.size() != L) {
    throw ShapeError("weighted_spatial_sum: " + std::to_string(weights.size()) + " weights for input " +
                     shape_to_string(input.shape()));
  }
  Buffer<T> w(weights.begin(), weights.end());
  Buffer<T> out(n);
  {
    ConstMatMap<T> x(input.values().data(), n, L);
    ConstVecMap<T> wv(w.data(), L);
    VecMap<T>(out.data(), n).noalias() = x * wv;
  }
  return make_result<T>("weighted_spatial_sum", Shape{n}, std::move(out), {input},
                        [n, L, w = std::move(w)](std::span<const T> gout, detail::GradOutputs<T>& gin) {
                          MatMap<T> gx(gin[0].data(), n, L);
                          ConstVecMap<T> gy(gout.data(), n);
                          ConstVecMap<T> wv(w.data(), L);
                          gx.noalias() += gy * wv.transpose();
                        });
}

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& input) {
  const auto x = input.values();
  T total{0};
  for (const T v : x) total += v;
  return make_result<T>("sum", Shape{}, Buffer<T>{total}, {input},
                        [](std::span<const T> gout, detail::GradOutputs<T>& gin) {
                          for (auto& g : gin[0]) g += gout[0];
                        });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& input) {
  const auto n = input.numel();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(input), T{1} / static_cast<T>(n));
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& input, T factor) {
  const auto x = input.values();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  return make_result<T>("scale", input.shape(), std::move(out), {input},
                        [factor](std::span<const T> gout, detail::GradOutputs<T>& gin) {
                          for (std::size_t i = 0; i < gout.size(); ++i) gin[0][i] += gout[i] * factor;
                        });
}

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes " + shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()) +
                     " differ");
  }
  const auto x = a.values();
  const auto y = b.values();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b},
                        [](std::span<const T> gout, detail::GradOutputs<T>& gin) {
                          for (auto k : {0, 1}) {
                            if (gin[k].empty()) continue;
                            for (std::size_t i = 0; i < gout.size(); ++i) gin[k][i] += gout[i];
                          }
                        });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes " + shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()) +
                     " differ");
  }
  const auto x = a.values();
  const auto y = b.values();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b},
                        [a, b](std::span<const T> gout, detail::GradOutputs<T>& gin) {
                          const auto x = a.values();
                          const auto y = b.values();
                          for (std::size_t i = 0; i < gout.size(); ++i) {
                            if (!gin[0].empty()) gin[0][i] += gout[i] * y[i];
                            if (!gin[1].empty()) gin[1][i] += gout[i] * x[i];
                          }
                        });
}

#define SEMSHIFT_INSTANTIATE(T)                                                                          \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> leaky_relu<T>(const Tensor<T>&, T);                                               \
  template Tensor<T> softmax_channel<T>(const Tensor<T>&);                                             \
  template Tensor<T> bilinear_upsample<T>(const Tensor<T>&, std::size_t, std::size_t);                 \
  template Tensor<T> log_clamped<T>(const Tensor<T>&, T);                                              \
  template Tensor<T> gather_channels<T>(const Tensor<T>&, std::span<const std::int32_t>);              \
  template Tensor<T> weighted_spatial_sum<T>(const Tensor<T>&, std::span<const T>);                    \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                         \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                        \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                    \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);

SEMSHIFT_INSTANTIATE(float)
SEMSHIFT_INSTANTIATE(double)

#undef SEMSHIFT_INSTANTIATE

}  // namespace semshift::ops
