#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pargan/tensor/ops.hpp"

namespace pargan {

/// Instance normalization over the spatial axes of each (n, c) plane, then a
/// per-channel affine map. First-order only: the gradient penalty never
/// differentiates through a normalized network.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                        double eps) {
  if (!(eps > 0)) throw ParameterError("instance_norm: eps must be > 0");
  detail::require_rank4(x.shape(), "instance_norm");
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gain.numel() != c || bias.numel() != c) {
    throw DimensionError("instance_norm: gain/bias need " + std::to_string(c) + " values, got " +
                         std::to_string(gain.numel()) + "/" + std::to_string(bias.numel()));
  }
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<T> inv_std(static_cast<std::size_t>(n * c));
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  auto in = x.data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const T* src = in.data() + p * hw;
    double mu = 0;
    for (std::int64_t i = 0; i < hw; ++i) mu += src[i];
    mu /= static_cast<double>(hw);
    double var = 0;
    for (std::int64_t i = 0; i < hw; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(hw);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[p] = static_cast<T>(is);
    const T gch = gain[p % c], bch = bias[p % c];
    for (std::int64_t i = 0; i < hw; ++i) {
      const T v = static_cast<T>((src[i] - mu) * is);
      xhat[p * hw + i] = v;
      out[p * hw + i] = gch * v + bch;
    }
  }
  return detail::record<T>(
      "instance_norm", {x, gain, bias}, make_result<T>(x.shape(), std::move(out)),
      [x, gain, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw](
          const Tensor<T>& g, const std::vector<bool>& need) {
        detail::require_first_order<T>("instance_norm");
        typename Tape<T>::Grads r(3);
        auto gd = g.data();
        if (need[0]) {
          std::vector<T> gx(static_cast<std::size_t>(x.numel()));
          for (std::int64_t p = 0; p < n * c; ++p) {
            const double gch = gain[p % c];
            double m1 = 0, m2 = 0;
            for (std::int64_t i = 0; i < hw; ++i) {
              const double gh = gd[p * hw + i] * gch;
              m1 += gh;
              m2 += gh * xhat[p * hw + i];
            }
            m1 /= static_cast<double>(hw);
            m2 /= static_cast<double>(hw);
            for (std::int64_t i = 0; i < hw; ++i) {
              const double gh = gd[p * hw + i] * gch;
              gx[p * hw + i] = static_cast<T>(inv_std[p] * (gh - m1 - xhat[p * hw + i] * m2));
            }
          }
          r[0] = make_result<T>(x.shape(), std::move(gx));
        }
        if (need[1] || need[2]) {
          std::vector<T> gg(static_cast<std::size_t>(c), T{0}), gb(static_cast<std::size_t>(c), T{0});
          for (std::int64_t p = 0; p < n * c; ++p) {
            double sg = 0, sb = 0;
            for (std::int64_t i = 0; i < hw; ++i) {
              sg += gd[p * hw + i] * xhat[p * hw + i];
              sb += gd[p * hw + i];
            }
            gg[p % c] += static_cast<T>(sg);
            gb[p % c] += static_cast<T>(sb);
          }
          if (need[1]) r[1] = make_result<T>(Shape{c}, std::move(gg));
          if (need[2]) r[2] = make_result<T>(Shape{c}, std::move(gb));
        }
        return r;
      });
}

}  // namespace pargan
