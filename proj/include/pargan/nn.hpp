#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pargan/tensor.hpp"

namespace pargan::nn {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  bool has_bias = true;

  Conv2d() = default;
  template <typename Rng>
  Conv2d(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride_,
         std::int64_t pad_, bool bias_, Rng& rng, double init_std)
      : stride(stride_), pad(pad_), has_bias(bias_) {
    weight = init_std > 0 ? Tensor<T>::randn({out, in, k, k}, rng, init_std)
                          : Tensor<T>::zeros({out, in, k, k});
    weight.set_requires_grad();
    bias = Tensor<T>::zeros({out});
    if (has_bias) bias.set_requires_grad();
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = conv2d(x, weight, stride, pad);
    return has_bias ? add_bias(y, bias) : y;
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    if (has_bias) out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename T>
struct InstanceNorm {
  Tensor<T> gain;
  Tensor<T> bias;
  double eps = 1e-5;

  InstanceNorm() = default;
  explicit InstanceNorm(std::int64_t channels)
      : gain(Tensor<T>::ones({channels})), bias(Tensor<T>::zeros({channels})) {
    gain.set_requires_grad();
    bias.set_requires_grad();
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return instance_norm(x, gain, bias, eps); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".bias", bias);
  }
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double eps = 1e-8;
};

/// Adaptive moment estimation over a fixed parameter list.
template <typename T>
class Adam {
 public:
  Adam(NamedParams<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto& [name, p] : params_) {
      m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
      v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }
  }

  /// Applies one update from the accumulated grads, then clears them.
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      auto g = p.grad();
      if (!g) continue;
      auto w = p.mutable_data();
      auto gd = g->data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = gd[j];
        m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * gj * gj;
        const double update = cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
        w[j] = static_cast<T>(w[j] - update);
      }
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  std::int64_t steps() const { return t_; }

 private:
  NamedParams<T> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

template <typename T>
void zero_grads(const NamedParams<T>& params) {
  for (auto p : params) p.second.zero_grad();
}

/// Copies parameter values between two structurally identical models.
template <typename Dst, typename Src>
void copy_params(const NamedParams<Dst>& dst, const NamedParams<Src>& src) {
  if (dst.size() != src.size()) throw DimensionError("copy_params: parameter count differs");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto d = dst[i].second;
    const auto& s = src[i].second;
    if (d.shape() != s.shape()) {
      throw DimensionError("copy_params: " + dst[i].first + " shape " + shape_str(d.shape()) +
                           " vs " + shape_str(s.shape()));
    }
    auto dd = d.mutable_data();
    for (std::size_t j = 0; j < dd.size(); ++j) dd[j] = static_cast<Dst>(s[j]);
  }
}

}  // namespace pargan::nn
