#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pargan/checkpoint.hpp"
#include "pargan/nn.hpp"
#include "pargan/tensor.hpp"

namespace pargan {

enum class Conditioning : std::int32_t { kConstChannel = 0 };

struct GeneratorSpec {
  std::int64_t base_channels = 16;
  std::int64_t n_res_blocks = 3;
  std::int64_t downsample_stages = 2;
  Conditioning conditioning = Conditioning::kConstChannel;

  std::int64_t divisor() const { return std::int64_t{1} << downsample_stages; }
  bool operator==(const GeneratorSpec&) const = default;
};

struct CriticSpec {
  std::int64_t base_channels = 16;
  // Strided 4x4 layers before the 3x3 scoring layer.
  std::int64_t n_layers = 3;
  Conditioning conditioning = Conditioning::kConstChannel;

  std::int64_t divisor() const { return std::int64_t{1} << n_layers; }
  /// Side of the input patch seen by one output score.
  std::int64_t receptive_field() const {
    std::int64_t rf = 3;
    for (std::int64_t i = 0; i < n_layers; ++i) rf = (rf - 1) * 2 + 4;
    return rf;
  }
  bool operator==(const CriticSpec&) const = default;
};

/// Appends one constant channel holding `p`.
template <typename T>
Tensor<T> condition(const Tensor<T>& x, double p) {
  detail::require_rank4(x.shape(), "condition");
  return concat_channels(x, Tensor<T>::full({x.dim(0), 1, x.dim(2), x.dim(3)}, static_cast<T>(p)));
}

/// Drops the conditioning channel appended by condition().
template <typename T>
Tensor<T> strip_condition(const Tensor<T>& x) {
  return slice_channels(x, 0, x.dim(1) - 1);
}

namespace detail {

inline void require_divisible(const Shape& s, std::int64_t divisor, std::string_view who) {
  require_rank4(s, who);
  if (s[2] % divisor != 0 || s[3] % divisor != 0) {
    throw DimensionError(std::string(who) + ": spatial extent " + std::to_string(s[2]) + "x" +
                         std::to_string(s[3]) + " must be divisible by " + std::to_string(divisor));
  }
}

}  // namespace detail

/// Encoder / residual trunk / resize-convolution decoder. Reflection padding
/// only at the stem. The head adds the
/// decoder output to the tanh pre-image of the input, so an untrained network
/// (zero-initialized head and residual tails) reproduces its input.
template <typename T>
class Generator {
 public:
  static constexpr double kInitStd = 0.02;
  static constexpr double kPreimageLimit = 0.999;

  Generator() = default;
  template <typename Rng>
  Generator(GeneratorSpec spec, Rng& rng) : spec_(spec) {
    if (spec.base_channels < 1 || spec.n_res_blocks < 0 || spec.downsample_stages < 0) {
      throw ParameterError("invalid generator spec");
    }
    const auto b = spec.base_channels;
    stem_ = {nn::Conv2d<T>(4, b, 7, 1, 0, false, rng, kInitStd), nn::InstanceNorm<T>(b)};
    auto ch = b;
    for (std::int64_t i = 0; i < spec.downsample_stages; ++i) {
      down_.push_back({nn::Conv2d<T>(ch, ch * 2, 3, 2, 1, false, rng, kInitStd),
                       nn::InstanceNorm<T>(ch * 2)});
      ch *= 2;
    }
    for (std::int64_t i = 0; i < spec.n_res_blocks; ++i) {
      res_.push_back({nn::Conv2d<T>(ch, ch, 3, 1, 1, false, rng, kInitStd),
                      nn::InstanceNorm<T>(ch),
                      nn::Conv2d<T>(ch, ch, 3, 1, 1, true, rng, 0.0)});
    }
    for (std::int64_t i = 0; i < spec.downsample_stages; ++i) {
      up_.push_back({nn::Conv2d<T>(ch, ch / 2, 3, 1, 1, false, rng, kInitStd),
                     nn::InstanceNorm<T>(ch / 2)});
      ch /= 2;
    }
    head_ = nn::Conv2d<T>(ch, 3, 7, 1, 3, true, rng, 0.0);
  }

  const GeneratorSpec& spec() const { return spec_; }

  /// Maps an N x 3 x H x W image batch in [0,1] at parameter p to the same shape.
  Tensor<T> operator()(const Tensor<T>& x, double p) const {
    detail::require_divisible(x.shape(), spec_.divisor(), "generate");
    if (x.dim(1) != 3) throw DimensionError("generate: expected 3 channels on axis 1");
    if (!std::isfinite(p)) throw ParameterError("generate: p must be finite");
    auto h = relu(stem_.norm(stem_.conv(pad_reflect(condition(x, p), 3))));
    for (const auto& s : down_) h = relu(s.norm(s.conv(h)));
    for (const auto& r : res_) {
      h = add(h, r.conv2(relu(r.norm(r.conv1(h)))));
    }
    for (const auto& s : up_) h = relu(s.norm(s.conv(resize_nearest(h, 2))));
    auto u = head_(h);
    return add_scalar(scale(tanh(add(u, tanh_preimage(x, kPreimageLimit))), 0.5), 0.5);
  }

  nn::NamedParams<T> parameters(const std::string& prefix) const {
    nn::NamedParams<T> out;
    stem_.conv.collect(prefix + ".stem.conv", out);
    stem_.norm.collect(prefix + ".stem.norm", out);
    for (std::size_t i = 0; i < down_.size(); ++i) {
      const auto p = prefix + ".down" + std::to_string(i);
      down_[i].conv.collect(p + ".conv", out);
      down_[i].norm.collect(p + ".norm", out);
    }
    for (std::size_t i = 0; i < res_.size(); ++i) {
      const auto p = prefix + ".res" + std::to_string(i);
      res_[i].conv1.collect(p + ".conv1", out);
      res_[i].norm.collect(p + ".norm", out);
      res_[i].conv2.collect(p + ".conv2", out);
    }
    for (std::size_t i = 0; i < up_.size(); ++i) {
      const auto p = prefix + ".up" + std::to_string(i);
      up_[i].conv.collect(p + ".conv", out);
      up_[i].norm.collect(p + ".norm", out);
    }
    head_.collect(prefix + ".head", out);
    return out;
  }

 private:
  struct Stage {
    nn::Conv2d<T> conv;
    nn::InstanceNorm<T> norm;
  };
  struct ResBlock {
    nn::Conv2d<T> conv1;
    nn::InstanceNorm<T> norm;
    nn::Conv2d<T> conv2;
  };

  GeneratorSpec spec_;
  Stage stem_;
  std::vector<Stage> down_;
  std::vector<ResBlock> res_;
  std::vector<Stage> up_;
  nn::Conv2d<T> head_;
};

/// PatchGAN-style Wasserstein critic: unbounded N x 1 x h x w score map.
template <typename T>
class Critic {
 public:
  static constexpr double kInitStd = 0.02;
  static constexpr double kSlope = 0.2;

  Critic() = default;
  template <typename Rng>
  Critic(CriticSpec spec, Rng& rng) : spec_(spec) {
    if (spec.base_channels < 1 || spec.n_layers < 1) throw ParameterError("invalid critic spec");
    std::int64_t in = 4;
    for (std::int64_t i = 0; i < spec.n_layers; ++i) {
      const auto out = spec.base_channels * (std::int64_t{1} << std::min<std::int64_t>(i, 3));
      layers_.push_back(nn::Conv2d<T>(in, out, 4, 2, 1, true, rng, kInitStd));
      in = out;
    }
    score_ = nn::Conv2d<T>(in, 1, 3, 1, 1, true, rng, kInitStd);
  }

  const CriticSpec& spec() const { return spec_; }

  Tensor<T> operator()(const Tensor<T>& x, double p) const {
    detail::require_divisible(x.shape(), spec_.divisor(), "criticize");
    if (!std::isfinite(p)) throw ParameterError("criticize: p must be finite");
    auto h = condition(x, p);
    for (const auto& l : layers_) h = leaky_relu(l(h), kSlope);
    return score_(h);
  }

  /// First `n` strided stages (with activations), used as a frozen encoder.
  Tensor<T> features(const Tensor<T>& x, double p, std::size_t n) const {
    auto h = condition(x, p);
    for (std::size_t i = 0; i < n && i < layers_.size(); ++i) h = leaky_relu(layers_[i](h), kSlope);
    return h;
  }

  nn::NamedParams<T> parameters(const std::string& prefix) const {
    nn::NamedParams<T> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      layers_[i].collect(prefix + ".layer" + std::to_string(i), out);
    }
    score_.collect(prefix + ".score", out);
    return out;
  }

 private:
  CriticSpec spec_;
  std::vector<nn::Conv2d<T>> layers_;
  nn::Conv2d<T> score_;
};

template <typename T>
Tensor<T> generate(const Generator<T>& g, const Tensor<T>& x, double p) {
  return g(x, p);
}

template <typename T>
Tensor<T> criticize(const Critic<T>& d, const Tensor<T>& x, double p) {
  return d(x, p);
}

/// The forward pair (G, D) and the inverse pair (G_inv, D_inv).
template <typename T>
struct ParGanModel {
  static constexpr std::string_view kMagic = "PGAN1";

  Generator<T> g;
  Generator<T> g_inv;
  Critic<T> d;
  Critic<T> d_inv;

  ParGanModel() = default;
  ParGanModel(const GeneratorSpec& gs, const CriticSpec& cs, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    g = Generator<T>(gs, rng);
    g_inv = Generator<T>(gs, rng);
    d = Critic<T>(cs, rng);
    d_inv = Critic<T>(cs, rng);
  }

  const GeneratorSpec& generator_spec() const { return g.spec(); }
  const CriticSpec& critic_spec() const { return d.spec(); }

  nn::NamedParams<T> generator_parameters() const {
    auto a = g.parameters("G");
    auto b = g_inv.parameters("G_inv");
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }
  nn::NamedParams<T> critic_parameters() const {
    auto a = d.parameters("D");
    auto b = d_inv.parameters("D_inv");
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }
  nn::NamedParams<T> parameters() const {
    auto a = generator_parameters();
    auto b = critic_parameters();
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }

  static std::vector<std::int32_t> header(const GeneratorSpec& gs, const CriticSpec& cs) {
    return {static_cast<std::int32_t>(gs.base_channels), static_cast<std::int32_t>(gs.n_res_blocks),
            static_cast<std::int32_t>(gs.downsample_stages),
            static_cast<std::int32_t>(gs.conditioning), static_cast<std::int32_t>(cs.base_channels),
            static_cast<std::int32_t>(cs.n_layers), static_cast<std::int32_t>(cs.conditioning)};
  }

  void save(const std::string& path) const {
    checkpoint::save(path, kMagic, header(generator_spec(), critic_spec()), parameters());
  }

  /// Loads a checkpoint whose spec header must equal this model's spec.
  void load(const std::string& path) {
    checkpoint::load(path, kMagic, header(generator_spec(), critic_spec()), parameters());
  }

  /// Builds a model from the spec stored in the checkpoint, then loads it.
  static ParGanModel from_file(const std::string& path) {
    const auto h = checkpoint::read_header(path, kMagic, 7);
    if (h[3] != 0 || h[6] != 0) throw FormatError("unknown conditioning mode in checkpoint", 5);
    GeneratorSpec gs{h[0], h[1], h[2], Conditioning::kConstChannel};
    CriticSpec cs{h[4], h[5], Conditioning::kConstChannel};
    ParGanModel m(gs, cs, 0);
    m.load(path);
    return m;
  }
};

}  // namespace pargan
