#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "oracle.hpp"
#include "pargan/model.hpp"

using namespace pargan;
using T64 = Tensor<double>;
using T32 = Tensor<float>;

namespace {

template <typename T>
Tensor<T> image(std::int64_t h, std::int64_t w, std::uint64_t seed, std::int64_t n = 1) {
  std::mt19937_64 rng(seed);
  return Tensor<T>::uniform({n, 3, h, w}, rng, 0.0, 1.0);
}

// Gives every parameter a small random value so nothing is structurally zero.
template <typename T>
void scramble(const nn::NamedParams<T>& params, std::uint64_t seed, double sd = 0.1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  for (auto [name, p] : params) {
    for (auto& v : p.mutable_data()) v = static_cast<T>(v + n(rng));
  }
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("pargan_test_model_" + name);
}

// Translates an N x C x H x W tensor by (dy, dx) and keeps the rows/columns
// that are defined after the shift.
T64 crop(const T64& x, std::int64_t top, std::int64_t left, std::int64_t h, std::int64_t w) {
  const auto c = x.dim(1);
  std::vector<double> out;
  for (std::int64_t k = 0; k < c; ++k) {
    for (std::int64_t i = 0; i < h; ++i) {
      for (std::int64_t j = 0; j < w; ++j) out.push_back(x[(k * x.dim(2) + top + i) * x.dim(3) + left + j]);
    }
  }
  return T64({1, c, h, w}, out);
}

}  // namespace

TEST(Condition, ZeroChannel) {
  auto y = condition(image<double>(4, 4, 1), 0.0);
  ASSERT_EQ(y.shape(), (Shape{1, 4, 4, 4}));
  for (int i = 48; i < 64; ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(Condition, OnesChannelAndRoundTrip) {
  auto x = image<double>(4, 4, 2);
  auto y = condition(x, 1.0);
  ASSERT_EQ(y.shape(), (Shape{1, 4, 4, 4}));
  for (int i = 48; i < 64; ++i) EXPECT_EQ(y[i], 1.0);
  EXPECT_EQ(strip_condition(y).values(), x.values());
}

TEST(Generator, ShapeContract) {
  ParGanModel<float> m(GeneratorSpec{}, CriticSpec{}, 3);
  auto y = generate(m.g, image<float>(64, 64, 4), 0.5);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 64, 64}));
  auto z = generate(m.g, image<float>(32, 48, 4, 2), -1.0);
  EXPECT_EQ(z.shape(), (Shape{2, 3, 32, 48}));
}

TEST(Generator, IndivisibleExtentNamesDivisor) {
  ParGanModel<float> m(GeneratorSpec{}, CriticSpec{}, 3);
  try {
    generate(m.g, image<float>(30, 32, 1), 0.0);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("divisible by 4"), std::string::npos) << e.what();
  }
  EXPECT_THROW(generate(m.g, image<float>(32, 32, 1), std::nan("")), ParameterError);
}

TEST(Generator, NearIdentityAtInit) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ParGanModel<float> m(GeneratorSpec{}, CriticSpec{}, seed);
    auto x = image<float>(64, 64, 100 + seed);
    for (double p : {-1.0, 0.0, 1.0}) {
      auto y = generate(m.g, x, p);
      EXPECT_LT(l1(y, x).item(), 0.1) << "seed " << seed << " p " << p;
      EXPECT_LT(l1(generate(m.g_inv, x, p), x).item(), 0.1);
    }
  }
}

TEST(Generator, OutputInUnitRange) {
  ParGanModel<double> m(GeneratorSpec{4, 1, 2}, CriticSpec{4, 2}, 5);
  scramble(m.generator_parameters(), 6, 0.5);
  auto y = generate(m.g, image<double>(16, 16, 7), 3.0);
  for (double v : y.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Generator, TranslationEquivariantAtInit) {
  ParGanModel<float> m(GeneratorSpec{}, CriticSpec{}, 11);
  auto x = image<double>(64, 64, 12);
  // Shifted copy: xs(i, j) = x(i + 8, j + 8) on the overlap.
  auto xs = crop(x, 8, 8, 56, 56);
  auto xs_pad = T64::zeros({1, 3, 64, 64});
  {
    auto d = xs_pad.mutable_data();
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < 56; ++i)
        for (std::int64_t j = 0; j < 56; ++j) d[(c * 64 + i) * 64 + j] = xs[(c * 56 + i) * 56 + j];
  }
  auto y = generate(m.g, x.cast<float>(), 0.0).cast<double>();
  auto ys = generate(m.g, xs_pad.cast<float>(), 0.0).cast<double>();
  // Interior of the overlap, away from both borders.
  auto a = crop(y, 16, 16, 32, 32);
  auto b = crop(ys, 8, 8, 32, 32);
  EXPECT_LT(l1(a, b).item(), 0.05);
}

TEST(Generator, GradientsMatchFiniteDifferences) {
  ParGanModel<double> m(GeneratorSpec{2, 1, 1}, CriticSpec{2, 1}, 21);
  auto params = m.g.parameters("G");
  scramble(params, 22, 0.3);
  // Kept away from the tanh pre-image clamp.
  auto x = add_scalar(scale(image<double>(8, 8, 23), 0.8), 0.1);
  x.set_requires_grad();
  std::mt19937_64 rng(24);
  const auto w = T64::randn({1, 3, 8, 8}, rng);
  auto f = [&] { return sum(mul(generate(m.g, x, 0.7), w)); };

  std::vector<T64> leaves{x};
  for (auto& [n, p] : params) leaves.push_back(p);
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    backward(f());
    for (auto& t : leaves) {
      analytic.push_back(oracle::to_vec(t.grad().value_or(T64::zeros(t.shape()))));
      t.zero_grad();
    }
  }
  // Hundreds of relu units: a 1e-3 step routinely straddles a kink, so the
  // whole-network check uses a finer step than the per-op suite.
  NoGradGuard<double> off;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    auto numeric = oracle::central_diff(leaves[i], [&] { return f().item(); }, 1e-6);
    EXPECT_LT(oracle::rel_error(analytic[i], numeric), 1e-3) << "leaf " << i;
  }
}

TEST(Generator, ForwardAndInverseNeverShareWeights) {
  ParGanModel<float> m(GeneratorSpec{}, CriticSpec{}, 31);
  auto a = m.g.parameters("");
  auto b = m.g_inv.parameters("");
  ASSERT_EQ(a.size(), b.size());
  bool any_value_differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NE(a[i].second.id(), b[i].second.id());
    if (a[i].second.values() != b[i].second.values()) any_value_differs = true;
  }
  EXPECT_TRUE(any_value_differs);
  EXPECT_EQ(m.g.spec(), m.g_inv.spec());
}

TEST(Critic, DeskMapShape) {
  ParGanModel<float> m(GeneratorSpec{}, CriticSpec{16, 3}, 41);
  auto s = criticize(m.d, image<float>(64, 64, 42), 1.0);
  EXPECT_EQ(s.shape(), (Shape{1, 1, 8, 8}));
}

TEST(Critic, MapFollowsConvFormula) {
  auto out = [](std::int64_t n, std::int64_t k, std::int64_t s, std::int64_t p) {
    return (n + 2 * p - k) / s + 1;
  };
  for (std::int64_t layers : {1, 2, 3}) {
    ParGanModel<float> m(GeneratorSpec{4, 1, 2}, CriticSpec{4, layers}, 43);
    for (std::int64_t h : {16, 32, 48}) {
      for (std::int64_t w : {16, 40}) {
        if (h % (1 << layers) || w % (1 << layers)) continue;
        auto eh = h, ew = w;
        for (std::int64_t i = 0; i < layers; ++i) eh = out(eh, 4, 2, 1), ew = out(ew, 4, 2, 1);
        eh = out(eh, 3, 1, 1), ew = out(ew, 3, 1, 1);
        auto s = criticize(m.d, image<float>(h, w, 44, 2), 0.0);
        EXPECT_EQ(s.shape(), (Shape{2, 1, eh, ew})) << layers << " " << h << "x" << w;
      }
    }
  }
}

TEST(Critic, Deterministic) {
  ParGanModel<float> m(GeneratorSpec{}, CriticSpec{}, 45);
  auto x = image<float>(32, 32, 46);
  EXPECT_EQ(criticize(m.d, x, 0.3).values(), criticize(m.d, x, 0.3).values());
  EXPECT_NE(criticize(m.d, x, 0.3).values(), criticize(m.d, x, -0.3).values());
}

TEST(Critic, ReceptiveFieldFromGradientSupport) {
  for (std::int64_t layers : {2, 3}) {
    ParGanModel<double> m(GeneratorSpec{2, 1, 1}, CriticSpec{2, layers}, 47);
    auto x = image<double>(64, 64, 48);
    x.set_requires_grad();
    Tape<double> tape;
    auto s = criticize(m.d, x, 0.5);
    const auto h = s.dim(2), w = s.dim(3);
    auto mask = T64::zeros(s.shape());
    mask.mutable_data()[(h / 2) * w + w / 2] = 1.0;
    auto g = grad_of_output_wrt_input(sum(mul(s, mask)), x);
    std::int64_t r0 = 64, r1 = -1, c0 = 64, c1 = -1;
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < 64; ++i)
        for (std::int64_t j = 0; j < 64; ++j)
          if (g[(c * 64 + i) * 64 + j] != 0.0) {
            r0 = std::min(r0, i), r1 = std::max(r1, i);
            c0 = std::min(c0, j), c1 = std::max(c1, j);
          }
    EXPECT_EQ(r1 - r0 + 1, m.critic_spec().receptive_field()) << layers;
    EXPECT_EQ(c1 - c0 + 1, m.critic_spec().receptive_field()) << layers;
    EXPECT_GT(r0, 0);
    EXPECT_LT(r1, 63);
  }
  EXPECT_EQ((CriticSpec{16, 3}).receptive_field(), 38);
}

TEST(Checkpoint, RoundTripGivesIdenticalOutputs) {
  ParGanModel<float> m(GeneratorSpec{4, 1, 2}, CriticSpec{4, 2}, 51);
  scramble(m.parameters(), 52, 0.05);
  const auto path = temp_path("roundtrip.pgan");
  m.save(path);
  auto r = ParGanModel<float>::from_file(path);
  EXPECT_EQ(r.generator_spec(), m.generator_spec());
  EXPECT_EQ(r.critic_spec(), m.critic_spec());
  auto x = image<float>(16, 16, 53);
  EXPECT_EQ(generate(r.g, x, 1.0).values(), generate(m.g, x, 1.0).values());
  EXPECT_EQ(generate(r.g_inv, x, 1.0).values(), generate(m.g_inv, x, 1.0).values());
  EXPECT_EQ(criticize(r.d, x, 1.0).values(), criticize(m.d, x, 1.0).values());
  EXPECT_EQ(criticize(r.d_inv, x, 1.0).values(), criticize(m.d_inv, x, 1.0).values());
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsWrongMagic) {
  const auto path = temp_path("magic.pgan");
  ParGanModel<float> m(GeneratorSpec{4, 1, 2}, CriticSpec{4, 2}, 54);
  m.save(path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    f.put('9');
  }
  EXPECT_THROW(ParGanModel<float>::from_file(path), FormatError);
  EXPECT_THROW(m.load(path), FormatError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsMismatchedSpec) {
  const auto path = temp_path("spec.pgan");
  ParGanModel<float>(GeneratorSpec{4, 1, 2}, CriticSpec{4, 2}, 55).save(path);
  ParGanModel<float> other(GeneratorSpec{4, 2, 2}, CriticSpec{4, 2}, 55);
  const auto before = generate(other.g, image<float>(16, 16, 56), 0.0).values();
  try {
    other.load(path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("spec field 1"), std::string::npos) << e.what();
  }
  EXPECT_EQ(generate(other.g, image<float>(16, 16, 56), 0.0).values(), before);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsTruncatedFileWithoutPartialLoad) {
  const auto path = temp_path("trunc.pgan");
  ParGanModel<float> src(GeneratorSpec{4, 1, 2}, CriticSpec{4, 2}, 57);
  scramble(src.parameters(), 58, 0.05);
  src.save(path);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 10);
  ParGanModel<float> dst(GeneratorSpec{4, 1, 2}, CriticSpec{4, 2}, 59);
  const auto x = image<float>(16, 16, 60);
  const auto before = generate(dst.g, x, 0.0).values();
  try {
    dst.load(path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("at byte"), std::string::npos) << e.what();
  }
  EXPECT_EQ(generate(dst.g, x, 0.0).values(), before);
  std::filesystem::remove(path);
}
