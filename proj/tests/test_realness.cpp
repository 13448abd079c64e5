#include <gtest/gtest.h>

#include <Eigen/QR>
#include <random>
#include <sstream>

#include "pargan/realness.hpp"

using namespace pargan;

namespace {

Vec gaussian(std::size_t d, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  Vec v(d);
  for (auto& x : v) x = g(rng);
  return v;
}

Image noise_image(std::int64_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image im(n, n);
  for (auto& v : im.data) v = u(rng);
  return im;
}

// Largest singular value of a row-major r x c matrix by power iteration on A^T A.
double operator_norm(const std::vector<double>& a, std::size_t r, std::size_t c) {
  Vec v(c, 1.0 / std::sqrt(static_cast<double>(c)));
  double sigma = 0;
  for (int it = 0; it < 500; ++it) {
    Vec av(r, 0.0), w(c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) av[i] += a[i * c + j] * v[j];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) w[j] += a[i * c + j] * av[i];
    double n = 0;
    for (double x : w) n += x * x;
    n = std::sqrt(n);
    for (std::size_t j = 0; j < c; ++j) v[j] = w[j] / n;
    sigma = std::sqrt(n);
  }
  return sigma;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

RealnessStats line_stats(double s, double t) { return fit_centers({{s}}, {{t}}, "line"); }

}  // namespace

TEST(Embedding, GrayImageHasMidMeansAndZeroSpread) {
  const auto f = Embedding(EmbeddingKind::kPoolColorStats)(Image(64, 64, 0.5f));
  ASSERT_EQ(f.size(), 96u);
  for (std::size_t i = 0; i < f.size(); i += 2) {
    EXPECT_DOUBLE_EQ(f[i], 0.5);
    EXPECT_DOUBLE_EQ(f[i + 1], 0.0);
  }
}

TEST(Embedding, DeterministicWithDeclaredDimension) {
  const auto im = noise_image(64, 1);
  for (auto kind : {EmbeddingKind::kPoolColorStats, EmbeddingKind::kRandomProjection, EmbeddingKind::kTinyEncoder}) {
    const Embedding e(kind);
    const auto a = e(im);
    EXPECT_EQ(a, e(im)) << e.name();
    EXPECT_EQ(a, Embedding(kind)(im)) << e.name();
    EXPECT_EQ(static_cast<std::int64_t>(a.size()), e.dim()) << e.name();
    for (double v : a) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Embedding, RandomProjectionIsLipschitzInItsOperatorNorm) {
  const Embedding e(EmbeddingKind::kRandomProjection);
  const std::size_t n = 8 * 8 * 3;
  const double L = operator_norm(e.projection(n), 128, n);
  EXPECT_GT(L, 0.0);
  for (std::uint64_t k = 0; k < 20; ++k) {
    const auto x = noise_image(8, 2 * k), y = noise_image(8, 2 * k + 1);
    const auto fx = e(x), fy = e(y);
    double df = 0, dx = 0;
    for (std::size_t i = 0; i < fx.size(); ++i) df += (fx[i] - fy[i]) * (fx[i] - fy[i]);
    for (std::size_t i = 0; i < n; ++i) dx += double(x.data[i] - y.data[i]) * (x.data[i] - y.data[i]);
    EXPECT_LE(std::sqrt(df), L * std::sqrt(dx) * (1 + 1e-9));
  }
}

TEST(FitCenters, SingleImageDatasetsGiveTheirEmbeddings) {
  const Embedding e;
  Dataset s(1), t(1);
  s[0].image = noise_image(16, 3);
  t[0].image = noise_image(16, 4);
  const auto st = fit_centers(e, s, t);
  EXPECT_EQ(st.center_s, e(s[0].image));
  EXPECT_EQ(st.center_t, e(t[0].image));
  EXPECT_EQ(st.n_source, 1);
  EXPECT_EQ(st.n_target, 1);
  EXPECT_EQ(st.dim, 96);
}

TEST(FitCenters, DuplicatedDatasetIsDegenerate) {
  const Embedding e;
  Dataset s(2);
  s[0].image = noise_image(16, 5);
  s[1].image = noise_image(16, 6);
  EXPECT_THROW(fit_centers(e, s, s), DegenerateDomainError);
}

TEST(FitCenters, HandMeans) {
  const auto st = fit_centers({{0.0}, {2.0}}, {{4.0}, {6.0}});
  EXPECT_EQ(st.center_s, Vec{1.0});
  EXPECT_EQ(st.center_t, Vec{5.0});
  EXPECT_EQ(st.n_source, 2);
}

TEST(FitCenters, EmptyIsDataError) {
  EXPECT_THROW(fit_centers({}, {{1.0}}), DataError);
  EXPECT_THROW(fit_centers({{1.0}}, {}), DataError);
  EXPECT_THROW(fit_centers(Embedding(), Dataset{}, Dataset(1)), DataError);
}

TEST(Realness, EndpointsAndMidpoint) {
  std::mt19937_64 rng(7);
  const auto s = gaussian(10, rng), t = gaussian(10, rng);
  const auto st = fit_centers({s}, {t});
  Vec mid(10);
  for (int i = 0; i < 10; ++i) mid[i] = 0.5 * (s[i] + t[i]);
  EXPECT_NEAR(realness(st, t), 1.0, 1e-12);
  EXPECT_NEAR(realness(st, s), -1.0, 1e-12);
  EXPECT_NEAR(realness(st, mid), 0.0, 1e-12);
}

TEST(Realness, OneDimensionalWorkedExample) {
  EXPECT_NEAR(realness(line_stats(0.0, 2.0), {3.0}), 2.0, 1e-12);
}

TEST(Realness, AffineAlongTheCenterAxis) {
  std::mt19937_64 rng(8);
  const std::size_t d = 6;
  const auto s = gaussian(d, rng), t = gaussian(d, rng);
  const auto st = fit_centers({s}, {t});
  // An offset orthogonal to the axis must not change p.
  Vec axis(d), off = gaussian(d, rng);
  double aa = 0, ao = 0;
  for (std::size_t i = 0; i < d; ++i) axis[i] = t[i] - s[i], aa += axis[i] * axis[i];
  for (std::size_t i = 0; i < d; ++i) ao += axis[i] * off[i];
  for (std::size_t i = 0; i < d; ++i) off[i] -= ao / aa * axis[i];
  for (double tt : {-1.0, 0.0, 0.25, 0.5, 1.0, 2.0}) {
    Vec f(d);
    for (std::size_t i = 0; i < d; ++i) f[i] = s[i] + tt * axis[i] + off[i];
    EXPECT_NEAR(realness(st, f), 2 * tt - 1, 1e-9) << tt;
  }
}

TEST(Realness, IsometryInvariance) {
  std::mt19937_64 rng(9);
  const int d = 5;
  Eigen::MatrixXd m(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = gaussian(1, rng)[0];
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ();
  const auto shift = gaussian(d, rng, 3.0);
  auto move = [&](const Vec& v) {
    Vec o(d, 0.0);
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) o[i] += q(i, j) * v[j];
      o[i] += shift[i];
    }
    return o;
  };
  std::vector<Vec> src, tgt, probe;
  for (int i = 0; i < 4; ++i) src.push_back(gaussian(d, rng)), tgt.push_back(gaussian(d, rng, 2.0));
  for (int i = 0; i < 10; ++i) probe.push_back(gaussian(d, rng, 2.0));
  const auto a = fit_centers(src, tgt);
  std::vector<Vec> src2, tgt2;
  for (const auto& v : src) src2.push_back(move(v));
  for (const auto& v : tgt) tgt2.push_back(move(v));
  const auto b = fit_centers(src2, tgt2);
  for (const auto& p : probe) EXPECT_NEAR(realness(a, p), realness(b, move(p)), 1e-6);
}

TEST(Rank, CenterImagesComeTargetFirst) {
  const Embedding e;
  Dataset s(1), t(1);
  s[0].image = noise_image(16, 10);
  t[0].image = Image(16, 16, 0.3f);
  const auto st = fit_centers(e, s, t);
  const Dataset both{s[0], t[0]};
  const auto r = rank_by_realness(st, e, both);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].index, 1u);
  EXPECT_NEAR(r[0].p, 1.0, 1e-12);
  EXPECT_EQ(r[1].index, 0u);
  EXPECT_NEAR(r[1].p, -1.0, 1e-12);
}

TEST(Rank, SortedInputUnchangedAndTiesKeepOrder) {
  const auto r = rank_by_realness({3.0, 2.0, 2.0, -1.0});
  std::vector<std::size_t> idx;
  for (const auto& x : r) idx.push_back(x.index);
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 1, 2, 3}));
  const auto t = rank_by_realness({1.0, 5.0, 1.0, 5.0});
  idx.clear();
  for (const auto& x : t) idx.push_back(x.index);
  EXPECT_EQ(idx, (std::vector<std::size_t>{1, 3, 0, 2}));
}

TEST(Rank, MatchesBruteForceOnToyImages) {
  auto cfg = ToyDomainConfig::defaults();
  cfg.n_images = 10;
  const auto [src, tgt] = gen_toy_pair(cfg);
  const Embedding e;
  const auto st = fit_centers(e, src, tgt);
  Dataset mixed;
  for (int i = 0; i < 5; ++i) mixed.push_back(src[i]), mixed.push_back(tgt[i]);
  const auto r = rank_by_realness(st, e, mixed);
  std::vector<double> p;
  for (const auto& m : mixed) p.push_back(realness(st, e(m.image)));
  for (std::size_t k = 0; k < r.size(); ++k) {
    EXPECT_EQ(r[k].p, p[r[k].index]);
    // Every earlier entry is at least as real; ties only in index order.
    for (std::size_t j = 0; j < k; ++j) {
      EXPECT_TRUE(r[j].p > r[k].p || (r[j].p == r[k].p && r[j].index < r[k].index));
    }
  }
}

TEST(Realness, ToyDomainsSitNearTheirCenters) {
  auto cfg = ToyDomainConfig::defaults();
  auto [src, tgt] = gen_toy_pair(cfg);
  const Embedding e;
  const auto st = fit_centers(e, src, tgt);
  assign_realness(st, e, src);
  assign_realness(st, e, tgt);
  std::vector<double> ps, pt;
  for (const auto& s : src) ps.push_back(*s.p);
  for (const auto& t : tgt) pt.push_back(*t.p);
  EXPECT_GE(median(pt), 1 - 0.2);
  EXPECT_LE(median(ps), -1 + 0.2);
}

TEST(Realness, ControlDomainsAreDegenerate) {
  auto cfg = ToyDomainConfig::defaults();
  cfg.n_images = 10;
  cfg.target = cfg.source;
  cfg.source.noise = cfg.target.noise = 0;
  const auto [src, tgt] = gen_toy_pair(cfg);
  EXPECT_THROW(fit_centers(Embedding(), src, tgt), DegenerateDomainError);
}

TEST(StatsFile, RoundTripIsExact) {
  std::mt19937_64 rng(11);
  auto st = fit_centers({gaussian(7, rng), gaussian(7, rng)}, {gaussian(7, rng)}, "random_projection");
  std::istringstream in(format_stats(st));
  const auto back = parse_stats(in);
  EXPECT_EQ(back.embedding, st.embedding);
  EXPECT_EQ(back.dim, 7);
  EXPECT_EQ(back.n_source, 2);
  EXPECT_EQ(back.n_target, 1);
  EXPECT_EQ(back.center_s, st.center_s);
  EXPECT_EQ(back.center_t, st.center_t);
}

TEST(StatsFile, Rejections) {
  std::istringstream bad_number("embedding pool_color_stats 2\nn_source 1\nn_target 1\ncenter_s 1 x\ncenter_t 0 0\n");
  try {
    parse_stats(bad_number);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 4u);
  }
  std::istringstream short_center("embedding pool_color_stats 2\nn_source 1\nn_target 1\ncenter_s 1\ncenter_t 0 0\n");
  EXPECT_THROW(parse_stats(short_center), ParseError);
  std::istringstream same("embedding pool_color_stats 1\nn_source 1\nn_target 1\ncenter_s 1\ncenter_t 1\n");
  EXPECT_THROW(parse_stats(same), DegenerateDomainError);
}

TEST(Scores, CsvIsSortedDescending) {
  Dataset ds(4);
  const double p[] = {0.5, 2.0, -1.0, 0.5};
  for (int i = 0; i < 4; ++i) ds[i].path = "images/" + std::to_string(i) + ".png", ds[i].p = p[i];
  ds[1].domain = Domain::kTarget;
  EXPECT_EQ(format_scores(ds),
            "path,domain,p\nimages/1.png,target,2\nimages/0.png,source,0.5\nimages/3.png,source,0.5\n"
            "images/2.png,source,-1\n");
  ds[2].p.reset();
  EXPECT_THROW(format_scores(ds), ContractError);
}

TEST(Pca, PlaneInFiveDimensionsIsExact) {
  std::mt19937_64 rng(12);
  const auto u = gaussian(5, rng), v = gaussian(5, rng), c = gaussian(5, rng);
  std::vector<Vec> pts;
  for (int i = 0; i < 30; ++i) {
    const auto ab = gaussian(2, rng);
    Vec x(5);
    for (int k = 0; k < 5; ++k) x[k] = c[k] + ab[0] * u[k] + ab[1] * v[k];
    pts.push_back(x);
  }
  const auto r = pca2(pts);
  EXPECT_FALSE(r.rank_deficient);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double err = 0;
    for (int k = 0; k < 5; ++k) {
      const double rec = r.mean[k] + r.points[i][0] * r.axes[0][k] + r.points[i][1] * r.axes[1][k];
      err = std::max(err, std::abs(rec - pts[i][k]));
    }
    EXPECT_LT(err, 1e-9);
  }
}

TEST(Pca, AxesAreOrthonormalCenteredAndSigned) {
  std::mt19937_64 rng(13);
  std::vector<Vec> pts;
  for (int i = 0; i < 50; ++i) {
    auto x = gaussian(4, rng);
    x[0] *= 3;
    x[2] *= 2;
    pts.push_back(x);
  }
  const auto r = pca2(pts);
  double n0 = 0, n1 = 0, dot = 0;
  for (int k = 0; k < 4; ++k) n0 += r.axes[0][k] * r.axes[0][k], n1 += r.axes[1][k] * r.axes[1][k], dot += r.axes[0][k] * r.axes[1][k];
  EXPECT_NEAR(n0, 1, 1e-12);
  EXPECT_NEAR(n1, 1, 1e-12);
  EXPECT_NEAR(dot, 0, 1e-12);
  for (const auto& a : r.axes) {
    const auto big = std::max_element(a.begin(), a.end(), [](double x, double y) { return std::abs(x) < std::abs(y); });
    EXPECT_GT(*big, 0);
  }
  double m0 = 0, m1 = 0;
  for (const auto& p : r.points) m0 += p[0], m1 += p[1];
  EXPECT_NEAR(m0 / 50, 0, 1e-12);
  EXPECT_NEAR(m1 / 50, 0, 1e-12);
  EXPECT_GE(r.variance[0], r.variance[1]);
}

TEST(Pca, IsotropicCloudSplitsVarianceEvenly) {
  std::mt19937_64 rng(14);
  std::vector<Vec> pts;
  for (int i = 0; i < 1000; ++i) pts.push_back(gaussian(2, rng));
  const auto r = pca2(pts);
  const double share = r.variance[0] / (r.variance[0] + r.variance[1]);
  EXPECT_GE(share, 0.4);
  EXPECT_LE(share, 0.6);
}

TEST(Pca, CollinearPointsAreFlagged) {
  std::vector<Vec> pts{{0, 0, 0}, {1, 2, 3}, {2, 4, 6}, {-1, -2, -3}};
  const auto r = pca2(pts);
  EXPECT_TRUE(r.rank_deficient);
  for (double v : r.axes[1]) EXPECT_EQ(v, 0.0);
  for (const auto& p : r.points) EXPECT_EQ(p[1], 0.0);
}

TEST(Pca, TooFewPoints) {
  EXPECT_THROW(pca2({{1, 2}, {3, 4}}), DimensionError);
  EXPECT_THROW(pca2({{1}, {2}, {3}}), DimensionError);
}
