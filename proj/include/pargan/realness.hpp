#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pargan/data.hpp"
#include "pargan/model.hpp"

namespace pargan {

using Vec = std::vector<double>;

enum class EmbeddingKind { kPoolColorStats, kRandomProjection, kTinyEncoder };

inline std::string embedding_name(EmbeddingKind k) {
  switch (k) {
    case EmbeddingKind::kPoolColorStats: return "pool_color_stats";
    case EmbeddingKind::kRandomProjection: return "random_projection";
    case EmbeddingKind::kTinyEncoder: return "tiny_encoder";
  }
  return "?";
}

inline EmbeddingKind parse_embedding(const std::string& s) {
  if (s == "pool_color_stats") return EmbeddingKind::kPoolColorStats;
  if (s == "random_projection") return EmbeddingKind::kRandomProjection;
  if (s == "tiny_encoder") return EmbeddingKind::kTinyEncoder;
  throw ParameterError("unknown embedding '" + s + "'");
}

/// Frozen image embedding f(.). Every kind is a pure function of the image;
/// the seeds below are part of the definition.
class Embedding {
 public:
  static constexpr int kGrid = 4;
  static constexpr std::int64_t kProjectionDim = 128;
  static constexpr std::uint64_t kProjectionSeed = 0x5eedULL;
  static constexpr std::uint64_t kEncoderSeed = 0xe7c0deULL;

  explicit Embedding(EmbeddingKind kind = EmbeddingKind::kPoolColorStats) : kind_(kind) {
    if (kind == EmbeddingKind::kTinyEncoder) {
      std::mt19937_64 rng(kEncoderSeed);
      encoder_ = std::make_shared<Critic<float>>(CriticSpec{16, 2}, rng);
    }
  }

  EmbeddingKind kind() const { return kind_; }
  std::string name() const { return embedding_name(kind_); }

  std::int64_t dim() const {
    switch (kind_) {
      case EmbeddingKind::kPoolColorStats: return kGrid * kGrid * 3 * 2;
      case EmbeddingKind::kRandomProjection: return kProjectionDim;
      case EmbeddingKind::kTinyEncoder: return 32 * 4;
    }
    return 0;
  }

  Vec operator()(const Image& im) const {
    switch (kind_) {
      case EmbeddingKind::kPoolColorStats: return pool_color_stats(im);
      case EmbeddingKind::kRandomProjection: return project(im);
      case EmbeddingKind::kTinyEncoder: return encode(im);
    }
    return {};
  }

  /// Row-major kProjectionDim x n projection used for n-element images.
  const std::vector<double>& projection(std::size_t n) const {
    std::lock_guard lock(cache_->mu);
    auto it = cache_->matrices.find(n);
    if (it == cache_->matrices.end()) {
      std::mt19937_64 rng(kProjectionSeed ^ (n * 0x9e3779b97f4a7c15ULL));
      std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(n)));
      std::vector<double> m(static_cast<std::size_t>(kProjectionDim) * n);
      for (auto& v : m) v = g(rng);
      it = cache_->matrices.emplace(n, std::move(m)).first;
    }
    return it->second;
  }

 private:
  // Per-cell channel mean and population standard deviation on a 4x4 grid.
  static Vec pool_color_stats(const Image& im) {
    Vec out;
    out.reserve(kGrid * kGrid * 6);
    for (int gy = 0; gy < kGrid; ++gy) {
      const auto y0 = gy * im.height / kGrid, y1 = std::max(y0 + 1, (gy + 1) * im.height / kGrid);
      for (int gx = 0; gx < kGrid; ++gx) {
        const auto x0 = gx * im.width / kGrid, x1 = std::max(x0 + 1, (gx + 1) * im.width / kGrid);
        for (int c = 0; c < 3; ++c) {
          double s = 0, ss = 0;
          for (auto y = y0; y < std::min(y1, im.height); ++y)
            for (auto x = x0; x < std::min(x1, im.width); ++x) s += im.at(y, x, c);
          const double n = static_cast<double>((std::min(y1, im.height) - y0) * (std::min(x1, im.width) - x0));
          const double m = s / n;
          for (auto y = y0; y < std::min(y1, im.height); ++y)
            for (auto x = x0; x < std::min(x1, im.width); ++x) ss += (im.at(y, x, c) - m) * (im.at(y, x, c) - m);
          out.push_back(m);
          out.push_back(std::sqrt(ss / n));
        }
      }
    }
    return out;
  }

  Vec project(const Image& im) const {
    const auto& m = projection(im.data.size());
    Vec out(kProjectionDim, 0.0);
    const std::size_t n = im.data.size();
    for (std::int64_t r = 0; r < kProjectionDim; ++r) {
      const double* row = m.data() + static_cast<std::size_t>(r) * n;
      double acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += row[i] * im.data[i];
      out[static_cast<std::size_t>(r)] = acc;
    }
    return out;
  }

  // Two strided critic stages at p = 0, average-pooled on a 2x2 grid.
  Vec encode(const Image& im) const {
    if (im.height % 4 || im.width % 4) throw DimensionError("tiny_encoder needs extents divisible by 4");
    NoGradGuard<float> off;
    const auto f = encoder_->features(to_tensor<float>(im), 0.0, 2);
    const auto c = f.dim(1), h = f.dim(2), w = f.dim(3);
    Vec out(static_cast<std::size_t>(c * 4), 0.0);
    for (std::int64_t k = 0; k < c; ++k)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          const auto cell = (2 * y / h) * 2 + 2 * x / w;
          out[static_cast<std::size_t>(k * 4 + cell)] += f[(k * h + y) * w + x];
        }
    const double cell_area = static_cast<double>(h * w) / 4.0;
    for (auto& v : out) v /= cell_area;
    return out;
  }

  struct Cache {
    std::mutex mu;
    std::map<std::size_t, std::vector<double>> matrices;
  };

  EmbeddingKind kind_;
  std::shared_ptr<Critic<float>> encoder_;
  std::shared_ptr<Cache> cache_ = std::make_shared<Cache>();
};

inline std::vector<Vec> embed_all(const Embedding& e, const Dataset& ds) {
  std::vector<Vec> out(ds.size());
  parallel_for(ds.size(), [&](std::size_t i) { out[i] = e(ds[i].image); });
  return out;
}

struct RealnessStats {
  std::string embedding = "pool_color_stats";
  std::int64_t dim = 0;
  std::int64_t n_source = 0;
  std::int64_t n_target = 0;
  Vec center_s;
  Vec center_t;
};

namespace detail {

inline double sq_dist(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline Vec mean_of(const std::vector<Vec>& v) {
  Vec m(v.front().size(), 0.0);
  for (const auto& x : v) {
    if (x.size() != m.size()) throw DimensionError("embeddings of unequal dimension");
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += x[i];
  }
  for (auto& x : m) x /= static_cast<double>(v.size());
  return m;
}

}  // namespace detail

inline constexpr double kMinCenterSeparation = 1e-9;

/// Centers from precomputed embeddings.
inline RealnessStats fit_centers(const std::vector<Vec>& source, const std::vector<Vec>& target,
                                 const std::string& embedding = "pool_color_stats") {
  if (source.empty()) throw DataError("fit_centers: source dataset is empty");
  if (target.empty()) throw DataError("fit_centers: target dataset is empty");
  RealnessStats s;
  s.embedding = embedding;
  s.center_s = detail::mean_of(source);
  s.center_t = detail::mean_of(target);
  if (s.center_s.size() != s.center_t.size()) throw DimensionError("fit_centers: domains embed to different dimensions");
  s.dim = static_cast<std::int64_t>(s.center_s.size());
  s.n_source = static_cast<std::int64_t>(source.size());
  s.n_target = static_cast<std::int64_t>(target.size());
  const double sep = std::sqrt(detail::sq_dist(s.center_s, s.center_t));
  if (!(sep > kMinCenterSeparation)) {
    throw DegenerateDomainError("source and target centers coincide (separation " + std::to_string(sep) + ")");
  }
  return s;
}

inline RealnessStats fit_centers(const Embedding& e, const Dataset& source, const Dataset& target) {
  if (source.empty()) throw DataError("fit_centers: source dataset is empty");
  if (target.empty()) throw DataError("fit_centers: target dataset is empty");
  return fit_centers(embed_all(e, source), embed_all(e, target), e.name());
}

/// p(X) = (|f - Xs|^2 - |f - Xt|^2) / |Xt - Xs|^2: -1 at the source center,
/// +1 at the target center, affine along the axis between them.
inline double realness(const RealnessStats& s, const Vec& f) {
  if (f.size() != s.center_s.size()) {
    throw DimensionError("realness: embedding has " + std::to_string(f.size()) + " entries, stats expect " +
                         std::to_string(s.center_s.size()));
  }
  return (detail::sq_dist(f, s.center_s) - detail::sq_dist(f, s.center_t)) / detail::sq_dist(s.center_t, s.center_s);
}

/// Embeds and scores every sample, storing p on it.
inline void assign_realness(const RealnessStats& s, const Embedding& e, Dataset& ds) {
  if (e.name() != s.embedding) throw ParameterError("stats were fitted with " + s.embedding + ", not " + e.name());
  parallel_for(ds.size(), [&](std::size_t i) { ds[i].p = realness(s, e(ds[i].image)); });
}

struct Ranked {
  std::size_t index;
  double p;
};

/// Descending by p; equal values keep dataset order.
inline std::vector<Ranked> rank_by_realness(const std::vector<double>& p) {
  std::vector<Ranked> r(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) r[i] = {i, p[i]};
  std::stable_sort(r.begin(), r.end(), [](const Ranked& a, const Ranked& b) { return a.p > b.p; });
  return r;
}

inline std::vector<Ranked> rank_by_realness(const RealnessStats& s, const Embedding& e, const Dataset& ds) {
  const auto f = embed_all(e, ds);
  std::vector<double> p(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) p[i] = realness(s, f[i]);
  return rank_by_realness(p);
}

// ---------------------------------------------------------------------------
// Stats file and score export

namespace detail {

inline std::string join_numbers(const Vec& v) {
  std::string out;
  char buf[64];
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v[i]);
    if (i) out += ' ';
    out.append(buf, end);
  }
  return out;
}

}  // namespace detail

inline std::string format_stats(const RealnessStats& s) {
  std::string out;
  out += "embedding " + s.embedding + " " + std::to_string(s.dim) + "\n";
  out += "n_source " + std::to_string(s.n_source) + "\n";
  out += "n_target " + std::to_string(s.n_target) + "\n";
  out += "center_s " + detail::join_numbers(s.center_s) + "\n";
  out += "center_t " + detail::join_numbers(s.center_t) + "\n";
  return out;
}

inline RealnessStats parse_stats(std::istream& in) {
  RealnessStats s;
  bool seen[5] = {false, false, false, false, false};
  std::string text;
  for (std::size_t line = 1; std::getline(in, text); ++line) {
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(text);
    std::string key;
    ls >> key;
    auto read_vec = [&](Vec& v) {
      std::string tok;
      while (ls >> tok) v.push_back(detail::parse_number(tok, line));
    };
    if (key == "embedding") {
      std::string dim;
      if (!(ls >> s.embedding >> dim)) throw ParseError("expected 'embedding <kind> <dim>'", line);
      s.dim = static_cast<std::int64_t>(detail::parse_number(dim, line));
      seen[0] = true;
    } else if (key == "n_source" || key == "n_target") {
      std::string n;
      if (!(ls >> n)) throw ParseError("expected a count", line);
      (key == "n_source" ? s.n_source : s.n_target) = static_cast<std::int64_t>(detail::parse_number(n, line));
      seen[key == "n_source" ? 1 : 2] = true;
    } else if (key == "center_s") {
      read_vec(s.center_s);
      seen[3] = true;
    } else if (key == "center_t") {
      read_vec(s.center_t);
      seen[4] = true;
    } else {
      throw ParseError("unknown key '" + key + "'", line);
    }
  }
  for (bool b : seen) {
    if (!b) throw ParseError("stats file is missing a field", 0);
  }
  if (static_cast<std::int64_t>(s.center_s.size()) != s.dim || static_cast<std::int64_t>(s.center_t.size()) != s.dim) {
    throw ParseError("center length differs from declared dim " + std::to_string(s.dim), 0);
  }
  if (!(std::sqrt(detail::sq_dist(s.center_s, s.center_t)) > kMinCenterSeparation)) {
    throw DegenerateDomainError("stats file has coincident centers");
  }
  return s;
}

inline void write_stats(const std::string& path, const RealnessStats& s) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + tmp);
    f << format_stats(s);
  }
  std::filesystem::rename(tmp, path);
}

inline RealnessStats read_stats(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return parse_stats(in);
}

/// `path,domain,p`, highest p first. Samples must carry p.
inline std::string format_scores(const Dataset& ds) {
  std::vector<double> p(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!ds[i].p) throw ContractError("format_scores: sample " + std::to_string(i) + " has no p");
    p[i] = *ds[i].p;
  }
  std::string out = "path,domain,p\n";
  for (const auto& r : rank_by_realness(p)) {
    out += ds[r.index].path + "," + domain_name(ds[r.index].domain) + "," + detail::format_number(r.p) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Two-component PCA

struct Pca2 {
  Vec mean;
  std::array<Vec, 2> axes;           // unit-norm principal directions
  std::array<double, 2> variance{};  // eigenvalues of the covariance
  double total_variance = 0;
  bool rank_deficient = false;
  std::vector<std::array<double, 2>> points;

  std::array<double, 2> project(const Vec& v) const {
    std::array<double, 2> out{0, 0};
    for (int k = 0; k < 2; ++k)
      for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(k)] += (v[i] - mean[i]) * axes[k][i];
    return out;
  }
};

/// Top-2 principal components via the eigendecomposition of the covariance.
/// Each axis is signed so its largest-magnitude coordinate is positive.
inline Pca2 pca2(const std::vector<Vec>& vectors) {
  if (vectors.size() < 3) throw DimensionError("pca2: needs at least 3 vectors, got " + std::to_string(vectors.size()));
  const auto d = vectors.front().size();
  if (d < 2) throw DimensionError("pca2: dimension must be at least 2");
  Pca2 r;
  r.mean = detail::mean_of(vectors);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(vectors.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < vectors.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = vectors[i][j] - r.mean[j];
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(vectors.size());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const auto& values = eig.eigenvalues();  // ascending
  const auto& vecs = eig.eigenvectors();
  const auto n = values.size();
  r.total_variance = std::max(0.0, values.sum());
  const double tol = 1e-12 * std::max(1.0, std::abs(values(n - 1)));
  for (int k = 0; k < 2; ++k) {
    const auto col = n - 1 - k;
    r.variance[static_cast<std::size_t>(k)] = std::max(0.0, values(col));
    Vec axis(d);
    for (std::size_t j = 0; j < d; ++j) axis[j] = vecs(static_cast<Eigen::Index>(j), col);
    std::size_t big = 0;
    for (std::size_t j = 1; j < d; ++j) {
      if (std::abs(axis[j]) > std::abs(axis[big])) big = j;
    }
    if (axis[big] < 0) {
      for (auto& a : axis) a = -a;
    }
    if (values(col) <= tol) {
      r.rank_deficient = true;
      std::fill(axis.begin(), axis.end(), 0.0);
      r.variance[static_cast<std::size_t>(k)] = 0.0;
    }
    r.axes[static_cast<std::size_t>(k)] = std::move(axis);
  }
  r.points.reserve(vectors.size());
  for (const auto& v : vectors) r.points.push_back(r.project(v));
  return r;
}

}  // namespace pargan
