#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "pargan/checkpoint.hpp"
#include "pargan/data.hpp"
#include "pargan/nn.hpp"
#include "pargan/parallel.hpp"

namespace pargan {

inline double iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.right(), b.right()) - std::max(a.x, b.x);
  const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct Detection {
  BBox box;
  double score = 0;
};

/// Greedy non-maximum suppression. Equal scores keep input order.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh = 0.5) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> keep;
  for (auto i : order) {
    const bool suppressed =
        std::any_of(keep.begin(), keep.end(), [&](const Detection& k) { return iou(k.box, dets[i].box) > iou_thresh; });
    if (!suppressed) keep.push_back(dets[i]);
  }
  return keep;
}

// ---------------------------------------------------------------------------
// Dense single-scale head: one cell per kStride x kStride pixels, one anchor.

struct DetectorSpec {
  std::int64_t width = 16;
  std::int64_t anchor = 16;  // anchor side in pixels

  static constexpr std::int64_t kStride = 8;
  bool operator==(const DetectorSpec&) const = default;
};

struct CellTargets {
  std::int64_t grid_h = 0, grid_w = 0;
  std::vector<float> objectness;  // grid_h * grid_w, 0 or 1
  std::vector<float> offsets;     // 4 x grid_h x grid_w: dx, dy, dw, dh
  std::int64_t positives = 0;

  std::int64_t cells() const { return grid_h * grid_w; }
};

namespace detail {

inline std::int64_t grid_extent(std::int64_t pixels, const char* axis) {
  if (pixels <= 0 || pixels % DetectorSpec::kStride != 0) {
    throw DimensionError(std::string("detector input ") + axis + " " + std::to_string(pixels) + " must be divisible by " +
                         std::to_string(DetectorSpec::kStride));
  }
  return pixels / DetectorSpec::kStride;
}

}  // namespace detail

/// The cell holding a box's center is positive and regresses that box; when
/// several centers share a cell the larger box wins (earlier on equal area).
inline CellTargets assign_targets(const std::vector<BBox>& boxes, std::int64_t height, std::int64_t width,
                                  const DetectorSpec& spec = {}) {
  CellTargets t;
  t.grid_h = detail::grid_extent(height, "height");
  t.grid_w = detail::grid_extent(width, "width");
  const auto cells = t.cells();
  t.objectness.assign(static_cast<std::size_t>(cells), 0.0f);
  t.offsets.assign(static_cast<std::size_t>(4 * cells), 0.0f);
  std::vector<double> owner_area(static_cast<std::size_t>(cells), -1.0);
  const double s = DetectorSpec::kStride;
  const double a = static_cast<double>(spec.anchor);
  for (const auto& b : boxes) {
    const auto j = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(b.cx() / s)), 0, t.grid_w - 1);
    const auto i = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(b.cy() / s)), 0, t.grid_h - 1);
    const auto c = static_cast<std::size_t>(i * t.grid_w + j);
    if (b.area() <= owner_area[c]) continue;
    owner_area[c] = b.area();
    t.objectness[c] = 1.0f;
    t.offsets[c] = static_cast<float>(b.cx() / s - (j + 0.5));
    t.offsets[cells + c] = static_cast<float>(b.cy() / s - (i + 0.5));
    t.offsets[2 * cells + c] = static_cast<float>(std::log(b.w / a));
    t.offsets[3 * cells + c] = static_cast<float>(std::log(b.h / a));
  }
  t.positives = static_cast<std::int64_t>(std::count(t.objectness.begin(), t.objectness.end(), 1.0f));
  return t;
}

/// Box encoded by cell (i, j) with offsets (dx, dy, dw, dh), clipped to the image.
inline BBox decode_cell(std::int64_t i, std::int64_t j, double dx, double dy, double dw, double dh, std::int64_t height,
                        std::int64_t width, const DetectorSpec& spec = {}) {
  const double s = DetectorSpec::kStride;
  const double a = static_cast<double>(spec.anchor);
  // exp of anything past this already covers any desk-scale image.
  constexpr double kMaxLog = 6.0;
  const double w = a * std::exp(std::min(dw, kMaxLog));
  const double h = a * std::exp(std::min(dh, kMaxLog));
  const double cx = (static_cast<double>(j) + 0.5 + dx) * s;
  const double cy = (static_cast<double>(i) + 0.5 + dy) * s;
  const double x0 = std::clamp(cx - w / 2, 0.0, static_cast<double>(width));
  const double y0 = std::clamp(cy - h / 2, 0.0, static_cast<double>(height));
  const double x1 = std::clamp(cx + w / 2, 0.0, static_cast<double>(width));
  const double y1 = std::clamp(cy + h / 2, 0.0, static_cast<double>(height));
  return {x0, y0, x1 - x0, y1 - y0};
}

/// Boxes of the positive cells, in cell order.
inline std::vector<BBox> decode_targets(const CellTargets& t, std::int64_t height, std::int64_t width,
                                        const DetectorSpec& spec = {}) {
  std::vector<BBox> out;
  const auto cells = t.cells();
  for (std::int64_t c = 0; c < cells; ++c) {
    if (t.objectness[static_cast<std::size_t>(c)] == 0.0f) continue;
    const auto o = [&](int k) { return static_cast<double>(t.offsets[static_cast<std::size_t>(k * cells + c)]); };
    out.push_back(decode_cell(c / t.grid_w, c % t.grid_w, o(0), o(1), o(2), o(3), height, width, spec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Focal loss

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

/// Mean over elements of -alpha_t (1 - p_t)^gamma log p_t, p = sigmoid(logit).
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& logits, const Tensor<T>& targets, FocalParams fp = {}) {
  if (logits.shape() != targets.shape()) {
    throw DimensionError("focal_loss: logits " + shape_str(logits.shape()) + " vs targets " + shape_str(targets.shape()));
  }
  if (!(fp.gamma >= 0)) throw ParameterError("focal_loss: gamma must be >= 0");
  if (!(fp.alpha >= 0 && fp.alpha <= 1)) throw ParameterError("focal_loss: alpha must lie in [0, 1]");
  const auto n = static_cast<std::size_t>(logits.numel());
  // Per element: signed logit s*z so that p_t = sigmoid(s*z), and alpha_t.
  std::vector<double> sz(n), at(n), sign(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(targets[static_cast<std::int64_t>(i)]);
    if (t != 0.0 && t != 1.0) throw ContractError("focal_loss: target " + std::to_string(t) + " is not 0 or 1");
    const double z = static_cast<double>(logits[static_cast<std::int64_t>(i)]);
    sign[i] = t == 1.0 ? 1.0 : -1.0;
    sz[i] = sign[i] * z;
    at[i] = t == 1.0 ? fp.alpha : 1 - fp.alpha;
  }
  // log p_t = -softplus(-sz); 1 - p_t = sigmoid(-sz).
  const auto log_pt = [](double v) { return -(std::max(-v, 0.0) + std::log1p(std::exp(-std::abs(v)))); };
  const auto one_minus_pt = [](double v) { return v >= 0 ? std::exp(-v) / (1 + std::exp(-v)) : 1 / (1 + std::exp(v)); };
  long double acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += -at[i] * std::pow(one_minus_pt(sz[i]), fp.gamma) * log_pt(sz[i]);
  auto out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<long double>(n)));
  const Shape shape = logits.shape();
  return detail::record<T>("focal_loss", {logits}, out, [=](const Tensor<T>& g, const std::vector<bool>&) {
    std::vector<T> dz(n);
    const double gs = static_cast<double>(g.item()) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double q = one_minus_pt(sz[i]), pt = 1 - q, lp = log_pt(sz[i]);
      const double d_dsz = -at[i] * (std::pow(q, fp.gamma + 1) - fp.gamma * std::pow(q, fp.gamma) * pt * lp);
      dz[i] = static_cast<T>(gs * sign[i] * d_dsz);
    }
    return typename Tape<T>::Grads{Tensor<T>(shape, std::move(dz))};
  });
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
class DetectorModel {
 public:
  static constexpr std::string_view kMagic = "PDET1";
  static constexpr std::int64_t kStrides[4] = {2, 2, 2, 1};
  // Initial objectness probability; keeps early focal loss from being
  // dominated by the many negatives.
  static constexpr double kPrior = 0.01;

  DetectorModel() = default;
  DetectorModel(DetectorSpec spec, std::uint64_t seed) : spec_(spec) {
    if (spec.width < 1 || spec.anchor < 1) throw ParameterError("invalid detector spec");
    std::mt19937_64 rng(seed);
    std::int64_t in = 3;
    for (auto s : kStrides) {
      stages_.push_back(nn::Conv2d<T>(in, spec.width, 3, s, 1, true, rng, std::sqrt(2.0 / (9.0 * static_cast<double>(in)))));
      in = spec.width;
    }
    head_ = nn::Conv2d<T>(in, 5, 1, 1, 0, true, rng, 0.01);
    head_.bias.mutable_data()[0] = static_cast<T>(-std::log((1 - kPrior) / kPrior));
  }

  const DetectorSpec& spec() const { return spec_; }

  /// N x 3 x H x W -> N x 5 x H/8 x W/8: objectness logit, dx, dy, dw, dh.
  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != 3) throw DimensionError("detector: expected N x 3 x H x W, got " + shape_str(x.shape()));
    detail::grid_extent(x.dim(2), "height");
    detail::grid_extent(x.dim(3), "width");
    auto h = x;
    for (const auto& s : stages_) h = relu(s(h));
    return head_(h);
  }

  nn::NamedParams<T> parameters(const std::string& prefix = "det") const {
    nn::NamedParams<T> out;
    for (std::size_t i = 0; i < stages_.size(); ++i) stages_[i].collect(prefix + ".stage" + std::to_string(i), out);
    head_.collect(prefix + ".head", out);
    return out;
  }

  static std::vector<std::int32_t> header(const DetectorSpec& s) {
    return {static_cast<std::int32_t>(s.width), static_cast<std::int32_t>(s.anchor),
            static_cast<std::int32_t>(DetectorSpec::kStride)};
  }
  void save(const std::string& path) const { checkpoint::save(path, kMagic, header(spec_), parameters()); }
  void load(const std::string& path) { checkpoint::load(path, kMagic, header(spec_), parameters()); }
  static DetectorModel from_file(const std::string& path) {
    const auto h = checkpoint::read_header(path, kMagic, 3);
    DetectorModel m(DetectorSpec{h[0], h[1]}, 0);
    m.load(path);
    return m;
  }

 private:
  DetectorSpec spec_;
  std::vector<nn::Conv2d<T>> stages_;
  nn::Conv2d<T> head_;
};

struct InferenceConfig {
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  std::size_t max_detections = 100;
};

/// Detections for image n of a raw N x 5 x gh x gw output map.
template <typename T>
std::vector<Detection> decode_output(const Tensor<T>& out, std::int64_t n, std::int64_t height, std::int64_t width,
                                     const DetectorSpec& spec, const InferenceConfig& ic = {}) {
  const auto gh = out.dim(2), gw = out.dim(3), cells = gh * gw;
  const auto base = n * 5 * cells;
  std::vector<Detection> dets;
  for (std::int64_t c = 0; c < cells; ++c) {
    const double score = 1 / (1 + std::exp(-static_cast<double>(out[base + c])));
    if (score < ic.score_threshold) continue;
    const auto o = [&](int k) { return static_cast<double>(out[base + k * cells + c]); };
    const auto box = decode_cell(c / gw, c % gw, o(1), o(2), o(3), o(4), height, width, spec);
    if (box.w > 0 && box.h > 0) dets.push_back({box, score});
  }
  auto kept = nms(dets, ic.nms_iou);
  if (kept.size() > ic.max_detections) kept.resize(ic.max_detections);
  return kept;
}

inline std::vector<Detection> detect(const DetectorModel<float>& m, const Image& im, const InferenceConfig& ic = {}) {
  NoGradGuard<float> off;
  return decode_output(m(to_tensor<float>(im)), 0, im.height, im.width, m.spec(), ic);
}

inline std::vector<std::vector<Detection>> detect_dataset(const DetectorModel<float>& m, const Dataset& ds,
                                                          const InferenceConfig& ic = {}) {
  std::vector<std::vector<Detection>> out(ds.size());
  parallel_for(ds.size(), [&](std::size_t i) { out[i] = detect(m, ds[i].image, ic); });
  return out;
}

// ---------------------------------------------------------------------------
// Average precision

inline constexpr int kRecallPoints = 10;

struct ApResult {
  double ap = 0;
  std::vector<double> recall, precision;  // one entry per ranked detection
  std::vector<double> interpolated;       // at recall 0.1, 0.2, ..., 1.0
  double iou_threshold = 0.5;
  std::int64_t n_gt = 0, n_det = 0;
};

/// Detections are ranked by score over the whole set (ties: image order, then
/// list order) and each is matched to the unmatched ground truth box of its
/// image with the highest IoU, if that IoU reaches the threshold.
inline ApResult average_precision(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<BBox>>& gts,
                                  double iou_threshold = 0.5) {
  if (dets.size() != gts.size()) {
    throw DimensionError("average_precision: " + std::to_string(dets.size()) + " detection lists for " +
                         std::to_string(gts.size()) + " images");
  }
  ApResult r;
  r.iou_threshold = iou_threshold;
  for (const auto& g : gts) r.n_gt += static_cast<std::int64_t>(g.size());
  if (r.n_gt == 0) throw UndefinedApError("average_precision: no ground truth boxes");

  struct Ref {
    std::size_t image, index;
    double score;
  };
  std::vector<Ref> ranked;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t k = 0; k < dets[i].size(); ++k) ranked.push_back({i, k, dets[i][k].score});
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });
  r.n_det = static_cast<std::int64_t>(ranked.size());

  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
  std::int64_t tp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    const auto& d = dets[ranked[k].image][ranked[k].index];
    const auto& g = gts[ranked[k].image];
    double best = iou_threshold;
    std::ptrdiff_t hit = -1;
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (used[ranked[k].image][j]) continue;
      const double v = iou(d.box, g[j]);
      if (v >= best && (hit < 0 || v > best)) best = v, hit = static_cast<std::ptrdiff_t>(j);
    }
    if (hit >= 0) {
      used[ranked[k].image][static_cast<std::size_t>(hit)] = true;
      ++tp;
    }
    r.recall.push_back(static_cast<double>(tp) / static_cast<double>(r.n_gt));
    r.precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
  }
  // Grid points are compared with a small tolerance so that, e.g., a recall
  // of 3/10 computed in floating point counts as reaching 0.3.
  constexpr double kTol = 1e-12;
  for (int q = 1; q <= kRecallPoints; ++q) {
    const double level = q / static_cast<double>(kRecallPoints);
    double best = 0;
    for (std::size_t k = 0; k < r.recall.size(); ++k) {
      if (r.recall[k] >= level - kTol) best = std::max(best, r.precision[k]);
    }
    r.interpolated.push_back(best);
  }
  r.ap = std::accumulate(r.interpolated.begin(), r.interpolated.end(), 0.0) / kRecallPoints;
  return r;
}

inline std::vector<std::vector<BBox>> ground_truth(const Dataset& ds) {
  std::vector<std::vector<BBox>> out;
  for (const auto& s : ds) out.push_back(s.boxes);
  return out;
}

struct MetricsRow {
  std::string dataset;
  double ap = 0;
  std::int64_t n_images = 0, n_gt = 0;
};

inline std::string format_metrics(const std::vector<MetricsRow>& rows) {
  std::string out = "dataset,ap,n_images,n_gt\n";
  for (const auto& r : rows) {
    out += r.dataset + "," + detail::format_number(r.ap) + "," + std::to_string(r.n_images) + "," + std::to_string(r.n_gt) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct DetectorConfig {
  std::int64_t steps = 1500;
  std::int64_t batch = 8;
  nn::AdamConfig optimizer{1e-3, 0.9, 0.999, 1e-8};
  std::uint64_t seed = 0;
  double scale_min = 0.3, scale_max = 2.0;  // set both to 1 to disable
  FocalParams focal;
  double box_weight = 1.0;
  DetectorSpec spec;

  void validate() const {
    if (steps <= 0) throw ParameterError("steps must be positive");
    if (batch < 1) throw ParameterError("batch must be positive");
    if (!(scale_min > 0 && scale_min <= scale_max)) throw ParameterError("scale range must satisfy 0 < min <= max");
    if (!(optimizer.lr > 0)) throw ParameterError("learning rate must be positive");
    if (!(box_weight >= 0)) throw ParameterError("box_weight must be non-negative");
  }
};

struct DetectorStep {
  std::int64_t step = 0;
  double focal = 0, box = 0, total = 0;
  bool finite() const { return std::isfinite(focal) && std::isfinite(box) && std::isfinite(total); }
};

struct DetectorBatch {
  Tensor<float> images, objectness, offsets, mask;
  std::int64_t positives = 0;
};

/// Stacks samples and their cell targets; mask is 1 on the four offset
/// channels of positive cells.
inline DetectorBatch make_detector_batch(const std::vector<ImageSample>& samples, const DetectorSpec& spec) {
  std::vector<Image> ims;
  std::vector<float> obj, off, mask;
  DetectorBatch b;
  std::int64_t gh = 0, gw = 0;
  for (const auto& s : samples) {
    ims.push_back(s.image);
    const auto t = assign_targets(s.boxes, s.image.height, s.image.width, spec);
    gh = t.grid_h, gw = t.grid_w;
    obj.insert(obj.end(), t.objectness.begin(), t.objectness.end());
    off.insert(off.end(), t.offsets.begin(), t.offsets.end());
    for (int k = 0; k < 4; ++k) mask.insert(mask.end(), t.objectness.begin(), t.objectness.end());
    b.positives += t.positives;
  }
  const auto n = static_cast<std::int64_t>(samples.size());
  b.images = to_tensor<float>(std::span<const Image>(ims));
  b.objectness = Tensor<float>({n, 1, gh, gw}, std::move(obj));
  b.offsets = Tensor<float>({n, 4, gh, gw}, std::move(off));
  b.mask = Tensor<float>({n, 4, gh, gw}, std::move(mask));
  return b;
}

struct DetectorLoss {
  Tensor<float> total, focal, box;
};

/// Focal loss summed over cells and divided by the positive count, plus the
/// mean L1 offset error over positive cells.
inline DetectorLoss detector_loss(const Tensor<float>& out, const DetectorBatch& b, const DetectorConfig& cfg) {
  const auto obj = slice_channels(out, 0, 1);
  const auto off = slice_channels(out, 1, 5);
  const double pos = static_cast<double>(std::max<std::int64_t>(b.positives, 1));
  DetectorLoss l;
  l.focal = scale(focal_loss(obj, b.objectness, cfg.focal), static_cast<double>(obj.numel()) / pos);
  l.box = scale(sum(abs(mul(sub(off, b.offsets), b.mask))), 1.0 / (4.0 * pos));
  l.total = add(l.focal, scale(l.box, cfg.box_weight));
  return l;
}

struct DetectorResult {
  DetectorModel<float> model;
  std::vector<DetectorStep> log;
  std::int64_t skipped_steps = 0;
};

inline DetectorResult train_detector(const Dataset& ds, const DetectorConfig& cfg,
                                     const std::function<void(const DetectorStep&)>& on_step = {}) {
  cfg.validate();
  if (ds.empty()) throw DataError("train_detector: empty dataset");
  DetectorResult res{DetectorModel<float>(cfg.spec, cfg.seed), {}, 0};
  const auto params = res.model.parameters();
  nn::Adam<float> opt(params, cfg.optimizer);
  std::mt19937_64 rng(cfg.seed ^ 0xde7ec7ULL);
  std::vector<std::vector<float>> good;
  const auto snapshot = [&] {
    good.clear();
    for (const auto& [n, t] : params) good.emplace_back(t.data().begin(), t.data().end());
  };
  snapshot();
  int bad_in_a_row = 0;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<ImageSample> samples;
    for (std::int64_t k = 0; k < cfg.batch; ++k) {
      const auto& s = ds[std::uniform_int_distribution<std::size_t>(0, ds.size() - 1)(rng)];
      const double f = std::uniform_real_distribution<double>(cfg.scale_min, cfg.scale_max)(rng);
      samples.push_back(f == 1.0 ? s : scale_augment(s, f, rng));
    }
    const auto b = make_detector_batch(samples, cfg.spec);
    DetectorStep rec;
    rec.step = step;
    {
      Tape<float> tape;
      nn::zero_grads(params);
      const auto l = detector_loss(res.model(b.images), b, cfg);
      rec.focal = l.focal.item(), rec.box = l.box.item(), rec.total = l.total.item();
      if (rec.finite()) {
        backward(l.total);
        opt.step();
      }
    }
    if (!rec.finite()) {
      ++res.skipped_steps;
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto t = params[i].second;
        std::copy(good[i].begin(), good[i].end(), t.mutable_data().begin());
      }
      if (++bad_in_a_row >= 2) {
        throw NonFiniteError("train_detector: non-finite loss at steps " + std::to_string(step - 1) + " and " +
                             std::to_string(step));
      }
    } else {
      bad_in_a_row = 0;
      snapshot();
    }
    res.log.push_back(rec);
    if (on_step) on_step(rec);
  }
  return res;
}

}  // namespace pargan
