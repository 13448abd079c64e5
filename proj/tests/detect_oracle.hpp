#pragma once

// Brute-force references for the detection module. Each *_disagreement
// returns "" when the implementation's answer is consistent, else a reason.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "oracle.hpp"
#include "pargan/detect.hpp"

namespace oracle {

using pargan::BBox;
using pargan::Detection;

inline BBox random_box(std::mt19937_64& rng, double extent = 64) {
  std::uniform_real_distribution<double> pos(0, extent * 0.8), side(2, extent * 0.4);
  BBox b{pos(rng), pos(rng), side(rng), side(rng)};
  b.w = std::min(b.w, extent - b.x);
  b.h = std::min(b.h, extent - b.y);
  return b;
}

// Coarse scores so that ties occur.
inline std::vector<Detection> random_detections(std::mt19937_64& rng, int n) {
  std::vector<Detection> dets;
  for (int i = 0; i < n; ++i) dets.push_back({random_box(rng, 32), std::uniform_int_distribution<int>(0, 5)(rng) / 5.0});
  return dets;
}

// Unit squares shared by two integer boxes, counted one by one.
inline double pixel_iou(const BBox& a, const BBox& b) {
  int inter = 0, uni = 0;
  for (int y = 0; y < 40; ++y) {
    for (int x = 0; x < 40; ++x) {
      const bool in_a = x >= a.x && x < a.right() && y >= a.y && y < a.bottom();
      const bool in_b = x >= b.x && x < b.right() && y >= b.y && y < b.bottom();
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni ? static_cast<double>(inter) / uni : 0.0;
}

// Straight-line focal loss in double.
inline double focal_straight(const std::vector<double>& z, const std::vector<double>& t, double alpha, double gamma) {
  double acc = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = 1 / (1 + std::exp(-z[i]));
    const double pt = t[i] == 1 ? p : 1 - p;
    const double at = t[i] == 1 ? alpha : 1 - alpha;
    acc += -at * std::pow(1 - pt, gamma) * std::log(pt);
  }
  return acc / static_cast<double>(z.size());
}

/// Greedy NMS characterised over all pairs: kept boxes come in rank order
/// (score descending, then input index), overlap pairwise at most `thr`, and
/// every dropped box overlaps a higher-ranked kept one by more than `thr`.
inline std::string nms_disagreement(const std::vector<Detection>& dets, const std::vector<Detection>& kept, double thr) {
  auto rank_before = [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b);
  };
  std::vector<bool> is_kept(dets.size(), false);
  std::vector<std::size_t> idx;
  for (const auto& k : kept) {
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (!is_kept[i] && dets[i].score == k.score && dets[i].box == k.box) {
        is_kept[i] = true;
        idx.push_back(i);
        break;
      }
    }
  }
  if (idx.size() != kept.size()) return "kept a detection that is not an input";
  for (std::size_t a = 0; a + 1 < idx.size(); ++a) {
    if (!rank_before(idx[a], idx[a + 1])) return "kept list out of rank order";
  }
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = a + 1; b < idx.size(); ++b)
      if (pargan::iou(dets[idx[a]].box, dets[idx[b]].box) > thr) return "two kept boxes overlap above threshold";
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (is_kept[i]) continue;
    bool explained = false;
    for (auto k : idx) explained |= rank_before(k, i) && pargan::iou(dets[k].box, dets[i].box) > thr;
    if (!explained) return "box " + std::to_string(i) + " dropped without a suppressor";
  }
  return "";
}

/// Cell ownership by scanning every box for every cell: the box whose center
/// falls in the cell wins, larger area first, earlier index on ties.
inline std::string assign_disagreement(const std::vector<BBox>& boxes, std::int64_t h, std::int64_t w,
                                       const pargan::DetectorSpec& spec = {}) {
  const auto t = pargan::assign_targets(boxes, h, w, spec);
  const double s = pargan::DetectorSpec::kStride;
  const auto gh = h / pargan::DetectorSpec::kStride, gw = w / pargan::DetectorSpec::kStride;
  if (t.grid_h != gh || t.grid_w != gw) return "grid extent";
  const auto cells = static_cast<std::size_t>(gh * gw);
  const double a = static_cast<double>(spec.anchor);
  for (std::int64_t i = 0; i < gh; ++i) {
    for (std::int64_t j = 0; j < gw; ++j) {
      std::ptrdiff_t owner = -1;
      for (std::size_t k = 0; k < boxes.size(); ++k) {
        const auto& b = boxes[k];
        const bool in = b.cx() >= j * s && b.cx() < (j + 1) * s && b.cy() >= i * s && b.cy() < (i + 1) * s;
        if (in && (owner < 0 || b.area() > boxes[static_cast<std::size_t>(owner)].area())) owner = static_cast<std::ptrdiff_t>(k);
      }
      const auto c = static_cast<std::size_t>(i * gw + j);
      const std::string where = "cell (" + std::to_string(i) + "," + std::to_string(j) + ")";
      if (t.objectness[c] != (owner >= 0 ? 1.0f : 0.0f)) return where + " objectness";
      if (owner < 0) continue;
      const auto& b = boxes[static_cast<std::size_t>(owner)];
      const float expect[4] = {static_cast<float>(b.cx() / s - (j + 0.5)), static_cast<float>(b.cy() / s - (i + 0.5)),
                               static_cast<float>(std::log(b.w / a)), static_cast<float>(std::log(b.h / a))};
      for (std::size_t k = 0; k < 4; ++k) {
        if (std::abs(t.offsets[k * cells + c] - expect[k]) > 1e-6f * std::max(1.0f, std::abs(expect[k]))) {
          return where + " offset " + std::to_string(k);
        }
      }
    }
  }
  return "";
}

/// The three-ground-truth, four-detection hand fixture: ranked TP, TP, FP, TP
/// gives PR points (1/3,1) (2/3,1) (2/3,2/3) (1,3/4), so the interpolated
/// precision is 1 at recall 0.1..0.6 and 3/4 at 0.7..1.0, AP 0.9.
struct ApFixture {
  std::vector<std::vector<BBox>> gt{{{0, 0, 10, 10}, {20, 20, 10, 10}}, {{0, 0, 8, 8}}};
  std::vector<std::vector<Detection>> dets{
      {{{0, 0, 10, 10}, 0.9}, {{40, 40, 10, 10}, 0.7}, {{21, 21, 10, 10}, 0.6}},
      {{{0, 0, 8, 9}, 0.8}},
  };
  double ap = 0.9;
  std::vector<double> interpolated{1, 1, 1, 1, 1, 1, 0.75, 0.75, 0.75, 0.75};
  std::vector<double> precision{1, 1, 2.0 / 3, 0.75};
};

}  // namespace oracle
