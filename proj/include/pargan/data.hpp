#pragma once

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pargan/errors.hpp"
#include "pargan/parallel.hpp"
#include "pargan/tensor.hpp"

namespace pargan {

enum class Domain { kSource, kTarget };

inline std::string domain_name(Domain d) { return d == Domain::kSource ? "source" : "target"; }

inline Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::kSource;
  if (s == "target") return Domain::kTarget;
  throw DataError("unknown domain '" + s + "'");
}

/// Axis-aligned box in pixels; (x, y) is the top-left corner.
struct BBox {
  double x = 0, y = 0, w = 0, h = 0;

  double right() const { return x + w; }
  double bottom() const { return y + h; }
  double area() const { return w * h; }
  double cx() const { return x + w / 2; }
  double cy() const { return y + h / 2; }
  bool operator==(const BBox&) const = default;
};

/// H x W x 3 image, channel-interleaved, values in [0,1].
struct Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::int64_t h, std::int64_t w, float fill = 0.0f)
      : height(h), width(w), data(static_cast<std::size_t>(h * w * 3), fill) {
    if (h < 1 || w < 1) throw DimensionError("image extents must be positive");
  }

  float& at(std::int64_t y, std::int64_t x, int c) { return data[static_cast<std::size_t>((y * width + x) * 3 + c)]; }
  float at(std::int64_t y, std::int64_t x, int c) const {
    return data[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
  bool operator==(const Image&) const = default;

  /// Rounds every value to the nearest multiple of 1/255.
  Image quantized() const {
    Image out = *this;
    for (auto& v : out.data) v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
    return out;
  }
};

/// Stacks images of equal extent into an N x 3 x H x W tensor.
template <typename T>
Tensor<T> to_tensor(std::span<const Image> images) {
  if (images.empty()) throw DimensionError("to_tensor: empty batch");
  const auto h = images[0].height, w = images[0].width;
  std::vector<T> out(static_cast<std::size_t>(images.size() * 3 * h * w));
  std::size_t o = 0;
  for (const auto& im : images) {
    if (im.height != h || im.width != w) {
      throw DimensionError("to_tensor: image " + std::to_string(im.height) + "x" + std::to_string(im.width) +
                           " in a " + std::to_string(h) + "x" + std::to_string(w) + " batch");
    }
    for (int c = 0; c < 3; ++c)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) out[o++] = static_cast<T>(im.at(y, x, c));
  }
  return Tensor<T>({static_cast<std::int64_t>(images.size()), 3, h, w}, std::move(out));
}

template <typename T>
Tensor<T> to_tensor(const Image& image) {
  return to_tensor<T>(std::span<const Image>(&image, 1));
}

/// Batch item `n` of an N x 3 x H x W tensor, clamped to [0,1].
template <typename T>
Image to_image(const Tensor<T>& t, std::int64_t n = 0) {
  if (t.rank() != 4 || t.dim(1) != 3) throw DimensionError("to_image: expected N x 3 x H x W, got " + shape_str(t.shape()));
  Image im(t.dim(2), t.dim(3));
  const auto plane = t.dim(2) * t.dim(3);
  const auto d = t.data();
  for (int c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < im.height; ++y)
      for (std::int64_t x = 0; x < im.width; ++x) {
        const auto v = d[static_cast<std::size_t>((n * 3 + c) * plane + y * im.width + x)];
        im.at(y, x, c) = std::clamp(static_cast<float>(v), 0.0f, 1.0f);
      }
  return im;
}

struct ImageSample {
  Image image;
  std::vector<BBox> boxes;
  Domain domain = Domain::kSource;
  std::optional<double> p;
  // Relative path inside a dataset directory; empty for in-memory samples.
  std::string path;
  // Geometry index the sample was rendered from (-1 when unknown).
  std::int64_t index = -1;
};

using Dataset = std::vector<ImageSample>;

// ---------------------------------------------------------------------------
// Procedural two-domain toy data

struct Rgb {
  float r = 0, g = 0, b = 0;
  float operator[](int c) const { return c == 0 ? r : c == 1 ? g : b; }
  bool operator==(const Rgb&) const = default;
};

struct DomainAppearance {
  std::vector<Rgb> background;  // gradient endpoints, drawn in pairs
  std::vector<Rgb> figures;
  Rgb gain{1, 1, 1};
  Rgb bias{0, 0, 0};
  // Per-image multiplicative lighting jitter, uniform in [1 - j, 1 + j].
  double gain_jitter = 0;
  double noise = 0;  // per-pixel Gaussian sd
  int blur = 0;      // box-blur radius
};

struct ToyDomainConfig {
  std::uint64_t seed = 1;
  std::int64_t size = 64;
  std::int64_t n_images = 200;
  int min_figures = 1;
  int max_figures = 6;
  double min_figure_w = 6, max_figure_w = 14;
  double min_figure_h = 10, max_figure_h = 24;
  DomainAppearance source;
  DomainAppearance target;

  /// Source: light cool backgrounds, slightly blurred. Target: the same
  /// figures, unblurred, on dark olive and brown backgrounds with lighting
  /// jitter and more noise.
  static ToyDomainConfig defaults() {
    ToyDomainConfig c;
    c.source.background = {{0.62f, 0.70f, 0.82f}, {0.80f, 0.84f, 0.90f}, {0.55f, 0.66f, 0.60f}, {0.74f, 0.80f, 0.70f}};
    c.source.figures = {{0.85f, 0.15f, 0.15f}, {0.15f, 0.55f, 0.20f}, {0.15f, 0.25f, 0.80f}, {0.90f, 0.80f, 0.15f}};
    c.source.noise = 0.01;
    c.source.blur = 1;
    c.target.background = {{0.30f, 0.28f, 0.18f}, {0.40f, 0.36f, 0.22f}, {0.26f, 0.24f, 0.22f}, {0.36f, 0.32f, 0.28f}};
    c.target.figures = c.source.figures;
    c.target.gain_jitter = 0.1;
    c.target.noise = 0.03;
    return c;
  }
};

namespace detail {

inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t index, std::uint64_t lane) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(lane)};
  return std::mt19937_64(seq);
}

struct Figure {
  double cx, cy, w, h;
  bool ellipse;
  int palette;
};

struct Geometry {
  int background;
  std::vector<Figure> figures;
};

inline double box_iou(const BBox& a, const BBox& b) {
  const double iw = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.x, b.x));
  const double ih = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline Geometry draw_geometry(const ToyDomainConfig& cfg, std::uint64_t index) {
  auto rng = stream(cfg.seed, index, 0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Geometry g;
  g.background = static_cast<int>(rng() % 1024);
  const int n = cfg.min_figures + static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.max_figures - cfg.min_figures + 1));
  const double s = static_cast<double>(cfg.size);
  std::vector<BBox> placed;
  for (int k = 0; k < n; ++k) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      Figure f;
      f.w = cfg.min_figure_w + u(rng) * (cfg.max_figure_w - cfg.min_figure_w);
      f.h = cfg.min_figure_h + u(rng) * (cfg.max_figure_h - cfg.min_figure_h);
      f.cx = f.w / 2 + u(rng) * (s - f.w);
      f.cy = f.h / 2 + u(rng) * (s - f.h);
      f.ellipse = u(rng) < 0.5;
      f.palette = static_cast<int>(rng() % 1024);
      const BBox b{f.cx - f.w / 2, f.cy - f.h / 2, f.w, f.h};
      if (std::any_of(placed.begin(), placed.end(), [&](const BBox& o) { return box_iou(b, o) > 0.2; })) continue;
      placed.push_back(b);
      g.figures.push_back(f);
      break;
    }
  }
  return g;
}

inline bool inside(const Figure& f, double px, double py) {
  const double dx = (px - f.cx) / (f.w / 2), dy = (py - f.cy) / (f.h / 2);
  if (f.ellipse) return dx * dx + dy * dy <= 1.0;
  // Rounded rectangle: corner radius a third of the shorter half-extent.
  const double r = std::min(f.w, f.h) / 6;
  const double qx = std::abs(px - f.cx) - (f.w / 2 - r), qy = std::abs(py - f.cy) - (f.h / 2 - r);
  if (qx > r || qy > r) return false;
  if (qx <= 0 || qy <= 0) return true;
  return qx * qx + qy * qy <= r * r;
}

inline Image box_blur(const Image& im, int radius) {
  if (radius <= 0) return im;
  Image out(im.height, im.width);
  for (std::int64_t y = 0; y < im.height; ++y)
    for (std::int64_t x = 0; x < im.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        int n = 0;
        for (std::int64_t yy = std::max<std::int64_t>(0, y - radius); yy <= std::min(im.height - 1, y + radius); ++yy)
          for (std::int64_t xx = std::max<std::int64_t>(0, x - radius); xx <= std::min(im.width - 1, x + radius); ++xx) {
            acc += im.at(yy, xx, c);
            ++n;
          }
        out.at(y, x, c) = static_cast<float>(acc / n);
      }
  return out;
}

}  // namespace detail

/// Renders geometry index `index` in one domain's appearance. Boxes are the
/// exact pixel extent of each painted figure.
inline ImageSample render_toy(const ToyDomainConfig& cfg, std::uint64_t index, Domain domain) {
  const auto& look = domain == Domain::kSource ? cfg.source : cfg.target;
  if (look.background.size() < 2 || look.figures.empty()) throw ParameterError("toy palette too small");
  const auto geo = detail::draw_geometry(cfg, index);
  const auto n = cfg.size;
  Image im(n, n);
  const auto nb = look.background.size();
  const Rgb top = look.background[(2 * static_cast<std::size_t>(geo.background)) % nb];
  const Rgb bottom = look.background[(2 * static_cast<std::size_t>(geo.background) + 1) % nb];
  for (std::int64_t y = 0; y < n; ++y) {
    const float t = n > 1 ? static_cast<float>(y) / static_cast<float>(n - 1) : 0.0f;
    for (std::int64_t x = 0; x < n; ++x)
      for (int c = 0; c < 3; ++c) im.at(y, x, c) = (1 - t) * top[c] + t * bottom[c];
  }
  ImageSample s;
  s.domain = domain;
  s.index = static_cast<std::int64_t>(index);
  for (const auto& f : geo.figures) {
    const Rgb col = look.figures[static_cast<std::size_t>(f.palette) % look.figures.size()];
    std::int64_t x0 = n, y0 = n, x1 = -1, y1 = -1;
    for (std::int64_t y = 0; y < n; ++y)
      for (std::int64_t x = 0; x < n; ++x) {
        if (!detail::inside(f, x + 0.5, y + 0.5)) continue;
        for (int c = 0; c < 3; ++c) im.at(y, x, c) = col[c];
        x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
      }
    if (x1 >= x0 && y1 >= y0) {
      s.boxes.push_back({static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 - x0 + 1),
                         static_cast<double>(y1 - y0 + 1)});
    }
  }
  im = detail::box_blur(im, look.blur);
  auto rng = detail::stream(cfg.seed, index, domain == Domain::kSource ? 1 : 2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double jitter = 1.0 + look.gain_jitter * u(rng);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::int64_t y = 0; y < n; ++y)
    for (std::int64_t x = 0; x < n; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = im.at(y, x, c) * look.gain[c] * jitter + look.bias[c];
        if (look.noise > 0) v += look.noise * noise(rng);
        im.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  s.image = std::move(im);
  return s;
}

/// Source and target datasets sharing one geometry process per index. The
/// target set is delivered in an order shuffled by an independent stream.
inline std::pair<Dataset, Dataset> gen_toy_pair(const ToyDomainConfig& cfg) {
  if (cfg.size < 8 || cfg.n_images < 1 || cfg.min_figures < 0 || cfg.max_figures < cfg.min_figures) {
    throw ParameterError("invalid toy domain config");
  }
  const auto n = static_cast<std::size_t>(cfg.n_images);
  Dataset source(n), target(n);
  parallel_for(n, [&](std::size_t i) {
    source[i] = render_toy(cfg, i, Domain::kSource);
    target[i] = render_toy(cfg, i, Domain::kTarget);
  });
  auto rng = detail::stream(cfg.seed, 0, 3);
  std::shuffle(target.begin(), target.end(), rng);
  return {std::move(source), std::move(target)};
}

// ---------------------------------------------------------------------------
// Box-preserving augmentation

namespace detail {

// Clips boxes to the window [0, w) x [0, h) after shifting by (-left, -top),
// dropping those that keep under `min_keep` of their area or a side under 1px.
inline std::vector<BBox> clip_boxes(const std::vector<BBox>& boxes, double left, double top, double w, double h,
                                    double min_keep = 0.25) {
  std::vector<BBox> out;
  for (const auto& b : boxes) {
    const double x0 = std::max(b.x - left, 0.0), y0 = std::max(b.y - top, 0.0);
    const double x1 = std::min(b.right() - left, w), y1 = std::min(b.bottom() - top, h);
    const BBox c{x0, y0, x1 - x0, y1 - y0};
    if (c.w < 1 || c.h < 1 || c.area() < min_keep * b.area()) continue;
    out.push_back(c);
  }
  return out;
}

}  // namespace detail

/// size x size window with its top-left corner at (left, top).
inline ImageSample crop_at(const ImageSample& s, std::int64_t top, std::int64_t left, std::int64_t size) {
  if (size < 1 || size > std::min(s.image.height, s.image.width)) {
    throw ParameterError("crop size " + std::to_string(size) + " exceeds image extent " +
                         std::to_string(s.image.height) + "x" + std::to_string(s.image.width));
  }
  if (top < 0 || left < 0 || top + size > s.image.height || left + size > s.image.width) {
    throw ParameterError("crop window outside the image");
  }
  ImageSample out = s;
  out.image = Image(size, size);
  for (std::int64_t y = 0; y < size; ++y)
    for (std::int64_t x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = s.image.at(top + y, left + x, c);
  out.boxes = detail::clip_boxes(s.boxes, static_cast<double>(left), static_cast<double>(top),
                                 static_cast<double>(size), static_cast<double>(size));
  return out;
}

template <typename Rng>
ImageSample crop_random(const ImageSample& s, std::int64_t size, Rng& rng) {
  if (size < 1 || size > std::min(s.image.height, s.image.width)) {
    throw ParameterError("crop size " + std::to_string(size) + " exceeds image extent " +
                         std::to_string(s.image.height) + "x" + std::to_string(s.image.width));
  }
  std::uniform_int_distribution<std::int64_t> ty(0, s.image.height - size), tx(0, s.image.width - size);
  const auto top = ty(rng);
  const auto left = tx(rng);
  return crop_at(s, top, left, size);
}

/// Nearest-neighbour resize by `factor`, then back to the original extent:
/// a random window when enlarged, a random placement on a mean-colour canvas
/// when shrunk. Boxes follow the same mapping.
template <typename Rng>
ImageSample scale_augment(const ImageSample& s, double factor, Rng& rng) {
  if (!(factor >= 0.3 - 1e-12 && factor <= 2.0 + 1e-12)) {
    throw ParameterError("scale factor " + std::to_string(factor) + " outside [0.3, 2.0]");
  }
  const auto h = s.image.height, w = s.image.width;
  const auto sh = std::max<std::int64_t>(1, std::llround(static_cast<double>(h) * factor));
  const auto sw = std::max<std::int64_t>(1, std::llround(static_cast<double>(w) * factor));
  const double fy = static_cast<double>(sh) / static_cast<double>(h);
  const double fx = static_cast<double>(sw) / static_cast<double>(w);
  Image scaled(sh, sw);
  for (std::int64_t y = 0; y < sh; ++y) {
    const auto yy = std::min(h - 1, static_cast<std::int64_t>((static_cast<double>(y) + 0.5) / fy));
    for (std::int64_t x = 0; x < sw; ++x) {
      const auto xx = std::min(w - 1, static_cast<std::int64_t>((static_cast<double>(x) + 0.5) / fx));
      for (int c = 0; c < 3; ++c) scaled.at(y, x, c) = s.image.at(yy, xx, c);
    }
  }
  std::vector<BBox> boxes;
  for (const auto& b : s.boxes) boxes.push_back({b.x * fx, b.y * fy, b.w * fx, b.h * fy});

  // Offset of the scaled image inside the output frame (negative = cropped).
  auto offset = [&rng](std::int64_t big, std::int64_t small) {
    std::uniform_int_distribution<std::int64_t> d(0, std::abs(big - small));
    return d(rng);
  };
  const auto oy = sh >= h ? -offset(sh, h) : offset(h, sh);
  const auto ox = sw >= w ? -offset(sw, w) : offset(w, sw);

  double mean[3] = {0, 0, 0};
  for (std::size_t i = 0; i < scaled.data.size(); ++i) mean[i % 3] += scaled.data[i];
  for (auto& m : mean) m /= static_cast<double>(sh * sw);
  ImageSample out = s;
  out.image = Image(h, w);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const auto sy = y - oy, sx = x - ox;
      const bool in = sy >= 0 && sy < sh && sx >= 0 && sx < sw;
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = in ? scaled.at(sy, sx, c) : static_cast<float>(mean[c]);
    }
  out.boxes = detail::clip_boxes(boxes, static_cast<double>(-ox), static_cast<double>(-oy), static_cast<double>(w),
                                 static_cast<double>(h));
  return out;
}

// ---------------------------------------------------------------------------
// PNG

namespace detail {

struct PngReadState {
  const unsigned char* bytes = nullptr;
  std::size_t size = 0;
  std::size_t offset = 0;
  char message[256] = {0};
  std::jmp_buf jump;
};

inline void png_read_bytes(png_structp png, png_bytep out, png_size_t n) {
  auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (st->size - st->offset < n) {
    st->offset = st->size;
    png_error(png, "unexpected end of file");
  }
  std::memcpy(out, st->bytes + st->offset, n);
  st->offset += n;
}

inline void png_on_error(png_structp png, png_const_charp msg) {
  auto* st = static_cast<PngReadState*>(png_get_error_ptr(png));
  std::snprintf(st->message, sizeof st->message, "%s", msg);
  std::longjmp(st->jump, 1);
}

inline void png_on_warning(png_structp, png_const_charp) {}

}  // namespace detail

/// Decodes an in-memory PNG to RGB in [0,1]. Palette, grey, 16-bit and alpha
/// inputs are converted to 8-bit RGB first.
inline Image decode_png(const std::string& bytes) {
  detail::PngReadState st;
  st.bytes = reinterpret_cast<const unsigned char*>(bytes.data());
  st.size = bytes.size();
  if (bytes.size() < 8 || png_sig_cmp(st.bytes, 0, 8) != 0) throw FormatError("not a PNG file", 0);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &st, detail::png_on_error, detail::png_on_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw FormatError("cannot allocate PNG decoder", 0);
  }
  // Everything touched after setjmp lives on the heap or in `st`.
  auto* pixels = new std::vector<unsigned char>();
  auto* rows = new std::vector<png_bytep>();
  png_uint_32 w = 0, h = 0;
  if (setjmp(st.jump)) {
    png_destroy_read_struct(&png, &info, nullptr);
    delete pixels;
    delete rows;
    throw FormatError(std::string("malformed PNG: ") + st.message, st.offset);
  }
  png_set_read_fn(png, &st, detail::png_read_bytes);
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != static_cast<png_size_t>(w) * 3) png_error(png, "unsupported pixel layout");
  pixels->resize(static_cast<std::size_t>(w) * h * 3);
  rows->resize(h);
  for (png_uint_32 y = 0; y < h; ++y) (*rows)[y] = pixels->data() + static_cast<std::size_t>(y) * w * 3;
  png_read_image(png, rows->data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image im(h, w);
  for (std::size_t i = 0; i < pixels->size(); ++i) im.data[i] = static_cast<float>((*pixels)[i]) / 255.0f;
  delete pixels;
  delete rows;
  return im;
}

inline Image read_png(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return decode_png({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
}

/// Writes 8-bit RGB; values are rounded to the nearest 1/255.
inline void write_png(const std::string& path, const Image& im) {
  std::vector<unsigned char> px(im.data.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<unsigned char>(std::lround(std::clamp(im.data[i], 0.0f, 1.0f) * 255.0f));
  }
  png_image desc{};
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(im.width);
  desc.height = static_cast<png_uint_32>(im.height);
  desc.format = PNG_FORMAT_RGB;
  const std::string tmp = path + ".tmp";
  if (!png_image_write_to_file(&desc, tmp.c_str(), 0, px.data(), 0, nullptr)) {
    const std::string msg = desc.message;
    png_image_free(&desc);
    throw DataError("cannot write " + path + ": " + msg);
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// MOTChallenge det.txt

struct MotDetection {
  int frame = 0;
  int id = -1;
  BBox box;
  double score = 1.0;
  bool operator==(const MotDetection&) const = default;
};

using MotFrames = std::map<int, std::vector<MotDetection>>;

namespace detail {

inline double parse_number(std::string_view field, std::size_t line) {
  while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
  while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) field.remove_suffix(1);
  double v = 0;
  const auto [end, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || end != field.data() + field.size() || field.empty()) {
    throw ParseError("non-numeric field '" + std::string(field) + "'", line);
  }
  return v;
}

inline std::string format_number(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace detail

/// Parses `frame,id,x,y,w,h,score[,...]` lines; blank lines are skipped.
inline MotFrames parse_mot_det(std::istream& in) {
  MotFrames out;
  std::string text;
  for (std::size_t line = 1; std::getline(in, text); ++line) {
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<double> f;
    std::string_view rest = text;
    while (true) {
      const auto comma = rest.find(',');
      f.push_back(detail::parse_number(rest.substr(0, comma), line));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (f.size() < 7) throw ParseError("expected at least 7 fields, got " + std::to_string(f.size()), line);
    MotDetection d{static_cast<int>(f[0]), static_cast<int>(f[1]), {f[2], f[3], f[4], f[5]}, f[6]};
    out[d.frame].push_back(d);
  }
  return out;
}

inline MotFrames read_mot_det(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return parse_mot_det(in);
}

/// Ten-field lines in frame order, numbers in shortest round-trip form.
inline std::string format_mot_det(const MotFrames& frames) {
  std::string out;
  for (const auto& [frame, dets] : frames) {
    for (const auto& d : dets) {
      out += std::to_string(d.frame) + "," + std::to_string(d.id) + "," + detail::format_number(d.box.x) + "," +
             detail::format_number(d.box.y) + "," + detail::format_number(d.box.w) + "," +
             detail::format_number(d.box.h) + "," + detail::format_number(d.score) + ",-1,-1,-1\n";
    }
  }
  return out;
}

inline void write_mot_det(const std::string& path, const MotFrames& frames) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + tmp);
    f << format_mot_det(frames);
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Dataset directories: images/*.png plus manifest.jsonl

inline nlohmann::json boxes_json(const std::vector<BBox>& boxes) {
  auto arr = nlohmann::json::array();
  for (const auto& b : boxes) arr.push_back({b.x, b.y, b.w, b.h});
  return arr;
}

inline std::string manifest_line(const ImageSample& s) {
  nlohmann::ordered_json j;
  j["path"] = s.path;
  j["domain"] = domain_name(s.domain);
  j["boxes"] = boxes_json(s.boxes);
  if (s.p) j["p"] = *s.p;
  return j.dump();
}

inline constexpr const char* kManifestName = "manifest.jsonl";

/// Writes every sample as PNG (assigning images/NNNNNN.png paths to samples
/// that have none) and the manifest last, atomically.
inline void write_dataset(const std::string& dir, Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds[i].path.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "images/%06zu.png", i);
      ds[i].path = name;
    }
  }
  parallel_for(ds.size(), [&](std::size_t i) { write_png((fs::path(dir) / ds[i].path).string(), ds[i].image); });
  const auto manifest = (fs::path(dir) / kManifestName).string();
  {
    std::ofstream f(manifest + ".tmp", std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + manifest);
    for (const auto& s : ds) f << manifest_line(s) << "\n";
  }
  fs::rename(manifest + ".tmp", manifest);
}

inline std::vector<std::string> read_manifest_lines(const std::string& dir) {
  const auto path = (std::filesystem::path(dir) / kManifestName).string();
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) {
    if (!l.empty()) lines.push_back(l);
  }
  return lines;
}

inline ImageSample parse_manifest_line(const std::string& text, std::size_t line) {
  ImageSample s;
  try {
    const auto j = nlohmann::json::parse(text);
    s.path = j.at("path").get<std::string>();
    s.domain = parse_domain(j.at("domain").get<std::string>());
    for (const auto& b : j.at("boxes")) {
      if (b.size() != 4) throw ParseError("box needs 4 numbers", line);
      s.boxes.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()});
    }
    if (j.contains("p") && !j["p"].is_null()) s.p = j["p"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad manifest record: ") + e.what(), line);
  }
  return s;
}

/// Loads a dataset directory. Image paths are relative to `dir`.
inline Dataset read_dataset(const std::string& dir) {
  const auto lines = read_manifest_lines(dir);
  Dataset ds(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) ds[i] = parse_manifest_line(lines[i], i + 1);
  parallel_for(ds.size(), [&](std::size_t i) {
    ds[i].image = read_png((std::filesystem::path(dir) / ds[i].path).string());
    for (const auto& b : ds[i].boxes) {
      if (b.w < 1 || b.h < 1 || b.x < 0 || b.y < 0 || b.right() > static_cast<double>(ds[i].image.width) + 1e-9 ||
          b.bottom() > static_cast<double>(ds[i].image.height) + 1e-9) {
        throw DataError("box outside image bounds in " + ds[i].path);
      }
    }
  });
  return ds;
}

}  // namespace pargan
