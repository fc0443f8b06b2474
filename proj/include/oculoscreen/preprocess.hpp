#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "oculoscreen/capture.hpp"
#include "oculoscreen/error.hpp"
#include "oculoscreen/image.hpp"
#include "oculoscreen/types.hpp"

namespace oculoscreen {

struct CropConfig {
  int height = 32;
  int width = 64;
  bool operator==(const CropConfig&) const = default;
};

struct EyeCrop {
  ImageF pixels;
  BoundingBox source_box;
  EyeSide side = EyeSide::kRightEye;
  GazeAngle angle = GazeAngle::kHorizontal;
};

struct GridSpec {
  enum class Mode { kRect, kSector };

  Mode mode = Mode::kRect;
  int rows = 2;
  int cols = 4;
  int n_sectors = 8;

  int cell_count() const { return mode == Mode::kRect ? rows * cols : n_sectors; }

  void check() const {
    if (mode == Mode::kRect && (rows < 1 || cols < 1))
      throw Error(ErrorCode::kInvalidArgument, "RECT grid needs rows >= 1 and cols >= 1");
    if (mode == Mode::kSector && n_sectors < 1)
      throw Error(ErrorCode::kInvalidArgument, "SECTOR grid needs n_sectors >= 1");
  }

  static GridSpec rect(int rows, int cols) { return {Mode::kRect, rows, cols, 0}; }
  static GridSpec sector(int n) { return {Mode::kSector, 0, 0, n}; }

  bool operator==(const GridSpec& o) const {
    if (mode != o.mode) return false;
    return mode == Mode::kRect ? rows == o.rows && cols == o.cols : n_sectors == o.n_sectors;
  }
};

struct SectorGrid {
  std::vector<ImageF> cells;
  GridSpec spec;
  int cell_size = 16;
  BoundingBox source_box;
  EyeSide side = EyeSide::kRightEye;
  GazeAngle angle = GazeAngle::kHorizontal;
};

struct DetectedEye {
  BoundingBox box;
  EyeSide side = EyeSide::kRightEye;
  bool operator==(const DetectedEye&) const = default;
};

struct DetectorConfig {
  // Minimum centre-surround score (excess saliency mass relative to the
  // image mean).
  double min_contrast = 0.1;
  // A second box must reach this fraction of the best box's contrast.
  double second_eye_ratio = 0.6;
  int stride = 4;
};

// ---- resampling ----

// Bilinear sample with half-pixel centres; coordinates clamp to the region.
inline void bilinear_resize(const ImageF& src, int x0, int y0, int w, int h, ImageF& dst) {
  const double sx = static_cast<double>(w) / dst.width;
  const double sy = static_cast<double>(h) / dst.height;
  for (int oy = 0; oy < dst.height; ++oy) {
    const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const int iy0 = static_cast<int>(fy);
    const int iy1 = std::min(iy0 + 1, h - 1);
    const double ty = fy - iy0;
    for (int ox = 0; ox < dst.width; ++ox) {
      const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const int ix0 = static_cast<int>(fx);
      const int ix1 = std::min(ix0 + 1, w - 1);
      const double tx = fx - ix0;
      for (int c = 0; c < 3; ++c) {
        const double a = src.at(y0 + iy0, x0 + ix0, c), b = src.at(y0 + iy0, x0 + ix1, c);
        const double d = src.at(y0 + iy1, x0 + ix0, c), e = src.at(y0 + iy1, x0 + ix1, c);
        const double top = a + (b - a) * tx;
        const double bot = d + (e - d) * tx;
        dst.at(oy, ox, c) = top + (bot - top) * ty;
      }
    }
  }
}

inline ImageF to_unit_float(const ImageU8& image) {
  ImageF out(image.width, image.height);
  for (std::size_t i = 0; i < image.data.size(); ++i) out.data[i] = image.data[i] / 255.0;
  return out;
}

// ---- detection ----

namespace detail {

struct IntegralImage {
  int width = 0, height = 0;
  std::vector<double> sums;  // (height+1) x (width+1)

  explicit IntegralImage(const std::vector<double>& values, int w, int h) : width(w), height(h) {
    sums.assign(static_cast<std::size_t>(w + 1) * (h + 1), 0.0);
    for (int y = 0; y < h; ++y) {
      double row = 0.0;
      for (int x = 0; x < w; ++x) {
        row += values[static_cast<std::size_t>(y) * w + x];
        sums[idx(y + 1, x + 1)] = sums[idx(y, x + 1)] + row;
      }
    }
  }

  std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * (width + 1) + x; }

  double sum(const BoundingBox& b) const {
    return sums[idx(b.bottom(), b.right())] - sums[idx(b.y, b.right())] - sums[idx(b.bottom(), b.x)] +
           sums[idx(b.y, b.x)];
  }
};

// Horizontal luma gradient plus a redness term, both on a 5x5 box-blurred
// copy so sensor noise does not dominate.
inline std::vector<double> saliency_map(const ImageU8& image) {
  const int w = image.width, h = image.height;
  std::array<std::vector<double>, 3> chan;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> v(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) v[static_cast<std::size_t>(y) * w + x] = image.at(y, x, c) / 255.0;
    const IntegralImage integral(v, w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const BoundingBox b = clip_box({x - 2, y - 2, 5, 5}, w, h);
        v[static_cast<std::size_t>(y) * w + x] = integral.sum(b) / static_cast<double>(b.area());
      }
    chan[c] = std::move(v);
  }
  std::vector<double> s(static_cast<std::size_t>(w) * h, 0.0);
  auto luma = [&](std::size_t i) { return 0.299 * chan[0][i] + 0.587 * chan[1][i] + 0.114 * chan[2][i]; };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const int xl = std::max(0, x - 1), xr = std::min(w - 1, x + 1);
      const double grad = std::abs(luma(static_cast<std::size_t>(y) * w + xr) - luma(static_cast<std::size_t>(y) * w + xl)) * 0.5;
      const double redness = chan[0][i] - (chan[1][i] + chan[2][i]) / 2.0;
      s[i] = grad + 0.5 * std::max(0.0, redness - 0.25);
    }
  }
  return s;
}

struct Candidate {
  BoundingBox box;
  double score;
};

}  // namespace detail

// Hints are clipped to the image and passed through unchanged otherwise.
// Without hints a centre-surround saliency scan proposes up to two boxes.
inline std::vector<DetectedEye> detect_eyes(const ImageU8& image,
                                            std::optional<std::span<const EyeHint>> hint = std::nullopt,
                                            const DetectorConfig& cfg = {}) {
  std::vector<DetectedEye> out;
  if (hint && !hint->empty()) {
    if (hint->size() > 2) throw Error(ErrorCode::kInvalidArgument, "at most two eye boxes per image");
    for (const auto& h : *hint) {
      const BoundingBox clipped = clip_box(h.box, image.width, image.height);
      if (clipped.w <= 0 || clipped.h <= 0) continue;
      const double cx = clipped.x + clipped.w / 2.0;
      const EyeSide side = h.side.value_or(cx < image.width / 2.0 ? EyeSide::kRightEye : EyeSide::kLeftEye);
      out.push_back({clipped, side});
    }
    if (out.empty()) throw Error(ErrorCode::kNoEyeFound, "all hint boxes lie outside the image");
    return out;
  }

  if (image.width < 8 || image.height < 4) throw Error(ErrorCode::kNoEyeFound, "image too small");
  const auto sal = detail::saliency_map(image);
  const detail::IntegralImage integral(sal, image.width, image.height);
  const double total_area = static_cast<double>(image.width) * image.height;
  const double norm = integral.sum({0, 0, image.width, image.height}) / total_area + 1e-3;

  std::vector<detail::Candidate> cands;
  for (double frac : {0.25, 0.35, 0.5, 0.65, 0.8}) {
    int bh = static_cast<int>(std::lround(image.height * frac));
    int bw = std::min(2 * bh, image.width);
    if (bh < 4 || bw < 8) continue;
    for (int y = 0; y + bh <= image.height; y += cfg.stride) {
      for (int x = 0; x + bw <= image.width; x += cfg.stride) {
        const BoundingBox inner{x, y, bw, bh};
        const int mx = std::max(2, bw / 4), my = std::max(2, bh / 4);
        const BoundingBox outer = clip_box({x - mx, y - my, bw + 2 * mx, bh + 2 * my}, image.width, image.height);
        const double inner_sum = integral.sum(inner);
        const double ring_area = static_cast<double>(outer.area() - inner.area());
        const double inner_mean = inner_sum / static_cast<double>(inner.area());
        const double ring_mean = ring_area > 0 ? (integral.sum(outer) - inner_sum) / ring_area : 0.0;
        // Excess saliency mass over the surround, as a fraction of the image.
        cands.push_back({inner, (inner_mean - ring_mean) * inner.area() / (total_area * norm)});
      }
    }
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const auto& a, const auto& b) { return a.score > b.score; });
  if (cands.empty() || cands.front().score < cfg.min_contrast)
    throw Error(ErrorCode::kNoEyeFound, "no eye-like region found");

  std::vector<BoundingBox> boxes{cands.front().box};
  for (const auto& c : cands) {
    if (c.score < cfg.second_eye_ratio * cands.front().score || c.score < cfg.min_contrast) break;
    if (iou(c.box, boxes.front()) > 0.0) continue;
    boxes.push_back(c.box);
    break;
  }
  std::sort(boxes.begin(), boxes.end(), [](const auto& a, const auto& b) { return a.x < b.x; });
  // Image-left is the subject's right eye.
  if (boxes.size() == 2) {
    out.push_back({boxes[0], EyeSide::kRightEye});
    out.push_back({boxes[1], EyeSide::kLeftEye});
  } else {
    const double cx = boxes[0].x + boxes[0].w / 2.0;
    out.push_back({boxes[0], cx < image.width / 2.0 ? EyeSide::kRightEye : EyeSide::kLeftEye});
  }
  return out;
}

// ---- crop ----

inline EyeCrop crop_normalize(const ImageF& image, const BoundingBox& box, const CropConfig& cfg = {},
                              EyeSide side = EyeSide::kRightEye, GazeAngle angle = GazeAngle::kHorizontal) {
  if (box.w < 2 || box.h < 2)
    throw Error(ErrorCode::kDegenerateBox, "box " + std::to_string(box.w) + "x" + std::to_string(box.h) +
                                               " is smaller than 2x2");
  if (box.x < 0 || box.y < 0 || box.right() > image.width || box.bottom() > image.height)
    throw Error(ErrorCode::kInvalidArgument, "box lies outside the image");
  EyeCrop crop;
  crop.pixels = ImageF(cfg.width, cfg.height);
  bilinear_resize(image, box.x, box.y, box.w, box.h, crop.pixels);
  for (auto& v : crop.pixels.data) v = std::clamp(v, 0.0, 1.0);
  crop.source_box = box;
  crop.side = side;
  crop.angle = angle;
  return crop;
}

inline EyeCrop crop_normalize(const ImageU8& image, const BoundingBox& box, const CropConfig& cfg = {},
                              EyeSide side = EyeSide::kRightEye, GazeAngle angle = GazeAngle::kHorizontal) {
  return crop_normalize(to_unit_float(image), box, cfg, side, angle);
}

// ---- grid partition ----

// Row bounds for RECT cell r of n over length len: equal parts, the last
// part absorbs the remainder.
inline std::pair<int, int> rect_span(int index, int parts, int len) {
  const int base = len / parts;
  const int begin = index * base;
  const int end = index == parts - 1 ? len : begin + base;
  return {begin, end};
}

// Wedge index of pixel (x, y) about the crop centre, counter-clockwise from
// the positive x axis with y pointing up.
inline int sector_of(int x, int y, int width, int height, int n_sectors) {
  const double dx = (x + 0.5) - width / 2.0;
  const double dy = height / 2.0 - (y + 0.5);
  double theta = std::atan2(dy, dx);
  if (theta < 0) theta += 2.0 * std::numbers::pi;
  int s = static_cast<int>(theta / (2.0 * std::numbers::pi) * n_sectors);
  return std::clamp(s, 0, n_sectors - 1);
}

// One H x W indicator mask per cell, in cell order. Each mask is computed
// from its own cell geometry.
inline std::vector<std::vector<std::uint8_t>> cell_masks(int height, int width, const GridSpec& spec) {
  spec.check();
  const int g = spec.cell_count();
  std::vector<std::vector<std::uint8_t>> masks(g, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width, 0));
  for (int cell = 0; cell < g; ++cell) {
    auto& m = masks[cell];
    if (spec.mode == GridSpec::Mode::kRect) {
      const auto [y0, y1] = rect_span(cell / spec.cols, spec.rows, height);
      const auto [x0, x1] = rect_span(cell % spec.cols, spec.cols, width);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) m[static_cast<std::size_t>(y) * width + x] = 1;
    } else {
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
          if (sector_of(x, y, width, height, spec.n_sectors) == cell) m[static_cast<std::size_t>(y) * width + x] = 1;
    }
  }
  return masks;
}

inline SectorGrid partition_grid(const EyeCrop& crop, const GridSpec& spec, int cell_size = 16) {
  spec.check();
  const auto& px = crop.pixels;
  SectorGrid grid;
  grid.spec = spec;
  grid.cell_size = cell_size;
  grid.source_box = crop.source_box;
  grid.side = crop.side;
  grid.angle = crop.angle;
  const int g = spec.cell_count();
  grid.cells.reserve(g);
  if (spec.mode == GridSpec::Mode::kRect) {
    for (int cell = 0; cell < g; ++cell) {
      const auto [y0, y1] = rect_span(cell / spec.cols, spec.rows, px.height);
      const auto [x0, x1] = rect_span(cell % spec.cols, spec.cols, px.width);
      ImageF out(cell_size, cell_size);
      if (x1 > x0 && y1 > y0) bilinear_resize(px, x0, y0, x1 - x0, y1 - y0, out);
      grid.cells.push_back(std::move(out));
    }
    return grid;
  }
  const auto masks = cell_masks(px.height, px.width, spec);
  for (int cell = 0; cell < g; ++cell) {
    const auto& m = masks[cell];
    int x0 = px.width, y0 = px.height, x1 = -1, y1 = -1;
    for (int y = 0; y < px.height; ++y)
      for (int x = 0; x < px.width; ++x)
        if (m[static_cast<std::size_t>(y) * px.width + x]) {
          x0 = std::min(x0, x), x1 = std::max(x1, x);
          y0 = std::min(y0, y), y1 = std::max(y1, y);
        }
    ImageF out(cell_size, cell_size);
    if (x1 >= x0 && y1 >= y0) {
      // Pixels of the bounding region outside the wedge are zeroed.
      ImageF region(x1 - x0 + 1, y1 - y0 + 1);
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
          if (m[static_cast<std::size_t>(y) * px.width + x])
            for (int c = 0; c < 3; ++c) region.at(y - y0, x - x0, c) = px.at(y, x, c);
      bilinear_resize(region, 0, 0, region.width, region.height, out);
    }
    grid.cells.push_back(std::move(out));
  }
  return grid;
}

}  // namespace oculoscreen
