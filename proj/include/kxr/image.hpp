// Grayscale float raster plus the geometric transforms the pipeline needs.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "kxr/common.hpp"

namespace kxr {

struct Point {
  double x = 0;
  double y = 0;
};

// Row-major grayscale raster, intensities nominally in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<size_t>(h) * w, fill) {}

  float& at(int y, int x) { return pixels[static_cast<size_t>(y) * width + x]; }
  float at(int y, int x) const { return pixels[static_cast<size_t>(y) * width + x]; }
  size_t size() const { return pixels.size(); }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width; }

  bool has_nonfinite() const {
    for (float v : pixels)
      if (!std::isfinite(v)) return true;
    return false;
  }

  // Bilinear sample with zero outside the frame.
  float sample(double y, double x) const {
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const double fx = x - x0;
    const double fy = y - y0;
    auto px = [&](int yy, int xx) -> double {
      if (yy < 0 || yy >= height || xx < 0 || xx >= width) return 0.0;
      return at(yy, xx);
    };
    const double top = px(y0, x0) * (1 - fx) + px(y0, x0 + 1) * fx;
    const double bot = px(y0 + 1, x0) * (1 - fx) + px(y0 + 1, x0 + 1) * fx;
    return static_cast<float>(top * (1 - fy) + bot * fy);
  }
};

inline Image resize_bilinear(const Image& in, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw UsageError("resize: target must be positive");
  if (out_h == in.height && out_w == in.width) return in;
  Image out(out_h, out_w);
  const double sy = static_cast<double>(in.height) / out_h;
  const double sx = static_cast<double>(in.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    // align pixel centers
    const double src_y = (y + 0.5) * sy - 0.5;
    for (int x = 0; x < out_w; ++x) {
      const double src_x = (x + 0.5) * sx - 0.5;
      const double cy = std::clamp(src_y, 0.0, in.height - 1.0);
      const double cx = std::clamp(src_x, 0.0, in.width - 1.0);
      out.at(y, x) = in.sample(cy, cx);
    }
  }
  return out;
}

// Rotation convention used throughout: angles are measured in raster
// coordinates (x right, y down) so that atan2(dy, dx) of a tilted
// left-to-right landmark pair equals the image's rotation angle.
// rotate_point applies R(angle) about `center`; rotate_raster rotates the
// image content the same way (out-of-frame pixels become 0).
inline Point rotate_point(const Point& p, const Point& center, double angle_deg) {
  const double a = deg_to_rad(angle_deg);
  const double c = std::cos(a), s = std::sin(a);
  const double dx = p.x - center.x, dy = p.y - center.y;
  return {center.x + c * dx - s * dy, center.y + s * dx + c * dy};
}

inline Image rotate_raster(const Image& in, double angle_deg) {
  if (angle_deg == 0.0) return in;
  Image out(in.height, in.width);
  const double a = deg_to_rad(angle_deg);
  const double c = std::cos(a), s = std::sin(a);
  const double cy = (in.height - 1) / 2.0, cx = (in.width - 1) / 2.0;
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      // inverse map: source = center + R(-angle) * (dest - center)
      const double dx = x - cx, dy = y - cy;
      const double sx = cx + c * dx + s * dy;
      const double sy = cy - s * dx + c * dy;
      if (sx < -1 || sx > in.width || sy < -1 || sy > in.height) continue;
      out.at(y, x) = in.sample(sy, sx);
    }
  }
  return out;
}

inline Image median_filter(const Image& in, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw UsageError("median filter kernel must be odd and >= 1");
  if (kernel == 1) return in;
  Image out(in.height, in.width);
  const int r = kernel / 2;
  std::vector<float> window;
  window.reserve(static_cast<size_t>(kernel) * kernel);
  for (int y = 0; y < in.height; ++y) {
    for (int x = 0; x < in.width; ++x) {
      window.clear();
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = std::clamp(y + dy, 0, in.height - 1);
        for (int dx = -r; dx <= r; ++dx) {
          const int xx = std::clamp(x + dx, 0, in.width - 1);
          window.push_back(in.at(yy, xx));
        }
      }
      auto mid = window.begin() + window.size() / 2;
      std::nth_element(window.begin(), mid, window.end());
      out.at(y, x) = *mid;
    }
  }
  return out;
}

// Box downsample by an integer factor; trailing rows/cols are dropped.
inline Image avg_pool(const Image& in, int factor) {
  if (factor < 1) throw UsageError("avg_pool factor must be >= 1");
  if (factor == 1) return in;
  Image out(in.height / factor, in.width / factor);
  const float inv = 1.0f / (factor * factor);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      float acc = 0;
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx) acc += in.at(y * factor + dy, x * factor + dx);
      out.at(y, x) = acc * inv;
    }
  }
  return out;
}

inline Image hflip(const Image& in) {
  Image out(in.height, in.width);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) out.at(y, x) = in.at(y, in.width - 1 - x);
  return out;
}

inline void clip01(Image& img) {
  for (float& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

}  // namespace kxr
