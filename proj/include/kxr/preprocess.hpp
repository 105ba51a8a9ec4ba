// Image standardization: resolution, percentile contrast window, denoising.
#pragma once

#include "kxr/image.hpp"
#include "kxr/serialize.hpp"

namespace kxr {

struct PreprocessSpec {
  int target_h = 256;
  int target_w = 256;
  double window_low = 0.0;    // percentile
  double window_high = 100.0; // percentile
  int denoise_kernel = 1;     // odd, 1 = off

  void validate() const {
    if (target_h < 1 || target_w < 1) throw UsageError("preprocess: target size must be positive");
    if (!(window_low >= 0.0 && window_low < window_high && window_high <= 100.0))
      throw UsageError("preprocess: window percentiles must satisfy 0 <= low < high <= 100");
    if (denoise_kernel < 1 || denoise_kernel % 2 == 0)
      throw UsageError("preprocess: denoise_kernel must be odd and >= 1");
  }
};

inline json to_json(const PreprocessSpec& s) {
  return {{"target_size", {s.target_h, s.target_w}},
          {"intensity_window", {s.window_low, s.window_high}},
          {"denoise_kernel", s.denoise_kernel}};
}
inline PreprocessSpec preprocess_spec_from_json(const json& j) {
  PreprocessSpec s;
  if (j.contains("target_size")) {
    s.target_h = j["target_size"].at(0).get<int>();
    s.target_w = j["target_size"].at(1).get<int>();
  }
  if (j.contains("intensity_window")) {
    s.window_low = j["intensity_window"].at(0).get<double>();
    s.window_high = j["intensity_window"].at(1).get<double>();
  }
  if (j.contains("denoise_kernel")) s.denoise_kernel = j["denoise_kernel"].get<int>();
  return s;
}

// Percentile with linear interpolation between order statistics.
inline double percentile(std::vector<float> values, double p) {
  if (values.empty()) throw UsageError("percentile of empty set");
  std::sort(values.begin(), values.end());
  const double pos = (values.size() - 1) * p / 100.0;
  const size_t lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = static_cast<size_t>(std::ceil(pos));
  const double frac = pos - lo;
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

// Denoise, resize, then map the percentile window onto [0,1] with clipping.
// A degenerate window (all pixels equal) maps everything to 0.5.
inline Image preprocess(const Image& input, const PreprocessSpec& spec) {
  spec.validate();
  Image img = median_filter(input, spec.denoise_kernel);
  img = resize_bilinear(img, spec.target_h, spec.target_w);
  const double lo = percentile(img.pixels, spec.window_low);
  const double hi = percentile(img.pixels, spec.window_high);
  if (hi - lo < 1e-12) {
    for (float& v : img.pixels) v = 0.5f;
    return img;
  }
  const double scale = 1.0 / (hi - lo);
  for (float& v : img.pixels)
    v = static_cast<float>(std::clamp((v - lo) * scale, 0.0, 1.0));
  return img;
}

}  // namespace kxr
