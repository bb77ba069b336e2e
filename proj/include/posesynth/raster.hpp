#pragma once

#include <cstdint>
#include <vector>

#include "posesynth/util.hpp"

namespace posesynth {

// row-major RGB triples, channels in [0, 1]
struct ImageBuffer {
  int width = 0, height = 0;
  std::vector<double> rgb;

  static ImageBuffer filled(int w, int h, double r, double g, double b) {
    ImageBuffer img;
    img.width = w;
    img.height = h;
    img.rgb.resize(static_cast<size_t>(w) * h * 3);
    for (size_t i = 0; i < img.rgb.size(); i += 3) {
      img.rgb[i] = r;
      img.rgb[i + 1] = g;
      img.rgb[i + 2] = b;
    }
    return img;
  }

  double& at(int x, int y, int c) {
    return rgb[3 * (static_cast<size_t>(y) * width + x) + c];
  }
  double at(int x, int y, int c) const {
    return rgb[3 * (static_cast<size_t>(y) * width + x) + c];
  }
};

struct DepthMap {
  int width = 0, height = 0;
  std::vector<double> depth;
  std::vector<uint8_t> valid;

  static DepthMap invalid_sized(int w, int h) {
    DepthMap d;
    d.width = w;
    d.height = h;
    d.depth.assign(static_cast<size_t>(w) * h, 0.0);
    d.valid.assign(static_cast<size_t>(w) * h, 0);
    return d;
  }

  size_t idx(int x, int y) const { return static_cast<size_t>(y) * width + x; }
  double at(int x, int y) const { return depth[idx(x, y)]; }
  bool is_valid(int x, int y) const { return valid[idx(x, y)] != 0; }
  size_t valid_count() const {
    size_t n = 0;
    for (uint8_t v : valid) n += v != 0;
    return n;
  }
};

// random brightness and contrast, each within +-magnitude, clamped to [0, 1]
ImageBuffer color_jitter(const ImageBuffer& img, Rng& rng, double magnitude = 0.05);

}  // namespace posesynth
