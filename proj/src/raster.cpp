#include "posesynth/raster.hpp"

namespace posesynth {

ImageBuffer color_jitter(const ImageBuffer& img, Rng& rng, double magnitude) {
  double brightness = 1.0 + rng.uniform(-magnitude, magnitude);
  double contrast = 1.0 + rng.uniform(-magnitude, magnitude);
  ImageBuffer out = img;
  for (double& v : out.rgb) {
    double j = ((v - 0.5) * contrast + 0.5) * brightness;
    v = j < 0.0 ? 0.0 : (j > 1.0 ? 1.0 : j);
  }
  return out;
}

}  // namespace posesynth
