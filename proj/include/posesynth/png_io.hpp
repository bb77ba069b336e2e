#pragma once

#include <string>

#include "posesynth/raster.hpp"

namespace posesynth {

// 8-bit RGB; channel values quantized to k/255
void write_png(const std::string& path, const ImageBuffer& img);
ImageBuffer read_png(const std::string& path);

}  // namespace posesynth
