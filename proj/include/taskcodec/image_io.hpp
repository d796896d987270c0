#pragma once

#include <string>

#include "taskcodec/tensor.hpp"

namespace taskcodec {

// Images on disk are 8-bit RGB; in memory they are float [3,H,W] in [0,1],
// mapped via v = byte / 255 and byte = round(v * 255) clamped.

Tensor load_image(const std::string& path);  // dispatches on magic bytes
Tensor load_ppm(const std::string& path);    // binary P6, maxval 255
Tensor load_png(const std::string& path);    // non-interlaced 8-bit RGB only

void save_ppm(const std::string& path, const Tensor& img);

// Grayscale P5 writer for label masks (one byte per pixel).
void save_pgm(const std::string& path, const unsigned char* data, int h, int w);

}  // namespace taskcodec
