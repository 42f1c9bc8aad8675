#pragma once

#include <string>

#include "tfl/tensor.hpp"

namespace tfl {

/// Reads a PNG or PGM file (chosen by extension) into H x W x C float64 with
/// values scaled to [0,1]. C is 1 for grayscale sources, 3 for color; 8-bit
/// samples scale by 255, 16-bit by 65535. Alpha channels are dropped.
Tensor read_image(const std::string& path);

Tensor read_png(const std::string& path);
Tensor read_pgm(const std::string& path);

/// Writes an H x W x 3 (or H x W x 1) [0,1] image as 8-bit RGB PNG with fixed
/// encoder settings, so identical tensors produce identical files.
void write_png8(const std::string& path, const Tensor& image);

/// Writes an H x W x 1 (or H x W x 3 taking channel 0) [0,1] image as a
/// binary 16-bit PGM (P5, maxval 65535, big-endian samples).
void write_pgm16(const std::string& path, const Tensor& image);

} // namespace tfl
