#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tfl/tensor.hpp"

namespace tfl {

/// One annotated image. Points are pixel coordinates (x row 0, y row 1), one
/// column per landmark, in a y-down frame.
struct Sample {
  Tensor image;  // H x W x 3, values in [0,1]
  Tensor points; // 2 x N, pixel units
  std::string source_id;
};

enum class Split { train, val, test };
std::string to_string(Split s);

struct Dataset {
  std::vector<Sample> samples;
  Split split = Split::train;
  int64_t height = 0;
  int64_t width = 0;

  int64_t size() const { return static_cast<int64_t>(samples.size()); }
};

/// Landmarks scaled into [0,1] by image width (x) and height (y).
Tensor normalized_points(const Sample& s);

/// Reads `annotations.csv` (header `filename,x0,y0,...,x5,y5`) plus the
/// referenced PNG/PGM images from `dir`. Grayscale images are replicated to 3
/// channels. Malformed rows, missing files, and out-of-bounds points raise an
/// IoError naming the row.
Dataset load_dataset(const std::string& dir);

/// Writes annotations.csv and one 16-bit PGM per sample (channel 0). A
/// write/load round trip preserves points exactly and pixels to 1/65535.
void write_dataset(const Dataset& d, const std::string& dir);

/// Rotates image and landmarks by theta degrees about the image center
/// ((W-1)/2, (H-1)/2). Positive theta is counterclockwise in the y-down pixel
/// frame. The image is resampled by inverse-mapped bilinear interpolation with
/// zero fill; points are left unclipped.
Sample rotate_sample(const Sample& s, double theta_deg);

/// Originals followed by one left ([20,30] degree) and one right ([-30,-20])
/// rotation per sample, in sample order; rotated landmarks are clamped into
/// frame. Output size is exactly 3x the input.
Dataset augment_dataset(const Dataset& d, RngStream& rng);

/// Synthetic thermal-like faces: a smooth background, a warm elliptical face,
/// a brighter perinasal arc, and six bright landmark bumps along the arc whose
/// peaks stay recoverable from pixels alone.
Dataset synth_generate(int64_t count, int64_t height, int64_t width, RngStream& rng);

/// Seeded shuffle split; the second part holds round(val_fraction * size).
std::pair<Dataset, Dataset> split_dataset(const Dataset& d, double val_fraction, RngStream& rng);

} // namespace tfl
