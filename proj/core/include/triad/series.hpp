#pragma once

#include <variant>
#include <vector>

#include "triad/volume.hpp"

namespace triad {

/// One 2D slice of an acquisition. Pixel (r, c) lies at
/// position + r * pixel_spacing[0] * row_dir + c * pixel_spacing[1] * col_dir.
struct Slice {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<float> pixels;  // row-major, rows * cols
  Vec3 position{};            // world (RAS, mm) position of pixel (0, 0)
  /// Acquisition order among slices that share a position (4D series).
  double acquisition_time = 0.0;
};

/// A stand-in for a DICOM series: slices with shared in-plane geometry.
struct SeriesStack {
  std::vector<Slice> slices;
  Vec3 row_dir{1.0, 0.0, 0.0};  // direction of increasing row index
  Vec3 col_dir{0.0, 1.0, 0.0};  // direction of increasing column index
  std::array<double, 2> pixel_spacing{1.0, 1.0};
};

/// Assembles slices into a volume with axes (row, column, slice). Slices are
/// ordered by their projection on the slice normal; when every position is
/// shared by k > 1 slices the result is a 4D series with t = k, frames
/// ordered by acquisition_time.
std::variant<Volume, Volume4D> stack_to_volume(const SeriesStack& stack);

/// Relative tolerance on slice-gap deviation from the median gap.
inline constexpr double kSliceSpacingTolerance = 0.01;

}  // namespace triad
