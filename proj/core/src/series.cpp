#include "triad/series.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "triad/error.hpp"

namespace triad {
namespace {

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

char snap(const Vec3& d) {
  static constexpr std::array<std::array<char, 2>, 3> kLetters{{{'R', 'L'}, {'A', 'P'}, {'S', 'I'}}};
  int best = 0;
  for (int r = 1; r < 3; ++r) {
    if (std::abs(d[r]) > std::abs(d[best])) best = r;
  }
  if (std::abs(d[best]) < std::sqrt(0.5) - 1e-12) fail(ErrorKind::orientation, "slice direction is more than 45 degrees oblique");
  return kLetters[best][d[best] > 0 ? 0 : 1];
}

}  // namespace

std::variant<Volume, Volume4D> stack_to_volume(const SeriesStack& stack) {
  const auto& slices = stack.slices;
  if (slices.size() < 2) fail(ErrorKind::geometry, "a series needs at least 2 slices");
  const int64_t rows = slices.front().rows;
  const int64_t cols = slices.front().cols;
  for (const auto& s : slices) {
    if (s.rows != rows || s.cols != cols || static_cast<int64_t>(s.pixels.size()) != rows * cols || rows < 1 || cols < 1) {
      fail(ErrorKind::geometry, "slices have inconsistent shapes");
    }
  }
  if (!(stack.pixel_spacing[0] > 0.0) || !(stack.pixel_spacing[1] > 0.0)) fail(ErrorKind::geometry, "pixel spacing must be positive");
  const double row_norm = std::sqrt(dot(stack.row_dir, stack.row_dir));
  const double col_norm = std::sqrt(dot(stack.col_dir, stack.col_dir));
  if (std::abs(row_norm - 1.0) > 1e-6 || std::abs(col_norm - 1.0) > 1e-6 || std::abs(dot(stack.row_dir, stack.col_dir)) > 1e-6) {
    fail(ErrorKind::geometry, "slice orientation vectors must be orthonormal");
  }
  const Vec3 normal = cross(stack.row_dir, stack.col_dir);

  // Sort key: (position along normal, acquisition time, pixel content).
  std::vector<std::size_t> order(slices.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> proj(slices.size());
  for (std::size_t s = 0; s < slices.size(); ++s) proj[s] = dot(slices[s].position, normal);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (proj[a] != proj[b]) return proj[a] < proj[b];
    if (slices[a].acquisition_time != slices[b].acquisition_time) return slices[a].acquisition_time < slices[b].acquisition_time;
    return std::lexicographical_compare(slices[a].pixels.begin(), slices[a].pixels.end(), slices[b].pixels.begin(), slices[b].pixels.end());
  });

  // Group slices sharing a position (to 1e-4 mm).
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t idx : order) {
    if (groups.empty() || std::abs(proj[idx] - proj[groups.back().front()]) > 1e-4) groups.emplace_back();
    groups.back().push_back(idx);
  }
  const std::size_t t = groups.front().size();
  for (const auto& g : groups) {
    if (g.size() != t) fail(ErrorKind::geometry, "positions are not repeated a uniform number of times");
  }
  if (groups.size() < 2) fail(ErrorKind::geometry, "a series needs at least 2 distinct slice positions");

  std::vector<double> gaps;
  for (std::size_t g = 1; g < groups.size(); ++g) gaps.push_back(proj[groups[g].front()] - proj[groups[g - 1].front()]);
  std::vector<double> sorted_gaps = gaps;
  std::nth_element(sorted_gaps.begin(), sorted_gaps.begin() + static_cast<std::ptrdiff_t>(sorted_gaps.size() / 2), sorted_gaps.end());
  const double median = sorted_gaps[sorted_gaps.size() / 2];
  for (double g : gaps) {
    if (std::abs(g - median) > kSliceSpacingTolerance * median) fail(ErrorKind::spacing, "irregular slice spacing beyond 1% of the median gap");
  }
  const double slice_spacing = (proj[groups.back().front()] - proj[groups.front().front()]) / static_cast<double>(groups.size() - 1);

  const std::string code{snap(stack.row_dir), snap(stack.col_dir), snap(normal)};
  const AxisCode orientation = AxisCode::parse(code);
  const int64_t depth = static_cast<int64_t>(groups.size());

  std::vector<Volume> frames;
  for (std::size_t f = 0; f < t; ++f) {
    Volume v = Volume::zeros({rows, cols, depth}, {stack.pixel_spacing[0], stack.pixel_spacing[1], slice_spacing}, orientation);
    v.origin = slices[groups.front()[f]].position;
    for (int64_t k = 0; k < depth; ++k) {
      const auto& px = slices[groups[k][f]].pixels;
      for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < cols; ++j) v.at(i, j, k) = px[i * cols + j];
      }
    }
    frames.push_back(std::move(v));
  }
  if (t == 1) return std::move(frames.front());
  return Volume4D{std::move(frames)};
}

}  // namespace triad
