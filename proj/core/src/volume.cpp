#include "triad/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "triad/error.hpp"

namespace triad {

std::string_view to_string(DType dtype) { return dtype == DType::u16 ? "u16" : "f32"; }

namespace {

int pair_of(char c) {
  switch (c) {
    case 'L': case 'R': return 0;
    case 'P': case 'A': return 1;
    case 'I': case 'S': return 2;
    default: return -1;
  }
}

}  // namespace

AxisCode AxisCode::parse(std::string_view code) {
  if (code.size() != 3) fail(ErrorKind::orientation, "axis code must have 3 letters: '" + std::string(code) + "'");
  std::array<bool, 3> seen{};
  std::array<char, 3> letters{};
  for (std::size_t k = 0; k < 3; ++k) {
    const int p = pair_of(code[k]);
    if (p < 0 || seen[p]) fail(ErrorKind::orientation, "malformed axis code '" + std::string(code) + "'");
    seen[p] = true;
    letters[k] = code[k];
  }
  return AxisCode{letters};
}

int AxisCode::world_axis(std::size_t axis) const { return pair_of(letters_[axis]); }

int AxisCode::sign(std::size_t axis) const {
  const char c = letters_[axis];
  return (c == 'R' || c == 'A' || c == 'S') ? 1 : -1;
}

std::vector<AxisCode> AxisCode::all() {
  static constexpr std::array<std::array<char, 2>, 3> kPairs{{{'R', 'L'}, {'A', 'P'}, {'S', 'I'}}};
  std::array<int, 3> perm{0, 1, 2};
  std::vector<AxisCode> out;
  do {
    for (int flips = 0; flips < 8; ++flips) {
      std::array<char, 3> letters{};
      for (int k = 0; k < 3; ++k) letters[k] = kPairs[perm[k]][(flips >> k) & 1];
      out.push_back(AxisCode{letters});
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return out;
}

Volume Volume::zeros(Shape3 shape, Vec3 spacing, AxisCode orientation) {
  Volume v;
  v.shape = shape;
  v.data.assign(static_cast<std::size_t>(shape[0] * shape[1] * shape[2]), 0.0f);
  v.spacing = spacing;
  v.orientation = orientation;
  return v;
}

Vec3 Volume::world(double i, double j, double k) const {
  const std::array<double, 3> idx{i, j, k};
  Vec3 p = origin;
  for (std::size_t a = 0; a < 3; ++a) {
    p[orientation.world_axis(a)] += orientation.sign(a) * spacing[a] * idx[a];
  }
  return p;
}

void Volume::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (shape[a] < 1) fail(ErrorKind::geometry, "volume dims must be >= 1");
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) fail(ErrorKind::geometry, "volume spacing must be positive");
  }
  if (static_cast<int64_t>(data.size()) != voxel_count()) fail(ErrorKind::geometry, "data size does not match shape");
  if (dtype == DType::u16) {
    for (float x : data) {
      if (!(x >= 0.0f && x <= 65535.0f) || x != std::floor(x)) fail(ErrorKind::data, "u16 volume holds a non-integral or out-of-range value");
    }
  }
}

bool same_geometry(const Volume& a, const Volume& b) {
  return a.shape == b.shape && a.spacing == b.spacing && a.origin == b.origin && a.orientation == b.orientation;
}

bool bit_equal(const Volume& a, const Volume& b) {
  return same_geometry(a, b) && a.dtype == b.dtype && a.intensity_offset == b.intensity_offset &&
         a.intensity_scale == b.intensity_scale && a.data.size() == b.data.size() &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

std::pair<float, float> value_range(std::span<const float> values) {
  float lo = std::numeric_limits<float>::infinity();
  float hi = -lo;
  for (float x : values) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  return {lo, hi};
}

void Volume4D::validate() const {
  if (t() < 2) fail(ErrorKind::geometry, "4D volume needs at least 2 frames");
  for (const auto& f : frames) {
    f.validate();
    if (!same_geometry(f, frames.front())) fail(ErrorKind::geometry, "4D frames differ in geometry");
  }
}

LabelVolume LabelVolume::zeros(Shape3 shape) {
  LabelVolume l;
  l.shape = shape;
  l.data.assign(static_cast<std::size_t>(shape[0] * shape[1] * shape[2]), 0);
  return l;
}

void LabelVolume::validate(int n_classes) const {
  for (auto v : data) {
    if (v < 0 || v >= n_classes) fail(ErrorKind::label, "label " + std::to_string(v) + " outside [0, " + std::to_string(n_classes) + ")");
  }
}

}  // namespace triad
