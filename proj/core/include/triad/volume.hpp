#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace triad {

using Shape3 = std::array<int64_t, 3>;
using Vec3 = std::array<double, 3>;

enum class DType : std::uint8_t { u16, f32 };

std::string_view to_string(DType dtype);

/// Three-letter anatomical axis code. Character k names the direction in
/// which voxel index k increases, e.g. "RAS" or "LPS".
class AxisCode {
 public:
  AxisCode() = default;

  /// Throws orientation error unless the code uses exactly one letter from
  /// each of {L,R}, {A,P}, {S,I}.
  static AxisCode parse(std::string_view code);
  static AxisCode ras() { return AxisCode{{'R', 'A', 'S'}}; }

  char operator[](std::size_t axis) const { return letters_[axis]; }
  std::string str() const { return {letters_.begin(), letters_.end()}; }

  /// World axis (0 = x/L-R, 1 = y/P-A, 2 = z/I-S) that voxel axis `axis` runs along.
  int world_axis(std::size_t axis) const;
  /// +1 when voxel axis `axis` points toward R, A or S; -1 otherwise.
  int sign(std::size_t axis) const;

  /// All 48 valid codes, in a fixed order.
  static std::vector<AxisCode> all();

  friend bool operator==(const AxisCode&, const AxisCode&) = default;

 private:
  explicit AxisCode(std::array<char, 3> letters) : letters_(letters) {}
  std::array<char, 3> letters_{'R', 'A', 'S'};
};

/// A 3D scalar grid with physical geometry. Data is stored row-major with
/// axis 2 varying fastest. u16 volumes hold integral values in [0, 65535]
/// inside the float buffer; intensity_offset + intensity_scale * stored
/// maps them back to physical intensities.
struct Volume {
  Shape3 shape{1, 1, 1};
  std::vector<float> data = std::vector<float>(1, 0.0f);
  Vec3 spacing{1.0, 1.0, 1.0};
  /// World (RAS, mm) position of voxel (0,0,0).
  Vec3 origin{0.0, 0.0, 0.0};
  AxisCode orientation = AxisCode::ras();
  DType dtype = DType::f32;
  double intensity_offset = 0.0;
  double intensity_scale = 1.0;

  static Volume zeros(Shape3 shape, Vec3 spacing = {1.0, 1.0, 1.0},
                      AxisCode orientation = AxisCode::ras());

  int64_t voxel_count() const { return shape[0] * shape[1] * shape[2]; }

  std::size_t offset(int64_t i, int64_t j, int64_t k) const {
    return static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k);
  }
  float at(int64_t i, int64_t j, int64_t k) const { return data[offset(i, j, k)]; }
  float& at(int64_t i, int64_t j, int64_t k) { return data[offset(i, j, k)]; }

  /// World position of the centre of voxel (i, j, k).
  Vec3 world(double i, double j, double k) const;

  /// Throws on any broken invariant (shape, spacing, u16 range, buffer size).
  void validate() const;
};

/// Field-for-field equality with bitwise comparison of the data buffer.
bool bit_equal(const Volume& a, const Volume& b);
/// Same shape, spacing, origin and orientation.
bool same_geometry(const Volume& a, const Volume& b);

std::pair<float, float> value_range(std::span<const float> values);

/// Time series of geometrically identical frames (t >= 2).
struct Volume4D {
  std::vector<Volume> frames;

  int64_t t() const { return static_cast<int64_t>(frames.size()); }
  void validate() const;
};

/// Integer class-id grid sharing geometry with an image.
struct LabelVolume {
  Shape3 shape{1, 1, 1};
  std::vector<std::int32_t> data = std::vector<std::int32_t>(1, 0);

  static LabelVolume zeros(Shape3 shape);
  int64_t voxel_count() const { return shape[0] * shape[1] * shape[2]; }
  std::size_t offset(int64_t i, int64_t j, int64_t k) const {
    return static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k);
  }
  std::int32_t at(int64_t i, int64_t j, int64_t k) const { return data[offset(i, j, k)]; }
  std::int32_t& at(int64_t i, int64_t j, int64_t k) { return data[offset(i, j, k)]; }

  /// Throws label error when any value falls outside [0, n_classes).
  void validate(int n_classes) const;
  friend bool operator==(const LabelVolume&, const LabelVolume&) = default;
};

}  // namespace triad
