#pragma once

#include <array>
#include <filesystem>
#include <variant>

#include "triad/volume.hpp"

namespace triad {

/// Size of the header plus the 4-byte extension flag; data starts here.
inline constexpr std::size_t kNiftiHeaderBytes = 348;
inline constexpr std::size_t kNiftiVoxOffset = 352;

enum NiftiDatatype : std::int16_t {
  kNiftiInt16 = 4,
  kNiftiFloat32 = 16,
  kNiftiUint16 = 512,
};

/// Reads a single-file little-endian NIfTI-1 3D image. u16 data stays
/// integral with the scaling recorded in intensity_offset/scale; int16 is
/// widened to f32 and scaled. A 4D file raises a format error; use
/// read_nifti_4d or read_nifti_any for those.
Volume read_nifti(const std::filesystem::path& path);
Volume4D read_nifti_4d(const std::filesystem::path& path);
std::variant<Volume, Volume4D> read_nifti_any(const std::filesystem::path& path);

/// Writes a 352-byte-header NIfTI-1 file. Spacing and origin are stored at
/// 32-bit precision; the u16 intensity mapping is stored exactly.
void write_nifti(const Volume& vol, const std::filesystem::path& path);
void write_nifti_4d(const Volume4D& vol, const std::filesystem::path& path);

/// Snaps each sform column to its dominant world axis. Columns more than
/// 45 degrees off-axis, or two columns on the same axis, raise an
/// orientation error.
AxisCode orientation_from_affine(const std::array<std::array<double, 4>, 3>& srow);

}  // namespace triad
