#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <variant>

#include "triad/manifest.hpp"
#include "triad/series.hpp"
#include "triad/volume.hpp"

namespace triad {

struct PreprocessConfig {
  AxisCode target_orientation = AxisCode::ras();
  double target_spacing_mm = 1.0;
  Shape3 target_grid{256, 256, 128};
  bool quantize = true;

  void validate() const;
};

/// Frame floor((t - 1) / 2), 0-based: the middle frame, earlier on ties.
Volume select_3d_from_4d(const Volume4D& v);
int64_t middle_frame_index(int64_t t);

/// Permutes and flips axes so that every voxel keeps its world position
/// and the result is labelled `target`.
Volume reorient(const Volume& v, const AxisCode& target);

/// Trilinear sample at continuous index (x, y, z); coordinates outside the
/// grid are clamped to the edge.
double sample_trilinear(const Volume& v, double x, double y, double z);

/// Resamples onto an isotropic grid of `spacing` mm. Output voxel i along
/// axis a maps to input index (i + 0.5) * spacing / spacing_a - 0.5.
Volume resample_iso(const Volume& v, double spacing);

/// Trilinear resize onto exactly `grid`; output voxel i maps to input index
/// (i + 0.5) * n_in / n_out - 0.5 and spacing scales by n_in / n_out.
Volume resize_to(const Volume& v, Shape3 grid);

/// Per-volume min-max quantization into u16 with the mapping recorded in
/// intensity_offset / intensity_scale. A u16 input is returned unchanged.
Volume quantize_u16(const Volume& v);
/// Physical intensities as f32 (identity for f32 volumes).
Volume dequantize(const Volume& v);
double dequantize_value(const Volume& v, std::size_t index);

/// Min-max scaling of stored values to [0, 1] as f32; constant volumes map to zeros.
Volume normalize_unit(const Volume& v);

/// Zero-pads symmetrically to at least roi on every axis.
Volume pad_to(const Volume& v, int64_t roi);
/// Uniform crop offsets for a cube of side roi inside `shape` (after padding).
Shape3 roi_crop_offsets(Shape3 shape, int64_t roi, std::mt19937_64& rng);
Volume random_roi_crop(const Volume& v, int64_t roi, std::mt19937_64& rng);
Volume crop(const Volume& v, Shape3 offset, Shape3 size);

using PreprocessInput = std::variant<SeriesStack, Volume, Volume4D>;

struct PreprocessResult {
  Volume volume;
  ManifestRecord record;
};

/// assemble -> 4D select -> reorient -> resample -> resize -> quantize.
/// The record is `record` with its description carried through unchanged.
PreprocessResult preprocess_pipeline(const PreprocessInput& input, const PreprocessConfig& cfg, ManifestRecord record);

struct BatchReport {
  DatasetManifest output;
  std::vector<std::pair<std::string, std::string>> skipped;  // (id, reason)
};

/// Runs the pipeline over every record of `in`, writing <out_dir>/<id>.nii
/// and out_dir/manifest.jsonl. Records that fail any stage are logged and
/// skipped; output order follows input order.
BatchReport preprocess_manifest(const DatasetManifest& in, const std::filesystem::path& out_dir, const PreprocessConfig& cfg,
                                const std::function<void(const std::string&)>& log = {});

}  // namespace triad
