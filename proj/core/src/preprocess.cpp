#include "triad/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "triad/error.hpp"
#include "triad/nifti.hpp"

namespace triad {

void PreprocessConfig::validate() const {
  if (!(target_spacing_mm > 0.0)) fail(ErrorKind::config, "target spacing must be positive");
  for (auto d : target_grid) {
    if (d < 2) fail(ErrorKind::config, "target grid dims must be >= 2");
  }
}

int64_t middle_frame_index(int64_t t) {
  if (t < 2) fail(ErrorKind::geometry, "4D selection needs t >= 2");
  return (t - 1) / 2;
}

Volume select_3d_from_4d(const Volume4D& v) {
  v.validate();
  return v.frames[static_cast<std::size_t>(middle_frame_index(v.t()))];
}

Volume reorient(const Volume& v, const AxisCode& target) {
  const AxisCode& src = v.orientation;
  if (src == target) return v;
  std::array<int, 3> from{};  // source axis feeding each output axis
  std::array<bool, 3> flip{};
  for (int t = 0; t < 3; ++t) {
    for (int s = 0; s < 3; ++s) {
      if (src.world_axis(s) == target.world_axis(t)) {
        from[t] = s;
        flip[t] = src.sign(s) != target.sign(t);
      }
    }
  }
  Volume out = v;
  for (int t = 0; t < 3; ++t) {
    out.shape[t] = v.shape[from[t]];
    out.spacing[t] = v.spacing[from[t]];
  }
  out.orientation = target;

  auto source_index = [&](int64_t o0, int64_t o1, int64_t o2) {
    const std::array<int64_t, 3> o{o0, o1, o2};
    std::array<int64_t, 3> in{};
    for (int t = 0; t < 3; ++t) in[from[t]] = flip[t] ? out.shape[t] - 1 - o[t] : o[t];
    return in;
  };
  const auto corner = source_index(0, 0, 0);
  out.origin = v.world(static_cast<double>(corner[0]), static_cast<double>(corner[1]), static_cast<double>(corner[2]));
  for (int64_t a = 0; a < out.shape[0]; ++a) {
    for (int64_t b = 0; b < out.shape[1]; ++b) {
      for (int64_t c = 0; c < out.shape[2]; ++c) {
        const auto in = source_index(a, b, c);
        out.at(a, b, c) = v.at(in[0], in[1], in[2]);
      }
    }
  }
  return out;
}

double sample_trilinear(const Volume& v, double x, double y, double z) {
  const std::array<double, 3> p{x, y, z};
  std::array<int64_t, 3> lo{};
  std::array<int64_t, 3> hi{};
  std::array<double, 3> f{};
  for (int a = 0; a < 3; ++a) {
    const double c = std::clamp(p[a], 0.0, static_cast<double>(v.shape[a] - 1));
    lo[a] = static_cast<int64_t>(std::floor(c));
    hi[a] = std::min(lo[a] + 1, v.shape[a] - 1);
    f[a] = c - static_cast<double>(lo[a]);
  }
  double acc = 0.0;
  double vmin = std::numeric_limits<double>::infinity();
  double vmax = -vmin;
  for (int corner = 0; corner < 8; ++corner) {
    const int64_t i = (corner & 1) ? hi[0] : lo[0];
    const int64_t j = (corner & 2) ? hi[1] : lo[1];
    const int64_t k = (corner & 4) ? hi[2] : lo[2];
    const double w = ((corner & 1) ? f[0] : 1.0 - f[0]) * ((corner & 2) ? f[1] : 1.0 - f[1]) * ((corner & 4) ? f[2] : 1.0 - f[2]);
    const double val = v.at(i, j, k);
    acc += w * val;
    vmin = std::min(vmin, val);
    vmax = std::max(vmax, val);
  }
  // Convex combination; the clamp only absorbs rounding.
  return std::clamp(acc, vmin, vmax);
}

namespace {

Volume resample_grid(const Volume& in, Shape3 out_shape, const Vec3& ratio) {
  if (out_shape == in.shape && ratio == Vec3{1.0, 1.0, 1.0}) return in;
  const Volume src = dequantize(in);
  Volume out = Volume::zeros(out_shape, {in.spacing[0] * ratio[0], in.spacing[1] * ratio[1], in.spacing[2] * ratio[2]}, in.orientation);
  out.origin = in.world(0.5 * (ratio[0] - 1.0), 0.5 * (ratio[1] - 1.0), 0.5 * (ratio[2] - 1.0));
  for (int64_t i = 0; i < out_shape[0]; ++i) {
    const double x = (static_cast<double>(i) + 0.5) * ratio[0] - 0.5;
    for (int64_t j = 0; j < out_shape[1]; ++j) {
      const double y = (static_cast<double>(j) + 0.5) * ratio[1] - 0.5;
      for (int64_t k = 0; k < out_shape[2]; ++k) {
        const double z = (static_cast<double>(k) + 0.5) * ratio[2] - 0.5;
        out.at(i, j, k) = static_cast<float>(sample_trilinear(src, x, y, z));
      }
    }
  }
  return out;
}

void require_finite(const Volume& v) {
  for (float x : v.data) {
    if (!std::isfinite(x)) fail(ErrorKind::data, "volume contains NaN or Inf");
  }
}

}  // namespace

Volume resample_iso(const Volume& v, double spacing) {
  if (!(spacing > 0.0)) fail(ErrorKind::config, "resample spacing must be positive");
  Shape3 shape{};
  Vec3 ratio{};
  for (int a = 0; a < 3; ++a) {
    shape[a] = std::max<int64_t>(1, std::llround(static_cast<double>(v.shape[a]) * v.spacing[a] / spacing));
    ratio[a] = spacing / v.spacing[a];
  }
  return resample_grid(v, shape, ratio);
}

Volume resize_to(const Volume& v, Shape3 grid) {
  for (auto d : grid) {
    if (d < 2) fail(ErrorKind::config, "resize grid dims must be >= 2");
  }
  Vec3 ratio{};
  for (int a = 0; a < 3; ++a) ratio[a] = static_cast<double>(v.shape[a]) / static_cast<double>(grid[a]);
  return resample_grid(v, grid, ratio);
}

Volume quantize_u16(const Volume& v) {
  if (v.dtype == DType::u16) return v;
  require_finite(v);
  const auto [lo, hi] = value_range(v.data);
  Volume out = v;
  out.dtype = DType::u16;
  out.intensity_offset = lo;
  if (hi == lo) {
    std::fill(out.data.begin(), out.data.end(), 0.0f);
    out.intensity_scale = 0.0;
    return out;
  }
  const double range = static_cast<double>(hi) - static_cast<double>(lo);
  out.intensity_scale = range / 65535.0;
  for (std::size_t n = 0; n < v.data.size(); ++n) {
    out.data[n] = static_cast<float>(std::round((static_cast<double>(v.data[n]) - lo) / range * 65535.0));
  }
  return out;
}

double dequantize_value(const Volume& v, std::size_t index) {
  if (v.dtype == DType::f32) return v.data[index];
  return v.intensity_offset + v.intensity_scale * static_cast<double>(v.data[index]);
}

Volume dequantize(const Volume& v) {
  if (v.dtype == DType::f32) return v;
  Volume out = v;
  for (std::size_t n = 0; n < v.data.size(); ++n) out.data[n] = static_cast<float>(dequantize_value(v, n));
  out.dtype = DType::f32;
  out.intensity_offset = 0.0;
  out.intensity_scale = 1.0;
  return out;
}

Volume normalize_unit(const Volume& v) {
  require_finite(v);
  const auto [lo, hi] = value_range(v.data);
  Volume out = v;
  out.dtype = DType::f32;
  out.intensity_offset = 0.0;
  out.intensity_scale = 1.0;
  if (hi == lo) {
    std::fill(out.data.begin(), out.data.end(), 0.0f);
    return out;
  }
  const double range = static_cast<double>(hi) - static_cast<double>(lo);
  for (std::size_t n = 0; n < v.data.size(); ++n) out.data[n] = static_cast<float>((static_cast<double>(v.data[n]) - lo) / range);
  return out;
}

Volume crop(const Volume& v, Shape3 offset, Shape3 size) {
  for (int a = 0; a < 3; ++a) {
    if (offset[a] < 0 || size[a] < 1 || offset[a] + size[a] > v.shape[a]) fail(ErrorKind::shape, "crop window outside the volume");
  }
  Volume out = v;
  out.shape = size;
  out.data.assign(static_cast<std::size_t>(size[0] * size[1] * size[2]), 0.0f);
  out.origin = v.world(static_cast<double>(offset[0]), static_cast<double>(offset[1]), static_cast<double>(offset[2]));
  for (int64_t i = 0; i < size[0]; ++i) {
    for (int64_t j = 0; j < size[1]; ++j) {
      const float* row = &v.data[v.offset(offset[0] + i, offset[1] + j, offset[2])];
      std::copy(row, row + size[2], &out.data[out.offset(i, j, 0)]);
    }
  }
  return out;
}

Volume pad_to(const Volume& v, int64_t roi) {
  Shape3 shape = v.shape;
  Shape3 before{};
  bool needed = false;
  for (int a = 0; a < 3; ++a) {
    if (v.shape[a] < roi) {
      shape[a] = roi;
      before[a] = (roi - v.shape[a]) / 2;
      needed = true;
    }
  }
  if (!needed) return v;
  Volume out = v;
  out.shape = shape;
  out.data.assign(static_cast<std::size_t>(shape[0] * shape[1] * shape[2]), 0.0f);
  out.origin = v.world(-static_cast<double>(before[0]), -static_cast<double>(before[1]), -static_cast<double>(before[2]));
  for (int64_t i = 0; i < v.shape[0]; ++i) {
    for (int64_t j = 0; j < v.shape[1]; ++j) {
      for (int64_t k = 0; k < v.shape[2]; ++k) out.at(i + before[0], j + before[1], k + before[2]) = v.at(i, j, k);
    }
  }
  return out;
}

Shape3 roi_crop_offsets(Shape3 shape, int64_t roi, std::mt19937_64& rng) {
  if (roi < 1) fail(ErrorKind::config, "roi must be >= 1");
  Shape3 off{};
  for (int a = 0; a < 3; ++a) {
    const int64_t span = std::max<int64_t>(shape[a], roi) - roi;
    off[a] = std::uniform_int_distribution<int64_t>(0, span)(rng);
  }
  return off;
}

Volume random_roi_crop(const Volume& v, int64_t roi, std::mt19937_64& rng) {
  const Volume padded = pad_to(v, roi);
  const Shape3 off = roi_crop_offsets(padded.shape, roi, rng);
  return crop(padded, off, {roi, roi, roi});
}

PreprocessResult preprocess_pipeline(const PreprocessInput& input, const PreprocessConfig& cfg, ManifestRecord record) {
  cfg.validate();
  Volume v = std::visit(
      [](const auto& in) -> Volume {
        using T = std::decay_t<decltype(in)>;
        if constexpr (std::is_same_v<T, SeriesStack>) {
          auto assembled = stack_to_volume(in);
          if (auto* v4 = std::get_if<Volume4D>(&assembled)) return select_3d_from_4d(*v4);
          return std::get<Volume>(std::move(assembled));
        } else if constexpr (std::is_same_v<T, Volume4D>) {
          return select_3d_from_4d(in);
        } else {
          return in;
        }
      },
      input);
  v.validate();
  v = reorient(v, cfg.target_orientation);
  v = resample_iso(v, cfg.target_spacing_mm);
  v = resize_to(v, cfg.target_grid);
  if (cfg.quantize) v = quantize_u16(v);
  return {std::move(v), std::move(record)};
}

BatchReport preprocess_manifest(const DatasetManifest& in, const std::filesystem::path& out_dir, const PreprocessConfig& cfg,
                                const std::function<void(const std::string&)>& log) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  BatchReport report;
  report.output.base_dir = out_dir;
  for (const auto& rec : in.records) {
    try {
      auto loaded = read_nifti_any(in.resolve(rec));
      PreprocessInput input = std::visit([](auto&& v) -> PreprocessInput { return std::move(v); }, std::move(loaded));
      auto result = preprocess_pipeline(input, cfg, rec);
      const std::string name = rec.id + ".nii";
      write_nifti(result.volume, out_dir / name);
      result.record.volume_path = name;
      report.output.records.push_back(std::move(result.record));
    } catch (const Error& e) {
      report.skipped.emplace_back(rec.id, e.what());
      if (log) log("skipping " + rec.id + ": " + e.what());
    }
  }
  save_manifest(report.output, out_dir / "manifest.jsonl");
  return report;
}

}  // namespace triad
