#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>

#include "triad/manifest.hpp"
#include "triad/text.hpp"
#include "triad/volume.hpp"

namespace triad {

struct PhantomSpec {
  Shape3 size{32, 32, 32};
  int n_objects = 3;
  std::string modality = "T1w";  // T1w or T2w
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Phantom {
  Volume image;
  LabelVolume labels;  // 0 background, 1..n_objects
  ImagingMeta meta;
};

/// Random ellipsoids on a flat background. T1w puts foreground at 0.8 and
/// background at 0.2, T2w the reverse; Gaussian noise is added and the
/// result clamped to [0, 1]. Each object only claims voxels no earlier
/// object holds, so every label is nonempty.
Phantom gen_phantom(const PhantomSpec& spec);

struct RegPair {
  Volume moving;
  Volume fixed;
  LabelVolume moving_labels;
  LabelVolume fixed_labels;
  torch::Tensor field;  // [1, 3, D, H, W] float, voxels
};

/// fixed = gen_phantom(spec); the field is smoothed white noise rescaled so
/// its largest displacement norm equals `amplitude` (at most 4 voxels).
RegPair gen_reg_pair(const PhantomSpec& spec, double amplitude = 3.0, double smoothing_sigma = 3.0);

/// Writes n phantoms with alternating modality and varied geometry as raw
/// NIfTI files plus manifest.jsonl (split pretrain) under out_dir.
DatasetManifest write_phantom_corpus(const std::filesystem::path& out_dir, int n, const PhantomSpec& base);

}  // namespace triad
