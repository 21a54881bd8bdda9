#include "triad/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "triad/error.hpp"
#include "triad/hash.hpp"
#include "triad/models.hpp"
#include "triad/nifti.hpp"
#include "triad/preprocess.hpp"

namespace triad {

namespace {

constexpr int kPlacementTries = 100;

constexpr float kBright = 0.8f;
constexpr float kDark = 0.2f;

ImagingMeta phantom_meta(const std::string& modality, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "meta"));
  static const char* vendors[] = {"Siemens", "GE", "Philips"};
  ImagingMeta m;
  m.modality = modality;
  m.field_strength = (rng() % 2 == 0) ? 1.5 : 3.0;
  if (modality == "T1w") {
    m.tr_ms = 2300.0;
    m.te_ms = 2.98;
  } else {
    m.tr_ms = 3200.0;
    m.te_ms = 409.0;
  }
  m.manufacturer = vendors[rng() % 3];
  return m;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  return k;
}

// Separable smoothing with edge clamping, in place on a row-major grid.
void smooth(std::vector<double>& g, const Shape3& s, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const int64_t stride[3] = {s[1] * s[2], s[2], 1};
  std::vector<double> out(g.size());
  for (int axis = 0; axis < 3; ++axis) {
    for (int64_t i = 0; i < s[0]; ++i)
      for (int64_t j = 0; j < s[1]; ++j)
        for (int64_t l = 0; l < s[2]; ++l) {
          const int64_t idx[3] = {i, j, l};
          const int64_t base = i * stride[0] + j * stride[1] + l - idx[axis] * stride[axis];
          double acc = 0.0;
          for (int t = -r; t <= r; ++t) {
            const int64_t p = std::clamp<int64_t>(idx[axis] + t, 0, s[axis] - 1);
            acc += k[static_cast<std::size_t>(t + r)] * g[static_cast<std::size_t>(base + p * stride[axis])];
          }
          out[static_cast<std::size_t>(i * stride[0] + j * stride[1] + l)] = acc;
        }
    g.swap(out);
  }
}

torch::Tensor as_tensor(const Volume& v) {
  return torch::from_blob(const_cast<float*>(v.data.data()), {1, 1, v.shape[0], v.shape[1], v.shape[2]}, torch::kFloat).clone();
}

}  // namespace

void PhantomSpec::validate() const {
  for (auto d : size) {
    if (d < 16) fail(ErrorKind::validation, "phantom dimensions must be >= 16");
  }
  if (n_objects < 1) fail(ErrorKind::validation, "n_objects must be >= 1");
  if (!(noise_sigma >= 0.0)) fail(ErrorKind::validation, "noise_sigma must be >= 0");
  if (modality != "T1w" && modality != "T2w") fail(ErrorKind::validation, "phantom modality must be T1w or T2w, got " + modality);
}

Phantom gen_phantom(const PhantomSpec& spec) {
  spec.validate();
  Phantom p;
  p.labels = LabelVolume::zeros(spec.size);
  std::mt19937_64 rng(derive_seed(spec.seed, "ellipsoids"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double min_dim = static_cast<double>(*std::min_element(spec.size.begin(), spec.size.end()));

  for (int obj = 1; obj <= spec.n_objects; ++obj) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementTries && !placed; ++attempt) {
      std::array<double, 3> radius{}, centre{};
      for (int a = 0; a < 3; ++a) {
        radius[a] = std::max(1.5, min_dim * (0.12 + 0.16 * unit(rng)));
        const double lo = radius[a];
        const double hi = static_cast<double>(spec.size[a]) - 1.0 - radius[a];
        centre[a] = lo + (hi - lo) * unit(rng);
      }
      std::vector<std::size_t> fresh;
      for (int64_t i = 0; i < spec.size[0]; ++i)
        for (int64_t j = 0; j < spec.size[1]; ++j)
          for (int64_t k = 0; k < spec.size[2]; ++k) {
            const double di = (static_cast<double>(i) - centre[0]) / radius[0];
            const double dj = (static_cast<double>(j) - centre[1]) / radius[1];
            const double dk = (static_cast<double>(k) - centre[2]) / radius[2];
            if (di * di + dj * dj + dk * dk <= 1.0 && p.labels.at(i, j, k) == 0) fresh.push_back(p.labels.offset(i, j, k));
          }
      if (fresh.empty()) continue;
      for (auto o : fresh) p.labels.data[o] = obj;
      placed = true;
    }
    if (!placed) {
      fail(ErrorKind::placement, "object " + std::to_string(obj) + " fully overlaps earlier objects after " + std::to_string(kPlacementTries) +
                                     " tries");
    }
  }

  p.image = Volume::zeros(spec.size);
  const bool t1 = spec.modality == "T1w";
  const float fg = t1 ? kBright : kDark;
  const float bg = t1 ? kDark : kBright;
  std::mt19937_64 noise_rng(derive_seed(spec.seed, "noise"));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t o = 0; o < p.image.data.size(); ++o) {
    double v = p.labels.data[o] > 0 ? fg : bg;
    if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise(noise_rng);
    p.image.data[o] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  p.meta = phantom_meta(spec.modality, spec.seed);
  return p;
}

RegPair gen_reg_pair(const PhantomSpec& spec, double amplitude, double smoothing_sigma) {
  if (!(amplitude >= 0.0 && amplitude <= 4.0)) fail(ErrorKind::validation, "field amplitude must lie in [0, 4] voxels");
  if (!(smoothing_sigma > 0.0)) fail(ErrorKind::validation, "smoothing sigma must be > 0");
  Phantom fixed = gen_phantom(spec);
  RegPair r;
  r.fixed = fixed.image;
  r.fixed_labels = fixed.labels;
  const Shape3 s = spec.size;
  const auto n = static_cast<std::size_t>(s[0] * s[1] * s[2]);
  r.field = torch::zeros({1, 3, s[0], s[1], s[2]}, torch::kFloat);
  if (amplitude == 0.0) {
    r.moving = r.fixed;
    r.moving_labels = r.fixed_labels;
    return r;
  }

  // Noise is drawn on a grid padded by the kernel radius so that edge voxels
  // see a full kernel, then cropped back.
  std::mt19937_64 rng(derive_seed(spec.seed, "field"));
  std::normal_distribution<double> g(0.0, 1.0);
  const int64_t pad = static_cast<int64_t>(gaussian_kernel(smoothing_sigma).size() / 2);
  const Shape3 ps{s[0] + 2 * pad, s[1] + 2 * pad, s[2] + 2 * pad};
  std::array<std::vector<double>, 3> comp;
  for (auto& c : comp) {
    std::vector<double> big(static_cast<std::size_t>(ps[0] * ps[1] * ps[2]));
    for (auto& x : big) x = g(rng);
    smooth(big, ps, smoothing_sigma);
    c.resize(n);
    for (int64_t i = 0; i < s[0]; ++i)
      for (int64_t j = 0; j < s[1]; ++j)
        for (int64_t k = 0; k < s[2]; ++k) {
          c[static_cast<std::size_t>((i * s[1] + j) * s[2] + k)] = big[static_cast<std::size_t>(((i + pad) * ps[1] + j + pad) * ps[2] + k + pad)];
        }
  }
  double peak = 0.0;
  for (std::size_t o = 0; o < n; ++o) peak = std::max(peak, std::sqrt(comp[0][o] * comp[0][o] + comp[1][o] * comp[1][o] + comp[2][o] * comp[2][o]));
  const double scale = amplitude / peak;
  auto acc = r.field.accessor<float, 5>();
  for (int64_t i = 0; i < s[0]; ++i)
    for (int64_t j = 0; j < s[1]; ++j)
      for (int64_t k = 0; k < s[2]; ++k) {
        const auto o = static_cast<std::size_t>((i * s[1] + j) * s[2] + k);
        for (int a = 0; a < 3; ++a) acc[0][a][i][j][k] = static_cast<float>(comp[static_cast<std::size_t>(a)][o] * scale);
      }

  torch::NoGradGuard no_grad;
  auto warped = warp(as_tensor(r.fixed), r.field, WarpMode::trilinear).contiguous();
  r.moving = r.fixed;
  std::copy_n(warped.data_ptr<float>(), n, r.moving.data.begin());

  auto lab = torch::from_blob(r.fixed_labels.data.data(), {1, 1, s[0], s[1], s[2]}, torch::kInt).to(torch::kFloat);
  auto wl = warp(lab, r.field, WarpMode::nearest).round().to(torch::kInt).contiguous();
  r.moving_labels = r.fixed_labels;
  std::copy_n(wl.data_ptr<int>(), n, r.moving_labels.data.begin());
  return r;
}

DatasetManifest write_phantom_corpus(const std::filesystem::path& out_dir, int n, const PhantomSpec& base) {
  if (n < 1) fail(ErrorKind::validation, "corpus size must be >= 1");
  std::filesystem::create_directories(out_dir);
  static const char* codes[] = {"RAS", "LPS", "LAS", "RPI"};
  static const double spacings[] = {1.0, 1.25, 0.8};
  DatasetManifest m;
  m.base_dir = out_dir;
  for (int i = 0; i < n; ++i) {
    PhantomSpec s = base;
    s.seed = derive_seed(base.seed, "corpus", static_cast<std::uint64_t>(i));
    s.modality = (i % 2 == 0) ? "T1w" : "T2w";
    Phantom p = gen_phantom(s);
    Volume v = p.image;
    const double sp = spacings[i % 3];
    v.spacing = {sp, sp, sp};
    v = reorient(v, AxisCode::parse(codes[i % 4]));

    char id[32];
    std::snprintf(id, sizeof id, "phantom_%04d", i);
    write_nifti(v, out_dir / (std::string(id) + ".nii"));
    ManifestRecord r;
    r.id = id;
    r.volume_path = std::string(id) + ".nii";
    r.organ = "phantom";
    r.modality = s.modality;
    r.description = build_description(p.meta);
    r.split = Split::pretrain;
    m.records.push_back(r);
  }
  save_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

}  // namespace triad
