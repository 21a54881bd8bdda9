// Acceptance gate: one PASS/FAIL line per criterion. Criteria 1-9 run in
// process against independent oracles; 10-14 drive the triad CLI through the
// desk config and read its outputs.

#include <sys/wait.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "triad/error.hpp"
#include "triad/experiment.hpp"
#include "triad/finetune.hpp"
#include "triad/hash.hpp"
#include "triad/metrics.hpp"
#include "triad/models.hpp"
#include "triad/nifti.hpp"
#include "triad/phantom.hpp"
#include "triad/preprocess.hpp"
#include "triad/pretrain.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace triad;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void expect(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back((ok ? "ok   " : "FAIL ") + what);
  }
};

std::string fmt(double x) {
  std::ostringstream s;
  s.precision(4);
  s << x;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename F>
std::optional<ErrorKind> kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------- 1

using Rows = std::vector<std::vector<double>>;

Rows gaussian_rows(std::mt19937_64& rng, int b, int d) {
  std::normal_distribution<double> n(0.0, 1.0);
  Rows r(static_cast<std::size_t>(b), std::vector<double>(static_cast<std::size_t>(d)));
  for (auto& row : r)
    for (auto& x : row) x = n(rng);
  return r;
}

torch::Tensor as_tensor(const Rows& r) {
  auto t = torch::empty({static_cast<int64_t>(r.size()), static_cast<int64_t>(r[0].size())}, torch::kDouble);
  auto a = t.accessor<double, 2>();
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t k = 0; k < r[i].size(); ++k) a[static_cast<int64_t>(i)][static_cast<int64_t>(k)] = r[i][k];
  return t;
}

Rows rows_of(const torch::Tensor& t) {
  auto a = t.accessor<double, 2>();
  Rows r(static_cast<std::size_t>(t.size(0)), std::vector<double>(static_cast<std::size_t>(t.size(1))));
  for (int64_t i = 0; i < t.size(0); ++i)
    for (int64_t k = 0; k < t.size(1); ++k) r[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] = a[i][k];
  return r;
}

double euclid(const std::vector<double>& u, const std::vector<double>& v) {
  double s = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) s += (u[k] - v[k]) * (u[k] - v[k]);
  return std::sqrt(s);
}

// Every anchor with every unordered pair of the remaining samples.
double triple_loop(const Rows& f, const Rows& y, double eps) {
  double sum = 0.0;
  long n = 0;
  for (std::size_t a = 0; a < f.size(); ++a)
    for (std::size_t i = 0; i < f.size(); ++i)
      for (std::size_t j = i + 1; j < f.size(); ++j) {
        if (i == a || j == a) continue;
        const double d = std::log((euclid(f[a], f[i]) + eps) / (euclid(f[a], f[j]) + eps)) -
                         std::log((euclid(y[a], y[i]) + eps) / (euclid(y[a], y[j]) + eps));
        sum += d * d;
        ++n;
      }
  return sum / static_cast<double>(n);
}

// Random orthogonal matrix from a QR factorisation.
torch::Tensor random_rotation(int64_t d, int64_t seed) {
  torch::manual_seed(seed);
  auto q = std::get<0>(torch::linalg_qr(torch::randn({d, d}, torch::kDouble)));
  return q;
}

Outcome criterion_1() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);

  const Rows y8 = gaussian_rows(rng, 8, 6);
  auto y = as_tensor(y8);
  const double same = log_ratio_loss(y, y).item<double>();
  const double scaled = log_ratio_loss(3.7 * y, y).item<double>();
  o.expect(same < 1e-10 && scaled < 1e-10, "F=Y and F=3.7Y give " + fmt(same) + ", " + fmt(scaled));

  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int b = 3 + trial % 6;
    const Rows f = gaussian_rows(rng, b, 9);
    const Rows t = gaussian_rows(rng, b, 5);
    worst = std::max(worst, std::abs(log_ratio_loss(as_tensor(f), as_tensor(t)).item<double>() - triple_loop(f, t, 1e-6)));
  }
  o.expect(worst < 1e-12, "triple-loop oracle, 50 batches, max err " + fmt(worst));

  // isometries with eps ~ 0 so that distances are preserved exactly up to rounding
  const double eps = 1e-14;
  auto f = as_tensor(gaussian_rows(rng, 7, 5));
  auto t = as_tensor(gaussian_rows(rng, 7, 4));
  const double base = log_ratio_loss(f, t, eps).item<double>();
  auto qf = random_rotation(5, 3);
  auto qt = random_rotation(4, 4);
  auto shift_f = torch::randn({5}, torch::kDouble);
  auto shift_t = torch::randn({4}, torch::kDouble);
  const double iso_f = std::abs(log_ratio_loss(f.matmul(qf) + shift_f, t, eps).item<double>() - base);
  const double iso_t = std::abs(log_ratio_loss(f, t.matmul(qt) + shift_t, eps).item<double>() - base);
  o.expect(iso_f < 1e-8 && iso_t < 1e-8, "isometry invariance " + fmt(iso_f) + ", " + fmt(iso_t));

  // gradient by central differences, every coordinate
  auto x = as_tensor(gaussian_rows(rng, 6, 4));
  auto leaf = x.clone().set_requires_grad(true);
  log_ratio_loss(leaf, t.slice(0, 0, 6)).backward();
  auto g = leaf.grad();
  double rel = 0.0;
  const double h = 1e-6;
  for (int64_t i = 0; i < x.size(0); ++i)
    for (int64_t k = 0; k < x.size(1); ++k) {
      auto up = x.clone();
      auto dn = x.clone();
      up[i][k] += h;
      dn[i][k] -= h;
      const double num = (log_ratio_loss(up, t.slice(0, 0, 6)).item<double>() - log_ratio_loss(dn, t.slice(0, 0, 6)).item<double>()) / (2 * h);
      const double ana = g[i][k].item<double>();
      rel = std::max(rel, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-8}));
    }
  o.expect(rel < 1e-4, "finite-difference gradient rel err " + fmt(rel));

  const double secs = seconds_since(t0);
  o.expect(secs < 10.0, "runtime " + fmt(secs) + " s");
  return o;
}

// ---------------------------------------------------------------- 2

EncoderConfig tiny_encoder() {
  EncoderConfig e;
  e.feature_size = 4;
  e.depths = {1, 1, 1, 1};
  e.heads = {1, 2, 2, 4};
  e.window = 2;
  return e;
}

Outcome criterion_2() {
  Outcome o;
  std::mt19937_64 rng(202);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    auto f = as_tensor(gaussian_rows(rng, 5, 8));
    auto t = as_tensor(gaussian_rows(rng, 5, 3));
    auto recon = torch::rand({5, 1, 4, 4, 4}, torch::kDouble);
    auto target = torch::rand({5, 1, 4, 4, 4}, torch::kDouble);
    const double l1 = (recon - target).abs().mean().item<double>();
    const double lr = triple_loop(rows_of(f), rows_of(t), 1e-6);
    const double got = total_loss(recon, target, f, t, 0.01).total.item<double>();
    worst = std::max(worst, std::abs(got - (l1 + 0.01 * lr)));
  }
  o.expect(worst < 1e-12, "total = l1 + 0.01 log_ratio, max err " + fmt(worst));
  o.expect(PretrainConfig::defaults(Arch::swin).loss_weight == 0.01, "default weight 0.01");

  auto cfg = PretrainConfig::defaults(Arch::swin);
  cfg.steps = 10;
  cfg.warmup = 1;
  cfg.batch = 3;
  cfg.roi = 32;
  cfg.base_lr = 1e-3;
  cfg.loss_weight = 0.0;
  Pretrainer a(tiny_encoder(), cfg);
  Pretrainer b(tiny_encoder(), cfg);
  torch::manual_seed(5);
  for (int s = 0; s < 3; ++s) {
    auto x = torch::rand({3, 1, 32, 32, 32});
    a.train_step(x, torch::randn({3, 16}));
    b.train_step(x, torch::randn({3, 16}) * 100.0);
  }
  o.expect(params_bit_equal(param_set(*a.net()), param_set(*b.net())), "lambda=0: 3 steps with unrelated Y give bit-identical parameters");
  return o;
}

// ---------------------------------------------------------------- 3

Outcome criterion_3() {
  Outcome o;
  const auto c = PretrainConfig::defaults(Arch::swin);
  o.expect(c.steps == 200000 && c.warmup == 1000, "defaults: 200000 steps, 1000 warmup");
  o.expect(lr_schedule(1000, c) == c.base_lr, "lr(1000) = base_lr = " + fmt(lr_schedule(1000, c)));
  o.expect(lr_schedule(200000, c) == 0.0, "lr(200000) = " + fmt(lr_schedule(200000, c)));
  // left side: linear ramp through the boundary; right side: cosine at zero phase
  const double w = static_cast<double>(c.warmup);
  const double ramp_at_w = c.base_lr * (w - 1.0) / w + c.base_lr / w;
  const double cosine_at_w = 0.5 * c.base_lr * (1.0 + std::cos(0.0));
  const double jump = std::max(std::abs(lr_schedule(1000, c) - ramp_at_w), std::abs(lr_schedule(1000, c) - cosine_at_w));
  const double left = std::abs(lr_schedule(999, c) - c.base_lr * 999.0 / w);
  const double right = std::abs(lr_schedule(1001, c) - 0.5 * c.base_lr * (1.0 + std::cos(M_PI * 1.0 / (200000.0 - w))));
  o.expect(jump < 1e-12 && left < 1e-12 && right < 1e-12, "continuity at the warmup boundary, max gap " + fmt(std::max({jump, left, right})));
  return o;
}

// ---------------------------------------------------------------- 4

Outcome criterion_4() {
  Outcome o;
  torch::NoGradGuard guard;
  const auto t0 = std::chrono::steady_clock::now();
  struct Case {
    int64_t c;
    int64_t roi;
    int64_t want;
  };
  for (const Case k : {Case{48, 96, 768}, Case{96, 64, 1536}, Case{192, 64, 3072}}) {
    EncoderConfig cfg;
    cfg.feature_size = k.c;
    Encoder e(cfg);
    auto p = e->forward(torch::rand({1, 1, k.roi, k.roi, k.roi}));
    const auto s = p.back().sizes();
    const int64_t side = k.roi / 32;
    const bool ok = s.size() == 5 && s[1] == k.want && s[2] == side && s[3] == side && s[4] == side && p.back().isfinite().all().item<bool>();
    std::ostringstream shape;
    shape << s;
    o.expect(ok, "C=" + std::to_string(k.c) + " at " + std::to_string(k.roi) + "^3 -> " + shape.str());
  }
  const double secs = seconds_since(t0);
  o.expect(secs < 120.0, "runtime " + fmt(secs) + " s");
  return o;
}

// ---------------------------------------------------------------- 5

// Weighted sum over the 8 surrounding voxels with edge-clamped coordinates.
double corner_sum(const Volume& v, double x, double y, double z) {
  const double c[3] = {x, y, z};
  int64_t lo[3];
  double t[3];
  for (int a = 0; a < 3; ++a) {
    const double q = std::clamp(c[a], 0.0, static_cast<double>(v.shape[static_cast<std::size_t>(a)] - 1));
    lo[a] = static_cast<int64_t>(std::floor(q));
    t[a] = q - static_cast<double>(lo[a]);
  }
  double acc = 0.0;
  for (int corner = 0; corner < 8; ++corner) {
    double wgt = 1.0;
    int64_t idx[3];
    for (int a = 0; a < 3; ++a) {
      const int bit = (corner >> a) & 1;
      idx[a] = std::min(lo[a] + bit, v.shape[static_cast<std::size_t>(a)] - 1);
      wgt *= bit ? t[a] : 1.0 - t[a];
    }
    acc += wgt * v.at(idx[0], idx[1], idx[2]);
  }
  return acc;
}

// Output voxel centre i maps to input coordinate (i + 0.5) * ratio - 0.5.
double oracle_max_err(const Volume& in, const Volume& out, const std::array<double, 3>& ratio) {
  double worst = 0.0;
  for (int64_t i = 0; i < out.shape[0]; ++i)
    for (int64_t j = 0; j < out.shape[1]; ++j)
      for (int64_t k = 0; k < out.shape[2]; ++k) {
        const double want = corner_sum(in, (i + 0.5) * ratio[0] - 0.5, (j + 0.5) * ratio[1] - 0.5, (k + 0.5) * ratio[2] - 0.5);
        worst = std::max(worst, std::abs(out.at(i, j, k) - want));
      }
  return worst;
}

Outcome criterion_5() {
  Outcome o;
  std::mt19937_64 rng(505);
  std::uniform_int_distribution<int64_t> dim(2, 9);
  std::uniform_int_distribution<int> quarter(2, 10);
  std::uniform_real_distribution<float> val(-1.0f, 1.0f);

  // affine fields: a0 + a.(i, j, k), reproduced wherever no clamping occurs
  double affine = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Volume v = Volume::zeros({dim(rng), dim(rng), dim(rng)});
    const double a0 = 0.5, a1 = 1.25, a2 = -0.75, a3 = 2.0;
    for (int64_t i = 0; i < v.shape[0]; ++i)
      for (int64_t j = 0; j < v.shape[1]; ++j)
        for (int64_t k = 0; k < v.shape[2]; ++k) v.at(i, j, k) = static_cast<float>(a0 + a1 * i + a2 * j + a3 * k);
    for (auto& s : v.spacing) s = quarter(rng) / 4.0;
    const Volume r = resample_iso(v, 1.0);
    const Shape3 grid{dim(rng) + 2, dim(rng) + 2, dim(rng) + 2};
    const Volume z = resize_to(v, grid);
    auto check = [&](const Volume& out, std::array<double, 3> ratio) {
      for (int64_t i = 0; i < out.shape[0]; ++i)
        for (int64_t j = 0; j < out.shape[1]; ++j)
          for (int64_t k = 0; k < out.shape[2]; ++k) {
            const double x = std::clamp((i + 0.5) * ratio[0] - 0.5, 0.0, static_cast<double>(v.shape[0] - 1));
            const double y = std::clamp((j + 0.5) * ratio[1] - 0.5, 0.0, static_cast<double>(v.shape[1] - 1));
            const double w = std::clamp((k + 0.5) * ratio[2] - 0.5, 0.0, static_cast<double>(v.shape[2] - 1));
            affine = std::max(affine, std::abs(out.at(i, j, k) - (a0 + a1 * x + a2 * y + a3 * w)));
          }
    };
    check(r, {1.0 / v.spacing[0], 1.0 / v.spacing[1], 1.0 / v.spacing[2]});
    check(z, {static_cast<double>(v.shape[0]) / grid[0], static_cast<double>(v.shape[1]) / grid[1], static_cast<double>(v.shape[2]) / grid[2]});
  }
  o.expect(affine < 1e-5, "affine fields reproduced, max err " + fmt(affine));

  double resample_err = 0.0, resize_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    Volume v = Volume::zeros({dim(rng), dim(rng), dim(rng)});
    for (auto& x : v.data) x = val(rng);
    for (auto& s : v.spacing) s = quarter(rng) / 4.0;
    const Volume r = resample_iso(v, 1.0);
    bool shape_ok = true;
    for (int a = 0; a < 3; ++a) shape_ok = shape_ok && r.shape[static_cast<std::size_t>(a)] == std::max<int64_t>(1, std::llround(v.shape[static_cast<std::size_t>(a)] * v.spacing[static_cast<std::size_t>(a)]));
    if (!shape_ok) resample_err = 1e9;
    resample_err = std::max(resample_err, oracle_max_err(v, r, {1.0 / v.spacing[0], 1.0 / v.spacing[1], 1.0 / v.spacing[2]}));

    const Shape3 grid{dim(rng), dim(rng), dim(rng)};
    const Volume z = resize_to(v, grid);
    resize_err = std::max(resize_err, oracle_max_err(v, z, {static_cast<double>(v.shape[0]) / grid[0], static_cast<double>(v.shape[1]) / grid[1],
                                                            static_cast<double>(v.shape[2]) / grid[2]}));
  }
  o.expect(resample_err < 1e-6, "resample_iso vs trilinear oracle, 50 volumes, max err " + fmt(resample_err));
  o.expect(resize_err < 1e-6, "resize_to vs trilinear oracle, 50 volumes, max err " + fmt(resize_err));
  return o;
}

// ---------------------------------------------------------------- 6

// World position of voxel centre (i, j, k) from the axis code, spacing and origin.
std::array<double, 3> world_of(const Volume& v, int64_t i, int64_t j, int64_t k) {
  std::array<double, 3> w{v.origin[0], v.origin[1], v.origin[2]};
  const int64_t idx[3] = {i, j, k};
  for (std::size_t a = 0; a < 3; ++a) {
    const char c = v.orientation[a];
    const int axis = (c == 'L' || c == 'R') ? 0 : (c == 'P' || c == 'A') ? 1 : 2;
    const double sign = (c == 'R' || c == 'A' || c == 'S') ? 1.0 : -1.0;
    w[static_cast<std::size_t>(axis)] += sign * v.spacing[a] * static_cast<double>(idx[a]);
  }
  return w;
}

Outcome criterion_6() {
  Outcome o;
  std::mt19937_64 rng(606);
  std::uniform_real_distribution<float> val(-5.0f, 5.0f);
  const auto codes = AxisCode::all();
  o.expect(codes.size() == 48, "48 axis codes");
  int pairs = 0, world_ok = 0, involution_ok = 0;
  for (const auto& from : codes) {
    Volume v = Volume::zeros({2, 3, 4});
    v.orientation = from;
    v.spacing = {0.5, 1.25, 2.0};
    v.origin = {-3.0, 7.5, 1.25};
    for (auto& x : v.data) x = val(rng);
    std::map<std::array<double, 3>, float> by_world;
    for (int64_t i = 0; i < 2; ++i)
      for (int64_t j = 0; j < 3; ++j)
        for (int64_t k = 0; k < 4; ++k) by_world[world_of(v, i, j, k)] = v.at(i, j, k);
    for (const auto& to : codes) {
      ++pairs;
      const Volume r = reorient(v, to);
      bool ok = r.orientation == to && r.voxel_count() == v.voxel_count();
      for (int64_t i = 0; ok && i < r.shape[0]; ++i)
        for (int64_t j = 0; ok && j < r.shape[1]; ++j)
          for (int64_t k = 0; ok && k < r.shape[2]; ++k) {
            auto it = by_world.find(world_of(r, i, j, k));
            ok = it != by_world.end() && it->second == r.at(i, j, k);
          }
      world_ok += ok;
      involution_ok += bit_equal(reorient(r, from), v);
    }
  }
  o.expect(world_ok == pairs, "world-coordinate oracle on " + std::to_string(world_ok) + "/" + std::to_string(pairs) + " pairs");
  o.expect(involution_ok == pairs, "double reorientation bit-exact on " + std::to_string(involution_ok) + "/" + std::to_string(pairs) + " pairs");
  return o;
}

// ---------------------------------------------------------------- 7

Outcome criterion_7() {
  Outcome o;
  std::mt19937_64 rng(707);
  std::bernoulli_distribution coin(0.5);
  int dice_ok = 0;
  for (int t = 0; t < 200; ++t) {
    LabelVolume p = LabelVolume::zeros({8, 8, 8});
    LabelVolume g = LabelVolume::zeros({8, 8, 8});
    const double density = (t % 10) / 10.0;
    std::bernoulli_distribution fill(density);
    for (auto& x : p.data) x = fill(rng);
    for (auto& x : g.data) x = coin(rng) && fill(rng);
    long inter = 0, np = 0, ng = 0;
    for (std::size_t n = 0; n < p.data.size(); ++n) {
      np += p.data[n] == 1;
      ng += g.data[n] == 1;
      inter += p.data[n] == 1 && g.data[n] == 1;
    }
    const double want = np + ng == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
    dice_ok += dice(p, g, 1) == want;
  }
  o.expect(dice_ok == 200, "dice exact on " + std::to_string(dice_ok) + "/200 masks");

  int acc_ok = 0, conf_ok = 0, auc_ok = 0;
  std::uniform_int_distribution<int> cls(0, 2);
  std::uniform_int_distribution<int> tick(0, 12);
  for (int t = 0; t < 200; ++t) {
    const int n = 10 + t % 30;
    std::vector<int> pred(static_cast<std::size_t>(n)), truth(static_cast<std::size_t>(n));
    for (auto& x : pred) x = cls(rng);
    for (auto& x : truth) x = cls(rng);
    long hits = 0;
    std::vector<std::int64_t> counts(9, 0);
    for (int i = 0; i < n; ++i) {
      hits += pred[static_cast<std::size_t>(i)] == truth[static_cast<std::size_t>(i)];
      ++counts[static_cast<std::size_t>(truth[static_cast<std::size_t>(i)] * 3 + pred[static_cast<std::size_t>(i)])];
    }
    acc_ok += accuracy(pred, truth) == static_cast<double>(hits) / n;
    conf_ok += confusion(pred, truth, 3).counts == counts;

    std::vector<double> score(static_cast<std::size_t>(n));
    std::vector<int> lab(static_cast<std::size_t>(n));
    for (auto& s : score) s = tick(rng) / 12.0;
    for (auto& l : lab) l = coin(rng);
    lab[0] = 0;
    lab[1] = 1;
    // exhaustive over positive/negative pairs, ties count half
    double wins = 0.0, total = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (lab[static_cast<std::size_t>(i)] == 1 && lab[static_cast<std::size_t>(j)] == 0) {
          total += 1.0;
          const double si = score[static_cast<std::size_t>(i)], sj = score[static_cast<std::size_t>(j)];
          wins += si > sj ? 1.0 : si == sj ? 0.5 : 0.0;
        }
    auc_ok += std::abs(roc_auc(score, lab) - wins / total) <= 1e-12;
  }
  o.expect(acc_ok == 200, "accuracy exact on " + std::to_string(acc_ok) + "/200 sets");
  o.expect(conf_ok == 200, "confusion exact on " + std::to_string(conf_ok) + "/200 sets");
  o.expect(auc_ok == 200, "roc_auc within 1e-12 on " + std::to_string(auc_ok) + "/200 sets");
  return o;
}

// ---------------------------------------------------------------- 8

Outcome criterion_8() {
  Outcome o;
  torch::manual_seed(808);
  auto m = torch::rand({1, 1, 12, 10, 9});
  auto zero = torch::zeros({1, 3, 12, 10, 9});
  o.expect(torch::equal(warp(m, zero, WarpMode::nearest), m), "zero field, nearest: bit-exact identity");
  const double tri = (warp(m, zero, WarpMode::trilinear) - m).abs().max().item<double>();
  o.expect(tri < 1e-6, "zero field, trilinear: max err " + fmt(tri));

  double worst = 0.0;
  const int shifts[][3] = {{1, 0, 0}, {0, -2, 0}, {0, 0, 3}, {1, -1, 2}};
  for (const auto& s : shifts) {
    auto field = zero.clone();
    for (int a = 0; a < 3; ++a) field.select(1, a).fill_(static_cast<double>(s[a]));
    for (WarpMode mode : {WarpMode::trilinear, WarpMode::nearest}) {
      auto out = warp(m, field, mode);
      auto oa = out.accessor<float, 5>();
      auto ma = m.accessor<float, 5>();
      for (int64_t i = 3; i < 9; ++i)
        for (int64_t j = 3; j < 7; ++j)
          for (int64_t k = 3; k < 6; ++k) worst = std::max(worst, static_cast<double>(std::abs(oa[0][0][i][j][k] - ma[0][0][i + s[0]][j + s[1]][k + s[2]])));
    }
  }
  o.expect(worst < 1e-5, "integer shifts match the shift oracle in the interior, max err " + fmt(worst));
  return o;
}

// ---------------------------------------------------------------- 9

Outcome criterion_9(const fs::path& work) {
  Outcome o;
  const fs::path dir = work / "serialization";
  fs::create_directories(dir);
  std::mt19937_64 rng(909);
  std::uniform_int_distribution<int64_t> dim(1, 9);
  std::uniform_int_distribution<int> eighths(1, 32);
  std::uniform_int_distribution<int> org(-400, 400);
  std::uniform_real_distribution<float> val(-100.0f, 100.0f);
  std::uniform_int_distribution<int> q(0, 65535);
  const auto codes = AxisCode::all();

  int nifti_ok = 0;
  for (int n = 0; n < 100; ++n) {
    Volume v = Volume::zeros({dim(rng), dim(rng), dim(rng)});
    for (auto& s : v.spacing) s = eighths(rng) / 8.0;
    for (auto& x : v.origin) x = org(rng) / 8.0;
    v.orientation = codes[static_cast<std::size_t>(n) % codes.size()];
    if (n % 2) {
      v.dtype = DType::u16;
      for (auto& x : v.data) x = static_cast<float>(q(rng));
      v.intensity_offset = val(rng);
      v.intensity_scale = 0.25 * eighths(rng);
    } else {
      for (auto& x : v.data) x = val(rng);
    }
    write_nifti(v, dir / "v.nii");
    nifti_ok += bit_equal(read_nifti(dir / "v.nii"), v);
  }
  o.expect(nifti_ok == 100, "NIfTI roundtrip bit-exact on " + std::to_string(nifti_ok) + "/100");

  int ckpt_ok = 0;
  std::uniform_int_distribution<int> count(1, 6);
  for (int n = 0; n < 100; ++n) {
    Checkpoint c;
    c.kind = n % 3 ? "pretrain" : "seg";
    c.encoder = tiny_encoder().canonical();
    c.config_hash = std::to_string(rng());
    c.step = static_cast<int64_t>(rng() % 100000);
    c.seed = rng();
    torch::manual_seed(static_cast<uint64_t>(n));
    for (int p = 0, np = count(rng); p < np; ++p) {
      std::vector<int64_t> shape;
      for (int d = 0, nd = count(rng) % 4 + 1; d < nd; ++d) shape.push_back(dim(rng));
      c.params["layer" + std::to_string(p) + ".weight"] = torch::randn(shape);
      c.optimizer["adam.exp_avg.layer" + std::to_string(p) + ".weight"] = torch::randn(shape);
      c.optimizer_steps["layer" + std::to_string(p) + ".weight"] = static_cast<int64_t>(rng() % 1000);
    }
    save_checkpoint(c, dir / "c.ckpt");
    ckpt_ok += checkpoints_equal(load_checkpoint(dir / "c.ckpt"), c);
  }
  o.expect(ckpt_ok == 100, "checkpoint roundtrip bit-exact on " + std::to_string(ckpt_ok) + "/100");

  fs::resize_file(dir / "v.nii", fs::file_size(dir / "v.nii") - 3);
  o.expect(kind_of([&] { read_nifti(dir / "v.nii"); }) == ErrorKind::integrity, "truncated NIfTI raises an integrity error");
  fs::resize_file(dir / "c.ckpt", fs::file_size(dir / "c.ckpt") / 2);
  o.expect(kind_of([&] { load_checkpoint(dir / "c.ckpt"); }) == ErrorKind::integrity, "truncated checkpoint raises an integrity error");
  return o;
}

// ---------------------------------------------------------------- 10-14

struct CliRun {
  int exit_code = -1;
  std::string err;
};

CliRun run_cli(const fs::path& cli, const std::string& args, const fs::path& log) {
  const std::string cmd = "\"" + cli.string() + "\" " + args + " > \"" + (log.string() + ".out") + "\" 2> \"" + log.string() + "\"";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(log);
  return r;
}

double num(const json& j, const std::vector<std::string>& path) {
  const json* p = &j;
  for (const auto& k : path) {
    if (!p->is_object() || !p->contains(k)) return std::nan("");
    p = &(*p)[k];
  }
  return p->is_number() ? p->get<double>() : std::nan("");
}

struct EndToEnd {
  std::map<int, Outcome> outcomes;
};

EndToEnd end_to_end(const fs::path& cli, const fs::path& config, const fs::path& work) {
  EndToEnd e2e;
  auto& c10 = e2e.outcomes[10];
  auto& c11 = e2e.outcomes[11];
  auto& c12 = e2e.outcomes[12];
  auto& c13 = e2e.outcomes[13];
  auto& c14 = e2e.outcomes[14];

  const auto cfg = load_experiment_config(config);
  const fs::path out = work / "desk";
  fs::remove_all(out);
  const std::string base = "--config \"" + config.string() + "\" --out \"" + out.string() + "\"";

  const auto first = run_cli(cli, "run " + base, work / "run1.log");
  c14.expect(first.exit_code == 0, "triad run exit code " + std::to_string(first.exit_code));
  json summary;
  const bool have_summary = fs::exists(out / "summary.json");
  if (have_summary) summary = json::parse(slurp(out / "summary.json"));
  c14.expect(have_summary, "summary.json present");
  for (const auto& stage : stage_order()) {
    const bool ran = summary.contains("stages") && summary["stages"].contains(stage);
    c14.expect(ran, "stage " + stage + " in summary");
  }
  const json& m = summary.contains("metrics") ? summary["metrics"] : json::object();
  const bool all_metrics = !std::isnan(num(m, {"pretrain", "l1_ratio"})) && !std::isnan(num(m, {"seg", "test_foreground_dice"})) &&
                           !std::isnan(num(m, {"cls", "test_accuracy"})) && !std::isnan(num(m, {"reg", "dice_gain"}));
  c14.expect(all_metrics, "summary metrics cover pre-training, segmentation, classification and registration");

  // 10
  const auto& st = summary.contains("stages") ? summary["stages"] : json::object();
  c10.expect(cfg.pretrain.steps == 300 && cfg.pretrain.batch == 4 && cfg.pretrain.roi == 32 && cfg.encoder.feature_size == 12 &&
                 cfg.generate.pretrain_count == 16,
             "desk config: 300 steps, batch 4, roi 32, C=12, 16 phantoms");
  const double ratio = num(m, {"pretrain", "l1_ratio"});
  c10.expect(ratio <= 0.6, "l1 last10/first10 = " + fmt(ratio));
  c10.expect(m.contains("pretrain") && m["pretrain"].value("all_finite", false), "all losses finite");
  const double pt_secs = num(st, {"pretrain", "seconds"});
  c10.expect(pt_secs < 600.0, "pre-training " + fmt(pt_secs) + " s");

  const fs::path again = work / "pretrain_again";
  fs::remove_all(again);
  const auto rerun = run_cli(cli, "pretrain --config \"" + config.string() + "\" --out \"" + again.string() + "\"", work / "pretrain_again.log");
  const std::string ckpt = st.contains("pretrain") ? st["pretrain"]["artifacts"].value("checkpoint", "") : "";
  const bool same_ckpt = rerun.exit_code == 0 && !ckpt.empty() && fs::exists(out / ckpt) && slurp(out / ckpt) == slurp(again / ckpt);
  const bool same_metrics = fs::exists(out / "pretrain/metrics.jsonl") &&
                            slurp(out / "pretrain/metrics.jsonl") == slurp(again / "pretrain/metrics.jsonl");
  c10.expect(same_ckpt && same_metrics, "second identical run: final checkpoint and per-step metrics byte-identical");

  // 11
  c11.expect(cfg.seg.init == "triad" && cfg.seg.finetune.epochs == 20 && cfg.generate.seg_train == 24, "desk config: triad init, 20 epochs, 24 phantoms");
  const double seg_dice = num(m, {"seg", "test_foreground_dice"});
  c11.expect(seg_dice >= 0.85, "held-out foreground dice " + fmt(seg_dice));
  const double seg_secs = num(st, {"seg", "seconds"});
  c11.expect(seg_secs < 900.0, "segmentation " + fmt(seg_secs) + " s");

  // 12
  c12.expect(cfg.cls.finetune.epochs == 10 && cfg.cls.finetune.warmup_epochs == 5, "desk config: 10 epochs, 5 warmup epochs");
  const double acc = num(m, {"cls", "test_accuracy"});
  c12.expect(acc >= 0.95, "test accuracy " + fmt(acc));
  const double lr5 = num(st, {"cls", "metrics", "lr_at_warmup_end"});
  c12.expect(lr5 == 1e-3, "lr at the end of epoch 5 = " + fmt(lr5));

  // 13
  c13.expect(cfg.reg.finetune.epochs == 50 && cfg.reg.finetune.similarity == Similarity::mse && cfg.generate.reg_amplitude == 3.0,
             "desk config: 50 epochs, MSE, amplitude 3");
  const double gain = num(m, {"reg", "dice_gain"});
  c13.expect(gain >= 0.10, "dice " + fmt(num(m, {"reg", "test_dice"})) + " vs baseline " + fmt(num(m, {"reg", "baseline_dice"})) + ", gain " +
                               fmt(gain));
  const double reg_secs = num(st, {"reg", "seconds"});
  c13.expect(reg_secs < 1200.0, "registration " + fmt(reg_secs) + " s");
  try {
    torch::NoGradGuard g;
    auto enc = cfg.encoder;
    enc.in_channels = 2;
    RegNet net(enc, derive_seed(cfg.seed, "reg"));
    if (!ckpt.empty()) transfer_encoder_weights(load_checkpoint(out / ckpt).params, *net, TransferMode::adapt_input_channels);
    PhantomSpec spec;
    spec.size = {cfg.generate.size, cfg.generate.size, cfg.generate.size};
    spec.seed = 77;
    const auto pair = gen_reg_pair(spec, 3.0);
    auto mv = volume_tensor(pair.moving);
    auto field = net->forward(mv, volume_tensor(pair.fixed));
    const bool zero = field.eq(0).all().item<bool>();
    const bool ident = torch::equal(warp(mv, field, WarpMode::nearest), mv) && (warp(mv, field, WarpMode::trilinear) - mv).abs().max().item<double>() < 1e-6;
    c13.expect(zero && ident && !ckpt.empty(), "pre-trained encoder with zero-init head: zero field, identity warp at step 0");
  } catch (const std::exception& ex) {
    c13.expect(false, std::string("identity check threw: ") + ex.what());
  }

  // 14: full rerun
  const std::string before = slurp(out / "summary.json");
  const auto second = run_cli(cli, "run " + base, work / "run2.log");
  std::size_t skipped = 0;
  for (std::size_t pos = second.err.find("up to date, skipped"); pos != std::string::npos; pos = second.err.find("up to date, skipped", pos + 1)) ++skipped;
  const bool ran_any = second.err.find("] running") != std::string::npos;
  c14.expect(second.exit_code == 0 && skipped == stage_order().size() && !ran_any,
             "rerun skipped " + std::to_string(skipped) + "/" + std::to_string(stage_order().size()) + " stages");
  c14.expect(slurp(out / "summary.json") == before, "rerun leaves summary.json byte-identical");
  return e2e;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"triad acceptance gate"};
  fs::path cli, config, work = fs::temp_directory_path() / "triad_acceptance";
  bool skip_e2e = false;
  app.add_option("--cli", cli, "Path to the triad executable")->required();
  app.add_option("--config", config, "Desk experiment config")->required()->check(CLI::ExistingFile);
  app.add_option("--work", work, "Scratch directory");
  app.add_flag("--skip-e2e", skip_e2e, "Only run the in-process criteria 1-9");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  torch::set_num_threads(1);

  std::map<int, Outcome> results;
  auto guarded = [&](int id, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      results[id] = fn();
    } catch (const std::exception& e) {
      Outcome o;
      o.expect(false, std::string("threw: ") + e.what());
      results[id] = o;
    }
    std::cerr << "criterion " << id << " evaluated in " << fmt(seconds_since(t0)) << " s\n";
  };
  guarded(1, criterion_1);
  guarded(2, criterion_2);
  guarded(3, criterion_3);
  guarded(4, criterion_4);
  guarded(5, criterion_5);
  guarded(6, criterion_6);
  guarded(7, criterion_7);
  guarded(8, criterion_8);
  guarded(9, [&] { return criterion_9(work); });
  if (!skip_e2e) {
    try {
      for (auto& [id, o] : end_to_end(cli, config, work).outcomes) results[id] = o;
    } catch (const std::exception& e) {
      for (int id = 10; id <= 14; ++id) {
        Outcome o;
        o.expect(false, std::string("end-to-end run threw: ") + e.what());
        results[id] = o;
      }
    }
  }

  const char* titles[] = {"",
                          "log-ratio correctness",
                          "loss composition",
                          "schedule endpoints",
                          "shape contract",
                          "interpolation exactness",
                          "reorientation",
                          "metric oracles",
                          "warp",
                          "serialization",
                          "pre-training smoke",
                          "segmentation smoke",
                          "classification smoke",
                          "registration smoke",
                          "end-to-end"};
  bool all = true;
  std::ostringstream report;
  for (const auto& [id, o] : results) {
    report << (o.pass ? "PASS" : "FAIL") << " " << id << " " << titles[id] << "\n";
    for (const auto& n : o.notes) report << "       " << n << "\n";
    all = all && o.pass;
  }
  std::cout << report.str();
  std::ofstream(work / "report.txt") << report.str();
  return all ? 0 : 1;
}
