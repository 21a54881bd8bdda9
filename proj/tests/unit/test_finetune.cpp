#include <cmath>

#include "triad/finetune.hpp"
#include "triad/phantom.hpp"

#include "doctest.h"
#include "test_support.hpp"

using namespace triad;
using triad::test::error_kind_of;

namespace {

EncoderConfig tiny(int64_t in_channels = 1) {
  EncoderConfig e;
  e.feature_size = 4;
  e.depths = {1, 1, 1, 1};
  e.heads = {1, 2, 2, 4};
  e.window = 2;
  e.in_channels = in_channels;
  return e;
}

std::vector<SegSample> seg_samples(int n, std::uint64_t seed) {
  std::vector<SegSample> out;
  for (int i = 0; i < n; ++i) {
    PhantomSpec s;
    s.seed = seed + static_cast<std::uint64_t>(i);
    auto p = gen_phantom(s);
    for (auto& l : p.labels.data) l = l > 0 ? 1 : 0;
    out.push_back({p.image, p.labels});
  }
  return out;
}

std::vector<ClsSample> cls_samples(int n, std::uint64_t seed) {
  std::vector<ClsSample> out;
  for (int i = 0; i < n; ++i) {
    PhantomSpec s;
    s.seed = seed + static_cast<std::uint64_t>(i);
    s.modality = i % 2 == 0 ? "T1w" : "T2w";
    out.push_back({gen_phantom(s).image, i % 2});
  }
  return out;
}

std::vector<RegSample> reg_samples(int n, std::uint64_t seed) {
  std::vector<RegSample> out;
  for (int i = 0; i < n; ++i) {
    PhantomSpec s;
    s.seed = seed + static_cast<std::uint64_t>(i);
    auto r = gen_reg_pair(s, 3.0);
    out.push_back({r.moving, r.fixed, r.moving_labels, r.fixed_labels});
  }
  return out;
}

ParamSet subset(const ParamSet& p, const std::string& prefix) {
  ParamSet out;
  for (const auto& [k, v] : p)
    if (k.rfind(prefix, 0) == 0) out.emplace(k, v);
  return out;
}

}  // namespace

TEST_SUITE("downstream") {
  TEST_CASE("schedules") {
    auto seg = FinetuneConfig::defaults(Task::seg);
    CHECK(seg.lr == 0.01);
    seg.epochs = 20;
    CHECK(poly_lr(0, seg) == 0.01);
    CHECK(std::abs(poly_lr(10, seg) - 0.01 * std::pow(0.5, 0.9)) < 1e-15);
    CHECK(poly_lr(19, seg) < poly_lr(18, seg));

    const auto cls = FinetuneConfig::defaults(Task::cls);
    CHECK(cls.lr == 1e-3);
    CHECK(cls_lr(5.0, cls) == 1e-3);
    CHECK(cls_lr(2.5, cls) == 5e-4);
    CHECK(cls_lr(0.0, cls) == 0.0);
    CHECK(cls_lr(static_cast<double>(cls.epochs), cls) == 0.0);
    CHECK(std::abs(cls_lr(5.0 - 1e-9, cls) - 1e-3) < 1e-12);
    CHECK(error_kind_of([&] { cls_lr(101.0, cls); }) == ErrorKind::schedule);

    const auto reg = FinetuneConfig::defaults(Task::reg);
    CHECK(reg.batch == 1);
    auto bad = cls;
    bad.warmup_epochs = 200;
    CHECK(error_kind_of([&] { bad.validate(); }) == ErrorKind::config);
    bad = cls;
    bad.lr = -1.0;
    CHECK(error_kind_of([&] { bad.validate(); }) == ErrorKind::config);
  }

  TEST_CASE("seg loss against a hand-built oracle") {
    auto logits = torch::randn({2, 2, 2, 2, 2}, torch::kDouble);
    auto target = torch::randint(0, 2, {2, 2, 2, 2}, torch::kLong);
    auto lacc = logits.accessor<double, 5>();
    auto tacc = target.accessor<int64_t, 4>();
    double ce = 0.0, inter = 0.0, psum = 0.0, gsum = 0.0;
    for (int b = 0; b < 2; ++b)
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
          for (int k = 0; k < 2; ++k) {
            const double z0 = lacc[b][0][i][j][k], z1 = lacc[b][1][i][j][k];
            const double lse = std::log(std::exp(z0) + std::exp(z1));
            const int t = static_cast<int>(tacc[b][i][j][k]);
            ce += lse - (t == 1 ? z1 : z0);
            const double p1 = std::exp(z1 - lse);
            inter += p1 * t;
            psum += p1;
            gsum += t;
          }
    const double want = ce / 16.0 + 1.0 - (2 * inter + 1e-5) / (psum + gsum + 1e-5);
    CHECK(std::abs(seg_loss(logits, target).item<double>() - want) < 1e-12);

    auto perfect = torch::stack({(1 - target) * 50.0, target * 50.0}, 1).to(torch::kDouble);
    CHECK(seg_loss(perfect, target).item<double>() < 1e-6);
  }

  TEST_CASE("registration losses") {
    auto a = torch::rand({1, 1, 12, 12, 12}, torch::kDouble);
    CHECK(ncc_loss(a, a, 9).item<double>() < -0.99);
    // zero padding at the border breaks offset invariance, scaling is kept
    CHECK(std::abs(ncc_loss(a, 3.0 * a, 9).item<double>() - ncc_loss(a, a, 9).item<double>()) < 1e-4);
    CHECK(ncc_loss(a, torch::rand_like(a), 9).item<double>() > -0.5);

    const double c = 0.3;
    auto field = torch::zeros({1, 3, 6, 6, 6}, torch::kDouble);
    field[0][0] = (c * torch::arange(6, torch::kDouble)).view({6, 1, 1}).expand({6, 6, 6});
    CHECK(std::abs(smoothness_loss(field).item<double>() - c * c / 9.0) < 1e-15);
    CHECK(smoothness_loss(torch::ones_like(field)).item<double>() == 0.0);
  }

  TEST_CASE("segmentation: zero lr identity, init transfer, seed namespace") {
    const auto train = seg_samples(2, 100);
    const auto val = seg_samples(1, 200);
    auto cfg = FinetuneConfig::defaults(Task::seg);
    cfg.epochs = 1;
    cfg.lr = 0.0;
    cfg.seed = 4;

    SegNet untrained(tiny(), 2, cfg.seed);
    const auto base = clone_params(param_set(*untrained));
    const auto base_report = evaluate_seg(untrained, val, 2);
    auto scratch = finetune_seg(cfg, tiny(), train, val);
    CHECK(params_bit_equal(base, param_set(*scratch.net)));
    CHECK(evaluate_seg(scratch.net, val, 2).mean_foreground_dice == base_report.mean_foreground_dice);

    PretrainNet donor(tiny(), 99);
    const auto src = clone_params(param_set(*donor));
    auto warm = finetune_seg(cfg, tiny(), train, val, src);
    const auto after = param_set(*warm.net);
    for (const auto& [k, v] : subset(after, "encoder.")) CHECK(torch::equal(v, src.at(k)));
    CHECK(params_bit_equal(subset(after, "seg_decoder."), subset(base, "seg_decoder.")));
  }

  TEST_CASE("segmentation trains deterministically and rejects bad labels") {
    const auto train = seg_samples(2, 300);
    const auto val = seg_samples(1, 400);
    auto cfg = FinetuneConfig::defaults(Task::seg);
    cfg.epochs = 2;
    auto a = finetune_seg(cfg, tiny(), train, val);
    auto b = finetune_seg(cfg, tiny(), train, val);
    CHECK(params_bit_equal(param_set(*a.net), param_set(*b.net)));
    REQUIRE(a.history.size() == 2);
    CHECK(a.best_epoch >= 1);
    double best = 0.0;
    for (const auto& h : a.history) best = std::max(best, h.val_metric);
    CHECK(evaluate_seg(a.net, val, 2).mean_foreground_dice == best);

    auto bad = train;
    bad[0].labels.data[0] = 2;
    CHECK(error_kind_of([&] { finetune_seg(cfg, tiny(), bad, val); }) == ErrorKind::config);
  }

  TEST_CASE("classification: warmup, freeze, report consistency") {
    const auto train = cls_samples(4, 10);
    const auto val = cls_samples(4, 20);
    auto cfg = FinetuneConfig::defaults(Task::cls);
    cfg.epochs = 6;
    cfg.batch = 2;
    cfg.input_size = 32;
    cfg.hidden = 16;
    cfg.freeze_encoder = true;
    ClsNet fresh(tiny(), 2, cfg.seed, cfg.hidden);
    const auto before = clone_params(param_set(*fresh));
    auto r = finetune_cls(cfg, tiny(), train, val);
    REQUIRE(r.history.size() == 6);
    CHECK(r.history[4].lr == 1e-3);
    CHECK(r.history[1].lr == cls_lr(2.0, cfg));
    const auto after = param_set(*r.net);
    CHECK(params_bit_equal(subset(before, "encoder."), subset(after, "encoder.")));
    CHECK_FALSE(params_bit_equal(subset(before, "cls_head."), subset(after, "cls_head.")));

    const auto rep = evaluate_cls(r.net, val, 2, 32);
    CHECK(rep.accuracy == static_cast<double>(rep.confusion.trace()) / static_cast<double>(rep.confusion.total()));
    CHECK(rep.confusion.total() == 4);
    CHECK(rep.auc.has_value());

    auto zero = cfg;
    zero.lr = 0.0;
    zero.freeze_encoder = false;
    auto z = finetune_cls(zero, tiny(), train, val);
    CHECK(params_bit_equal(before, param_set(*z.net)));
  }

  TEST_CASE("registration: identity start, regulariser dominance, contracts") {
    const auto pairs = reg_samples(1, 50);
    RegNet net(tiny(2), 1);
    const auto rep = evaluate_reg(net, pairs);
    CHECK(rep.max_displacement == 0.0);
    CHECK(rep.dice == rep.baseline_dice);
    CHECK(rep.baseline_dice < 1.0);
    {
      torch::NoGradGuard g;
      auto m = volume_tensor(pairs[0].moving);
      auto field = net->forward(m, volume_tensor(pairs[0].fixed));
      CHECK(torch::equal(warp(m, field, WarpMode::nearest), m));
      CHECK((warp(m, field, WarpMode::trilinear) - m).abs().max().item<double>() < 1e-6);
    }

    auto cfg = FinetuneConfig::defaults(Task::reg);
    cfg.epochs = 10;
    cfg.smooth_weight = 1e6;
    cfg.similarity = Similarity::mse;
    auto r = finetune_reg(cfg, tiny(2), pairs, {});
    CHECK(evaluate_reg(r.net, pairs).max_displacement < 0.05);

    CHECK(error_kind_of([&] { finetune_reg(cfg, tiny(1), pairs, {}); }) == ErrorKind::config);
    auto unlabeled = pairs;
    unlabeled[0].moving_labels = LabelVolume{};
    CHECK(error_kind_of([&] { evaluate_reg(net, unlabeled); }) == ErrorKind::eval);

    PretrainNet donor(tiny(), 5);
    auto cfg0 = cfg;
    cfg0.lr = 0.0;
    cfg0.epochs = 1;
    auto warm = finetune_reg(cfg0, tiny(2), pairs, {}, clone_params(param_set(*donor)));
    CHECK(evaluate_reg(warm.net, pairs).max_displacement == 0.0);
  }
}
