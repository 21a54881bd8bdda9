#include "triad/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "triad/error.hpp"
#include "triad/hash.hpp"
#include "triad/preprocess.hpp"

namespace triad {

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, "shuffle", static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<std::vector<std::size_t>> batches_of(const std::vector<std::size_t>& order, int64_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch)) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + static_cast<std::size_t>(batch))));
  }
  return out;
}

torch::Tensor label_tensor(const LabelVolume& l) {
  return torch::from_blob(const_cast<std::int32_t*>(l.data.data()), {1, l.shape[0], l.shape[1], l.shape[2]}, torch::kInt).to(torch::kLong);
}

LabelVolume to_labels(const torch::Tensor& t, Shape3 shape) {
  auto c = t.to(torch::kInt).contiguous();
  LabelVolume l = LabelVolume::zeros(shape);
  std::copy_n(c.data_ptr<int>(), l.data.size(), l.data.begin());
  return l;
}

// Parameters the optimizer owns; a frozen encoder is left out and stops tracking gradients.
std::vector<torch::Tensor> trainable(torch::nn::Module& net, bool freeze_encoder) {
  std::vector<torch::Tensor> out;
  for (auto& item : net.named_parameters()) {
    if (freeze_encoder && item.key().rfind("encoder.", 0) == 0) {
      item.value().set_requires_grad(false);
      continue;
    }
    out.push_back(item.value());
  }
  return out;
}

void check_finite(double loss, const char* task, int64_t epoch) {
  if (!std::isfinite(loss)) fail(ErrorKind::divergence, std::string(task) + " loss became non-finite in epoch " + std::to_string(epoch));
}

Volume cls_input(const Volume& v, int64_t size) {
  if (v.shape == Shape3{size, size, size}) return v;
  return resize_to(v, {size, size, size});
}

// Mean foreground dice over classes present in either volume; 1.0 when neither has any.
double foreground_dice(const LabelVolume& pred, const LabelVolume& gt) {
  int top = 0;
  for (auto v : gt.data) top = std::max(top, static_cast<int>(v));
  for (auto v : pred.data) top = std::max(top, static_cast<int>(v));
  if (top == 0) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= top; ++k) sum += dice(pred, gt, k);
  return sum / top;
}

}  // namespace

std::string_view to_string(Task task) {
  switch (task) {
    case Task::seg:
      return "seg";
    case Task::cls:
      return "cls";
    case Task::reg:
      return "reg";
  }
  return "?";
}

Task parse_task(std::string_view text) {
  if (text == "seg") return Task::seg;
  if (text == "cls") return Task::cls;
  if (text == "reg") return Task::reg;
  fail(ErrorKind::config, "unknown task '" + std::string(text) + "' (expected seg, cls or reg)");
}

FinetuneConfig FinetuneConfig::defaults(Task task) {
  FinetuneConfig c;
  c.task = task;
  switch (task) {
    case Task::seg:
      c.lr = 0.01;
      c.batch = 2;
      break;
    case Task::cls:
      c.lr = 1e-3;
      c.batch = 8;
      c.epochs = 100;
      break;
    case Task::reg:
      c.lr = 1e-4;
      c.batch = 1;
      c.epochs = 500;
      break;
  }
  return c;
}

void FinetuneConfig::validate() const {
  if (epochs < 1) fail(ErrorKind::config, "epochs must be >= 1");
  if (batch < 1) fail(ErrorKind::config, "batch must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail(ErrorKind::config, "lr must be finite and >= 0");
  if (n_classes < 2) fail(ErrorKind::config, "n_classes must be >= 2");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorKind::config, "momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) fail(ErrorKind::config, "weight_decay must be >= 0");
  if (!(grad_clip > 0.0)) fail(ErrorKind::config, "grad_clip must be > 0");
  if (task == Task::cls && !(warmup_epochs >= 0.0 && warmup_epochs < static_cast<double>(epochs))) {
    fail(ErrorKind::config, "warmup_epochs must lie in [0, epochs)");
  }
  if (hidden < 1) fail(ErrorKind::config, "hidden must be >= 1");
  if (input_size < 32 || input_size % 32 != 0) fail(ErrorKind::config, "input_size must be a positive multiple of 32");
  if (!(smooth_weight >= 0.0)) fail(ErrorKind::config, "smooth_weight must be >= 0");
  if (ncc_window < 1 || ncc_window % 2 == 0) fail(ErrorKind::config, "ncc_window must be odd and >= 1");
}

torch::Tensor volume_tensor(const Volume& v) {
  return torch::from_blob(const_cast<float*>(v.data.data()), {1, 1, v.shape[0], v.shape[1], v.shape[2]}, torch::kFloat).clone();
}

torch::Tensor seg_loss(const torch::Tensor& logits, const torch::Tensor& target) {
  const int64_t k = logits.size(1);
  auto ce = torch::cross_entropy_loss(logits, target);
  auto prob = torch::softmax(logits, 1);
  auto onehot = torch::one_hot(target, k).permute({0, 4, 1, 2, 3}).to(prob.dtype());
  auto fg_p = prob.slice(1, 1);
  auto fg_g = onehot.slice(1, 1);
  const std::vector<int64_t> dims{0, 2, 3, 4};
  auto inter = (fg_p * fg_g).sum(dims);
  auto denom = fg_p.sum(dims) + fg_g.sum(dims);
  auto soft_dice = ((2.0 * inter + 1e-5) / (denom + 1e-5)).mean();
  return ce + (1.0 - soft_dice);
}

double poly_lr(int64_t epoch, const FinetuneConfig& cfg) {
  return cfg.lr * std::pow(1.0 - static_cast<double>(epoch) / static_cast<double>(cfg.epochs), cfg.poly_power);
}

double cls_lr(double t, const FinetuneConfig& cfg) {
  const double total = static_cast<double>(cfg.epochs);
  if (t < 0.0 || t > total) fail(ErrorKind::schedule, "epoch position outside [0, epochs]");
  if (t < cfg.warmup_epochs) return cfg.lr * t / cfg.warmup_epochs;
  const double u = (t - cfg.warmup_epochs) / (total - cfg.warmup_epochs);
  return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * u));
}

torch::Tensor ncc_loss(const torch::Tensor& a, const torch::Tensor& b, int64_t window) {
  auto box = torch::ones({1, 1, window, window, window}, a.options());
  const auto opts = torch::nn::functional::Conv3dFuncOptions().padding(window / 2);
  auto sum = [&](const torch::Tensor& x) { return torch::nn::functional::conv3d(x, box, opts); };
  const double n = static_cast<double>(window * window * window);
  auto sa = sum(a), sb = sum(b);
  auto saa = sum(a * a), sbb = sum(b * b), sab = sum(a * b);
  auto ua = sa / n, ub = sb / n;
  auto cross = sab - ub * sa - ua * sb + ua * ub * n;
  auto va = saa - 2 * ua * sa + ua * ua * n;
  auto vb = sbb - 2 * ub * sb + ub * ub * n;
  return -(cross * cross / (va * vb + 1e-5)).mean();
}

torch::Tensor smoothness_loss(const torch::Tensor& field) {
  auto dx = field.slice(2, 1) - field.slice(2, 0, -1);
  auto dy = field.slice(3, 1) - field.slice(3, 0, -1);
  auto dz = field.slice(4, 1) - field.slice(4, 0, -1);
  return (dx.pow(2).mean() + dy.pow(2).mean() + dz.pow(2).mean()) / 3.0;
}

LabelVolume predict_seg(SegNet& net, const Volume& image) {
  torch::NoGradGuard g;
  net->eval();
  auto logits = net->forward(volume_tensor(image));
  return to_labels(logits.argmax(1)[0], image.shape);
}

SegReport evaluate_seg(SegNet& net, const std::vector<SegSample>& samples, int n_classes) {
  if (samples.empty()) fail(ErrorKind::eval, "no samples to evaluate");
  SegReport r;
  r.class_dice.assign(static_cast<std::size_t>(n_classes - 1), 0.0);
  for (const auto& s : samples) {
    auto pred = predict_seg(net, s.image);
    for (int k = 1; k < n_classes; ++k) r.class_dice[static_cast<std::size_t>(k - 1)] += dice(pred, s.labels, k);
  }
  for (auto& d : r.class_dice) d /= static_cast<double>(samples.size());
  r.mean_foreground_dice = std::accumulate(r.class_dice.begin(), r.class_dice.end(), 0.0) / static_cast<double>(r.class_dice.size());
  return r;
}

ClsReport evaluate_cls(ClsNet& net, const std::vector<ClsSample>& samples, int n_classes, int64_t input_size) {
  if (samples.empty()) fail(ErrorKind::eval, "no samples to evaluate");
  torch::NoGradGuard g;
  net->eval();
  std::vector<int> preds, labels;
  std::vector<double> scores;
  for (const auto& s : samples) {
    auto logits = net->forward(volume_tensor(cls_input(s.image, input_size)));
    auto prob = torch::softmax(logits.to(torch::kDouble), 1)[0];
    preds.push_back(static_cast<int>(prob.argmax().item<int64_t>()));
    labels.push_back(s.label);
    if (n_classes == 2) scores.push_back(prob[1].item<double>());
  }
  ClsReport r;
  r.confusion = confusion(preds, labels, n_classes);
  r.accuracy = accuracy(preds, labels);
  const bool both = std::find(labels.begin(), labels.end(), 0) != labels.end() && std::find(labels.begin(), labels.end(), 1) != labels.end();
  if (n_classes == 2 && both) r.auc = roc_auc(scores, labels);
  return r;
}

RegReport evaluate_reg(RegNet& net, const std::vector<RegSample>& samples) {
  if (samples.empty()) fail(ErrorKind::eval, "no samples to evaluate");
  torch::NoGradGuard g;
  net->eval();
  RegReport r;
  for (const auto& s : samples) {
    if (s.moving_labels.data.size() != static_cast<std::size_t>(s.moving.voxel_count()) ||
        s.fixed_labels.data.size() != static_cast<std::size_t>(s.fixed.voxel_count())) {
      fail(ErrorKind::eval, "registration sample is missing labels");
    }
    auto field = net->forward(volume_tensor(s.moving), volume_tensor(s.fixed));
    auto lab = label_tensor(s.moving_labels).unsqueeze(0).to(torch::kFloat);
    auto warped = to_labels(warp(lab, field, WarpMode::nearest).round()[0][0], s.moving.shape);
    r.dice += foreground_dice(warped, s.fixed_labels);
    r.baseline_dice += foreground_dice(s.moving_labels, s.fixed_labels);
    r.max_displacement = std::max(r.max_displacement, field.pow(2).sum(1).sqrt().max().item<double>());
  }
  r.dice /= static_cast<double>(samples.size());
  r.baseline_dice /= static_cast<double>(samples.size());
  return r;
}

SegResult finetune_seg(const FinetuneConfig& cfg, const EncoderConfig& enc, const std::vector<SegSample>& train,
                       const std::vector<SegSample>& val, const std::optional<ParamSet>& init) {
  cfg.validate();
  if (train.empty()) fail(ErrorKind::input, "segmentation needs training samples");
  for (const auto& s : train) {
    if (s.labels.shape != s.image.shape) fail(ErrorKind::shape, "label grid does not match its image");
    for (auto v : s.labels.data) {
      if (v < 0 || v >= cfg.n_classes) fail(ErrorKind::config, "label " + std::to_string(v) + " exceeds n_classes " + std::to_string(cfg.n_classes));
    }
  }
  SegResult res;
  res.net = SegNet(enc, cfg.n_classes, cfg.seed);
  if (init) transfer_encoder_weights(*init, *res.net, TransferMode::adapt_input_channels);
  auto params = trainable(*res.net, cfg.freeze_encoder);
  auto sgd = torch::optim::SGDOptions(cfg.lr).momentum(cfg.momentum).nesterov(cfg.momentum > 0.0).weight_decay(cfg.weight_decay);
  torch::optim::SGD opt(params, sgd);

  double best = -1.0;
  ParamSet best_params;
  for (int64_t e = 0; e < cfg.epochs; ++e) {
    const double lr = poly_lr(e, cfg);
    for (auto& group : opt.param_groups()) static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
    res.net->train();
    double loss_sum = 0.0;
    const auto batches = batches_of(epoch_order(train.size(), cfg.seed, e), cfg.batch);
    for (const auto& b : batches) {
      std::vector<torch::Tensor> xs, ys;
      for (auto i : b) {
        xs.push_back(volume_tensor(train[i].image));
        ys.push_back(label_tensor(train[i].labels));
      }
      opt.zero_grad();
      auto loss = seg_loss(res.net->forward(torch::cat(xs)), torch::cat(ys));
      const double l = loss.item<double>();
      check_finite(l, "segmentation", e + 1);
      loss.backward();
      torch::nn::utils::clip_grad_norm_(params, cfg.grad_clip);
      opt.step();
      loss_sum += l;
    }
    EpochRecord rec{e + 1, lr, loss_sum / static_cast<double>(batches.size()), 0.0};
    if (!val.empty()) {
      rec.val_metric = evaluate_seg(res.net, val, cfg.n_classes).mean_foreground_dice;
      if (rec.val_metric > best) {
        best = rec.val_metric;
        best_params = clone_params(param_set(*res.net));
        res.best_epoch = e + 1;
      }
    }
    res.history.push_back(rec);
  }
  if (!best_params.empty()) load_params(*res.net, best_params);
  else res.best_epoch = cfg.epochs;
  return res;
}

ClsResult finetune_cls(const FinetuneConfig& cfg, const EncoderConfig& enc, const std::vector<ClsSample>& train,
                       const std::vector<ClsSample>& val, const std::optional<ParamSet>& init) {
  cfg.validate();
  if (train.empty()) fail(ErrorKind::input, "classification needs training samples");
  for (const auto& s : train) {
    if (s.label < 0 || s.label >= cfg.n_classes) fail(ErrorKind::config, "class label " + std::to_string(s.label) + " exceeds n_classes");
  }
  std::vector<torch::Tensor> inputs;
  for (const auto& s : train) inputs.push_back(volume_tensor(cls_input(s.image, cfg.input_size)));

  ClsResult res;
  res.net = ClsNet(enc, cfg.n_classes, cfg.seed, cfg.hidden);
  if (init) transfer_encoder_weights(*init, *res.net, TransferMode::adapt_input_channels);
  auto params = trainable(*res.net, cfg.freeze_encoder);
  torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.lr));

  const auto per_epoch = static_cast<int64_t>((train.size() + static_cast<std::size_t>(cfg.batch) - 1) / static_cast<std::size_t>(cfg.batch));
  int64_t update = 0;
  double best = -1.0;
  ParamSet best_params;
  for (int64_t e = 0; e < cfg.epochs; ++e) {
    res.net->train();
    double loss_sum = 0.0, lr = 0.0;
    const auto batches = batches_of(epoch_order(train.size(), cfg.seed, e), cfg.batch);
    for (const auto& b : batches) {
      ++update;
      lr = cls_lr(static_cast<double>(update) / static_cast<double>(per_epoch), cfg);
      for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
      std::vector<torch::Tensor> xs;
      std::vector<int64_t> ys;
      for (auto i : b) {
        xs.push_back(inputs[i]);
        ys.push_back(train[i].label);
      }
      opt.zero_grad();
      auto loss = torch::cross_entropy_loss(res.net->forward(torch::cat(xs)), torch::tensor(ys, torch::kLong));
      const double l = loss.item<double>();
      check_finite(l, "classification", e + 1);
      loss.backward();
      opt.step();
      loss_sum += l;
    }
    EpochRecord rec{e + 1, lr, loss_sum / static_cast<double>(batches.size()), 0.0};
    if (!val.empty()) {
      rec.val_metric = evaluate_cls(res.net, val, cfg.n_classes, cfg.input_size).accuracy;
      if (rec.val_metric > best) {
        best = rec.val_metric;
        best_params = clone_params(param_set(*res.net));
        res.best_epoch = e + 1;
      }
    }
    res.history.push_back(rec);
  }
  if (!best_params.empty()) load_params(*res.net, best_params);
  else res.best_epoch = cfg.epochs;
  return res;
}

RegResult finetune_reg(const FinetuneConfig& cfg, const EncoderConfig& enc, const std::vector<RegSample>& train,
                       const std::vector<RegSample>& val, const std::optional<ParamSet>& init) {
  cfg.validate();
  if (enc.in_channels != 2) fail(ErrorKind::config, "registration encoders take 2 input channels");
  if (train.empty()) fail(ErrorKind::input, "registration needs training pairs");
  RegResult res;
  res.net = RegNet(enc, cfg.seed);
  if (init) transfer_encoder_weights(*init, *res.net, TransferMode::adapt_input_channels);
  auto params = trainable(*res.net, cfg.freeze_encoder);
  torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.lr));

  double best = -1.0;
  ParamSet best_params;
  for (int64_t e = 0; e < cfg.epochs; ++e) {
    res.net->train();
    double loss_sum = 0.0;
    const auto batches = batches_of(epoch_order(train.size(), cfg.seed, e), cfg.batch);
    for (const auto& b : batches) {
      std::vector<torch::Tensor> ms, fs;
      for (auto i : b) {
        ms.push_back(volume_tensor(train[i].moving));
        fs.push_back(volume_tensor(train[i].fixed));
      }
      auto moving = torch::cat(ms), fixed = torch::cat(fs);
      opt.zero_grad();
      auto field = res.net->forward(moving, fixed);
      auto warped = warp(moving, field, WarpMode::trilinear);
      auto sim = cfg.similarity == Similarity::mse ? (warped - fixed).pow(2).mean() : ncc_loss(warped, fixed, cfg.ncc_window);
      auto loss = sim + cfg.smooth_weight * smoothness_loss(field);
      const double l = loss.item<double>();
      check_finite(l, "registration", e + 1);
      loss.backward();
      opt.step();
      loss_sum += l;
    }
    EpochRecord rec{e + 1, cfg.lr, loss_sum / static_cast<double>(batches.size()), 0.0};
    if (!val.empty()) {
      rec.val_metric = evaluate_reg(res.net, val).dice;
      if (rec.val_metric > best) {
        best = rec.val_metric;
        best_params = clone_params(param_set(*res.net));
        res.best_epoch = e + 1;
      }
    }
    res.history.push_back(rec);
  }
  if (!best_params.empty()) load_params(*res.net, best_params);
  else res.best_epoch = cfg.epochs;
  return res;
}

}  // namespace triad
