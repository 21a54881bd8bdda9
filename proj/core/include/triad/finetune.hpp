#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "triad/metrics.hpp"
#include "triad/models.hpp"
#include "triad/volume.hpp"

namespace triad {

enum class Task { seg, cls, reg };
std::string_view to_string(Task task);
Task parse_task(std::string_view text);

enum class Similarity { mse, ncc };

struct FinetuneConfig {
  Task task = Task::seg;
  int64_t epochs = 20;
  int64_t batch = 1;
  double lr = 0.01;
  bool freeze_encoder = false;
  std::uint64_t seed = 0;

  // seg: SGD with nesterov momentum and poly decay
  int n_classes = 2;
  double momentum = 0.99;
  double weight_decay = 3e-5;
  double poly_power = 0.9;
  double grad_clip = 12.0;

  // cls: Adam, linear warmup then cosine, both in fractional epochs
  double warmup_epochs = 5.0;
  int64_t hidden = 512;
  int64_t input_size = 64;  // cube side the inputs are resized to

  // reg
  Similarity similarity = Similarity::ncc;
  double smooth_weight = 1.0;
  int64_t ncc_window = 9;

  /// Defaults for the task: seg SGD 0.01, cls Adam 1e-3, reg Adam 1e-4 with batch 1.
  static FinetuneConfig defaults(Task task);
  void validate() const;
};

struct SegSample {
  Volume image;
  LabelVolume labels;
};

struct ClsSample {
  Volume image;
  int label = 0;
};

struct RegSample {
  Volume moving;
  Volume fixed;
  LabelVolume moving_labels;
  LabelVolume fixed_labels;
};

struct EpochRecord {
  int64_t epoch = 0;  // 1-based
  double lr = 0.0;    // rate of the epoch's last update
  double train_loss = 0.0;
  double val_metric = 0.0;
};

struct SegReport {
  std::vector<double> class_dice;  // classes 1..K-1, averaged over samples
  double mean_foreground_dice = 0.0;
};

struct ClsReport {
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  std::optional<double> auc;  // binary tasks with both classes present
};

struct RegReport {
  double dice = 0.0;           // mean foreground dice of warped moving labels vs fixed labels
  double baseline_dice = 0.0;  // same without any warp
  double max_displacement = 0.0;
};

struct SegResult {
  SegNet net{nullptr};  // best-validation weights
  std::vector<EpochRecord> history;
  int64_t best_epoch = 0;
};

struct ClsResult {
  ClsNet net{nullptr};
  std::vector<EpochRecord> history;
  int64_t best_epoch = 0;
};

struct RegResult {
  RegNet net{nullptr};
  std::vector<EpochRecord> history;
  int64_t best_epoch = 0;
};

/// Segmentation logits loss: cross-entropy plus (1 - mean foreground soft dice).
torch::Tensor seg_loss(const torch::Tensor& logits, const torch::Tensor& target);
/// lr * (1 - epoch / epochs)^power for zero-based epoch.
double poly_lr(int64_t epoch, const FinetuneConfig& cfg);
/// Linear warmup to lr over warmup_epochs, then cosine to 0 at `epochs`;
/// t is measured in (fractional) epochs.
double cls_lr(double t, const FinetuneConfig& cfg);
/// Negative mean local normalized cross-correlation over cubic windows.
torch::Tensor ncc_loss(const torch::Tensor& a, const torch::Tensor& b, int64_t window);
/// Mean squared forward difference of the field along the three axes, averaged.
torch::Tensor smoothness_loss(const torch::Tensor& field);

/// The encoder is copied from `init` when given (encoder.* names), otherwise
/// left at its seeded random state. Empty `val` selects the last epoch.
SegResult finetune_seg(const FinetuneConfig& cfg, const EncoderConfig& enc, const std::vector<SegSample>& train,
                       const std::vector<SegSample>& val, const std::optional<ParamSet>& init = std::nullopt);
ClsResult finetune_cls(const FinetuneConfig& cfg, const EncoderConfig& enc, const std::vector<ClsSample>& train,
                       const std::vector<ClsSample>& val, const std::optional<ParamSet>& init = std::nullopt);
/// `enc` must have in_channels == 2; a one-channel init is adapted.
RegResult finetune_reg(const FinetuneConfig& cfg, const EncoderConfig& enc, const std::vector<RegSample>& train,
                       const std::vector<RegSample>& val, const std::optional<ParamSet>& init = std::nullopt);

LabelVolume predict_seg(SegNet& net, const Volume& image);
SegReport evaluate_seg(SegNet& net, const std::vector<SegSample>& samples, int n_classes);
ClsReport evaluate_cls(ClsNet& net, const std::vector<ClsSample>& samples, int n_classes, int64_t input_size);
RegReport evaluate_reg(RegNet& net, const std::vector<RegSample>& samples);

/// [1, 1, D, H, W] float view of a volume's stored values.
torch::Tensor volume_tensor(const Volume& v);

}  // namespace triad
