#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "triad/manifest.hpp"
#include "triad/models.hpp"
#include "triad/text.hpp"
#include "triad/volume.hpp"

namespace triad {

struct PretrainConfig {
  int64_t steps = 200000;
  int64_t warmup = 1000;
  int64_t batch = 8;
  int64_t roi = 96;
  double base_lr = 1e-6;
  double loss_weight = 0.01;  // lambda on the log-ratio term
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-6;  // added to every distance inside the log-ratio loss
  int64_t checkpoint_every = 20000;
  std::uint64_t seed = 0;

  /// Default settings; base_lr is 1e-6 for swin and 1e-4 for conv encoders.
  static PretrainConfig defaults(Arch arch);
  void validate() const;
};

/// Mean absolute difference.
torch::Tensor recon_l1_loss(const torch::Tensor& recon, const torch::Tensor& target);

/// Mean over anchors a and unordered pairs {i, j} of the other samples of
/// [log(D(F_a,F_i)/D(F_a,F_j)) - log(D(Y_a,Y_i)/D(Y_a,Y_j))]^2, where D is the
/// Euclidean distance plus eps. F is [B, d], Y is [B, e], B >= 3.
torch::Tensor log_ratio_loss(const torch::Tensor& f, const torch::Tensor& y, double eps = 1e-6);

struct LossParts {
  torch::Tensor total;
  torch::Tensor l1;
  torch::Tensor log_ratio;  // detached and not part of total when lambda == 0
};

/// total = l1 + lambda * log_ratio.
LossParts total_loss(const torch::Tensor& recon, const torch::Tensor& target, const torch::Tensor& f, const torch::Tensor& y, double lambda,
                     double eps = 1e-6);

/// Linear warmup from 0 then cosine decay to 0 at `steps`. Update k (1-based) uses lr_schedule(k).
double lr_schedule(int64_t step, const PretrainConfig& cfg);

struct StepMetrics {
  int64_t step = 0;
  double l1 = 0.0;
  double log_ratio = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

/// Serialized training state. Tensors are stored by name; optimizer moments
/// use the prefixes "adam.exp_avg." and "adam.exp_avg_sq.".
struct Checkpoint {
  std::string kind = "pretrain";
  std::string encoder;  // EncoderConfig::canonical()
  std::string config_hash;
  int64_t step = 0;
  std::uint64_t seed = 0;  // data order and crops are pure functions of (seed, step)
  ParamSet params;
  ParamSet optimizer;
  std::map<std::string, int64_t> optimizer_steps;

  EncoderConfig encoder_config() const { return EncoderConfig::from_canonical(encoder); }
};

std::string model_config_hash(std::string_view kind, const EncoderConfig& cfg);
bool checkpoints_equal(const Checkpoint& a, const Checkpoint& b);

/// "TRIADCK1", u64 header length, JSON header, little-endian f32 payload, CRC32 of the payload.
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Crops and text embeddings for pre-training. Batch contents are a pure
/// function of (seed, step): sample g = step * B + b reads position g mod N
/// of the permutation drawn for epoch g / N, and its crop offsets come from
/// a stream keyed by g.
class PretrainData {
 public:
  PretrainData(std::vector<Volume> volumes, torch::Tensor text);
  /// Loads every record's volume (min-max scaled to [0, 1]) and embeds its description.
  static PretrainData from_manifest(const DatasetManifest& manifest, const TextEmbedder& embedder);

  int64_t size() const { return static_cast<int64_t>(volumes_.size()); }
  int64_t text_dim() const { return text_.size(1); }
  std::vector<int64_t> indices(int64_t step, int64_t batch, std::uint64_t seed) const;
  /// ([B, 1, roi, roi, roi] crops, [B, e] embeddings) for zero-based update index `step`.
  std::pair<torch::Tensor, torch::Tensor> batch(int64_t step, int64_t batch, int64_t roi, std::uint64_t seed) const;

 private:
  std::vector<Volume> volumes_;
  torch::Tensor text_;
};

/// Owns the network and optimizer; one writer.
class Pretrainer {
 public:
  Pretrainer(const EncoderConfig& enc, const PretrainConfig& cfg);

  /// One AdamW update at lr_schedule(step() + 1). Throws divergence on a
  /// non-finite loss before touching the parameters.
  StepMetrics train_step(const torch::Tensor& crops, const torch::Tensor& text);

  int64_t step() const { return step_; }
  PretrainNet& net() { return net_; }
  const PretrainConfig& config() const { return cfg_; }

  Checkpoint checkpoint() const;
  /// Throws compatibility when the checkpoint belongs to a different model.
  void restore(const Checkpoint& c);

 private:
  EncoderConfig enc_;
  PretrainConfig cfg_;
  PretrainNet net_{nullptr};
  std::unique_ptr<torch::optim::AdamW> opt_;
  std::vector<std::pair<std::string, torch::Tensor>> ordered_;
  int64_t step_ = 0;
};

struct PretrainResult {
  std::vector<StepMetrics> metrics;
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path final_checkpoint;
};

/// Runs until cfg.steps, writing out_dir/checkpoints/step_NNNNNNNN.ckpt every
/// checkpoint_every steps and at the end, and out_dir/metrics.jsonl with one
/// record per step. With `resume`, training continues from that checkpoint
/// and earlier metrics records are kept.
PretrainResult pretrain_loop(const EncoderConfig& enc, const PretrainConfig& cfg, const PretrainData& data,
                             const std::filesystem::path& out_dir, const std::optional<std::filesystem::path>& resume = std::nullopt,
                             const std::function<void(const StepMetrics&)>& on_step = {});

std::string metrics_line(const StepMetrics& m);

}  // namespace triad
