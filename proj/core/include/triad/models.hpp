#pragma once

#include <torch/torch.h>

#include <array>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace triad {

enum class Arch { swin, conv };
std::string_view to_string(Arch arch);
Arch parse_arch(std::string_view text);

struct EncoderConfig {
  Arch arch = Arch::swin;
  int64_t feature_size = 48;
  std::array<int64_t, 4> depths{2, 2, 2, 2};
  std::array<int64_t, 4> heads{3, 6, 12, 24};
  int64_t window = 7;
  int64_t patch = 2;  // patch-embedding kernel; the embedding stride is always 2
  int64_t in_channels = 1;

  int64_t bottleneck_channels() const { return 16 * feature_size; }
  /// Stage i attends over C * 2^i channels, which must split evenly into heads[i].
  void validate() const;
  /// Stable textual form used for hashing and checkpoint headers.
  std::string canonical() const;
  static EncoderConfig from_canonical(std::string_view text);
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// Named float tensors. Encoder entries live under "encoder.".
using ParamSet = std::map<std::string, torch::Tensor>;
/// Five levels at strides 2..32 with channels C..16C; back() is the bottleneck.
using FeaturePyramid = std::vector<torch::Tensor>;

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const EncoderConfig& cfg);
  /// x is [B, in_channels, D, H, W] with D, H, W divisible by 32.
  FeaturePyramid forward(const torch::Tensor& x);
  const EncoderConfig& config() const { return cfg_; }

 private:
  FeaturePyramid forward_swin(const torch::Tensor& x);
  FeaturePyramid forward_conv(const torch::Tensor& x);

  EncoderConfig cfg_;
  torch::nn::Conv3d patch_embed_{nullptr};
  torch::nn::ModuleList stages_{nullptr};
  torch::nn::ModuleList merges_{nullptr};
};
TORCH_MODULE(Encoder);

/// Skip-free upsampling decoder: five x2 transpose convolutions halving the
/// channels from 16C down to C/2, then a 1^3 convolution to one channel.
class ReconDecoderImpl : public torch::nn::Module {
 public:
  explicit ReconDecoderImpl(const EncoderConfig& cfg);
  torch::Tensor forward(const torch::Tensor& bottleneck);

 private:
  int64_t in_channels_;
  torch::nn::ModuleList ups_{nullptr};
  torch::nn::Conv3d out_{nullptr};
};
TORCH_MODULE(ReconDecoder);

/// U-shaped decoder over the full pyramid plus the raw input. Used for
/// segmentation logits and, with three zero-initialised outputs, for
/// registration fields.
class UDecoderImpl : public torch::nn::Module {
 public:
  UDecoderImpl(const EncoderConfig& cfg, int64_t out_channels, bool zero_final);
  torch::Tensor forward(const torch::Tensor& input, const FeaturePyramid& pyramid);

 private:
  std::map<std::string, std::shared_ptr<torch::nn::Module>> blocks_;
  torch::nn::Conv3d out_{nullptr};
};
TORCH_MODULE(UDecoder);

/// Global average pool -> linear(16C, hidden) -> GELU -> linear(hidden, K).
class ClsHeadImpl : public torch::nn::Module {
 public:
  ClsHeadImpl(const EncoderConfig& cfg, int64_t n_classes, int64_t hidden = 512);
  torch::Tensor forward(const torch::Tensor& bottleneck);

 private:
  int64_t in_channels_;
  torch::nn::Linear fc1_{nullptr};
  torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(ClsHead);

struct PretrainOutput {
  torch::Tensor recon;   // [B, 1, D, H, W]
  torch::Tensor pooled;  // [B, 16C]
};

/// Each network seeds its encoder and its head from separate streams derived
/// from `seed`, so two networks with the same seed share head initialisation
/// regardless of where the encoder weights come from later.
class PretrainNetImpl : public torch::nn::Module {
 public:
  PretrainNetImpl(const EncoderConfig& cfg, std::uint64_t seed);
  PretrainOutput forward(const torch::Tensor& x);
  Encoder encoder{nullptr};
  ReconDecoder decoder{nullptr};
};
TORCH_MODULE(PretrainNet);

class SegNetImpl : public torch::nn::Module {
 public:
  SegNetImpl(const EncoderConfig& cfg, int64_t n_classes, std::uint64_t seed);
  torch::Tensor forward(const torch::Tensor& x);
  Encoder encoder{nullptr};
  UDecoder seg_decoder{nullptr};
};
TORCH_MODULE(SegNet);

class ClsNetImpl : public torch::nn::Module {
 public:
  ClsNetImpl(const EncoderConfig& cfg, int64_t n_classes, std::uint64_t seed, int64_t hidden = 512);
  torch::Tensor forward(const torch::Tensor& x);
  Encoder encoder{nullptr};
  ClsHead cls_head{nullptr};
};
TORCH_MODULE(ClsNet);

/// Encoder over cat(moving, fixed); requires cfg.in_channels == 2.
class RegNetImpl : public torch::nn::Module {
 public:
  RegNetImpl(const EncoderConfig& cfg, std::uint64_t seed);
  /// Displacement field [B, 3, D, H, W] in voxels along axes 0, 1, 2.
  torch::Tensor forward(const torch::Tensor& moving, const torch::Tensor& fixed);
  Encoder encoder{nullptr};
  UDecoder reg_decoder{nullptr};
};
TORCH_MODULE(RegNet);

enum class WarpMode { trilinear, nearest };

/// output(p) = moving(p + u(p)); samples outside the grid clamp to the edge.
/// moving is [B, C, D, H, W], field [B, 3, D, H, W].
torch::Tensor warp(const torch::Tensor& moving, const torch::Tensor& field, WarpMode mode);

/// Shallow view of every parameter, keyed by its dotted path.
ParamSet param_set(const torch::nn::Module& module);
/// Deep copy, detached from autograd.
ParamSet clone_params(const ParamSet& params);
bool params_bit_equal(const ParamSet& a, const ParamSet& b);
/// Copies `src` into the module's parameters; every name must match exactly.
void load_params(torch::nn::Module& module, const ParamSet& src);

enum class TransferMode {
  strict,
  /// encoder.patch_embed.weight may differ in input channels: the source
  /// kernel is summed over its inputs and split evenly across the new ones,
  /// so an input repeated on every channel gives the same response.
  adapt_input_channels,
};

/// Returns dst with every encoder.* entry replaced by a copy of src's entry.
/// Any missing or shape-mismatched name raises a transfer error listing all of them.
ParamSet transfer_encoder_weights(const ParamSet& src, const ParamSet& dst, TransferMode mode = TransferMode::strict);
/// In-place variant on a live module.
void transfer_encoder_weights(const ParamSet& src, torch::nn::Module& dst, TransferMode mode = TransferMode::strict);

enum class NetKind { encoder, pretrain, seg, cls, reg };
/// Parameter count of the network `kind` built from cfg, from closed-form
/// per-layer sums. `out` is K for seg/cls and ignored otherwise.
int64_t count_params(const EncoderConfig& cfg, NetKind kind = NetKind::seg, int64_t out = 2, int64_t hidden = 512);

}  // namespace triad
