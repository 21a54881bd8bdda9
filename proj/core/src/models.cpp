#include "triad/models.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "triad/error.hpp"
#include "triad/hash.hpp"

namespace triad {
namespace F = torch::nn::functional;
using torch::indexing::Slice;

namespace {

void trunc_normal_(torch::Tensor t, double std) {
  torch::NoGradGuard guard;
  // Inverse-CDF sampling restricted to [-2 std, 2 std].
  const double lo = std::erf(-2.0 / std::sqrt(2.0));
  const double hi = std::erf(2.0 / std::sqrt(2.0));
  t.uniform_(lo, hi).erfinv_().mul_(std * std::sqrt(2.0)).clamp_(-2.0 * std, 2.0 * std);
}

void init_linear(torch::nn::Linear& l) {
  trunc_normal_(l->weight, 0.02);
  if (l->bias.defined()) {
    torch::NoGradGuard guard;
    l->bias.zero_();
  }
}

torch::Tensor channels_last(const torch::Tensor& x) { return x.permute({0, 2, 3, 4, 1}); }
torch::Tensor channels_first(const torch::Tensor& x) { return x.permute({0, 4, 1, 2, 3}).contiguous(); }

using Window = std::array<int64_t, 3>;

class WindowAttentionImpl : public torch::nn::Module {
 public:
  WindowAttentionImpl(int64_t dim, int64_t heads, int64_t window) : dim_(dim), heads_(heads), window_(window) {
    qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
    proj_ = register_module("proj", torch::nn::Linear(dim, dim));
    const int64_t span = 2 * window - 1;
    table_ = register_parameter("rel_pos_table", torch::zeros({span * span * span, heads}));
    init_linear(qkv_);
    init_linear(proj_);
    trunc_normal_(table_, 0.02);
  }

  torch::Tensor forward(const torch::Tensor& x, const Window& ws, const torch::Tensor& mask) {
    const int64_t bw = x.size(0);
    const int64_t n = x.size(1);
    const int64_t hd = dim_ / heads_;
    auto qkv = qkv_(x).reshape({bw, n, 3, heads_, hd}).permute({2, 0, 3, 1, 4});
    auto q = qkv[0] * (1.0 / std::sqrt(static_cast<double>(hd)));
    auto attn = q.matmul(qkv[1].transpose(-2, -1));
    auto bias = table_.index_select(0, relative_index(ws)).view({n, n, heads_}).permute({2, 0, 1});
    attn = attn + bias.unsqueeze(0);
    if (mask.defined()) {
      const int64_t nw = mask.size(0);
      attn = attn.view({bw / nw, nw, heads_, n, n}) + mask.to(attn.dtype()).unsqueeze(1).unsqueeze(0);
      attn = attn.view({bw, heads_, n, n});
    }
    attn = attn.softmax(-1);
    return proj_(attn.matmul(qkv[2]).transpose(1, 2).reshape({bw, n, dim_}));
  }

 private:
  const torch::Tensor& relative_index(const Window& ws) {
    auto it = index_cache_.find(ws);
    if (it != index_cache_.end()) return it->second;
    const int64_t n = ws[0] * ws[1] * ws[2];
    const int64_t span = 2 * window_ - 1;
    std::vector<Window> coords;
    for (int64_t a = 0; a < ws[0]; ++a)
      for (int64_t b = 0; b < ws[1]; ++b)
        for (int64_t c = 0; c < ws[2]; ++c) coords.push_back({a, b, c});
    std::vector<int64_t> idx(static_cast<std::size_t>(n * n));
    for (int64_t p = 0; p < n; ++p)
      for (int64_t q = 0; q < n; ++q) {
        const auto& u = coords[static_cast<std::size_t>(p)];
        const auto& v = coords[static_cast<std::size_t>(q)];
        idx[static_cast<std::size_t>(p * n + q)] =
            ((u[0] - v[0] + window_ - 1) * span + (u[1] - v[1] + window_ - 1)) * span + (u[2] - v[2] + window_ - 1);
      }
    auto t = torch::tensor(idx, torch::kLong);
    return index_cache_.emplace(ws, t).first->second;
  }

  int64_t dim_;
  int64_t heads_;
  int64_t window_;
  torch::nn::Linear qkv_{nullptr};
  torch::nn::Linear proj_{nullptr};
  torch::Tensor table_;
  std::map<Window, torch::Tensor> index_cache_;
};
TORCH_MODULE(WindowAttention);

torch::Tensor partition(const torch::Tensor& x, const Window& ws) {
  const int64_t b = x.size(0), c = x.size(4);
  return x.view({b, x.size(1) / ws[0], ws[0], x.size(2) / ws[1], ws[1], x.size(3) / ws[2], ws[2], c})
      .permute({0, 1, 3, 5, 2, 4, 6, 7})
      .reshape({-1, ws[0] * ws[1] * ws[2], c});
}

torch::Tensor unpartition(const torch::Tensor& w, const Window& ws, int64_t b, const Window& grid) {
  const int64_t c = w.size(2);
  return w.view({b, grid[0] / ws[0], grid[1] / ws[1], grid[2] / ws[2], ws[0], ws[1], ws[2], c})
      .permute({0, 1, 4, 2, 5, 3, 6, 7})
      .reshape({b, grid[0], grid[1], grid[2], c});
}

class SwinBlockImpl : public torch::nn::Module {
 public:
  SwinBlockImpl(int64_t dim, int64_t heads, int64_t window, bool shifted) : window_(window), shifted_(shifted) {
    norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn_ = register_module("attn", WindowAttention(dim, heads, window));
    norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    fc1_ = register_module("fc1", torch::nn::Linear(dim, 4 * dim));
    fc2_ = register_module("fc2", torch::nn::Linear(4 * dim, dim));
    init_linear(fc1_);
    init_linear(fc2_);
  }

  torch::Tensor forward(const torch::Tensor& x) {
    const int64_t b = x.size(0);
    const Window grid{x.size(1), x.size(2), x.size(3)};
    Window ws{};
    Window shift{};
    Window padded{};
    for (int a = 0; a < 3; ++a) {
      ws[a] = std::min(window_, grid[a]);
      shift[a] = (shifted_ && grid[a] > window_) ? window_ / 2 : 0;
      padded[a] = (grid[a] + ws[a] - 1) / ws[a] * ws[a];
    }
    auto h = norm1_(x);
    if (padded != grid) {
      h = torch::constant_pad_nd(h, {0, 0, 0, padded[2] - grid[2], 0, padded[1] - grid[1], 0, padded[0] - grid[0]}, 0.0);
    }
    const bool any_shift = shift[0] + shift[1] + shift[2] > 0;
    torch::Tensor mask;
    if (any_shift) {
      h = torch::roll(h, {-shift[0], -shift[1], -shift[2]}, {1, 2, 3});
      mask = shift_mask(padded, ws, shift);
    }
    auto windows = attn_(partition(h, ws), ws, mask);
    h = unpartition(windows, ws, b, padded);
    if (any_shift) h = torch::roll(h, {shift[0], shift[1], shift[2]}, {1, 2, 3});
    if (padded != grid) h = h.index({Slice(), Slice(0, grid[0]), Slice(0, grid[1]), Slice(0, grid[2])});
    auto y = x + h;
    return y + fc2_(F::gelu(fc1_(norm2_(y))));
  }

 private:
  const torch::Tensor& shift_mask(const Window& padded, const Window& ws, const Window& shift) {
    const std::array<int64_t, 9> key{padded[0], padded[1], padded[2], ws[0], ws[1], ws[2], shift[0], shift[1], shift[2]};
    auto it = mask_cache_.find(key);
    if (it != mask_cache_.end()) return it->second;
    auto region = [&](int a, int64_t i) -> int64_t {
      if (shift[a] == 0) return 0;
      if (i < padded[a] - ws[a]) return 0;
      return i < padded[a] - shift[a] ? 1 : 2;
    };
    auto ids = torch::zeros({1, padded[0], padded[1], padded[2], 1});
    auto acc = ids.accessor<float, 5>();
    for (int64_t i = 0; i < padded[0]; ++i)
      for (int64_t j = 0; j < padded[1]; ++j)
        for (int64_t k = 0; k < padded[2]; ++k) acc[0][i][j][k][0] = static_cast<float>(region(0, i) * 9 + region(1, j) * 3 + region(2, k));
    auto w = partition(ids, ws).squeeze(-1);  // [nW, N]
    auto m = (w.unsqueeze(1) != w.unsqueeze(2)).to(torch::kFloat) * -100.0;
    return mask_cache_.emplace(key, m).first->second;
  }

  int64_t window_;
  bool shifted_;
  torch::nn::LayerNorm norm1_{nullptr};
  WindowAttention attn_{nullptr};
  torch::nn::LayerNorm norm2_{nullptr};
  torch::nn::Linear fc1_{nullptr};
  torch::nn::Linear fc2_{nullptr};
  std::map<std::array<int64_t, 9>, torch::Tensor> mask_cache_;
};
TORCH_MODULE(SwinBlock);

class PatchMergingImpl : public torch::nn::Module {
 public:
  explicit PatchMergingImpl(int64_t dim) {
    norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({8 * dim})));
    reduction_ = register_module("reduction", torch::nn::Linear(torch::nn::LinearOptions(8 * dim, 2 * dim).bias(false)));
    init_linear(reduction_);
  }

  torch::Tensor forward(const torch::Tensor& x) {
    std::vector<torch::Tensor> parts;
    for (int64_t i = 0; i < 2; ++i)
      for (int64_t j = 0; j < 2; ++j)
        for (int64_t k = 0; k < 2; ++k)
          parts.push_back(x.index({Slice(), Slice(i, torch::indexing::None, 2), Slice(j, torch::indexing::None, 2),
                                   Slice(k, torch::indexing::None, 2)}));
    return reduction_(norm_(torch::cat(parts, -1)));
  }

 private:
  torch::nn::LayerNorm norm_{nullptr};
  torch::nn::Linear reduction_{nullptr};
};
TORCH_MODULE(PatchMerging);

torch::nn::Conv3d conv(int64_t in, int64_t out, int64_t k, int64_t stride, bool bias) {
  return torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, k).stride(stride).padding(k / 2).bias(bias));
}

torch::nn::InstanceNorm3d inorm(int64_t ch) { return torch::nn::InstanceNorm3d(torch::nn::InstanceNormOptions(ch).affine(true)); }

// Smooth everywhere, so central differences see no kinks.
torch::Tensor act(const torch::Tensor& x) { return F::gelu(x); }

/// conv-norm-act-conv-norm plus a (projected) residual, then act.
class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t in, int64_t out, int64_t stride, bool norm_skip) {
    conv1_ = register_module("conv1", conv(in, out, 3, stride, false));
    norm1_ = register_module("norm1", inorm(out));
    conv2_ = register_module("conv2", conv(out, out, 3, 1, false));
    norm2_ = register_module("norm2", inorm(out));
    if (in != out || stride != 1) {
      skip_ = register_module("skip", conv(in, out, 1, stride, !norm_skip));
      if (norm_skip) skip_norm_ = register_module("skip_norm", inorm(out));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto h = norm2_(conv2_(act(norm1_(conv1_(x)))));
    torch::Tensor r = x;
    if (!skip_.is_empty()) {
      r = skip_(x);
      if (!skip_norm_.is_empty()) r = skip_norm_(r);
    }
    return act(h + r);
  }

 private:
  torch::nn::Conv3d conv1_{nullptr};
  torch::nn::InstanceNorm3d norm1_{nullptr};
  torch::nn::Conv3d conv2_{nullptr};
  torch::nn::InstanceNorm3d norm2_{nullptr};
  torch::nn::Conv3d skip_{nullptr};
  torch::nn::InstanceNorm3d skip_norm_{nullptr};
};
TORCH_MODULE(ResBlock);

class UpBlockImpl : public torch::nn::Module {
 public:
  UpBlockImpl(int64_t in, int64_t out) {
    up_ = register_module("up", torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(in, out, 2).stride(2).bias(false)));
    res_ = register_module("res", ResBlock(2 * out, out, 1, true));
  }
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip) { return res_(torch::cat({up_(x), skip}, 1)); }

 private:
  torch::nn::ConvTranspose3d up_{nullptr};
  ResBlock res_{nullptr};
};
TORCH_MODULE(UpBlock);

void check_spatial(const torch::Tensor& x, int64_t in_channels) {
  if (x.dim() != 5) fail(ErrorKind::shape, "encoder input must be [B, C, D, H, W]");
  if (x.size(1) != in_channels) {
    fail(ErrorKind::shape, "encoder expects " + std::to_string(in_channels) + " input channels, got " + std::to_string(x.size(1)));
  }
  for (int a = 0; a < 3; ++a) {
    if (x.size(2 + a) % 32 != 0 || x.size(2 + a) == 0) {
      fail(ErrorKind::shape, "input axis " + std::to_string(a) + " has size " + std::to_string(x.size(2 + a)) + ", not divisible by 32");
    }
  }
}

std::string join(const std::array<int64_t, 4>& v) {
  return std::to_string(v[0]) + "," + std::to_string(v[1]) + "," + std::to_string(v[2]) + "," + std::to_string(v[3]);
}

}  // namespace

std::string_view to_string(Arch arch) { return arch == Arch::swin ? "swin" : "conv"; }

Arch parse_arch(std::string_view text) {
  if (text == "swin") return Arch::swin;
  if (text == "conv") return Arch::conv;
  fail(ErrorKind::config, "unknown encoder arch '" + std::string(text) + "'");
}

void EncoderConfig::validate() const {
  if (feature_size < 2 || feature_size % 2 != 0) fail(ErrorKind::config, "feature size must be a positive even number");
  if (patch < 1) fail(ErrorKind::config, "patch size must be >= 1");
  if (in_channels < 1) fail(ErrorKind::config, "in_channels must be >= 1");
  if (arch == Arch::swin) {
    if (window < 1) fail(ErrorKind::config, "window must be >= 1");
    for (int i = 0; i < 4; ++i) {
      if (depths[i] < 1) fail(ErrorKind::config, "stage depths must be >= 1");
      const int64_t dim = feature_size << i;
      if (heads[i] < 1 || dim % heads[i] != 0) {
        fail(ErrorKind::config, "stage " + std::to_string(i) + " width " + std::to_string(dim) + " is not divisible by " +
                                    std::to_string(heads[i]) + " heads");
      }
    }
  }
}

std::string EncoderConfig::canonical() const {
  std::ostringstream s;
  s << "arch=" << to_string(arch) << ";C=" << feature_size << ";depths=" << join(depths) << ";heads=" << join(heads)
    << ";window=" << window << ";patch=" << patch << ";in=" << in_channels;
  return s.str();
}

EncoderConfig EncoderConfig::from_canonical(std::string_view text) {
  EncoderConfig c;
  std::map<std::string, std::string> kv;
  std::istringstream s{std::string(text)};
  std::string item;
  while (std::getline(s, item, ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) fail(ErrorKind::parse, "bad encoder config item '" + item + "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  auto four = [](const std::string& v) {
    std::array<int64_t, 4> out{};
    std::istringstream in(v);
    std::string tok;
    for (auto& o : out) {
      if (!std::getline(in, tok, ',')) fail(ErrorKind::parse, "expected four comma-separated integers in '" + v + "'");
      o = std::stoll(tok);
    }
    return out;
  };
  try {
    c.arch = parse_arch(kv.at("arch"));
    c.feature_size = std::stoll(kv.at("C"));
    c.depths = four(kv.at("depths"));
    c.heads = four(kv.at("heads"));
    c.window = std::stoll(kv.at("window"));
    c.patch = std::stoll(kv.at("patch"));
    c.in_channels = std::stoll(kv.at("in"));
  } catch (const std::out_of_range&) {
    fail(ErrorKind::parse, "incomplete encoder config '" + std::string(text) + "'");
  } catch (const std::invalid_argument&) {
    fail(ErrorKind::parse, "non-numeric encoder config '" + std::string(text) + "'");
  }
  c.validate();
  return c;
}

EncoderImpl::EncoderImpl(const EncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int64_t c = cfg_.feature_size;
  stages_ = register_module("stages", torch::nn::ModuleList());
  if (cfg_.arch == Arch::swin) {
    patch_embed_ = register_module(
        "patch_embed", torch::nn::Conv3d(torch::nn::Conv3dOptions(cfg_.in_channels, c, cfg_.patch).stride(2).padding((cfg_.patch - 1) / 2)));
    merges_ = register_module("merges", torch::nn::ModuleList());
    for (int i = 0; i < 4; ++i) {
      const int64_t dim = c << i;
      auto blocks = torch::nn::Sequential();
      for (int64_t d = 0; d < cfg_.depths[i]; ++d) blocks->push_back(SwinBlock(dim, cfg_.heads[i], cfg_.window, d % 2 == 1));
      stages_->push_back(blocks);
      merges_->push_back(PatchMerging(dim));
    }
  } else {
    int64_t in = cfg_.in_channels;
    for (int i = 0; i < 5; ++i) {
      const int64_t out = c << i;
      stages_->push_back(ResBlock(in, out, 2, false));
      in = out;
    }
  }
}

FeaturePyramid EncoderImpl::forward(const torch::Tensor& x) {
  check_spatial(x, cfg_.in_channels);
  return cfg_.arch == Arch::swin ? forward_swin(x) : forward_conv(x);
}

FeaturePyramid EncoderImpl::forward_swin(const torch::Tensor& x) {
  FeaturePyramid levels;
  auto h = channels_last(patch_embed_(x));
  auto level = [](const torch::Tensor& t) { return channels_first(F::layer_norm(t, F::LayerNormFuncOptions({t.size(-1)}))); };
  levels.push_back(level(h));
  for (int i = 0; i < 4; ++i) {
    h = stages_[i]->as<torch::nn::Sequential>()->forward(h);
    h = merges_[i]->as<PatchMerging>()->forward(h);
    levels.push_back(level(h));
  }
  return levels;
}

FeaturePyramid EncoderImpl::forward_conv(const torch::Tensor& x) {
  FeaturePyramid levels;
  torch::Tensor h = x;
  for (int i = 0; i < 5; ++i) {
    h = stages_[i]->as<ResBlock>()->forward(h);
    levels.push_back(h);
  }
  return levels;
}

ReconDecoderImpl::ReconDecoderImpl(const EncoderConfig& cfg) : in_channels_(cfg.bottleneck_channels()) {
  cfg.validate();
  ups_ = register_module("ups", torch::nn::ModuleList());
  int64_t ch = in_channels_;
  for (int i = 0; i < 5; ++i) {
    ups_->push_back(torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(ch, ch / 2, 2).stride(2)));
    ch /= 2;
  }
  out_ = register_module("out", torch::nn::Conv3d(torch::nn::Conv3dOptions(ch, 1, 1)));
}

torch::Tensor ReconDecoderImpl::forward(const torch::Tensor& bottleneck) {
  if (bottleneck.dim() != 5 || bottleneck.size(1) != in_channels_) {
    fail(ErrorKind::config, "reconstruction decoder expects " + std::to_string(in_channels_) + " bottleneck channels, got " +
                                (bottleneck.dim() > 1 ? std::to_string(bottleneck.size(1)) : std::string("none")));
  }
  torch::Tensor h = bottleneck;
  for (const auto& up : *ups_) h = act(up->as<torch::nn::ConvTranspose3d>()->forward(h));
  return out_(h);
}

UDecoderImpl::UDecoderImpl(const EncoderConfig& cfg, int64_t out_channels, bool zero_final) {
  cfg.validate();
  const int64_t c = cfg.feature_size;
  blocks_.emplace("enc1", register_module("enc1", ResBlock(cfg.in_channels, c, 1, true)));
  blocks_.emplace("enc2", register_module("enc2", ResBlock(c, c, 1, true)));
  blocks_.emplace("enc3", register_module("enc3", ResBlock(2 * c, 2 * c, 1, true)));
  blocks_.emplace("enc4", register_module("enc4", ResBlock(4 * c, 4 * c, 1, true)));
  blocks_.emplace("enc5", register_module("enc5", ResBlock(16 * c, 16 * c, 1, true)));
  blocks_.emplace("dec5", register_module("dec5", UpBlock(16 * c, 8 * c)));
  blocks_.emplace("dec4", register_module("dec4", UpBlock(8 * c, 4 * c)));
  blocks_.emplace("dec3", register_module("dec3", UpBlock(4 * c, 2 * c)));
  blocks_.emplace("dec2", register_module("dec2", UpBlock(2 * c, c)));
  blocks_.emplace("dec1", register_module("dec1", UpBlock(c, c)));
  out_ = register_module("out", torch::nn::Conv3d(torch::nn::Conv3dOptions(c, out_channels, 1)));
  if (zero_final) {
    torch::NoGradGuard guard;
    out_->weight.zero_();
    out_->bias.zero_();
  }
}

torch::Tensor UDecoderImpl::forward(const torch::Tensor& input, const FeaturePyramid& p) {
  if (p.size() != 5) fail(ErrorKind::shape, "decoder needs all five pyramid levels");
  auto res = [&](const char* name, const torch::Tensor& x) { return blocks_.at(name)->as<ResBlock>()->forward(x); };
  auto up = [&](const char* name, const torch::Tensor& x, const torch::Tensor& skip) {
    return blocks_.at(name)->as<UpBlock>()->forward(x, skip);
  };
  auto e1 = res("enc1", input);
  auto e2 = res("enc2", p[0]);
  auto e3 = res("enc3", p[1]);
  auto e4 = res("enc4", p[2]);
  auto d5 = up("dec5", res("enc5", p[4]), p[3]);
  auto d4 = up("dec4", d5, e4);
  auto d3 = up("dec3", d4, e3);
  auto d2 = up("dec2", d3, e2);
  return out_(up("dec1", d2, e1));
}

ClsHeadImpl::ClsHeadImpl(const EncoderConfig& cfg, int64_t n_classes, int64_t hidden) : in_channels_(cfg.bottleneck_channels()) {
  if (n_classes < 2) fail(ErrorKind::config, "classification needs at least 2 classes");
  if (hidden < 1) fail(ErrorKind::config, "hidden width must be positive");
  fc1_ = register_module("fc1", torch::nn::Linear(in_channels_, hidden));
  fc2_ = register_module("fc2", torch::nn::Linear(hidden, n_classes));
  init_linear(fc1_);
  init_linear(fc2_);
}

torch::Tensor ClsHeadImpl::forward(const torch::Tensor& bottleneck) {
  if (bottleneck.dim() != 5 || bottleneck.size(1) != in_channels_) {
    fail(ErrorKind::config, "classification head expects " + std::to_string(in_channels_) + " bottleneck channels");
  }
  return fc2_(act(fc1_(bottleneck.mean({2, 3, 4}))));
}

PretrainNetImpl::PretrainNetImpl(const EncoderConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(derive_seed(seed, "encoder"));
  encoder = register_module("encoder", Encoder(cfg));
  torch::manual_seed(derive_seed(seed, "decoder"));
  decoder = register_module("decoder", ReconDecoder(cfg));
}

PretrainOutput PretrainNetImpl::forward(const torch::Tensor& x) {
  auto pyramid = encoder(x);
  const auto& b = pyramid.back();
  return {decoder(b), b.mean({2, 3, 4})};
}

SegNetImpl::SegNetImpl(const EncoderConfig& cfg, int64_t n_classes, std::uint64_t seed) {
  if (n_classes < 2) fail(ErrorKind::config, "segmentation needs at least 2 classes");
  torch::manual_seed(derive_seed(seed, "encoder"));
  encoder = register_module("encoder", Encoder(cfg));
  torch::manual_seed(derive_seed(seed, "decoder"));
  seg_decoder = register_module("seg_decoder", UDecoder(cfg, n_classes, false));
}

torch::Tensor SegNetImpl::forward(const torch::Tensor& x) { return seg_decoder(x, encoder(x)); }

ClsNetImpl::ClsNetImpl(const EncoderConfig& cfg, int64_t n_classes, std::uint64_t seed, int64_t hidden) {
  torch::manual_seed(derive_seed(seed, "encoder"));
  encoder = register_module("encoder", Encoder(cfg));
  torch::manual_seed(derive_seed(seed, "decoder"));
  cls_head = register_module("cls_head", ClsHead(cfg, n_classes, hidden));
}

torch::Tensor ClsNetImpl::forward(const torch::Tensor& x) { return cls_head(encoder(x).back()); }

RegNetImpl::RegNetImpl(const EncoderConfig& cfg, std::uint64_t seed) {
  if (cfg.in_channels != 2) fail(ErrorKind::config, "registration encoder needs in_channels = 2 (moving and fixed)");
  torch::manual_seed(derive_seed(seed, "encoder"));
  encoder = register_module("encoder", Encoder(cfg));
  torch::manual_seed(derive_seed(seed, "decoder"));
  reg_decoder = register_module("reg_decoder", UDecoder(cfg, 3, true));
}

torch::Tensor RegNetImpl::forward(const torch::Tensor& moving, const torch::Tensor& fixed) {
  auto x = torch::cat({moving, fixed}, 1);
  return reg_decoder(x, encoder(x));
}

torch::Tensor warp(const torch::Tensor& moving, const torch::Tensor& field, WarpMode mode) {
  if (moving.dim() != 5 || field.dim() != 5 || field.size(1) != 3 || field.size(0) != moving.size(0) ||
      field.sizes().slice(2) != moving.sizes().slice(2)) {
    fail(ErrorKind::shape, "warp needs moving [B,C,D,H,W] and field [B,3,D,H,W] on the same grid");
  }
  // Sampling positions are formed in double so a zero field lands exactly on voxel centres.
  const auto work = moving.scalar_type() == torch::kDouble ? moving : moving.to(torch::kDouble);
  const auto u = field.to(torch::kDouble);
  std::vector<torch::Tensor> coords;
  for (int a = 0; a < 3; ++a) {
    const int64_t n = moving.size(2 + a);
    if (n < 2) fail(ErrorKind::shape, "warp needs at least 2 voxels along every axis");
    std::vector<int64_t> view{1, 1, 1};
    view[static_cast<std::size_t>(a)] = n;
    auto base = torch::arange(n, u.options()).view(view);
    auto pos = base.unsqueeze(0) + u.select(1, a);
    coords.push_back(pos * (2.0 / static_cast<double>(n - 1)) - 1.0);
  }
  // grid_sample reads (x, y, z) = (W, H, D) order.
  auto grid = torch::stack({coords[2], coords[1], coords[0]}, -1);
  auto opts = F::GridSampleFuncOptions().padding_mode(torch::kBorder).align_corners(true);
  if (mode == WarpMode::nearest) {
    opts.mode(torch::kNearest);
  } else {
    opts.mode(torch::kBilinear);
  }
  return F::grid_sample(work, grid, opts).to(moving.scalar_type());
}

ParamSet param_set(const torch::nn::Module& module) {
  ParamSet out;
  for (const auto& item : module.named_parameters(true)) out.emplace(item.key(), item.value());
  return out;
}

ParamSet clone_params(const ParamSet& params) {
  ParamSet out;
  for (const auto& [name, t] : params) out.emplace(name, t.detach().clone());
  return out;
}

bool params_bit_equal(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, t] : a) {
    auto it = b.find(name);
    if (it == b.end() || !t.sizes().equals(it->second.sizes()) || t.scalar_type() != it->second.scalar_type()) return false;
    auto x = t.contiguous();
    auto y = it->second.contiguous();
    if (std::memcmp(x.data_ptr(), y.data_ptr(), x.nbytes()) != 0) return false;
  }
  return true;
}

void load_params(torch::nn::Module& module, const ParamSet& src) {
  auto dst = param_set(module);
  std::vector<std::string> problems;
  for (const auto& [name, t] : dst) {
    auto it = src.find(name);
    if (it == src.end()) {
      problems.push_back(name + " (missing)");
    } else if (!it->second.sizes().equals(t.sizes())) {
      problems.push_back(name + " (shape)");
    }
  }
  for (const auto& [name, t] : src) {
    if (!dst.count(name)) problems.push_back(name + " (unexpected)");
  }
  if (!problems.empty()) {
    std::string msg = "parameter load mismatch:";
    for (const auto& p : problems) msg += " " + p;
    fail(ErrorKind::compatibility, msg);
  }
  torch::NoGradGuard guard;
  for (auto& [name, t] : dst) t.copy_(src.at(name));
}

namespace {

bool is_encoder(const std::string& name) { return name.rfind("encoder.", 0) == 0; }

torch::Tensor adapt(const std::string& name, const torch::Tensor& s, const torch::Tensor& d, TransferMode mode) {
  if (s.sizes().equals(d.sizes())) return s.detach().clone();
  if (mode == TransferMode::adapt_input_channels && name == "encoder.patch_embed.weight" && s.dim() == 5 && d.dim() == 5 &&
      s.size(0) == d.size(0) && s.sizes().slice(2).equals(d.sizes().slice(2))) {
    auto mean = s.detach().mean(1, true);
    return (mean * (static_cast<double>(s.size(1)) / static_cast<double>(d.size(1)))).expand(d.sizes()).contiguous().to(d.dtype());
  }
  return {};
}

}  // namespace

ParamSet transfer_encoder_weights(const ParamSet& src, const ParamSet& dst, TransferMode mode) {
  ParamSet out = dst;
  std::vector<std::string> problems;
  for (auto& [name, t] : out) {
    if (!is_encoder(name)) continue;
    auto it = src.find(name);
    if (it == src.end()) {
      problems.push_back(name + " (missing)");
      continue;
    }
    auto copied = adapt(name, it->second, t, mode);
    if (!copied.defined()) {
      std::ostringstream s;
      s << name << " (shape " << it->second.sizes() << " vs " << t.sizes() << ")";
      problems.push_back(s.str());
      continue;
    }
    t = copied.to(t.dtype());
  }
  if (!problems.empty()) {
    std::string msg = "encoder transfer failed:";
    for (const auto& p : problems) msg += " " + p;
    fail(ErrorKind::transfer, msg);
  }
  return out;
}

void transfer_encoder_weights(const ParamSet& src, torch::nn::Module& dst, TransferMode mode) {
  auto live = param_set(dst);
  auto updated = transfer_encoder_weights(src, live, mode);
  torch::NoGradGuard guard;
  for (auto& [name, t] : live) {
    if (is_encoder(name)) t.copy_(updated.at(name));
  }
}

int64_t count_params(const EncoderConfig& cfg, NetKind kind, int64_t out, int64_t hidden) {
  cfg.validate();
  const int64_t c = cfg.feature_size;
  int64_t n = 0;
  if (cfg.arch == Arch::swin) {
    const int64_t k3 = cfg.patch * cfg.patch * cfg.patch;
    n += c * cfg.in_channels * k3 + c;
    const int64_t span = 2 * cfg.window - 1;
    for (int i = 0; i < 4; ++i) {
      const int64_t d = c << i;
      const int64_t block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + span * span * span * cfg.heads[i] + 2 * d + (4 * d * d + 4 * d) +
                            (4 * d * d + d);
      n += cfg.depths[i] * block;
      n += 16 * d + 16 * d * d;  // merge norm + reduction
    }
  } else {
    int64_t in = cfg.in_channels;
    for (int i = 0; i < 5; ++i) {
      const int64_t o = c << i;
      n += in * o * 27 + 2 * o + o * o * 27 + 2 * o + in * o + o;
      in = o;
    }
  }
  if (kind == NetKind::encoder) return n;
  auto res = [](int64_t in, int64_t o) { return in * o * 27 + 2 * o + o * o * 27 + 2 * o + (in != o ? in * o + 2 * o : 0); };
  auto up = [&](int64_t in, int64_t o) { return in * o * 8 + res(2 * o, o); };
  auto udecoder = [&](int64_t k) {
    return res(cfg.in_channels, c) + res(c, c) + res(2 * c, 2 * c) + res(4 * c, 4 * c) + res(16 * c, 16 * c) + up(16 * c, 8 * c) +
           up(8 * c, 4 * c) + up(4 * c, 2 * c) + up(2 * c, c) + up(c, c) + c * k + k;
  };
  switch (kind) {
    case NetKind::pretrain: {
      int64_t ch = 16 * c;
      for (int i = 0; i < 5; ++i) {
        n += ch * (ch / 2) * 8 + ch / 2;
        ch /= 2;
      }
      return n + ch + 1;
    }
    case NetKind::seg:
      return n + udecoder(out);
    case NetKind::reg:
      return n + udecoder(3);
    case NetKind::cls:
      return n + 16 * c * hidden + hidden + hidden * out + out;
    case NetKind::encoder:
      break;
  }
  return n;
}

}  // namespace triad
