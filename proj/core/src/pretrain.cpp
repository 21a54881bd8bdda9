#include "triad/pretrain.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <sstream>

#include "triad/error.hpp"
#include "triad/hash.hpp"
#include "triad/nifti.hpp"
#include "triad/preprocess.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in host order");

namespace triad {
namespace {

using json = nlohmann::json;

constexpr char kMagic[8] = {'T', 'R', 'I', 'A', 'D', 'C', 'K', '1'};
constexpr const char* kExpAvg = "adam.exp_avg.";
constexpr const char* kExpAvgSq = "adam.exp_avg_sq.";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
  return v;
}

std::uint32_t crc(const char* data, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

torch::Tensor pairwise_distance(const torch::Tensor& x, double eps) {
  auto sq = (x.unsqueeze(1) - x.unsqueeze(0)).pow(2).sum(-1);
  // sqrt has an infinite slope at 0; route zero distances through a constant.
  auto positive = sq > 0;
  auto safe = torch::where(positive, sq, torch::ones_like(sq));
  return torch::where(positive, safe.sqrt(), torch::zeros_like(sq)) + eps;
}

uint64_t uniform_below(std::mt19937_64& rng, uint64_t n) {
  const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % n;
  uint64_t r = 0;
  do {
    r = rng();
  } while (r >= limit);
  return r % n;
}

}  // namespace

PretrainConfig PretrainConfig::defaults(Arch arch) {
  PretrainConfig c;
  c.base_lr = arch == Arch::swin ? 1e-6 : 1e-4;
  return c;
}

void PretrainConfig::validate() const {
  if (steps < 1) fail(ErrorKind::config, "steps must be >= 1");
  if (warmup < 0 || warmup >= steps) fail(ErrorKind::config, "warmup must satisfy 0 <= warmup < steps");
  if (batch < 1) fail(ErrorKind::config, "batch must be >= 1");
  if (loss_weight < 0.0 || !std::isfinite(loss_weight)) fail(ErrorKind::config, "loss weight must be finite and >= 0");
  if (loss_weight > 0.0 && batch < 3) fail(ErrorKind::batch_size, "the log-ratio loss needs batch >= 3");
  if (roi < 32 || roi % 32 != 0) fail(ErrorKind::config, "roi must be a positive multiple of 32");
  if (!(base_lr >= 0.0)) fail(ErrorKind::config, "base_lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail(ErrorKind::config, "betas must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) fail(ErrorKind::config, "weight decay must be >= 0");
  if (!(eps > 0.0)) fail(ErrorKind::config, "eps must be > 0");
  if (checkpoint_every < 1) fail(ErrorKind::config, "checkpoint_every must be >= 1");
}

torch::Tensor recon_l1_loss(const torch::Tensor& recon, const torch::Tensor& target) {
  if (!recon.sizes().equals(target.sizes())) fail(ErrorKind::shape, "l1 loss needs equal shapes");
  return (recon - target).abs().mean();
}

torch::Tensor log_ratio_loss(const torch::Tensor& f, const torch::Tensor& y, double eps) {
  if (f.dim() != 2 || y.dim() != 2 || f.size(0) != y.size(0)) fail(ErrorKind::shape, "log-ratio loss needs F [B, d] and Y [B, e]");
  const int64_t b = f.size(0);
  if (b < 3) fail(ErrorKind::batch_size, "log-ratio loss needs B >= 3, got " + std::to_string(b));
  auto g = pairwise_distance(f, eps).log() - pairwise_distance(y.to(f.dtype()), eps).log();  // [a, i]
  auto diff = g.unsqueeze(2) - g.unsqueeze(1);                                               // [a, i, j]
  auto idx = torch::arange(b);
  auto a = idx.view({b, 1, 1});
  auto i = idx.view({1, b, 1});
  auto j = idx.view({1, 1, b});
  auto mask = ((i < j) & (i != a) & (j != a)).to(f.dtype());
  const double terms = static_cast<double>(b * (b - 1) * (b - 2) / 2);
  return (diff.pow(2) * mask).sum() / terms;
}

LossParts total_loss(const torch::Tensor& recon, const torch::Tensor& target, const torch::Tensor& f, const torch::Tensor& y, double lambda,
                     double eps) {
  LossParts p;
  p.l1 = recon_l1_loss(recon, target);
  if (lambda == 0.0) {
    p.log_ratio = f.size(0) >= 3 ? log_ratio_loss(f.detach(), y, eps) : torch::zeros({}, f.options());
    p.total = p.l1;
  } else {
    p.log_ratio = log_ratio_loss(f, y, eps);
    p.total = p.l1 + lambda * p.log_ratio;
  }
  return p;
}

double lr_schedule(int64_t step, const PretrainConfig& cfg) {
  if (step < 0 || step > cfg.steps) {
    fail(ErrorKind::schedule, "step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.steps) + "]");
  }
  if (step < cfg.warmup) return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup);
  const double t = static_cast<double>(step - cfg.warmup) / static_cast<double>(cfg.steps - cfg.warmup);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

std::string model_config_hash(std::string_view kind, const EncoderConfig& cfg) {
  return digest_hex(std::string(kind) + "|" + cfg.canonical());
}

bool checkpoints_equal(const Checkpoint& a, const Checkpoint& b) {
  return a.kind == b.kind && a.encoder == b.encoder && a.config_hash == b.config_hash && a.step == b.step && a.seed == b.seed &&
         a.optimizer_steps == b.optimizer_steps && params_bit_equal(a.params, b.params) && params_bit_equal(a.optimizer, b.optimizer);
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  json header;
  header["kind"] = c.kind;
  header["encoder"] = c.encoder;
  header["config_hash"] = c.config_hash;
  header["step"] = c.step;
  header["rng"] = {{"seed", c.seed}, {"stream", "pure(seed, step)"}};
  header["optimizer_steps"] = c.optimizer_steps;
  json dir = json::array();
  std::string payload;
  auto add = [&](const std::string& name, const torch::Tensor& t) {
    auto v = t.detach().to(torch::kFloat).contiguous();
    dir.push_back({{"name", name}, {"shape", v.sizes().vec()}, {"offset", payload.size()}});
    payload.append(static_cast<const char*>(v.data_ptr()), v.nbytes());
  };
  for (const auto& [name, t] : c.params) add(name, t);
  for (const auto& [name, t] : c.optimizer) add(name, t);
  header["tensors"] = dir;
  header["params"] = c.params.size();
  const std::string h = header.dump();

  std::string out(kMagic, 8);
  put_u64(out, h.size());
  out += h;
  out += payload;
  const std::uint32_t sum = crc(payload.data(), payload.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((sum >> (8 * i)) & 0xFF));

  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::io, "cannot write " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) fail(ErrorKind::io, "short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 20) fail(ErrorKind::integrity, "checkpoint too short: " + path.string());
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) fail(ErrorKind::format, "not a checkpoint (bad magic): " + path.string());
  const std::uint64_t hlen = get_u64(bytes.data() + 8);
  if (hlen > bytes.size() - 20) fail(ErrorKind::integrity, "checkpoint header length exceeds file size");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    fail(ErrorKind::integrity, std::string("checkpoint header unreadable: ") + e.what());
  }
  Checkpoint c;
  std::size_t payload_size = 0;
  struct Entry {
    std::string name;
    std::vector<int64_t> shape;
    std::size_t offset;
    std::size_t bytes;
  };
  std::vector<Entry> entries;
  try {
    c.kind = header.at("kind").get<std::string>();
    c.encoder = header.at("encoder").get<std::string>();
    c.config_hash = header.at("config_hash").get<std::string>();
    c.step = header.at("step").get<int64_t>();
    c.seed = header.at("rng").at("seed").get<std::uint64_t>();
    c.optimizer_steps = header.at("optimizer_steps").get<std::map<std::string, int64_t>>();
    for (const auto& t : header.at("tensors")) {
      Entry e{t.at("name").get<std::string>(), t.at("shape").get<std::vector<int64_t>>(), t.at("offset").get<std::size_t>(), 0};
      e.bytes = sizeof(float) * static_cast<std::size_t>(std::accumulate(e.shape.begin(), e.shape.end(), int64_t{1}, std::multiplies<>()));
      if (e.offset != payload_size) fail(ErrorKind::integrity, "checkpoint tensor directory is not contiguous at " + e.name);
      payload_size += e.bytes;
      entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::integrity, std::string("checkpoint header incomplete: ") + e.what());
  }
  if (bytes.size() != 16 + hlen + payload_size + 4) {
    fail(ErrorKind::integrity, "checkpoint length " + std::to_string(bytes.size()) + " does not match its header (" +
                                   std::to_string(16 + hlen + payload_size + 4) + " bytes expected)");
  }
  const char* payload = bytes.data() + 16 + hlen;
  std::uint32_t stored = 0;
  for (int i = 3; i >= 0; --i) stored = (stored << 8) | static_cast<unsigned char>(payload[payload_size + static_cast<std::size_t>(i)]);
  if (stored != crc(payload, payload_size)) fail(ErrorKind::integrity, "checkpoint CRC mismatch: " + path.string());
  for (const auto& e : entries) {
    auto t = torch::empty(e.shape, torch::kFloat);
    std::memcpy(t.data_ptr(), payload + e.offset, e.bytes);
    if (e.name.rfind("adam.", 0) == 0) {
      c.optimizer.emplace(e.name, t);
    } else {
      c.params.emplace(e.name, t);
    }
  }
  return c;
}

PretrainData::PretrainData(std::vector<Volume> volumes, torch::Tensor text) : volumes_(std::move(volumes)), text_(std::move(text)) {
  if (volumes_.empty()) fail(ErrorKind::data, "pre-training data is empty");
  if (text_.dim() != 2 || text_.size(0) != size()) fail(ErrorKind::shape, "need one text embedding row per volume");
}

PretrainData PretrainData::from_manifest(const DatasetManifest& manifest, const TextEmbedder& embedder) {
  std::vector<Volume> vols;
  std::vector<torch::Tensor> rows;
  for (const auto& r : manifest.records) {
    vols.push_back(normalize_unit(read_nifti(manifest.resolve(r))));
    const auto e = embedder.embed(r.description.empty() ? "MR " + r.modality : r.description);
    rows.push_back(torch::tensor(e.vector, torch::kFloat));
  }
  if (rows.empty()) fail(ErrorKind::data, "manifest has no records");
  return PretrainData(std::move(vols), torch::stack(rows));
}

std::vector<int64_t> PretrainData::indices(int64_t step, int64_t batch, std::uint64_t seed) const {
  const auto n = static_cast<uint64_t>(size());
  std::vector<int64_t> out;
  int64_t cached_epoch = -1;
  std::vector<int64_t> perm;
  for (int64_t b = 0; b < batch; ++b) {
    const auto g = static_cast<uint64_t>(step * batch + b);
    const auto epoch = static_cast<int64_t>(g / n);
    if (epoch != cached_epoch) {
      perm.resize(n);
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(derive_seed(seed, "epoch", static_cast<uint64_t>(epoch)));
      for (uint64_t k = n - 1; k > 0; --k) std::swap(perm[k], perm[uniform_below(rng, k + 1)]);
      cached_epoch = epoch;
    }
    out.push_back(perm[g % n]);
  }
  return out;
}

std::pair<torch::Tensor, torch::Tensor> PretrainData::batch(int64_t step, int64_t batch, int64_t roi, std::uint64_t seed) const {
  const auto idx = indices(step, batch, seed);
  std::vector<torch::Tensor> crops;
  for (int64_t b = 0; b < batch; ++b) {
    std::mt19937_64 rng(derive_seed(seed, "crop", static_cast<uint64_t>(step * batch + b)));
    Volume c = random_roi_crop(volumes_[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])], roi, rng);
    crops.push_back(torch::from_blob(c.data.data(), {1, roi, roi, roi}, torch::kFloat).clone());
  }
  return {torch::stack(crops), text_.index_select(0, torch::tensor(idx, torch::kLong))};
}

Pretrainer::Pretrainer(const EncoderConfig& enc, const PretrainConfig& cfg) : enc_(enc), cfg_(cfg) {
  cfg_.validate();
  net_ = PretrainNet(enc_, cfg_.seed);
  for (const auto& item : net_->named_parameters()) ordered_.emplace_back(item.key(), item.value());
  std::vector<torch::Tensor> params;
  for (auto& [name, t] : ordered_) params.push_back(t);
  opt_ = std::make_unique<torch::optim::AdamW>(
      params, torch::optim::AdamWOptions(cfg_.base_lr).betas({cfg_.beta1, cfg_.beta2}).weight_decay(cfg_.weight_decay).eps(1e-8));
}

StepMetrics Pretrainer::train_step(const torch::Tensor& crops, const torch::Tensor& text) {
  if (crops.size(0) != cfg_.batch) {
    fail(ErrorKind::batch_size, "expected batch " + std::to_string(cfg_.batch) + ", got " + std::to_string(crops.size(0)));
  }
  const int64_t k = step_ + 1;
  const double lr = lr_schedule(k, cfg_);
  for (auto& group : opt_->param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
  opt_->zero_grad();
  auto out = net_->forward(crops);
  auto parts = total_loss(out.recon, crops, out.pooled, text, cfg_.loss_weight, cfg_.eps);
  StepMetrics m{k, parts.l1.item<double>(), parts.log_ratio.item<double>(), parts.total.item<double>(), lr};
  if (!std::isfinite(m.total) || !std::isfinite(m.l1)) {
    fail(ErrorKind::divergence, "non-finite loss at step " + std::to_string(k) + ": " + metrics_line(m));
  }
  parts.total.backward();
  opt_->step();
  step_ = k;
  return m;
}

Checkpoint Pretrainer::checkpoint() const {
  Checkpoint c;
  c.kind = "pretrain";
  c.encoder = enc_.canonical();
  c.config_hash = model_config_hash(c.kind, enc_);
  c.step = step_;
  c.seed = cfg_.seed;
  for (const auto& [name, t] : ordered_) {
    c.params.emplace(name, t.detach().clone());
    auto it = opt_->state().find(t.unsafeGetTensorImpl());
    if (it == opt_->state().end()) continue;
    const auto& s = static_cast<const torch::optim::AdamWParamState&>(*it->second);
    c.optimizer.emplace(kExpAvg + name, s.exp_avg().clone());
    c.optimizer.emplace(kExpAvgSq + name, s.exp_avg_sq().clone());
    c.optimizer_steps.emplace(name, s.step());
  }
  return c;
}

void Pretrainer::restore(const Checkpoint& c) {
  if (c.config_hash != model_config_hash("pretrain", enc_)) {
    fail(ErrorKind::compatibility, "checkpoint config hash " + c.config_hash + " does not match this model (" + model_config_hash("pretrain", enc_) +
                                       ")");
  }
  load_params(*net_, c.params);
  opt_->state().clear();
  for (const auto& [name, t] : ordered_) {
    auto s = c.optimizer_steps.find(name);
    if (s == c.optimizer_steps.end()) continue;
    auto state = std::make_unique<torch::optim::AdamWParamState>();
    state->step(s->second);
    state->exp_avg(c.optimizer.at(kExpAvg + name).clone());
    state->exp_avg_sq(c.optimizer.at(kExpAvgSq + name).clone());
    opt_->state()[t.unsafeGetTensorImpl()] = std::move(state);
  }
  step_ = c.step;
}

std::string metrics_line(const StepMetrics& m) {
  json j{{"step", m.step}, {"l1", m.l1}, {"log_ratio", m.log_ratio}, {"total", m.total}, {"lr", m.lr}};
  return j.dump();
}

PretrainResult pretrain_loop(const EncoderConfig& enc, const PretrainConfig& cfg, const PretrainData& data, const std::filesystem::path& out_dir,
                             const std::optional<std::filesystem::path>& resume, const std::function<void(const StepMetrics&)>& on_step) {
  Pretrainer trainer(enc, cfg);
  PretrainResult result;
  std::filesystem::create_directories(out_dir / "checkpoints");
  const auto log_path = out_dir / "metrics.jsonl";
  std::vector<std::string> kept;
  if (resume) {
    const Checkpoint c = load_checkpoint(*resume);
    if (c.seed != cfg.seed) fail(ErrorKind::compatibility, "checkpoint was trained with a different seed");
    trainer.restore(c);
    std::ifstream old(log_path);
    std::string line;
    while (std::getline(old, line)) {
      if (line.empty()) continue;
      if (json::parse(line).at("step").get<int64_t>() <= c.step) kept.push_back(line);
    }
  }
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) fail(ErrorKind::io, "cannot write " + log_path.string());
  for (const auto& line : kept) log << line << '\n';

  auto ckpt_path = [&](int64_t step) {
    char name[32];
    std::snprintf(name, sizeof(name), "step_%08lld.ckpt", static_cast<long long>(step));
    return out_dir / "checkpoints" / name;
  };
  while (trainer.step() < cfg.steps) {
    auto [crops, text] = data.batch(trainer.step(), cfg.batch, cfg.roi, cfg.seed);
    StepMetrics m;
    try {
      m = trainer.train_step(crops, text);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::divergence) {
        std::ofstream dump(out_dir / "divergence.json");
        dump << json{{"step", trainer.step() + 1}, {"message", e.what()}, {"batch_indices", data.indices(trainer.step(), cfg.batch, cfg.seed)}}.dump()
             << '\n';
      }
      throw;
    }
    log << metrics_line(m) << '\n';
    log.flush();
    result.metrics.push_back(m);
    if (on_step) on_step(m);
    if (m.step % cfg.checkpoint_every == 0 || m.step == cfg.steps) {
      const auto p = ckpt_path(m.step);
      save_checkpoint(trainer.checkpoint(), p);
      result.checkpoints.push_back(p);
    }
  }
  result.final_checkpoint = ckpt_path(cfg.steps);
  return result;
}

}  // namespace triad
