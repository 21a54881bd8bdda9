#include "triad/experiment.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <chrono>
#include <charconv>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "triad/error.hpp"
#include "triad/hash.hpp"
#include "triad/manifest.hpp"
#include "triad/nifti.hpp"
#include "triad/phantom.hpp"
#include "triad/text.hpp"

namespace triad {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;
namespace pt = boost::property_tree;

// ---------------------------------------------------------------- parsing

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc{} || r.ptr != text.data() + text.size()) fail(ErrorKind::parse, "bad value for " + key + ": '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  fail(ErrorKind::parse, "bad boolean for " + key + ": '" + text + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto a = item.find_first_not_of(" \t");
    const auto b = item.find_last_not_of(" \t");
    if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

template <std::size_t N>
std::array<int64_t, N> parse_ints(const std::string& key, const std::string& text) {
  const auto items = split_list(text);
  if (items.size() != N) fail(ErrorKind::parse, key + " needs " + std::to_string(N) + " comma-separated integers");
  std::array<int64_t, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = parse_number<int64_t>(key, items[i]);
  return out;
}

template <std::size_t N>
std::string join(const std::array<int64_t, N>& v) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// One section: consumes its keys through typed setters and rejects leftovers.
class Section {
 public:
  Section(const pt::ptree& tree, std::string name) : name_(std::move(name)) {
    if (auto child = tree.get_child_optional(name_)) {
      for (const auto& [k, v] : *child) values_[k] = v.data();
    }
  }
  template <typename F>
  void with(const std::string& key, F&& set) {
    auto it = values_.find(key);
    if (it == values_.end()) return;
    set(name_ + "." + key, it->second);
    values_.erase(it);
  }
  void num(const std::string& key, int64_t& out) {
    with(key, [&](const std::string& k, const std::string& v) { out = parse_number<int64_t>(k, v); });
  }
  void num(const std::string& key, int& out) {
    with(key, [&](const std::string& k, const std::string& v) { out = parse_number<int>(k, v); });
  }
  void num(const std::string& key, std::uint64_t& out) {
    with(key, [&](const std::string& k, const std::string& v) { out = parse_number<std::uint64_t>(k, v); });
  }
  void num(const std::string& key, double& out) {
    with(key, [&](const std::string& k, const std::string& v) { out = parse_number<double>(k, v); });
  }
  void flag(const std::string& key, bool& out) {
    with(key, [&](const std::string& k, const std::string& v) { out = parse_bool(k, v); });
  }
  void str(const std::string& key, std::string& out) {
    with(key, [&](const std::string&, const std::string& v) { out = v; });
  }
  void done() const {
    if (!values_.empty()) fail(ErrorKind::config, "unknown key " + name_ + "." + values_.begin()->first);
  }

 private:
  std::string name_;
  std::map<std::string, std::string> values_;
};

void parse_task(const pt::ptree& tree, const std::string& name, TaskStageConfig& t) {
  Section s(tree, name);
  auto& f = t.finetune;
  s.str("init", t.init);
  s.num("epochs", f.epochs);
  s.num("batch", f.batch);
  s.num("lr", f.lr);
  s.flag("freeze_encoder", f.freeze_encoder);
  if (f.task == Task::seg) {
    s.num("momentum", f.momentum);
    s.num("weight_decay", f.weight_decay);
    s.num("poly_power", f.poly_power);
    s.num("grad_clip", f.grad_clip);
  } else if (f.task == Task::cls) {
    s.num("warmup_epochs", f.warmup_epochs);
    s.num("hidden", f.hidden);
    s.num("input_size", f.input_size);
  } else {
    std::string sim = f.similarity == Similarity::mse ? "mse" : "ncc";
    s.str("similarity", sim);
    if (sim != "mse" && sim != "ncc") fail(ErrorKind::config, name + ".similarity must be mse or ncc");
    f.similarity = sim == "mse" ? Similarity::mse : Similarity::ncc;
    s.num("smooth_weight", f.smooth_weight);
    s.num("ncc_window", f.ncc_window);
  }
  s.done();
}

std::string task_canonical(const TaskStageConfig& t) {
  const auto& f = t.finetune;
  std::ostringstream o;
  o << "init=" << t.init << "\nepochs=" << f.epochs << "\nbatch=" << f.batch << "\nlr=" << fmt(f.lr) << "\nfreeze_encoder=" << f.freeze_encoder
    << "\nseed=" << f.seed << "\n";
  switch (f.task) {
    case Task::seg:
      o << "n_classes=" << f.n_classes << "\nmomentum=" << fmt(f.momentum) << "\nweight_decay=" << fmt(f.weight_decay)
        << "\npoly_power=" << fmt(f.poly_power) << "\ngrad_clip=" << fmt(f.grad_clip) << "\n";
      break;
    case Task::cls:
      o << "n_classes=" << f.n_classes << "\nwarmup_epochs=" << fmt(f.warmup_epochs) << "\nhidden=" << f.hidden << "\ninput_size=" << f.input_size
        << "\n";
      break;
    case Task::reg:
      o << "similarity=" << (f.similarity == Similarity::mse ? "mse" : "ncc") << "\nsmooth_weight=" << fmt(f.smooth_weight)
        << "\nncc_window=" << f.ncc_window << "\n";
      break;
  }
  return o.str();
}

std::map<std::string, std::string> sections_of(const ExperimentConfig& c) {
  std::map<std::string, std::string> out;
  std::ostringstream o;
  o << "seed=" << c.seed << "\nstages=";
  for (std::size_t i = 0; i < c.stages.size(); ++i) o << (i ? "," : "") << c.stages[i];
  o << "\n";
  out["experiment"] = o.str();

  const auto& g = c.generate;
  o.str("");
  o << "pretrain_count=" << g.pretrain_count << "\ncorpus_size=" << g.corpus_size << "\nsize=" << g.size << "\nn_objects=" << g.n_objects
    << "\nnoise_sigma=" << fmt(g.noise_sigma) << "\nseg=" << g.seg_train << "," << g.seg_val << "," << g.seg_test << "\ncls=" << g.cls_train << ","
    << g.cls_val << "," << g.cls_test << "\nreg=" << g.reg_train << "," << g.reg_val << "," << g.reg_test << "\nreg_amplitude=" << fmt(g.reg_amplitude)
    << "\nreg_smoothing=" << fmt(g.reg_smoothing) << "\n";
  out["generate"] = o.str();

  const auto& p = c.preprocess;
  o.str("");
  o << "orientation=" << p.target_orientation.str() << "\nspacing=" << fmt(p.target_spacing_mm) << "\ngrid=" << join(p.target_grid)
    << "\nquantize=" << p.quantize << "\n";
  out["preprocess"] = o.str();

  o.str("");
  o << "provider=" << c.text_provider << "\ndim=" << c.text_dim << "\nfile=" << c.text_file.string() << "\n";
  out["text"] = o.str();

  out["encoder"] = c.encoder.canonical() + "\n";

  const auto& r = c.pretrain;
  o.str("");
  o << "steps=" << r.steps << "\nwarmup=" << r.warmup << "\nbatch=" << r.batch << "\nroi=" << r.roi << "\nbase_lr=" << fmt(r.base_lr)
    << "\nloss_weight=" << fmt(r.loss_weight) << "\nbetas=" << fmt(r.beta1) << "," << fmt(r.beta2) << "\nweight_decay=" << fmt(r.weight_decay)
    << "\neps=" << fmt(r.eps) << "\ncheckpoint_every=" << r.checkpoint_every << "\n";
  out["pretrain"] = o.str();

  out["seg"] = task_canonical(c.seg);
  out["cls"] = task_canonical(c.cls);
  out["reg"] = task_canonical(c.reg);
  return out;
}

// ---------------------------------------------------------------- stage io

struct Ctx {
  const ExperimentConfig& cfg;
  std::function<void(const std::string&)> log;
  std::map<std::string, std::string> sections;
  std::map<std::string, std::string> hashes;

  fs::path dir(const std::string& stage) const { return cfg.out_dir / stage; }
  void say(const std::string& stage, const std::string& msg) const {
    if (log) log("[" + stage + "] " + msg);
  }
};

json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) fail(ErrorKind::io, "cannot read " + p.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  const auto tmp = p.string() + ".tmp";
  {
    std::ofstream f(tmp);
    if (!f) fail(ErrorKind::io, "cannot write " + tmp);
    f << j.dump(2) << "\n";
  }
  fs::rename(tmp, p);
}

std::optional<json> completed_record(const Ctx& ctx, const std::string& stage) {
  const auto p = ctx.dir(stage) / "stage.json";
  if (!fs::exists(p)) return std::nullopt;
  auto j = read_json(p);
  if (j.value("hash", "") != ctx.hashes.at(stage)) return std::nullopt;
  return j;
}

json require_stage(const Ctx& ctx, const std::string& stage, const std::string& by) {
  auto r = completed_record(ctx, stage);
  if (!r) fail(ErrorKind::config, "stage " + by + " needs a completed " + stage + " stage with the current configuration");
  return *r;
}

void write_labels(const LabelVolume& l, const fs::path& p) {
  Volume v = Volume::zeros(l.shape);
  for (std::size_t i = 0; i < l.data.size(); ++i) v.data[i] = static_cast<float>(l.data[i]);
  write_nifti(v, p);
}

LabelVolume read_labels(const fs::path& p) {
  const Volume v = read_nifti(p);
  LabelVolume l = LabelVolume::zeros(v.shape);
  for (std::size_t i = 0; i < v.data.size(); ++i) l.data[i] = static_cast<std::int32_t>(std::lround(v.data[i]));
  return l;
}

const char* kSplits[] = {"train", "val", "test"};

std::string item_name(const std::string& split, int i, const std::string& what) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03d_%s.nii", split.c_str(), i, what.c_str());
  return buf;
}

// ---------------------------------------------------------------- stages

json stage_generate(Ctx& ctx) {
  const auto& g = ctx.cfg.generate;
  const auto root = ctx.dir("generate");
  PhantomSpec base;
  base.size = {g.corpus_size, g.corpus_size, g.corpus_size};
  base.n_objects = g.n_objects;
  base.noise_sigma = g.noise_sigma;
  base.seed = derive_seed(ctx.cfg.seed, "corpus");
  write_phantom_corpus(root / "corpus", g.pretrain_count, base);
  ctx.say("generate", std::to_string(g.pretrain_count) + " pre-training phantoms");

  PhantomSpec task;
  task.size = {g.size, g.size, g.size};
  task.n_objects = g.n_objects;
  task.noise_sigma = g.noise_sigma;
  json index;
  for (const char* t : {"seg", "cls", "reg"}) fs::create_directories(root / t);
  const int seg_n[] = {g.seg_train, g.seg_val, g.seg_test};
  const int cls_n[] = {g.cls_train, g.cls_val, g.cls_test};
  const int reg_n[] = {g.reg_train, g.reg_val, g.reg_test};
  for (int s = 0; s < 3; ++s) {
    const std::string split = kSplits[s];
    index["seg"][split] = json::array();
    for (int i = 0; i < seg_n[s]; ++i) {
      PhantomSpec p = task;
      p.seed = derive_seed(ctx.cfg.seed, "seg/" + split, static_cast<std::uint64_t>(i));
      auto ph = gen_phantom(p);
      for (auto& l : ph.labels.data) l = l > 0 ? 1 : 0;
      const auto img = "seg/" + item_name(split, i, "image"), lab = "seg/" + item_name(split, i, "label");
      write_nifti(ph.image, root / img);
      write_labels(ph.labels, root / lab);
      index["seg"][split].push_back({{"image", img}, {"label", lab}});
    }
    index["cls"][split] = json::array();
    for (int i = 0; i < cls_n[s]; ++i) {
      PhantomSpec p = task;
      p.seed = derive_seed(ctx.cfg.seed, "cls/" + split, static_cast<std::uint64_t>(i));
      p.modality = i % 2 == 0 ? "T1w" : "T2w";
      auto ph = gen_phantom(p);
      const auto img = "cls/" + item_name(split, i, "image");
      write_nifti(ph.image, root / img);
      index["cls"][split].push_back({{"image", img}, {"label", i % 2}, {"modality", p.modality}});
    }
    index["reg"][split] = json::array();
    for (int i = 0; i < reg_n[s]; ++i) {
      PhantomSpec p = task;
      p.seed = derive_seed(ctx.cfg.seed, "reg/" + split, static_cast<std::uint64_t>(i));
      auto pair = gen_reg_pair(p, g.reg_amplitude, g.reg_smoothing);
      json e;
      for (const auto& [key, vol] : {std::pair{"moving", &pair.moving}, std::pair{"fixed", &pair.fixed}}) {
        e[key] = "reg/" + item_name(split, i, key);
        write_nifti(*vol, root / e[key].get<std::string>());
      }
      for (const auto& [key, lab] : {std::pair{"moving_label", &pair.moving_labels}, std::pair{"fixed_label", &pair.fixed_labels}}) {
        e[key] = "reg/" + item_name(split, i, key);
        write_labels(*lab, root / e[key].get<std::string>());
      }
      index["reg"][split].push_back(e);
    }
  }
  write_json(root / "tasks.json", index);
  ctx.say("generate", "task phantoms written");
  return {{"metrics", {{"pretrain_count", g.pretrain_count}}},
          {"artifacts", {{"corpus_manifest", "generate/corpus/manifest.jsonl"}, {"tasks", "generate/tasks.json"}}}};
}

json stage_preprocess(Ctx& ctx) {
  require_stage(ctx, "generate", "preprocess");
  const auto in = load_manifest(ctx.dir("generate") / "corpus" / "manifest.jsonl");
  const auto report = preprocess_manifest(in, ctx.dir("preprocess"), ctx.cfg.preprocess, [&](const std::string& m) { ctx.say("preprocess", m); });
  json skipped = json::array();
  for (const auto& [id, why] : report.skipped) skipped.push_back({{"id", id}, {"reason", why}});
  if (report.output.records.empty()) fail(ErrorKind::data, "preprocessing produced no volumes");
  ctx.say("preprocess", std::to_string(report.output.records.size()) + " volumes ready");
  return {{"metrics", {{"processed", report.output.records.size()}, {"skipped", report.skipped.size()}}},
          {"skipped", skipped},
          {"artifacts", {{"manifest", "preprocess/manifest.jsonl"}}}};
}

double mean_of(const std::vector<StepMetrics>& m, std::size_t from, std::size_t to) {
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += m[i].l1;
  return s / static_cast<double>(to - from);
}

json stage_pretrain(Ctx& ctx) {
  require_stage(ctx, "preprocess", "pretrain");
  const auto manifest = load_manifest(ctx.dir("preprocess") / "manifest.jsonl");
  std::vector<std::string> texts;
  for (const auto& r : manifest.records) texts.push_back(r.description);
  const auto embedder = make_embedder(ctx.cfg.text_provider, ctx.cfg.text_dim, texts, ctx.cfg.text_file);
  const auto data = PretrainData::from_manifest(manifest, *embedder);
  const auto out = ctx.dir("pretrain");
  fs::remove_all(out / "checkpoints");
  fs::remove(out / "metrics.jsonl");
  auto pcfg = ctx.cfg.pretrain;
  pcfg.seed = derive_seed(ctx.cfg.seed, "pretrain");
  auto res = pretrain_loop(ctx.cfg.encoder, pcfg, data, out, std::nullopt, [&](const StepMetrics& m) {
    if (m.step % 50 == 0 || m.step == 1) ctx.say("pretrain", metrics_line(m));
  });
  bool finite = true;
  for (const auto& m : res.metrics) finite = finite && std::isfinite(m.total) && std::isfinite(m.l1) && std::isfinite(m.log_ratio);
  json metrics{{"steps", res.metrics.size()}, {"all_finite", finite}};
  if (res.metrics.size() >= 10) {
    const double first = mean_of(res.metrics, 0, 10);
    const double last = mean_of(res.metrics, res.metrics.size() - 10, res.metrics.size());
    metrics["l1_first10"] = first;
    metrics["l1_last10"] = last;
    metrics["l1_ratio"] = last / first;
  }
  return {{"metrics", metrics},
          {"artifacts", {{"checkpoint", fs::relative(res.final_checkpoint, ctx.cfg.out_dir).string()}, {"metrics", "pretrain/metrics.jsonl"}}}};
}

std::optional<ParamSet> init_params(Ctx& ctx, const std::string& stage, const std::string& init) {
  if (init == "triad") require_stage(ctx, "pretrain", stage);
  const auto p = resolve_init(ctx.cfg, init);
  if (!p) return std::nullopt;
  ctx.say(stage, "encoder from " + p->string());
  return load_checkpoint(*p).params;
}

json history_json(const std::vector<EpochRecord>& h) {
  json a = json::array();
  for (const auto& r : h) a.push_back({{"epoch", r.epoch}, {"lr", r.lr}, {"train_loss", r.train_loss}, {"val_metric", r.val_metric}});
  return a;
}

void save_model(const fs::path& p, const std::string& kind, const EncoderConfig& enc, const ParamSet& params, std::uint64_t seed) {
  Checkpoint c;
  c.kind = kind;
  c.encoder = enc.canonical();
  c.config_hash = model_config_hash(kind, enc);
  c.seed = seed;
  c.params = params;
  save_checkpoint(c, p);
}

std::vector<SegSample> load_seg(const Ctx& ctx, const std::string& split) {
  const auto root = ctx.dir("generate");
  const auto index = read_json(root / "tasks.json");
  std::vector<SegSample> out;
  for (const auto& e : index["seg"][split]) out.push_back({read_nifti(root / e["image"].get<std::string>()), read_labels(root / e["label"].get<std::string>())});
  return out;
}

std::vector<ClsSample> load_cls(const Ctx& ctx, const std::string& split) {
  const auto root = ctx.dir("generate");
  const auto index = read_json(root / "tasks.json");
  std::vector<ClsSample> out;
  for (const auto& e : index["cls"][split]) out.push_back({read_nifti(root / e["image"].get<std::string>()), e["label"].get<int>()});
  return out;
}

std::vector<RegSample> load_reg(const Ctx& ctx, const std::string& split) {
  const auto root = ctx.dir("generate");
  const auto index = read_json(root / "tasks.json");
  std::vector<RegSample> out;
  for (const auto& e : index["reg"][split]) {
    out.push_back({read_nifti(root / e["moving"].get<std::string>()), read_nifti(root / e["fixed"].get<std::string>()),
                   read_labels(root / e["moving_label"].get<std::string>()), read_labels(root / e["fixed_label"].get<std::string>())});
  }
  return out;
}

FinetuneConfig task_config(const ExperimentConfig& cfg, const TaskStageConfig& t) {
  FinetuneConfig f = t.finetune;
  f.seed = derive_seed(cfg.seed, std::string(to_string(f.task)));
  return f;
}

EncoderConfig reg_encoder(const ExperimentConfig& cfg) {
  EncoderConfig e = cfg.encoder;
  e.in_channels = 2;
  return e;
}

json stage_seg(Ctx& ctx) {
  require_stage(ctx, "generate", "seg");
  const auto f = task_config(ctx.cfg, ctx.cfg.seg);
  const auto init = init_params(ctx, "seg", ctx.cfg.seg.init);
  auto res = finetune_seg(f, ctx.cfg.encoder, load_seg(ctx, "train"), load_seg(ctx, "val"), init);
  for (const auto& h : res.history) ctx.say("seg", "epoch " + std::to_string(h.epoch) + " loss " + fmt(h.train_loss) + " val dice " + fmt(h.val_metric));
  save_model(ctx.dir("seg") / "model.ckpt", "seg", ctx.cfg.encoder, param_set(*res.net), f.seed);
  return {{"metrics", {{"best_epoch", res.best_epoch}, {"best_val_dice", res.history[static_cast<std::size_t>(res.best_epoch - 1)].val_metric}}},
          {"history", history_json(res.history)},
          {"artifacts", {{"model", "seg/model.ckpt"}}}};
}

json stage_cls(Ctx& ctx) {
  require_stage(ctx, "generate", "cls");
  const auto f = task_config(ctx.cfg, ctx.cfg.cls);
  const auto init = init_params(ctx, "cls", ctx.cfg.cls.init);
  auto res = finetune_cls(f, ctx.cfg.encoder, load_cls(ctx, "train"), load_cls(ctx, "val"), init);
  for (const auto& h : res.history) ctx.say("cls", "epoch " + std::to_string(h.epoch) + " lr " + fmt(h.lr) + " val acc " + fmt(h.val_metric));
  save_model(ctx.dir("cls") / "model.ckpt", "cls", ctx.cfg.encoder, param_set(*res.net), f.seed);
  json metrics{{"best_epoch", res.best_epoch}, {"best_val_accuracy", res.history[static_cast<std::size_t>(res.best_epoch - 1)].val_metric}};
  const auto warm = static_cast<int64_t>(f.warmup_epochs);
  if (static_cast<double>(warm) == f.warmup_epochs && warm >= 1 && warm <= f.epochs) {
    metrics["lr_at_warmup_end"] = res.history[static_cast<std::size_t>(warm - 1)].lr;
  }
  return {{"metrics", metrics}, {"history", history_json(res.history)}, {"artifacts", {{"model", "cls/model.ckpt"}}}};
}

json stage_reg(Ctx& ctx) {
  require_stage(ctx, "generate", "reg");
  const auto f = task_config(ctx.cfg, ctx.cfg.reg);
  const auto init = init_params(ctx, "reg", ctx.cfg.reg.init);
  auto res = finetune_reg(f, reg_encoder(ctx.cfg), load_reg(ctx, "train"), load_reg(ctx, "val"), init);
  for (const auto& h : res.history) {
    if (h.epoch % 10 == 0 || h.epoch == 1) ctx.say("reg", "epoch " + std::to_string(h.epoch) + " loss " + fmt(h.train_loss) + " val dice " + fmt(h.val_metric));
  }
  save_model(ctx.dir("reg") / "model.ckpt", "reg", reg_encoder(ctx.cfg), param_set(*res.net), f.seed);
  return {{"metrics", {{"best_epoch", res.best_epoch}, {"best_val_dice", res.history[static_cast<std::size_t>(res.best_epoch - 1)].val_metric}}},
          {"history", history_json(res.history)},
          {"artifacts", {{"model", "reg/model.ckpt"}}}};
}

json stage_eval(Ctx& ctx) {
  json metrics, artifacts;
  const auto& stages = ctx.cfg.stages;
  auto wanted = [&](const std::string& s) { return std::find(stages.begin(), stages.end(), s) != stages.end(); };
  if (wanted("pretrain")) {
    const auto rec = require_stage(ctx, "pretrain", "eval");
    metrics["pretrain"] = rec["metrics"];
  }
  if (wanted("seg")) {
    require_stage(ctx, "seg", "eval");
    SegNet net(ctx.cfg.encoder, ctx.cfg.seg.finetune.n_classes, 0);
    load_params(*net, load_checkpoint(ctx.dir("seg") / "model.ckpt").params);
    const auto rep = evaluate_seg(net, load_seg(ctx, "test"), ctx.cfg.seg.finetune.n_classes);
    metrics["seg"] = {{"test_foreground_dice", rep.mean_foreground_dice}, {"class_dice", rep.class_dice}};
  }
  if (wanted("cls")) {
    require_stage(ctx, "cls", "eval");
    const auto& f = ctx.cfg.cls.finetune;
    ClsNet net(ctx.cfg.encoder, f.n_classes, 0, f.hidden);
    load_params(*net, load_checkpoint(ctx.dir("cls") / "model.ckpt").params);
    const auto test = load_cls(ctx, "test");
    const auto rep = evaluate_cls(net, test, f.n_classes, f.input_size);
    json conf = json::array();
    for (int t = 0; t < rep.confusion.k; ++t) {
      json row = json::array();
      for (int p = 0; p < rep.confusion.k; ++p) row.push_back(rep.confusion.at(t, p));
      conf.push_back(row);
    }
    metrics["cls"] = {{"test_accuracy", rep.accuracy}, {"confusion", conf}};
    if (rep.auc) {
      metrics["cls"]["test_auc"] = *rep.auc;
      // ROC points as flat data for external plotting
      torch::NoGradGuard g;
      std::vector<double> scores;
      std::vector<int> labels;
      for (const auto& s : test) {
        Volume in = s.image.shape == Shape3{f.input_size, f.input_size, f.input_size} ? s.image : resize_to(s.image, {f.input_size, f.input_size, f.input_size});
        scores.push_back(torch::softmax(net->forward(volume_tensor(in)).to(torch::kDouble), 1)[0][1].item<double>());
        labels.push_back(s.label);
      }
      std::ofstream roc(ctx.dir("eval") / "roc.csv");
      roc << "threshold,fpr,tpr\n";
      for (const auto& p : roc_curve(scores, labels)) roc << fmt(p.threshold) << "," << fmt(p.fpr) << "," << fmt(p.tpr) << "\n";
      artifacts["roc"] = "eval/roc.csv";
    }
  }
  if (wanted("reg")) {
    require_stage(ctx, "reg", "eval");
    RegNet net(reg_encoder(ctx.cfg), 0);
    load_params(*net, load_checkpoint(ctx.dir("reg") / "model.ckpt").params);
    const auto rep = evaluate_reg(net, load_reg(ctx, "test"));
    metrics["reg"] = {{"test_dice", rep.dice}, {"baseline_dice", rep.baseline_dice}, {"dice_gain", rep.dice - rep.baseline_dice},
                      {"max_displacement", rep.max_displacement}};
  }
  write_json(ctx.dir("eval") / "report.json", metrics);
  artifacts["report"] = "eval/report.json";
  return {{"metrics", metrics}, {"artifacts", artifacts}};
}

std::vector<std::string> upstream_of(const ExperimentConfig& cfg, const std::string& stage) {
  if (stage == "generate") return {};
  if (stage == "preprocess") return {"generate"};
  if (stage == "pretrain") return {"preprocess"};
  if (stage == "seg" || stage == "cls" || stage == "reg") {
    const auto& t = stage == "seg" ? cfg.seg : stage == "cls" ? cfg.cls : cfg.reg;
    if (t.init == "triad") return {"generate", "pretrain"};
    return {"generate"};
  }
  std::vector<std::string> out;
  for (const auto& s : {"pretrain", "seg", "cls", "reg"}) {
    if (std::find(cfg.stages.begin(), cfg.stages.end(), s) != cfg.stages.end()) out.push_back(s);
  }
  return out;
}

std::vector<std::string> sections_for(const std::string& stage) {
  if (stage == "generate") return {"generate"};
  if (stage == "preprocess") return {"preprocess"};
  if (stage == "pretrain") return {"text", "encoder", "pretrain"};
  if (stage == "eval") return {"encoder", "seg", "cls", "reg"};
  return {"encoder", stage};
}

std::map<std::string, std::string> stage_hashes(const ExperimentConfig& cfg, const std::map<std::string, std::string>& sections) {
  std::map<std::string, std::string> h;
  for (const auto& stage : stage_order()) {
    std::string text = "stage=" + stage + "\nseed=" + std::to_string(cfg.seed) + "\n";
    for (const auto& s : sections_for(stage)) text += "[" + s + "]\n" + sections.at(s);
    for (const auto& u : upstream_of(cfg, stage)) text += "upstream " + u + "=" + h.at(u) + "\n";
    if (stage != "generate" && stage != "preprocess" && stage != "pretrain" && stage != "eval") {
      const auto& t = stage == "seg" ? cfg.seg : stage == "cls" ? cfg.cls : cfg.reg;
      if (t.init != "triad" && t.init != "scratch" && fs::exists(t.init)) {
        std::ifstream f(t.init, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(f)), {});
        text += "init_digest=" + digest_hex(bytes) + "\n";
      }
    }
    h[stage] = digest_hex(text);
  }
  return h;
}

}  // namespace

const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> order{"generate", "preprocess", "pretrain", "seg", "cls", "reg", "eval"};
  return order;
}

void ExperimentConfig::validate() const {
  const auto& order = stage_order();
  for (const auto& s : stages) {
    if (std::find(order.begin(), order.end(), s) == order.end()) fail(ErrorKind::config, "unknown stage '" + s + "'");
  }
  if (stages.empty()) fail(ErrorKind::config, "no stages requested");
  const auto& g = generate;
  if (g.pretrain_count < 1) fail(ErrorKind::config, "generate.pretrain_count must be >= 1");
  for (int n : {g.seg_train, g.cls_train, g.reg_train}) {
    if (n < 1) fail(ErrorKind::config, "every task needs at least one training sample");
  }
  for (int n : {g.seg_val, g.seg_test, g.cls_val, g.cls_test, g.reg_val, g.reg_test}) {
    if (n < 0) fail(ErrorKind::config, "split sizes must be >= 0");
  }
  if (g.size % 32 != 0) fail(ErrorKind::config, "generate.size must be a multiple of 32");
  PhantomSpec probe;
  probe.size = {g.size, g.size, g.size};
  probe.n_objects = g.n_objects;
  probe.noise_sigma = g.noise_sigma;
  probe.validate();
  probe.size = {g.corpus_size, g.corpus_size, g.corpus_size};
  probe.validate();
  if (!(g.reg_amplitude >= 0.0 && g.reg_amplitude <= 4.0)) fail(ErrorKind::config, "generate.reg_amplitude must lie in [0, 4]");
  preprocess.validate();
  for (auto d : preprocess.target_grid) {
    if (d < pretrain.roi) fail(ErrorKind::config, "preprocess.grid must be at least pretrain.roi on every axis");
  }
  if (text_provider != "hashing" && text_provider != "external") fail(ErrorKind::config, "text.provider must be hashing or external");
  if (text_dim < 1) fail(ErrorKind::config, "text.dim must be >= 1");
  encoder.validate();
  if (encoder.in_channels != 1) fail(ErrorKind::config, "encoder.in_channels must be 1 (registration adds its second channel)");
  pretrain.validate();
  for (const auto* t : {&seg, &cls, &reg}) {
    t->finetune.validate();
    if (t->init != "triad" && t->init != "scratch" && !fs::exists(t->init)) {
      fail(ErrorKind::config, "init checkpoint not found: " + t->init);
    }
  }
  if (cls.finetune.input_size != generate.size && cls.finetune.input_size % 32 != 0) fail(ErrorKind::config, "cls.input_size must be a multiple of 32");
}

std::string ExperimentConfig::canonical() const {
  std::string out;
  for (const auto& [name, body] : sections_of(*this)) out += "[" + name + "]\n" + body;
  return out;
}

std::string ExperimentConfig::hash() const { return digest_hex(canonical()); }

ExperimentConfig parse_experiment_config(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    fail(ErrorKind::parse, std::string("config: ") + e.what());
  }
  static const std::set<std::string> known{"experiment", "generate", "preprocess", "text", "encoder", "pretrain", "seg", "cls", "reg"};
  for (const auto& [name, child] : tree) {
    if (!known.count(name)) fail(ErrorKind::config, "unknown section [" + name + "]");
    if (child.empty() && !child.data().empty()) fail(ErrorKind::config, "key '" + name + "' outside any section");
  }

  ExperimentConfig c;
  c.seg.finetune = FinetuneConfig::defaults(Task::seg);
  c.cls.finetune = FinetuneConfig::defaults(Task::cls);
  c.reg.finetune = FinetuneConfig::defaults(Task::reg);
  {
    Section s(tree, "experiment");
    std::string out = c.out_dir.string();
    s.str("out", out);
    c.out_dir = out;
    s.num("seed", c.seed);
    s.with("stages", [&](const std::string&, const std::string& v) { c.stages = split_list(v); });
    s.done();
  }
  {
    Section s(tree, "generate");
    auto& g = c.generate;
    s.num("pretrain_count", g.pretrain_count);
    s.num("corpus_size", g.corpus_size);
    s.num("size", g.size);
    s.num("n_objects", g.n_objects);
    s.num("noise_sigma", g.noise_sigma);
    s.with("seg", [&](const std::string& k, const std::string& v) {
      auto a = parse_ints<3>(k, v);
      g.seg_train = static_cast<int>(a[0]), g.seg_val = static_cast<int>(a[1]), g.seg_test = static_cast<int>(a[2]);
    });
    s.with("cls", [&](const std::string& k, const std::string& v) {
      auto a = parse_ints<3>(k, v);
      g.cls_train = static_cast<int>(a[0]), g.cls_val = static_cast<int>(a[1]), g.cls_test = static_cast<int>(a[2]);
    });
    s.with("reg", [&](const std::string& k, const std::string& v) {
      auto a = parse_ints<3>(k, v);
      g.reg_train = static_cast<int>(a[0]), g.reg_val = static_cast<int>(a[1]), g.reg_test = static_cast<int>(a[2]);
    });
    s.num("reg_amplitude", g.reg_amplitude);
    s.num("reg_smoothing", g.reg_smoothing);
    s.done();
  }
  {
    Section s(tree, "preprocess");
    auto& p = c.preprocess;
    s.with("orientation", [&](const std::string&, const std::string& v) { p.target_orientation = AxisCode::parse(v); });
    s.num("spacing", p.target_spacing_mm);
    s.with("grid", [&](const std::string& k, const std::string& v) { p.target_grid = parse_ints<3>(k, v); });
    s.flag("quantize", p.quantize);
    s.done();
  }
  {
    Section s(tree, "text");
    s.str("provider", c.text_provider);
    s.num("dim", c.text_dim);
    std::string file = c.text_file.string();
    s.str("file", file);
    c.text_file = file;
    s.done();
  }
  {
    Section s(tree, "encoder");
    auto& e = c.encoder;
    s.with("arch", [&](const std::string&, const std::string& v) { e.arch = parse_arch(v); });
    s.num("feature_size", e.feature_size);
    s.with("depths", [&](const std::string& k, const std::string& v) { e.depths = parse_ints<4>(k, v); });
    s.with("heads", [&](const std::string& k, const std::string& v) { e.heads = parse_ints<4>(k, v); });
    s.num("window", e.window);
    s.num("patch", e.patch);
    s.done();
  }
  c.pretrain = PretrainConfig::defaults(c.encoder.arch);
  {
    Section s(tree, "pretrain");
    auto& p = c.pretrain;
    s.num("steps", p.steps);
    s.num("warmup", p.warmup);
    s.num("batch", p.batch);
    s.num("roi", p.roi);
    s.num("base_lr", p.base_lr);
    s.num("loss_weight", p.loss_weight);
    s.num("beta1", p.beta1);
    s.num("beta2", p.beta2);
    s.num("weight_decay", p.weight_decay);
    s.num("eps", p.eps);
    s.num("checkpoint_every", p.checkpoint_every);
    s.done();
  }
  parse_task(tree, "seg", c.seg);
  parse_task(tree, "cls", c.cls);
  parse_task(tree, "reg", c.reg);
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& file) {
  std::ifstream f(file);
  if (!f) fail(ErrorKind::io, "cannot read config " + file.string());
  std::string text((std::istreambuf_iterator<char>(f)), {});
  auto c = parse_experiment_config(text);
  for (auto* t : {&c.seg, &c.cls, &c.reg}) {
    if (t->init != "triad" && t->init != "scratch" && fs::path(t->init).is_relative()) {
      t->init = (file.parent_path() / t->init).string();
    }
  }
  return c;
}

std::optional<fs::path> resolve_init(const ExperimentConfig& cfg, const std::string& init) {
  if (init == "scratch") return std::nullopt;
  if (init == "triad") {
    const auto rec = read_json(cfg.out_dir / "pretrain" / "stage.json");
    return cfg.out_dir / rec["artifacts"]["checkpoint"].get<std::string>();
  }
  return fs::path(init);
}

std::string run_experiment(const ExperimentConfig& cfg, const std::function<void(const std::string&)>& log,
                           const std::vector<std::string>& execute) {
  cfg.validate();
  Ctx ctx{cfg, log, sections_of(cfg), {}};
  ctx.hashes = stage_hashes(cfg, ctx.sections);
  fs::create_directories(cfg.out_dir);
  fs::remove(cfg.out_dir / "failure.json");

  json summary;
  summary["config_hash"] = cfg.hash();
  summary["seed"] = cfg.seed;
  summary["stages"] = json::object();
  for (const auto& stage : stage_order()) {
    if (std::find(cfg.stages.begin(), cfg.stages.end(), stage) == cfg.stages.end()) continue;
    const bool may_run = execute.empty() || std::find(execute.begin(), execute.end(), stage) != execute.end();
    json record;
    if (auto done = completed_record(ctx, stage)) {
      ctx.say(stage, "up to date, skipped");
      record = *done;
    } else if (!may_run) {
      continue;
    } else {
      ctx.say(stage, "running");
      const auto t0 = std::chrono::steady_clock::now();
      try {
        fs::create_directories(ctx.dir(stage));
        if (stage == "generate") record = stage_generate(ctx);
        else if (stage == "preprocess") record = stage_preprocess(ctx);
        else if (stage == "pretrain") record = stage_pretrain(ctx);
        else if (stage == "seg") record = stage_seg(ctx);
        else if (stage == "cls") record = stage_cls(ctx);
        else if (stage == "reg") record = stage_reg(ctx);
        else record = stage_eval(ctx);
      } catch (const Error& e) {
        write_json(cfg.out_dir / "failure.json", {{"stage", stage}, {"kind", to_string(e.kind())}, {"message", e.what()}});
        throw;
      } catch (const std::exception& e) {
        write_json(cfg.out_dir / "failure.json", {{"stage", stage}, {"kind", "runtime"}, {"message", e.what()}});
        throw;
      }
      record["stage"] = stage;
      record["hash"] = ctx.hashes.at(stage);
      record["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      write_json(ctx.dir(stage) / "stage.json", record);
    }
    json brief{{"hash", record["hash"]}, {"seconds", record["seconds"]}, {"metrics", record.value("metrics", json::object())}};
    if (record.contains("artifacts")) brief["artifacts"] = record["artifacts"];
    summary["stages"][stage] = brief;
  }
  if (summary["stages"].contains("eval")) summary["metrics"] = summary["stages"]["eval"]["metrics"];
  const std::string text = summary.dump(2);
  write_json(cfg.out_dir / "summary.json", summary);
  return text;
}

}  // namespace triad
