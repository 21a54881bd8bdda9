// triad: phantom generation, preprocessing, pre-training, fine-tuning and
// evaluation driven by one experiment config file.

#include <CLI11.hpp>

#include <iostream>

#include "triad/error.hpp"
#include "triad/experiment.hpp"

namespace {

enum Exit { kOk = 0, kUsage = 1, kRuntime = 2 };

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config file (INI sections, key = value)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "Output directory; overrides [experiment] out");
  cmd->add_option("--seed", c.seed, "Global seed; overrides [experiment] seed");
  cmd->add_flag("--quiet,-q", c.quiet, "Only print the summary");
}

triad::ExperimentConfig load(const Common& c, std::vector<std::string> stages) {
  auto cfg = triad::load_experiment_config(c.config);
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (c.seed) cfg.seed = *c.seed;
  if (!stages.empty()) cfg.stages = std::move(stages);
  return cfg;
}

bool is_usage_error(triad::ErrorKind k) {
  return k == triad::ErrorKind::validation || k == triad::ErrorKind::config || k == triad::ErrorKind::parse;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Triad: 3D MRI encoder pre-training with imaging-description alignment"};
  app.require_subcommand(1);
  Common common;
  std::string task, init;

  auto* gen = app.add_subcommand("phantom-gen", "Write the synthetic pre-training corpus and task phantoms");
  add_common(gen, common);
  auto* pre = app.add_subcommand("preprocess", "Reorient, resample, resize and quantize the corpus (runs phantom-gen first if needed)");
  add_common(pre, common);
  auto* pt = app.add_subcommand("pretrain", "Pre-train the encoder with reconstruction and log-ratio alignment");
  add_common(pt, common);
  auto* ft = app.add_subcommand("finetune", "Fine-tune one downstream task");
  add_common(ft, common);
  ft->add_option("--task", task, "seg, cls or reg")->required()->check(CLI::IsMember({"seg", "cls", "reg"}));
  ft->add_option("--init", init, "scratch, triad (this experiment's pre-training) or a checkpoint path");
  auto* ev = app.add_subcommand("eval", "Evaluate finished stages on the test splits and write the summary");
  add_common(ev, common);
  auto* run = app.add_subcommand("run", "Run every stage listed in the config, skipping completed ones");
  add_common(run, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    triad::ExperimentConfig cfg;
    std::vector<std::string> execute;
    if (gen->parsed()) cfg = load(common, {"generate"});
    else if (pre->parsed()) cfg = load(common, {"generate", "preprocess"});
    else if (pt->parsed()) cfg = load(common, {"generate", "preprocess", "pretrain"});
    else if (ft->parsed()) {
      cfg = load(common, {});
      auto& stage = task == "seg" ? cfg.seg : task == "cls" ? cfg.cls : cfg.reg;
      if (!init.empty()) stage.init = init;
      cfg.stages = stage.init == "triad" ? std::vector<std::string>{"generate", "preprocess", "pretrain", task}
                                         : std::vector<std::string>{"generate", task};
    } else if (ev->parsed()) {
      cfg = load(common, {});
      if (std::find(cfg.stages.begin(), cfg.stages.end(), "eval") == cfg.stages.end()) cfg.stages.push_back("eval");
      execute = {"eval"};
    } else {
      cfg = load(common, {});
    }
    auto log = [&](const std::string& line) {
      if (!common.quiet) std::cerr << line << "\n";
    };
    std::cout << triad::run_experiment(cfg, log, execute) << "\n";
    return kOk;
  } catch (const triad::Error& e) {
    std::cerr << "error (" << triad::to_string(e.kind()) << "): " << e.what() << "\n";
    return is_usage_error(e.kind()) ? kUsage : kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
