#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "triad/finetune.hpp"
#include "triad/models.hpp"
#include "triad/preprocess.hpp"
#include "triad/pretrain.hpp"

namespace triad {

struct GenerateConfig {
  int pretrain_count = 16;
  int64_t corpus_size = 32;  // raw phantom side before preprocessing
  int64_t size = 32;         // downstream phantom side
  int n_objects = 3;
  double noise_sigma = 0.05;
  int seg_train = 24, seg_val = 4, seg_test = 8;
  int cls_train = 16, cls_val = 8, cls_test = 20;
  int reg_train = 8, reg_val = 2, reg_test = 4;
  double reg_amplitude = 3.0;
  double reg_smoothing = 3.0;
};

struct TaskStageConfig {
  FinetuneConfig finetune;
  std::string init = "triad";  // triad, scratch, or a checkpoint path
};

/// Parsed experiment file. Sections: [experiment] [generate] [preprocess]
/// [text] [encoder] [pretrain] [seg] [cls] [reg]; see configs/desk.cfg.
struct ExperimentConfig {
  std::filesystem::path out_dir = "runs/experiment";
  std::uint64_t seed = 0;
  std::vector<std::string> stages{"generate", "preprocess", "pretrain", "seg", "cls", "reg", "eval"};
  GenerateConfig generate;
  PreprocessConfig preprocess;
  std::string text_provider = "hashing";
  int text_dim = 256;
  std::filesystem::path text_file;  // external embeddings
  EncoderConfig encoder;
  PretrainConfig pretrain;
  TaskStageConfig seg, cls, reg;

  void validate() const;
  /// key = value lines grouped by section in a fixed order; the config hash digests this.
  std::string canonical() const;
  std::string hash() const;
};

/// Throws parse errors for malformed files, config errors for unknown keys or bad values.
ExperimentConfig load_experiment_config(const std::filesystem::path& file);
ExperimentConfig parse_experiment_config(const std::string& text);

/// Stage names in execution order.
const std::vector<std::string>& stage_order();

/// Runs the requested stages (and nothing else) in stage order. A stage
/// whose stage.json carries the same input hash is skipped. On failure
/// out_dir/failure.json records the stage and error, and the error is rethrown.
/// Returns the summary, also written to out_dir/summary.json. A non-empty
/// `execute` restricts which of cfg.stages may run; the rest must already be complete.
std::string run_experiment(const ExperimentConfig& cfg, const std::function<void(const std::string&)>& log = {},
                           const std::vector<std::string>& execute = {});

/// Stage that `init` resolves to for a task: the final pre-training
/// checkpoint for "triad", nothing for "scratch", otherwise the path.
std::optional<std::filesystem::path> resolve_init(const ExperimentConfig& cfg, const std::string& init);

}  // namespace triad
