#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "mphm/checkpoint.hpp"
#include "mphm/data.hpp"
#include "mphm/model.hpp"
#include "mphm/objective.hpp"

namespace mphm {

/// Everything a run needs. Serialized as flat "key = value" lines; model keys
/// share the namespace (see ModelConfig::entries()).
struct RunConfig {
  ModelConfig model;
  LossConfig loss;

  double lr = 1e-3;
  double lr_min = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double grad_clip = 1.0;
  int64_t steps = 1000;
  int64_t crop = 64;
  int64_t batch = 4;
  bool augment = true;
  uint64_t seed = 0;
  int64_t log_every = 10;
  int64_t checkpoint_every = 500;  // 0: only the final checkpoint
  std::string data_dir;            // contains rain/ and norain/
  std::string eval_dir;            // empty: data_dir
  std::string out_dir;             // empty: no files written

  void validate() const;
  std::vector<std::pair<std::string, std::string>> entries() const;
  void set(const std::string& key, const std::string& value);
  /// "key=value"
  void apply_override(const std::string& assignment);
  std::string to_text() const;
  /// '#' starts a comment; blank lines are skipped.
  static RunConfig from_text(const std::string& text);
  static RunConfig from_file(const std::filesystem::path& path);
};

/// Precedence, lowest to highest: defaults, file, MPHM_SEED, --set overrides.
RunConfig resolve_run_config(const std::filesystem::path& file,
                             const std::vector<std::string>& overrides);

/// lr_min + (lr0 - lr_min) * (1 + cos(pi * step / (steps - 1))) / 2.
double cosine_lr(double lr0, double lr_min, int64_t step, int64_t steps);

struct StepRecord {
  int64_t step = 0;
  double lr = 0;
  double loss = 0;
  double rec = 0;
  double fcr = 0;
  double psnr = 0;
  double seconds = 0;
};

/// Append-only CSV of step records (and optional eval rows in a sibling file).
class MetricsLog {
 public:
  MetricsLog() = default;
  /// Empty path: records are kept in memory only.
  explicit MetricsLog(const std::filesystem::path& csv);
  void append(const StepRecord& record);
  const std::vector<StepRecord>& records() const { return records_; }

 private:
  std::ofstream out_;
  std::vector<StepRecord> records_;
};

struct TrainResult {
  TrainState state;
  std::vector<StepRecord> records;
  std::filesystem::path checkpoint;  // empty when out_dir is empty
};

/// Seeds torch from cfg.seed and constructs the network.
Mphm build_model(const ModelConfig& cfg, uint64_t seed);

/// Optimizes the total loss with Adam, cosine lr and global-norm clipping.
/// Checkpoints go to out_dir/last.ckpt. A non-finite loss or gradient throws
/// NumericError; the last good checkpoint is left untouched.
/// `model` may be supplied (already built); otherwise build_model() is used.
TrainResult train(const RunConfig& cfg, const PairedDataset& data, Mphm model = nullptr,
                  const std::function<void(const StepRecord&)>& on_step = {});

}  // namespace mphm
