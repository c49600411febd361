#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cssdiff/config.hpp"
#include "cssdiff/metrics.hpp"
#include "cssdiff/models.hpp"
#include "cssdiff/volume.hpp"

namespace cssdiff {

// lr0 * 2^-floor(epoch / halve_every), epoch counted from 0.
double learning_rate_at(int epoch, double lr0, int halve_every);

class EarlyStopping {
 public:
  explicit EarlyStopping(int patience);

  // Returns true when the value is a strict improvement.
  bool update(double value);
  bool should_stop() const { return bad_epochs_ >= patience_; }
  double best() const { return best_; }
  int bad_epochs() const { return bad_epochs_; }
  void restore(double best, int bad_epochs);

 private:
  int patience_;
  double best_;
  int bad_epochs_ = 0;
};

struct StageResult {
  std::filesystem::path checkpoint;
  std::filesystem::path report;
  nlohmann::json report_json;
  bool skipped = false;  // epochs == 0
};

StageResult run_pretrain_sgp(const TrainConfig& cfg);
StageResult run_pretrain_lsc(const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double gen_loss = 0.0;
  double disc_loss = 0.0;
  double val_psnr = 0.0;
  double val_cycle_error = 0.0;

  nlohmann::json to_json() const;
  static EpochRecord from_json(const nlohmann::json& j);
};

struct TrainOptions {
  std::optional<std::filesystem::path> sgp_checkpoint;  // default: out_dir/sgp.ckpt
  std::optional<std::filesystem::path> lsc_checkpoint;  // default: out_dir/lsc.ckpt
  bool from_scratch = false;
  bool resume = false;  // continue from out_dir/last.ckpt
  int stop_after_epochs = -1;  // simulate an interruption after this many completed epochs
  // Replaces the validation PSNR (called with the 0-based epoch).
  std::function<double(int)> validation_metric;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int epochs_run = 0;
  int best_epoch = -1;
  double best_val_psnr = 0.0;
  bool early_stopped = false;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::filesystem::path log;

  nlohmann::json to_json() const;
};

TrainResult run_train(const TrainConfig& cfg, const TrainOptions& opts = {});

// Slice-wise synthesis of one volume in eval mode; z is drawn from a generator seeded with `seed`.
Volume synthesize_volume(ModelBundle& b, const Volume& lf, bool sgp_condition, uint64_t seed, double hf_field_T = 3.0);

// Mean over volumes of PSNR(synthesis, hf) and of the per-slice cycle error on lf.
struct ValidationResult {
  double psnr = 0.0;
  double cycle_error = 0.0;
};
ValidationResult validate_bundle(ModelBundle& b, const std::vector<Volume>& lf, const std::vector<Volume>& hf,
                                 bool sgp_condition, uint64_t seed);

struct SynthesisResult {
  std::vector<std::string> sample_ids;
  std::vector<std::filesystem::path> outputs;
};

// Reads every sample of the manifest in input_dir and writes <id>_syn.f32 plus <id>_syn.json.
SynthesisResult run_synthesize(const std::filesystem::path& checkpoint, const std::filesystem::path& input_dir,
                               const std::filesystem::path& out_dir, uint64_t seed);

MetricReport run_evaluate(const std::filesystem::path& pred_dir, const std::filesystem::path& manifest_dir,
                          const std::filesystem::path& out_dir);

// SVG plots: metric histograms from metrics.json and per-epoch curves from
// train_report.json. Either input may be absent. Returns the files written.
std::vector<std::filesystem::path> run_report(const std::optional<std::filesystem::path>& metrics_json,
                                              const std::optional<std::filesystem::path>& train_report_json,
                                              const std::filesystem::path& out_dir);

}  // namespace cssdiff
