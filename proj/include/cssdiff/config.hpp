#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "cssdiff/losses.hpp"
#include "cssdiff/lsc.hpp"
#include "cssdiff/models.hpp"
#include "cssdiff/phantom.hpp"
#include "cssdiff/schedule.hpp"
#include "cssdiff/sgp.hpp"

namespace cssdiff {

struct ScheduleConfig {
  bool rescaled_default = true;  // DiffusionSchedule::default_for(T)
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  ScheduleKind kind = ScheduleKind::linear;

  DiffusionSchedule make(int T) const;
  nlohmann::json to_json() const;
  static ScheduleConfig from_json(const nlohmann::json& j);
};

struct OptimConfig {
  double lr0 = 0.002;
  int halve_every = 10;
  int max_epochs = 120;
  int early_stop_patience = 5;
  double dropout = 0.2;
  double adam_beta1 = 0.5;
  double grad_clip = 1.0;  // global L2 norm per optimizer step; 0 disables
  int batch_size = 8;
  int slices_per_epoch = 0;  // 0: every training slice once per epoch

  void validate() const;
  nlohmann::json to_json() const;
  static OptimConfig from_json(const nlohmann::json& j);
};

struct TrainConfig {
  DatasetSpec data;
  int heldout_samples = 5;
  std::filesystem::path train_dir = "data/train";
  std::filesystem::path heldout_dir = "data/heldout";
  std::filesystem::path out_dir = "runs/default";
  int val_count = 4;

  NetConfig net;
  ScheduleConfig schedule;
  LossWeights loss;
  SgpConfig sgp;
  LscConfig lsc;
  OptimConfig optim;
  uint64_t seed = 0;

  bool sgp_condition = true;
  bool lsc_init = true;
  bool joint_sgp = false;
  bool joint_lsc = false;
  double joint_sgp_weight = 0.1;
  double joint_lsc_weight = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

TrainConfig load_config(const std::filesystem::path& path);

}  // namespace cssdiff
