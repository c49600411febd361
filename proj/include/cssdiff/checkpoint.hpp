#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "cssdiff/models.hpp"

namespace cssdiff {

struct CheckpointMeta {
  std::string stage;  // "sgp", "lsc" or "joint"
  int64_t step = 0;
  int epoch = 0;  // epochs completed
  double best_val_psnr = -std::numeric_limits<double>::infinity();
  int epochs_without_improvement = 0;
  nlohmann::json config;  // full run configuration
  nlohmann::json extra;   // stage report, schedule, etc.

  nlohmann::json to_json() const;
  static CheckpointMeta from_json(const nlohmann::json& j);
};

using NamedOptimizer = std::pair<std::string, torch::optim::Optimizer*>;

void save_checkpoint(const std::filesystem::path& path, const ModelBundle& b, const CheckpointMeta& meta,
                     const std::vector<NamedOptimizer>& optimizers = {});

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);
NetConfig read_checkpoint_net(const std::filesystem::path& path);

// Restores the listed networks (all of them when `only` is empty) and the
// named optimizers. Throws CompatibilityError naming the first architecture
// field that differs from b.cfg.
CheckpointMeta load_checkpoint(const std::filesystem::path& path, ModelBundle& b, const std::vector<std::string>& only = {},
                               const std::vector<NamedOptimizer>& optimizers = {});

}  // namespace cssdiff
