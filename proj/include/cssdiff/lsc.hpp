#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "cssdiff/models.hpp"
#include "cssdiff/volume.hpp"

namespace cssdiff {

struct CorruptionSpec {
  int rows = 8;
  int cols = 8;
  double rotate_fraction = 0.1;
  double mask_fraction = 0.3;
  std::vector<int> angles{90, 180, 270};
  uint64_t seed = 0;

  // Throws ParameterError when the spec cannot be applied to an h x w image.
  void validate(int64_t h, int64_t w) const;
  int block_count() const { return rows * cols; }
  int rotated_count() const;
  int masked_count() const;

  nlohmann::json to_json() const;
  static CorruptionSpec from_json(const nlohmann::json& j);
};

enum class BlockTransform { clean, rot90, rot180, rot270, masked };

struct Corruption {
  torch::Tensor image;                // same shape as the input
  std::vector<BlockTransform> labels;  // row-major over the block grid
};

// Rotation to a disjoint random subset first, zero-masking second.
Corruption corrupt(const torch::Tensor& y, const CorruptionSpec& spec);

// (N, 1, H, W) batch; image i uses seed derive_seed(spec.seed, {i}).
torch::Tensor corrupt_batch(const torch::Tensor& y, const CorruptionSpec& spec);

// Counter-clockwise rotation of a square (or 180-degree of any) 2-D block.
torch::Tensor rotate_block(const torch::Tensor& block, int degrees);

// sqrt(mean (y - y_hat)^2) + alpha * (1 - SSIM(y, y_hat)).
torch::Tensor lsc_recon_loss(const torch::Tensor& y, const torch::Tensor& y_hat, double alpha);

struct LscAdversarialTerms {
  torch::Tensor gen_term;   // -mean log D(E_T(y_lsc))
  torch::Tensor disc_term;  // mean [log D(y) + log(1 - D(E_T(y_lsc)))], maximised by D
};

LscAdversarialTerms lsc_adversarial_terms(const torch::Tensor& real_scores, const torch::Tensor& fake_scores);
LscAdversarialTerms lsc_adversarial(const ModelBundle& b, const torch::Tensor& y, const torch::Tensor& y_lsc);

struct LscConfig {
  int epochs = 10;
  int batch_size = 16;
  double lr = 1e-3;
  double alpha = 0.5;
  double mu = 0.01;
  CorruptionSpec corruption;
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static LscConfig from_json(const nlohmann::json& j);
};

struct LscReport {
  double final_loss = 0.0;
  int epochs_run = 0;
  std::vector<double> epoch_losses;
  double heldout_psnr_corrupted = 0.0;
  double heldout_psnr_restored = 0.0;

  nlohmann::json to_json() const;
};

// Held-out PSNR of corrupted vs restored slices (fixed corruption seeds).
std::pair<double, double> lsc_heldout_psnr(const ModelBundle& b, const std::vector<Volume>& heldout, const CorruptionSpec& spec);

// Trains bundle.corrector (and bundle.patch_disc) on real high-field slices.
LscReport pretrain_lsc(const std::vector<Volume>& train_hf, ModelBundle& bundle, const LscConfig& cfg,
                       const std::vector<Volume>& heldout_hf = {});

}  // namespace cssdiff
