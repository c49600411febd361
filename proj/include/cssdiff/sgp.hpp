#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "cssdiff/models.hpp"
#include "cssdiff/phantom.hpp"

namespace cssdiff {

struct SgpConfig {
  double tau = 0.1;
  int epochs = 10;
  int batch_slices = 0;  // 0: every slice of the subject
  double lr = 1e-3;
  int warmup_epochs = 2;
  bool supervised_positives = false;  // sanity mode: positives from ground truth
  double view_weight = 1.0;           // augmented-view term kept alongside mined positives
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SgpConfig from_json(const nlohmann::json& j);
};

// One subject's slices. lf is in z order; hf is a shuffled copy of the
// high-field stack. nominal[i] is the hf position of the same z index
// (acquisition registration); true_perm[i] the hf position of the slice that
// really matches lf[i] given the injected shift. interior[i] is false where
// lf[i] was edge-replicated by the shift. Restricted to interior slices,
// true_perm is a permutation.
struct SliceBatch {
  torch::Tensor lf;  // (N, 1, H, W)
  torch::Tensor hf;  // (N, 1, H, W)
  std::vector<int64_t> nominal;
  std::vector<int64_t> true_perm;
  std::vector<bool> interior;
};

SliceBatch make_slice_batch(const PairedSample& sample, uint64_t seed);

// argmax_j cos(f(lf), f(hf_j)), ties to the lowest index.
int64_t mine_positive(const torch::Tensor& lf_slice, const torch::Tensor& hf_batch, SliceEncoder& encoder);

// Row-wise argmax of cosine similarity between two embedding sets.
std::vector<int64_t> mine_positives(const torch::Tensor& lf_embs, const torch::Tensor& hf_embs);

// -(1/N) sum_i log softmax_j(cos(lf_i, hf_j) / tau)[positives[i]].
// Embeddings must be unit-norm within 1e-3.
torch::Tensor info_nce_loss(const torch::Tensor& lf_embs, const torch::Tensor& hf_embs,
                            const std::vector<int64_t>& positives, double tau);

// Random blur, gamma and additive noise per slice of an (N, 1, H, W) batch.
torch::Tensor augment_view(const torch::Tensor& slices, uint64_t seed);

torch::Tensor condition_embedding(SliceEncoder& encoder, const torch::Tensor& lf_slice);

struct SgpReport {
  double final_loss = 0.0;
  double mining_accuracy = 0.0;
  int epochs_run = 0;
  std::vector<double> epoch_losses;

  nlohmann::json to_json() const;
};

// Fraction of interior low-field slices (subjects with a nonzero shift only,
// unless none exist) whose mined positive is the true counterpart.
double mining_accuracy(SliceEncoder& encoder, const std::vector<PairedSample>& samples, uint64_t seed);

// Trains the encoder in place. Accuracy is measured on `eval` when given,
// otherwise on the training subjects.
SgpReport pretrain_sgp(const std::vector<PairedSample>& train, SliceEncoder& encoder, const SgpConfig& cfg,
                       const std::vector<PairedSample>& eval = {});

}  // namespace cssdiff
