#pragma once

#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "cssdiff/schedule.hpp"
#include "cssdiff/volume.hpp"

namespace cssdiff {

struct LossWeights {
  double lambda_adv = 1.0;    // lambda1
  double lambda_cyc = 10.0;   // lambda2
  double lambda_path = 1.0;   // lambda3
  double rho = 1.0;           // backward-cycle weight
  std::vector<double> eta;    // T-1 path weights; empty means uniform 1/(T-1)

  void validate() const;
  std::vector<double> path_weights(int T) const;
  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
};

// Scores must lie strictly inside (0, 1); anything else is a DomainError.
torch::Tensor adv_d_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake);
torch::Tensor adv_g_loss(const torch::Tensor& d_fake);

// mean|x0 - F(G(x0))| + rho * mean|y - G(F(y))|
torch::Tensor cycle_loss(const torch::Tensor& x0, const torch::Tensor& f_of_g_x0, const torch::Tensor& y,
                         const torch::Tensor& g_of_f_y, double rho);

// states = [x_0, ..., x_T]; eps_preds[k-1] is the noise prediction attached to
// x_{k-1}. Chain step k corresponds to diffusion timestep T - k, so the
// reference for x_k is ddim_step(x_{k-1}, T - k + 1, eps_{k-1}).
// Sum over k = 1..T-1 of eta_k * mean (x_k - reference)^2.
torch::Tensor path_consistency_loss(const std::vector<torch::Tensor>& states, const std::vector<torch::Tensor>& eps_preds,
                                    const DiffusionSchedule& sched, const std::vector<double>& eta);

// Noise predictions implied by the chain when its final state is taken as the
// clean estimate: eps_k = (x_k - sqrt(abar_s) x_T) / sqrt(1 - abar_s), s = T - k.
std::vector<torch::Tensor> chain_noise_predictions(const std::vector<torch::Tensor>& states, const DiffusionSchedule& sched);

struct LossParts {
  torch::Tensor adv_g;
  torch::Tensor adv_d;
  torch::Tensor cyc;
  torch::Tensor path;
};

struct Objective {
  torch::Tensor gen_loss;
  torch::Tensor disc_loss;
};

Objective total_objective(const LossParts& parts, const LossWeights& w);

// Per-sample mean |F(G(x)) - x|, shape (N).
torch::Tensor cycle_error(const torch::Tensor& x0, const torch::Tensor& f_of_g_x0);

// Mean over the re-indexings S of mean (pred - S[hf])^2. Diagnostic only.
double alignment_error(const Volume& pred, const Volume& hf, const std::vector<int>& shifts);

}  // namespace cssdiff
