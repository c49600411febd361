#include "cssdiff/losses.hpp"

#include <cmath>

#include "cssdiff/errors.hpp"
#include "cssdiff/phantom.hpp"

namespace cssdiff {

using nlohmann::json;

namespace {

void check_scores(const torch::Tensor& s, const char* what) {
  if (!s.defined() || s.numel() == 0) throw DomainError(std::string(what) + ": empty score tensor");
  const auto d = s.detach();
  const bool ok = (d > 0.0).all().item<bool>() && (d < 1.0).all().item<bool>();
  if (!ok) throw DomainError(std::string(what) + ": scores must lie strictly inside (0, 1)");
}

void check_same(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) throw ShapeError(std::string(what) + ": shape mismatch");
}

}  // namespace

void LossWeights::validate() const {
  for (double v : {lambda_adv, lambda_cyc, lambda_path, rho})
    if (!std::isfinite(v) || v < 0.0) throw ParameterError("loss weights must be finite and >= 0");
  for (double v : eta)
    if (!std::isfinite(v) || v < 0.0) throw ParameterError("eta weights must be finite and >= 0");
}

std::vector<double> LossWeights::path_weights(int T) const {
  if (T < 2) return {};
  if (eta.empty()) return std::vector<double>(T - 1, 1.0 / (T - 1));
  if (static_cast<int>(eta.size()) != T - 1)
    throw ArityError("eta needs T-1 = " + std::to_string(T - 1) + " entries");
  return eta;
}

json LossWeights::to_json() const {
  return {{"lambda1", lambda_adv}, {"lambda2", lambda_cyc}, {"lambda3", lambda_path}, {"rho", rho}, {"eta", eta}};
}

LossWeights LossWeights::from_json(const json& j) {
  LossWeights w;
  w.lambda_adv = j.value("lambda1", w.lambda_adv);
  w.lambda_cyc = j.value("lambda2", w.lambda_cyc);
  w.lambda_path = j.value("lambda3", w.lambda_path);
  w.rho = j.value("rho", w.rho);
  w.eta = j.value("eta", w.eta);
  w.validate();
  return w;
}

torch::Tensor adv_d_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  check_scores(d_real, "adv_d_loss(real)");
  check_scores(d_fake, "adv_d_loss(fake)");
  // d_fake must come from D(x_T.detach()); the caller owns that detach since
  // the discriminator's own parameters still need this gradient.
  return -torch::log(d_real).mean() - torch::log1p(-d_fake).mean();
}

torch::Tensor adv_g_loss(const torch::Tensor& d_fake) {
  check_scores(d_fake, "adv_g_loss");
  return -torch::log(d_fake).mean();
}

torch::Tensor cycle_loss(const torch::Tensor& x0, const torch::Tensor& f_of_g_x0, const torch::Tensor& y,
                         const torch::Tensor& g_of_f_y, double rho) {
  check_same(x0, f_of_g_x0, "cycle_loss(forward)");
  check_same(y, g_of_f_y, "cycle_loss(backward)");
  auto forward = (x0 - f_of_g_x0).abs().mean();
  if (rho == 0.0) return forward;
  return forward + rho * (y - g_of_f_y).abs().mean();
}

std::vector<torch::Tensor> chain_noise_predictions(const std::vector<torch::Tensor>& states, const DiffusionSchedule& sched) {
  const int T = static_cast<int>(states.size()) - 1;
  if (T != sched.steps()) throw ArityError("chain length and schedule length disagree");
  std::vector<torch::Tensor> eps;
  const auto& clean = states.back();
  for (int k = 0; k < T; ++k) {
    const int s = T - k;
    const double ab = sched.alpha_bar(s);
    eps.push_back((states[k] - std::sqrt(ab) * clean) / std::sqrt(1.0 - ab));
  }
  return eps;
}

torch::Tensor path_consistency_loss(const std::vector<torch::Tensor>& states, const std::vector<torch::Tensor>& eps_preds,
                                    const DiffusionSchedule& sched, const std::vector<double>& eta) {
  const int T = static_cast<int>(states.size()) - 1;
  if (T < 1 || T != sched.steps())
    throw ArityError("path loss needs T+1 chain states for a T-step schedule");
  if (static_cast<int>(eta.size()) != T - 1) throw ArityError("path loss needs T-1 eta weights");
  if (static_cast<int>(eps_preds.size()) < T - 1) throw ArityError("path loss needs T-1 noise predictions");
  torch::Tensor total = torch::zeros({}, states.front().options());
  for (int k = 1; k <= T - 1; ++k) {
    if (eta[k - 1] == 0.0) continue;
    const auto ref = ddim_step(states[k - 1], T - k + 1, eps_preds[k - 1], sched);
    total = total + eta[k - 1] * (states[k] - ref).pow(2).mean();
  }
  return total;
}

Objective total_objective(const LossParts& p, const LossWeights& w) {
  w.validate();
  auto term = [](double lambda, const torch::Tensor& t) -> torch::Tensor {
    if (!t.defined()) return torch::zeros({});
    return lambda * t;
  };
  Objective o;
  o.gen_loss = term(w.lambda_adv, p.adv_g) + term(w.lambda_cyc, p.cyc) + term(w.lambda_path, p.path);
  o.disc_loss = p.adv_d.defined() ? p.adv_d : torch::zeros({});
  return o;
}

torch::Tensor cycle_error(const torch::Tensor& x0, const torch::Tensor& f_of_g_x0) {
  check_same(x0, f_of_g_x0, "cycle_error");
  if (x0.dim() < 2) throw ShapeError("cycle_error expects a batch dimension");
  return (x0 - f_of_g_x0).abs().flatten(1).mean(1);
}

double alignment_error(const Volume& pred, const Volume& hf, const std::vector<int>& shifts) {
  if (shifts.empty()) throw ParameterError("alignment_error needs at least one shift");
  if (!(pred.shape == hf.shape)) throw ShapeError("alignment_error: prediction and reference shapes differ");
  double total = 0.0;
  for (int s : shifts) {
    const Volume ref = inject_slice_shift(hf, s);
    double acc = 0.0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
      const double d = static_cast<double>(pred.data[i]) - ref.data[i];
      acc += d * d;
    }
    total += acc / static_cast<double>(pred.data.size());
  }
  return total / static_cast<double>(shifts.size());
}

}  // namespace cssdiff
