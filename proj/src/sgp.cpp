#include "cssdiff/sgp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "cssdiff/errors.hpp"
#include "cssdiff/rng.hpp"
#include "cssdiff/tensor_bridge.hpp"

namespace cssdiff {

using nlohmann::json;

void SgpConfig::validate() const {
  if (!(tau > 0.0 && tau <= 10.0)) throw ParameterError("tau must lie in (0, 10]");
  if (epochs < 0) throw ParameterError("epochs must be >= 0");
  if (!(lr > 0.0)) throw ParameterError("lr must be > 0");
  if (warmup_epochs < 0) throw ParameterError("warmup_epochs must be >= 0");
  if (view_weight < 0.0) throw ParameterError("view_weight must be >= 0");
}

json SgpConfig::to_json() const {
  return {{"tau", tau},         {"epochs", epochs},
          {"batch_slices", batch_slices}, {"lr", lr},
          {"warmup_epochs", warmup_epochs}, {"supervised_positives", supervised_positives},
          {"view_weight", view_weight}, {"seed", seed}};
}

SgpConfig SgpConfig::from_json(const json& j) {
  SgpConfig c;
  c.tau = j.value("tau", c.tau);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_slices = j.value("batch_slices", c.batch_slices);
  c.lr = j.value("lr", c.lr);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.supervised_positives = j.value("supervised_positives", c.supervised_positives);
  c.view_weight = j.value("view_weight", c.view_weight);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

json SgpReport::to_json() const {
  return {{"final_loss", final_loss}, {"mining_accuracy", mining_accuracy}, {"epochs_run", epochs_run},
          {"epoch_losses", epoch_losses}};
}

SliceBatch make_slice_batch(const PairedSample& sample, uint64_t seed) {
  const int64_t n = sample.lf.shape.z;
  if (n < 2) throw ParameterError("a slice batch needs at least two slices");
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int64_t> where(static_cast<size_t>(n));
  for (int64_t j = 0; j < n; ++j) where[order[j]] = j;

  SliceBatch b;
  b.lf = to_slices(sample.lf);
  b.hf = to_slices(sample.hf).index_select(0, torch::tensor(order, torch::kLong));
  for (int64_t i = 0; i < n; ++i) {
    const int64_t src = i + sample.slice_shift;
    b.nominal.push_back(where[i]);
    b.true_perm.push_back(where[std::clamp<int64_t>(src, 0, n - 1)]);
    b.interior.push_back(src >= 0 && src < n);
  }
  return b;
}

torch::Tensor augment_view(const torch::Tensor& slices, uint64_t seed) {
  if (slices.dim() != 4 || slices.size(1) != 1) throw ShapeError("augment_view expects (N, 1, H, W)");
  torch::NoGradGuard guard;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto gen = at::detail::createCPUGenerator(derive_seed(seed, {1}));
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < slices.size(0); ++i) {
    auto x = slices.slice(0, i, i + 1);
    const double sigma = 0.3 + 0.9 * u(rng);
    const auto k1 = torch::arange(-3, 4, x.options());
    auto k = torch::exp(-0.5 * (k1 / sigma).pow(2));
    k = k / k.sum();
    x = torch::conv2d(torch::replication_pad2d(x, {3, 3, 0, 0}), k.view({1, 1, 1, 7}));
    x = torch::conv2d(torch::replication_pad2d(x, {0, 0, 3, 3}), k.view({1, 1, 7, 1}));
    const double gamma = std::exp(std::log(0.8) + (std::log(1.25) - std::log(0.8)) * u(rng));
    x = x.clamp_min(0.0).pow(gamma);
    const double noise = 0.06 * u(rng);
    x = x + noise * torch::randn(x.sizes(), gen, x.options());
    out.push_back(x);
  }
  return torch::cat(out, 0);
}

std::vector<int64_t> mine_positives(const torch::Tensor& lf_embs, const torch::Tensor& hf_embs) {
  if (hf_embs.size(0) == 0) throw ParameterError("cannot mine from an empty batch");
  torch::NoGradGuard guard;
  const auto a = lf_embs.to(torch::kDouble);
  const auto b = hf_embs.to(torch::kDouble);
  const auto sim = torch::matmul(a / a.norm(2, {1}, true).clamp_min(1e-300), (b / b.norm(2, {1}, true).clamp_min(1e-300)).t());
  std::vector<int64_t> out;
  const auto acc = sim.accessor<double, 2>();
  for (int64_t i = 0; i < sim.size(0); ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < sim.size(1); ++j)
      if (acc[i][j] > acc[i][best]) best = j;
    out.push_back(best);
  }
  return out;
}

int64_t mine_positive(const torch::Tensor& lf_slice, const torch::Tensor& hf_batch, SliceEncoder& encoder) {
  if (!hf_batch.defined() || hf_batch.size(0) == 0) throw ParameterError("cannot mine from an empty batch");
  torch::NoGradGuard guard;
  const auto lf = lf_slice.dim() == 2 ? lf_slice.unsqueeze(0).unsqueeze(0) : as_image_batch(lf_slice);
  const auto hf = hf_batch.dim() == 3 ? hf_batch.unsqueeze(1) : hf_batch;
  return mine_positives(encoder->forward(lf), encoder->forward(hf)).front();
}

torch::Tensor info_nce_loss(const torch::Tensor& lf_embs, const torch::Tensor& hf_embs, const std::vector<int64_t>& positives,
                            double tau) {
  if (!(tau > 0.0)) throw ParameterError("tau must be > 0");
  if (lf_embs.dim() != 2 || hf_embs.dim() != 2 || lf_embs.size(1) != hf_embs.size(1))
    throw ShapeError("embeddings must be (N, E) with matching E");
  if (static_cast<int64_t>(positives.size()) != lf_embs.size(0)) throw ArityError("one positive per low-field slice");
  for (const auto& e : {lf_embs, hf_embs}) {
    const double dev = (e.detach().norm(2, {1}) - 1.0).abs().max().item<double>();
    if (dev > 1e-3) throw ContractError("embeddings must be unit-norm");
  }
  for (int64_t p : positives)
    if (p < 0 || p >= hf_embs.size(0)) throw RangeError("positive index out of range");
  const auto logits = torch::matmul(lf_embs, hf_embs.t()) / tau;
  const auto target = torch::tensor(positives, torch::kLong);
  return torch::nn::functional::cross_entropy(logits, target);
}

torch::Tensor condition_embedding(SliceEncoder& encoder, const torch::Tensor& lf_slice) {
  torch::NoGradGuard guard;
  if (lf_slice.dim() == 2) return encoder->forward(lf_slice.unsqueeze(0).unsqueeze(0)).squeeze(0);
  return encoder->forward(as_image_batch(lf_slice));
}

double mining_accuracy(SliceEncoder& encoder, const std::vector<PairedSample>& samples, uint64_t seed) {
  torch::NoGradGuard guard;
  const bool was_training = encoder->is_training();
  encoder->eval();
  const bool any_shifted = std::any_of(samples.begin(), samples.end(), [](const auto& s) { return s.slice_shift != 0; });
  int64_t hits = 0, total = 0;
  for (size_t k = 0; k < samples.size(); ++k) {
    if (any_shifted && samples[k].slice_shift == 0) continue;
    const auto batch = make_slice_batch(samples[k], derive_seed(seed, {k}));
    const auto mined = mine_positives(encoder->forward(batch.lf), encoder->forward(batch.hf));
    for (size_t i = 0; i < mined.size(); ++i) {
      if (!batch.interior[i]) continue;
      hits += mined[i] == batch.true_perm[i];
      ++total;
    }
  }
  encoder->train(was_training);
  return total == 0 ? 0.0 : static_cast<double>(hits) / total;
}

namespace {

std::string snapshot(const torch::nn::Module& m) {
  std::ostringstream os;
  torch::serialize::OutputArchive ar;
  m.save(ar);
  ar.save_to(os);
  return os.str();
}

void restore(torch::nn::Module& m, const std::string& blob) {
  std::istringstream is(blob);
  torch::serialize::InputArchive ar;
  ar.load_from(is);
  m.load(ar);
}

}  // namespace

SgpReport pretrain_sgp(const std::vector<PairedSample>& train, SliceEncoder& encoder, const SgpConfig& cfg,
                       const std::vector<PairedSample>& eval) {
  cfg.validate();
  for (const auto& s : train)
    if (s.lf.shape.z < 2) throw ParameterError("SGP needs at least two slices per volume");

  SgpReport report;
  torch::optim::Adam opt(encoder->parameters(), torch::optim::AdamOptions(cfg.lr));
  encoder->train();
  std::string last_good = snapshot(*encoder);
  std::vector<size_t> subjects(train.size());
  std::iota(subjects.begin(), subjects.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(cfg.seed, {static_cast<uint64_t>(epoch), 0x56}));
    std::shuffle(subjects.begin(), subjects.end(), rng);
    double epoch_loss = 0.0;
    for (size_t k : subjects) {
      auto batch = make_slice_batch(train[k], derive_seed(cfg.seed, {static_cast<uint64_t>(epoch), k}));
      torch::Tensor lf = batch.lf, hf = batch.hf;
      std::vector<int64_t> truth = batch.true_perm, nominal = batch.nominal;
      if (cfg.batch_slices > 0 && cfg.batch_slices < lf.size(0)) {
        // Keep a random subset of z indices on both sides.
        std::vector<int64_t> keep(static_cast<size_t>(lf.size(0)));
        std::iota(keep.begin(), keep.end(), 0);
        std::shuffle(keep.begin(), keep.end(), rng);
        keep.resize(cfg.batch_slices);
        std::sort(keep.begin(), keep.end());
        std::vector<int64_t> hf_keep, remap(static_cast<size_t>(lf.size(0)), -1);
        for (int64_t z : keep) hf_keep.push_back(batch.nominal[z]);
        std::sort(hf_keep.begin(), hf_keep.end());
        for (size_t j = 0; j < hf_keep.size(); ++j) remap[hf_keep[j]] = static_cast<int64_t>(j);
        lf = lf.index_select(0, torch::tensor(keep, torch::kLong));
        hf = hf.index_select(0, torch::tensor(hf_keep, torch::kLong));
        nominal.clear();
        truth.clear();
        for (int64_t z : keep) {
          nominal.push_back(remap[batch.nominal[z]]);
          const int64_t t = remap[batch.true_perm[z]];
          truth.push_back(t >= 0 ? t : remap[batch.nominal[z]]);
        }
      }
      const auto hf_e = encoder->forward(hf);
      torch::Tensor loss;
      if (cfg.supervised_positives) {
        loss = info_nce_loss(encoder->forward(lf), hf_e, truth, cfg.tau);
      } else {
        // Each high-field slice against a degraded copy of itself: a correspondence
        // that is known exactly without trusting the acquisition registration.
        const auto nominal_idx = torch::tensor(nominal, torch::kLong);
        const auto view = augment_view(hf.index_select(0, nominal_idx), derive_seed(cfg.seed, {static_cast<uint64_t>(epoch), k, 0x71}));
        loss = info_nce_loss(encoder->forward(view), hf_e, nominal, cfg.tau);
        if (epoch >= cfg.warmup_epochs) {
          const auto lf_e = encoder->forward(lf);
          const auto mined = mine_positives(lf_e.detach(), hf_e.detach());
          loss = (info_nce_loss(lf_e, hf_e, mined, cfg.tau) + cfg.view_weight * loss) / (1.0 + cfg.view_weight);
        }
      }
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        restore(*encoder, last_good);
        throw TrainingError("SGP loss diverged at epoch " + std::to_string(epoch));
      }
      opt.zero_grad();
      loss.backward();
      opt.step();
      epoch_loss += value;
    }
    report.epoch_losses.push_back(train.empty() ? 0.0 : epoch_loss / train.size());
    report.final_loss = report.epoch_losses.back();
    report.epochs_run = epoch + 1;
    last_good = snapshot(*encoder);
  }
  report.mining_accuracy = mining_accuracy(encoder, eval.empty() ? train : eval, derive_seed(cfg.seed, {0xACC}));
  return report;
}

}  // namespace cssdiff
