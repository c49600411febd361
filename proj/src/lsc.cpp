#include "cssdiff/lsc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "cssdiff/errors.hpp"
#include "cssdiff/metrics.hpp"
#include "cssdiff/rng.hpp"
#include "cssdiff/tensor_bridge.hpp"

namespace cssdiff {

using nlohmann::json;
using torch::indexing::Slice;

void CorruptionSpec::validate(int64_t h, int64_t w) const {
  if (rows < 1 || cols < 1) throw ParameterError("corruption grid must be at least 1x1");
  if (h % rows != 0 || w % cols != 0) throw ParameterError("image dims must be divisible by the corruption grid");
  if (!(rotate_fraction >= 0.0 && rotate_fraction <= 1.0 && mask_fraction >= 0.0 && mask_fraction <= 1.0))
    throw ParameterError("corruption fractions must lie in [0, 1]");
  if (rotate_fraction + mask_fraction > 1.0 + 1e-12) throw ParameterError("rotate_fraction + mask_fraction must be <= 1");
  if (rotated_count() > 0 && angles.empty()) throw ParameterError("rotation requested without angles");
  const bool square = h / rows == w / cols;
  for (int a : angles) {
    if (a != 90 && a != 180 && a != 270) throw ParameterError("angles must be drawn from {90, 180, 270}");
    if ((a == 90 || a == 270) && !square && rotated_count() > 0)
      throw ParameterError("90/270 degree rotation needs square blocks");
  }
}

int CorruptionSpec::rotated_count() const {
  return static_cast<int>(std::lround(rotate_fraction * block_count()));
}

int CorruptionSpec::masked_count() const {
  return std::min(static_cast<int>(std::lround(mask_fraction * block_count())), block_count() - rotated_count());
}

json CorruptionSpec::to_json() const {
  return {{"grid", {rows, cols}}, {"rotate_fraction", rotate_fraction}, {"mask_fraction", mask_fraction},
          {"angles", angles},     {"seed", seed}};
}

CorruptionSpec CorruptionSpec::from_json(const json& j) {
  CorruptionSpec s;
  if (j.contains("grid")) {
    s.rows = j.at("grid").at(0).get<int>();
    s.cols = j.at("grid").at(1).get<int>();
  }
  s.rotate_fraction = j.value("rotate_fraction", s.rotate_fraction);
  s.mask_fraction = j.value("mask_fraction", s.mask_fraction);
  s.angles = j.value("angles", s.angles);
  s.seed = j.value("seed", s.seed);
  return s;
}

torch::Tensor rotate_block(const torch::Tensor& block, int degrees) {
  if (block.dim() != 2) throw ShapeError("rotate_block expects a 2-D block");
  if (degrees % 90 != 0) throw ParameterError("rotation must be a multiple of 90 degrees");
  const int k = ((degrees / 90) % 4 + 4) % 4;
  if (k % 2 == 1 && block.size(0) != block.size(1)) throw ParameterError("90/270 degree rotation needs square blocks");
  return torch::rot90(block, k, {0, 1});
}

Corruption corrupt(const torch::Tensor& y, const CorruptionSpec& spec) {
  if (y.dim() != 2) throw ShapeError("corrupt expects a 2-D image");
  const int64_t h = y.size(0), w = y.size(1);
  spec.validate(h, w);
  const int64_t bh = h / spec.rows, bw = w / spec.cols;
  const int nblocks = spec.block_count();

  std::mt19937_64 rng(spec.seed);
  std::vector<int> order(nblocks);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<size_t> pick(0, spec.angles.empty() ? 0 : spec.angles.size() - 1);

  Corruption c;
  c.image = y.detach().clone();
  c.labels.assign(nblocks, BlockTransform::clean);
  const int n_rot = spec.rotated_count();
  const int n_mask = spec.masked_count();
  for (int i = 0; i < n_rot; ++i) {
    const int blk = order[i];
    const int angle = spec.angles[pick(rng)];
    auto view = c.image.index({Slice((blk / spec.cols) * bh, (blk / spec.cols + 1) * bh),
                               Slice((blk % spec.cols) * bw, (blk % spec.cols + 1) * bw)});
    view.copy_(rotate_block(view.clone(), angle));
    c.labels[blk] = angle == 90 ? BlockTransform::rot90 : angle == 180 ? BlockTransform::rot180 : BlockTransform::rot270;
  }
  for (int i = n_rot; i < n_rot + n_mask; ++i) {
    const int blk = order[i];
    c.image
        .index({Slice((blk / spec.cols) * bh, (blk / spec.cols + 1) * bh),
                Slice((blk % spec.cols) * bw, (blk % spec.cols + 1) * bw)})
        .zero_();
    c.labels[blk] = BlockTransform::masked;
  }
  return c;
}

torch::Tensor corrupt_batch(const torch::Tensor& y, const CorruptionSpec& spec) {
  const auto batch = as_image_batch(y);
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < batch.size(0); ++i) {
    CorruptionSpec s = spec;
    s.seed = derive_seed(spec.seed, {static_cast<uint64_t>(i)});
    out.push_back(corrupt(batch[i][0], s).image);
  }
  return torch::stack(out).unsqueeze(1);
}

torch::Tensor lsc_recon_loss(const torch::Tensor& y, const torch::Tensor& y_hat, double alpha) {
  if (!y.sizes().equals(y_hat.sizes())) throw ShapeError("lsc_recon_loss: shape mismatch");
  const auto mse = (y - y_hat).pow(2).mean();
  // sqrt has an infinite slope at 0; route exact zeros around it.
  const auto positive = mse > 0;
  const auto rms = torch::where(positive, torch::sqrt(torch::where(positive, mse, torch::ones_like(mse))), torch::zeros_like(mse));
  if (alpha == 0.0) return rms;
  return rms + alpha * (1.0 - ssim_tensor(y, y_hat)).to(rms.scalar_type());
}

LscAdversarialTerms lsc_adversarial_terms(const torch::Tensor& real_scores, const torch::Tensor& fake_scores) {
  if (!real_scores.sizes().equals(fake_scores.sizes())) throw ShapeError("patch score grids differ in shape");
  for (const auto& s : {real_scores, fake_scores}) {
    const auto d = s.detach();
    if (!((d > 0.0).all().item<bool>() && (d < 1.0).all().item<bool>()))
      throw DomainError("patch scores must lie strictly inside (0, 1)");
  }
  LscAdversarialTerms t;
  t.disc_term = (torch::log(real_scores) + torch::log1p(-fake_scores)).mean();
  t.gen_term = -torch::log(fake_scores).mean();
  return t;
}

LscAdversarialTerms lsc_adversarial(const ModelBundle& b, const torch::Tensor& y, const torch::Tensor& y_lsc) {
  const auto restored = apply_corrector(b, y_lsc);
  return lsc_adversarial_terms(discriminate_patches(b, y), discriminate_patches(b, restored));
}

void LscConfig::validate() const {
  if (epochs < 0) throw ParameterError("epochs must be >= 0");
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ParameterError("lr must be > 0");
  if (!(alpha >= 0.0) || !(mu >= 0.0)) throw ParameterError("alpha and mu must be >= 0");
}

json LscConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr},    {"alpha", alpha},
          {"mu", mu},         {"corruption", corruption.to_json()}, {"seed", seed}};
}

LscConfig LscConfig::from_json(const json& j) {
  LscConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.alpha = j.value("alpha", c.alpha);
  c.mu = j.value("mu", c.mu);
  if (j.contains("corruption")) c.corruption = CorruptionSpec::from_json(j.at("corruption"));
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

json LscReport::to_json() const {
  return {{"final_loss", final_loss},
          {"epochs_run", epochs_run},
          {"epoch_losses", epoch_losses},
          {"heldout_psnr_corrupted", heldout_psnr_corrupted},
          {"heldout_psnr_restored", heldout_psnr_restored}};
}

namespace {

torch::Tensor stack_slices(const std::vector<Volume>& vols) {
  std::vector<torch::Tensor> parts;
  for (const auto& v : vols) parts.push_back(to_slices(v));
  return torch::cat(parts, 0);
}

std::string snapshot(const ModelBundle& b) {
  std::ostringstream os;
  torch::serialize::OutputArchive ar, c, d;
  b.corrector->save(c);
  b.patch_disc->save(d);
  ar.write("corrector", c);
  ar.write("patch_disc", d);
  ar.save_to(os);
  return os.str();
}

void restore(ModelBundle& b, const std::string& blob) {
  std::istringstream is(blob);
  torch::serialize::InputArchive ar, c, d;
  ar.load_from(is);
  ar.read("corrector", c);
  ar.read("patch_disc", d);
  b.corrector->load(c);
  b.patch_disc->load(d);
}

}  // namespace

std::pair<double, double> lsc_heldout_psnr(const ModelBundle& b, const std::vector<Volume>& heldout, const CorruptionSpec& spec) {
  if (heldout.empty()) return {0.0, 0.0};
  torch::NoGradGuard guard;
  const bool was_training = b.corrector->is_training();
  b.corrector.ptr()->eval();
  const auto y = stack_slices(heldout);
  CorruptionSpec s = spec;
  s.seed = derive_seed(spec.seed, {0xE7A1});
  const auto y_lsc = corrupt_batch(y, s);
  std::vector<torch::Tensor> restored;
  for (int64_t i = 0; i < y.size(0); i += 32) {
    const int64_t end = std::min<int64_t>(i + 32, y.size(0));
    restored.push_back(apply_corrector(b, y_lsc.index({Slice(i, end)})).clamp(0.0, 1.0));
  }
  b.corrector.ptr()->train(was_training);
  return {psnr(y_lsc, y), psnr(torch::cat(restored, 0), y)};
}

LscReport pretrain_lsc(const std::vector<Volume>& train_hf, ModelBundle& b, const LscConfig& cfg,
                       const std::vector<Volume>& heldout_hf) {
  cfg.validate();
  LscReport report;
  if (train_hf.empty()) throw ParameterError("LSC pretraining needs at least one high-field volume");
  const auto slices = stack_slices(train_hf);
  cfg.corruption.validate(slices.size(2), slices.size(3));

  torch::optim::Adam opt_g(b.corrector->parameters(), torch::optim::AdamOptions(cfg.lr));
  torch::optim::Adam opt_d(b.patch_disc->parameters(), torch::optim::AdamOptions(cfg.lr));
  b.corrector->train();
  b.patch_disc->train();
  std::string last_good = snapshot(b);
  const int64_t n = slices.size(0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    torch::manual_seed(derive_seed(cfg.seed, {static_cast<uint64_t>(epoch), 0xD0}));
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(cfg.seed, {static_cast<uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    int batches = 0;
    for (int64_t start = 0; start < n; start += cfg.batch_size) {
      const int64_t end = std::min<int64_t>(start + cfg.batch_size, n);
      const auto idx = torch::tensor(std::vector<int64_t>(order.begin() + start, order.begin() + end), torch::kLong);
      const auto y = slices.index_select(0, idx);
      CorruptionSpec spec = cfg.corruption;
      spec.seed = derive_seed(cfg.seed, {static_cast<uint64_t>(epoch), static_cast<uint64_t>(start)});
      const auto y_lsc = corrupt_batch(y, spec);

      // Patch discriminator ascends disc_term.
      {
        const auto fake = apply_corrector(b, y_lsc).detach();
        const auto terms = lsc_adversarial_terms(discriminate_patches(b, y), discriminate_patches(b, fake));
        opt_d.zero_grad();
        (-terms.disc_term).backward();
        opt_d.step();
      }
      const auto restored = apply_corrector(b, y_lsc);
      torch::Tensor gen_term;
      {
        FrozenParameters frozen(*b.patch_disc);
        gen_term = -torch::log(discriminate_patches(b, restored)).mean();
      }
      const auto loss = lsc_recon_loss(y, restored, cfg.alpha) + cfg.mu * gen_term;
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        restore(b, last_good);
        throw TrainingError("LSC loss diverged at epoch " + std::to_string(epoch));
      }
      opt_g.zero_grad();
      loss.backward();
      opt_g.step();
      epoch_loss += value;
      ++batches;
    }
    report.epoch_losses.push_back(batches ? epoch_loss / batches : 0.0);
    report.final_loss = report.epoch_losses.back();
    report.epochs_run = epoch + 1;
    last_good = snapshot(b);
  }
  const auto [corrupted, restored] = lsc_heldout_psnr(b, heldout_hf.empty() ? train_hf : heldout_hf, cfg.corruption);
  report.heldout_psnr_corrupted = corrupted;
  report.heldout_psnr_restored = restored;
  return report;
}

}  // namespace cssdiff
