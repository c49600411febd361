#include "cssdiff/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "cssdiff/checkpoint.hpp"
#include "cssdiff/errors.hpp"
#include "cssdiff/losses.hpp"
#include "cssdiff/lsc.hpp"
#include "cssdiff/phantom.hpp"
#include "cssdiff/rng.hpp"
#include "cssdiff/sgp.hpp"
#include "cssdiff/tensor_bridge.hpp"

namespace cssdiff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Seed streams derived from the run seed.
constexpr uint64_t kInitStream = 0;
constexpr uint64_t kSgpStream = 2;
constexpr uint64_t kLscStream = 3;
constexpr uint64_t kEpochStream = 4;
constexpr uint64_t kValidationStream = 5;
constexpr int64_t kSynthChunk = 16;

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<PairedSample> load_dir(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw IoError("no dataset at " + dir.string());
  return load_all(load_manifest(dir));
}

std::vector<PairedSample> load_heldout_or(const TrainConfig& cfg, const std::vector<PairedSample>& fallback) {
  if (fs::exists(cfg.heldout_dir / "manifest.json")) return load_dir(cfg.heldout_dir);
  return fallback;
}

std::vector<Volume> hf_of(const std::vector<PairedSample>& s) {
  std::vector<Volume> v;
  for (const auto& p : s) v.push_back(p.hf);
  return v;
}

std::vector<Volume> lf_of(const std::vector<PairedSample>& s) {
  std::vector<Volume> v;
  for (const auto& p : s) v.push_back(p.lf);
  return v;
}

struct Split {
  std::vector<PairedSample> train;
  std::vector<PairedSample> val;
};

Split split_train(const TrainConfig& cfg) {
  auto all = load_dir(cfg.train_dir);
  if (cfg.val_count >= static_cast<int>(all.size()))
    throw ParameterError("val_count must leave at least one training sample");
  Split s;
  const size_t n_train = all.size() - static_cast<size_t>(cfg.val_count);
  s.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());
  if (s.val.empty()) s.val = load_heldout_or(cfg, {});
  if (s.val.empty()) throw ParameterError("no validation data: set val_count or provide heldout_dir");
  return s;
}

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
}

torch::optim::AdamOptions adam(const TrainConfig& cfg) {
  return torch::optim::AdamOptions(cfg.optim.lr0).betas({cfg.optim.adam_beta1, 0.999});
}

// x_T for a slice stack, chunked, latents from `gen`.
torch::Tensor run_chain_eval(ModelBundle& b, const torch::Tensor& slices, bool sgp_condition, at::Generator& gen) {
  std::vector<torch::Tensor> outs;
  const int64_t n = slices.size(0);
  for (int64_t s = 0; s < n; s += kSynthChunk) {
    const auto x = slices.slice(0, s, std::min(n, s + kSynthChunk));
    torch::Tensor cond;
    if (sgp_condition) cond = b.slice_encoder->forward(x);
    std::vector<torch::Tensor> zs;
    for (size_t t = 0; t < b.chain.size(); ++t)
      zs.push_back(torch::randn(x.sizes(), gen, x.options()));
    outs.push_back(apply_chain(b, x, zs, cond).back());
  }
  return torch::cat(outs, 0);
}

class NdjsonLog {
 public:
  NdjsonLog(const fs::path& path, bool append) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw IoError("cannot open log " + path.string());
  }
  void record(int64_t step, int epoch, const std::string& name, double value) {
    out_ << json{{"step", step}, {"epoch", epoch}, {"loss_name", name}, {"value", value}}.dump() << "\n";
  }
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

// Drops records from epochs that were not checkpointed.
void truncate_log(const fs::path& path, int epochs_done) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;
    if (j.value("epoch", 0) < epochs_done) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

}  // namespace

double learning_rate_at(int epoch, double lr0, int halve_every) {
  if (epoch < 0 || halve_every < 1) throw ParameterError("learning_rate_at needs epoch >= 0 and halve_every >= 1");
  return std::ldexp(lr0, -(epoch / halve_every));
}

EarlyStopping::EarlyStopping(int patience) : patience_(patience), best_(-std::numeric_limits<double>::infinity()) {
  if (patience < 1) throw ParameterError("patience must be >= 1");
}

bool EarlyStopping::update(double value) {
  if (value > best_) {
    best_ = value;
    bad_epochs_ = 0;
    return true;
  }
  ++bad_epochs_;
  return false;
}

void EarlyStopping::restore(double best, int bad_epochs) {
  best_ = best;
  bad_epochs_ = bad_epochs;
}

// ---------------------------------------------------------------------------
// Stages

StageResult run_pretrain_sgp(const TrainConfig& cfg) {
  cfg.validate();
  auto train = load_dir(cfg.train_dir);
  auto eval = load_heldout_or(cfg, train);

  auto bundle = init_models(cfg.net, derive_seed(cfg.seed, {kInitStream}));
  SgpConfig sc = cfg.sgp;
  sc.seed = derive_seed(cfg.seed, {kSgpStream, cfg.sgp.seed});

  StageResult r;
  r.checkpoint = cfg.out_dir / "sgp.ckpt";
  r.report = cfg.out_dir / "sgp_report.json";
  CheckpointMeta meta;
  meta.stage = "sgp";
  meta.config = cfg.to_json();

  SgpReport rep;
  try {
    rep = pretrain_sgp(train, bundle.slice_encoder, sc, eval);
  } catch (const TrainingError&) {
    meta.extra = {{"failed", true}};
    save_checkpoint(cfg.out_dir / "sgp_last_good.ckpt", bundle, meta);
    throw;
  }
  r.skipped = sc.epochs == 0;
  r.report_json = rep.to_json();
  r.report_json["stage"] = "sgp";
  r.report_json["skipped"] = r.skipped;
  meta.epoch = rep.epochs_run;
  meta.extra = {{"report", r.report_json}};
  save_checkpoint(r.checkpoint, bundle, meta);
  write_json(r.report, r.report_json);
  return r;
}

StageResult run_pretrain_lsc(const TrainConfig& cfg) {
  cfg.validate();
  auto train = load_dir(cfg.train_dir);
  auto heldout = load_heldout_or(cfg, {});

  auto bundle = init_models(cfg.net, derive_seed(cfg.seed, {kInitStream}));
  LscConfig lc = cfg.lsc;
  lc.seed = derive_seed(cfg.seed, {kLscStream, cfg.lsc.seed});

  StageResult r;
  r.checkpoint = cfg.out_dir / "lsc.ckpt";
  r.report = cfg.out_dir / "lsc_report.json";
  CheckpointMeta meta;
  meta.stage = "lsc";
  meta.config = cfg.to_json();

  LscReport rep;
  try {
    rep = pretrain_lsc(hf_of(train), bundle, lc, hf_of(heldout));
  } catch (const TrainingError&) {
    meta.extra = {{"failed", true}};
    save_checkpoint(cfg.out_dir / "lsc_last_good.ckpt", bundle, meta);
    throw;
  }
  r.skipped = lc.epochs == 0;
  r.report_json = rep.to_json();
  r.report_json["stage"] = "lsc";
  r.report_json["skipped"] = r.skipped;
  meta.epoch = rep.epochs_run;
  meta.extra = {{"report", r.report_json}};
  save_checkpoint(r.checkpoint, bundle, meta);
  write_json(r.report, r.report_json);
  return r;
}

// ---------------------------------------------------------------------------
// Joint training

json EpochRecord::to_json() const {
  return {{"epoch", epoch},
          {"lr", lr},
          {"gen_loss", gen_loss},
          {"disc_loss", disc_loss},
          {"val_psnr", val_psnr},
          {"val_cycle_error", val_cycle_error}};
}

EpochRecord EpochRecord::from_json(const json& j) {
  EpochRecord e;
  e.epoch = j.at("epoch").get<int>();
  e.lr = j.at("lr").get<double>();
  e.gen_loss = j.at("gen_loss").get<double>();
  e.disc_loss = j.at("disc_loss").get<double>();
  e.val_psnr = j.at("val_psnr").get<double>();
  e.val_cycle_error = j.at("val_cycle_error").get<double>();
  return e;
}

json TrainResult::to_json() const {
  json h = json::array();
  for (const auto& e : history) h.push_back(e.to_json());
  return {{"history", h},
          {"epochs_run", epochs_run},
          {"best_epoch", best_epoch},
          {"best_val_psnr", best_val_psnr},
          {"early_stopped", early_stopped},
          {"best_checkpoint", best_checkpoint.string()},
          {"last_checkpoint", last_checkpoint.string()},
          {"log", log.string()}};
}

Volume synthesize_volume(ModelBundle& b, const Volume& lf, bool sgp_condition, uint64_t seed, double hf_field_T) {
  torch::NoGradGuard no_grad;
  b.set_train(false);
  auto gen = at::detail::createCPUGenerator(seed);
  const auto y = run_chain_eval(b, to_slices(lf), sgp_condition, gen).clamp(0.0, 1.0);
  return from_slices(y, lf.spacing_mm, hf_field_T);
}

ValidationResult validate_bundle(ModelBundle& b, const std::vector<Volume>& lf, const std::vector<Volume>& hf,
                                 bool sgp_condition, uint64_t seed) {
  if (lf.size() != hf.size() || lf.empty()) throw ArityError("validation needs matching, non-empty lf/hf lists");
  torch::NoGradGuard no_grad;
  b.set_train(false);
  ValidationResult r;
  for (size_t i = 0; i < lf.size(); ++i) {
    auto gen = at::detail::createCPUGenerator(derive_seed(seed, {i}));
    const auto x = to_slices(lf[i]);
    const auto y = run_chain_eval(b, x, sgp_condition, gen);
    r.psnr += psnr(y.clamp(0.0, 1.0), to_slices(hf[i]));
    r.cycle_error += cycle_error(x, apply_reverse(b, y)).mean().item<double>();
  }
  r.psnr /= static_cast<double>(lf.size());
  r.cycle_error /= static_cast<double>(lf.size());
  return r;
}

TrainResult run_train(const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const fs::path sgp_ckpt = opts.sgp_checkpoint.value_or(cfg.out_dir / "sgp.ckpt");
  const fs::path lsc_ckpt = opts.lsc_checkpoint.value_or(cfg.out_dir / "lsc.ckpt");
  if (!opts.from_scratch) {
    std::vector<std::string> missing;
    if (!fs::exists(sgp_ckpt)) missing.push_back(sgp_ckpt.string());
    if (!fs::exists(lsc_ckpt)) missing.push_back(lsc_ckpt.string());
    if (!missing.empty()) {
      std::string msg = "joint training needs both stage checkpoints (run pretrain-sgp and pretrain-lsc, or pass --from-scratch); missing:";
      for (const auto& m : missing) msg += " " + m;
      throw ContractError(msg);
    }
  }

  const auto split = split_train(cfg);
  const auto sched = cfg.schedule.make(cfg.net.T_steps);
  const auto eta = cfg.loss.path_weights(cfg.net.T_steps);

  auto b = init_models(cfg.net, derive_seed(cfg.seed, {kInitStream}));
  if (!opts.from_scratch) {
    load_checkpoint(sgp_ckpt, b, {"sgp_encoder"});
    load_checkpoint(lsc_ckpt, b, {"lsc_corrector", "patch_disc"});
    if (cfg.lsc_init) transfer_corrector_to_chain(b);
  }

  std::vector<torch::Tensor> g_params = b.generator_parameters();
  if (cfg.joint_sgp) {
    for (auto& p : b.slice_encoder->parameters()) g_params.push_back(p);
  } else {
    for (auto& p : b.slice_encoder->parameters()) p.set_requires_grad(false);
  }
  torch::optim::Adam opt_g(g_params, adam(cfg));
  torch::optim::Adam opt_d(b.disc->parameters(), adam(cfg));

  TrainResult result;
  result.best_checkpoint = cfg.out_dir / "best.ckpt";
  result.last_checkpoint = cfg.out_dir / "last.ckpt";
  result.log = cfg.out_dir / "train_log.ndjson";

  EarlyStopping stopper(cfg.optim.early_stop_patience);
  int start_epoch = 0;
  int64_t step = 0;
  if (opts.resume) {
    const auto meta = load_checkpoint(result.last_checkpoint, b, {}, {{"generator", &opt_g}, {"disc", &opt_d}});
    if (meta.stage != "joint") throw CompatibilityError("resume checkpoint is not a joint-training checkpoint");
    start_epoch = meta.epoch;
    step = meta.step;
    stopper.restore(meta.best_val_psnr, meta.epochs_without_improvement);
    for (const auto& h : meta.extra.at("history")) result.history.push_back(EpochRecord::from_json(h));
    result.best_epoch = meta.extra.value("best_epoch", -1);
    truncate_log(result.log, start_epoch);
  }
  NdjsonLog log(result.log, opts.resume);

  // Slice stacks of the training subjects.
  std::vector<torch::Tensor> lf_parts, hf_parts;
  for (const auto& s : split.train) {
    lf_parts.push_back(to_slices(s.lf));
    hf_parts.push_back(to_slices(s.hf));
  }
  const auto LF = torch::cat(lf_parts, 0);
  const auto HF = torch::cat(hf_parts, 0);
  const int64_t n_slices = LF.size(0);
  const auto val_lf = lf_of(split.val);
  const auto val_hf = hf_of(split.val);
  const uint64_t val_seed = derive_seed(cfg.seed, {kValidationStream});

  // With a frozen encoder the slice conditions never change.
  torch::Tensor cond_cache;
  if (cfg.sgp_condition && !cfg.joint_sgp) {
    torch::NoGradGuard no_grad;
    b.slice_encoder->eval();
    std::vector<torch::Tensor> parts;
    for (int64_t s = 0; s < n_slices; s += 64) parts.push_back(b.slice_encoder->forward(LF.slice(0, s, std::min(n_slices, s + 64))));
    cond_cache = torch::cat(parts, 0);
  }

  CorruptionSpec joint_corruption = cfg.lsc.corruption;
  const int T = cfg.net.T_steps;

  for (int epoch = start_epoch; epoch < cfg.optim.max_epochs; ++epoch) {
    if (opts.stop_after_epochs >= 0 && epoch >= opts.stop_after_epochs) break;
    const double lr = learning_rate_at(epoch, cfg.optim.lr0, cfg.optim.halve_every);
    set_lr(opt_g, lr);
    set_lr(opt_d, lr);
    log.record(step, epoch, "lr", lr);

    torch::manual_seed(derive_seed(cfg.seed, {kEpochStream, static_cast<uint64_t>(epoch), 1}));
    std::mt19937_64 order_rng(derive_seed(cfg.seed, {kEpochStream, static_cast<uint64_t>(epoch), 2}));
    std::vector<int64_t> order(static_cast<size_t>(n_slices));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    if (cfg.optim.slices_per_epoch > 0 && cfg.optim.slices_per_epoch < n_slices) order.resize(cfg.optim.slices_per_epoch);

    b.set_train(true);
    if (!cfg.joint_sgp) b.slice_encoder->eval();

    double g_sum = 0.0, d_sum = 0.0;
    int n_batches = 0;
    const int64_t bs = cfg.optim.batch_size;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(bs)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(bs));
      const auto idx = torch::tensor(std::vector<int64_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                          order.begin() + static_cast<std::ptrdiff_t>(end)));
      const auto x0 = LF.index_select(0, idx);
      const auto y = HF.index_select(0, idx);
      torch::Tensor cond;
      if (cfg.sgp_condition) cond = cfg.joint_sgp ? b.slice_encoder->forward(x0) : cond_cache.index_select(0, idx);

      std::vector<torch::Tensor> zs;
      for (int t = 0; t < T; ++t) zs.push_back(torch::randn_like(x0));
      const auto states = apply_chain(b, x0, zs, cond);
      const auto& xT = states.back();

      // Discriminator step on detached samples.
      LossParts parts;
      parts.adv_d = adv_d_loss(discriminate(b, y), discriminate(b, xT.detach()));
      opt_d.zero_grad();
      parts.adv_d.backward();
      if (cfg.optim.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(b.disc->parameters(), cfg.optim.grad_clip);
      opt_d.step();

      // Generator step with D frozen.
      torch::Tensor aux_sgp, aux_lsc;
      Objective obj;
      {
        FrozenParameters frozen(*b.disc);
        parts.adv_g = adv_g_loss(discriminate(b, xT));
        std::vector<torch::Tensor> zs_back;
        for (int t = 0; t < T; ++t) zs_back.push_back(torch::randn_like(y));
        const auto g_of_f_y = apply_chain(b, apply_reverse(b, y), zs_back, cond).back();
        parts.cyc = cycle_loss(x0, apply_reverse(b, xT), y, g_of_f_y, cfg.loss.rho);
        std::vector<torch::Tensor> full{x0};
        full.insert(full.end(), states.begin(), states.end());
        parts.path = T >= 2 ? path_consistency_loss(full, chain_noise_predictions(full, sched), sched, eta) : torch::zeros({});
        obj = total_objective(parts, cfg.loss);
        auto g_loss = obj.gen_loss;
        if (cfg.joint_sgp) {
          std::vector<int64_t> pos(static_cast<size_t>(x0.size(0)));
          std::iota(pos.begin(), pos.end(), 0);
          aux_sgp = info_nce_loss(cond, b.slice_encoder->forward(y), pos, cfg.sgp.tau);
          g_loss = g_loss + cfg.joint_sgp_weight * aux_sgp;
        }
        if (cfg.joint_lsc) {
          joint_corruption.seed = derive_seed(cfg.seed, {kLscStream, static_cast<uint64_t>(step)});
          const auto y_lsc = corrupt_batch(y, joint_corruption);
          const auto c = chain_condition({}, T - 1, y.size(0), cfg.net.embed_dim);
          aux_lsc = lsc_recon_loss(y, b.chain.back()->forward(y_lsc, torch::zeros_like(y), c), cfg.lsc.alpha);
          g_loss = g_loss + cfg.joint_lsc_weight * aux_lsc;
        }
        if (!torch::isfinite(g_loss).item<bool>() || !torch::isfinite(parts.adv_d).item<bool>())
          throw TrainingError("joint training diverged at step " + std::to_string(step) + "; last good checkpoint: " +
                              result.last_checkpoint.string());
        opt_g.zero_grad();
        g_loss.backward();
        if (cfg.optim.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(g_params, cfg.optim.grad_clip);
        opt_g.step();
        obj.gen_loss = g_loss;
      }

      log.record(step, epoch, "adv_d", parts.adv_d.item<double>());
      log.record(step, epoch, "adv_g", parts.adv_g.item<double>());
      log.record(step, epoch, "cycle", parts.cyc.item<double>());
      log.record(step, epoch, "path", parts.path.item<double>());
      if (aux_sgp.defined()) log.record(step, epoch, "joint_sgp", aux_sgp.item<double>());
      if (aux_lsc.defined()) log.record(step, epoch, "joint_lsc", aux_lsc.item<double>());
      log.record(step, epoch, "gen_total", obj.gen_loss.item<double>());
      g_sum += obj.gen_loss.item<double>();
      d_sum += parts.adv_d.item<double>();
      ++n_batches;
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.gen_loss = n_batches ? g_sum / n_batches : 0.0;
    rec.disc_loss = n_batches ? d_sum / n_batches : 0.0;
    const auto v = validate_bundle(b, val_lf, val_hf, cfg.sgp_condition, val_seed);
    rec.val_psnr = opts.validation_metric ? opts.validation_metric(epoch) : v.psnr;
    rec.val_cycle_error = v.cycle_error;
    log.record(step, epoch, "val_psnr", rec.val_psnr);
    log.record(step, epoch, "val_cycle_error", rec.val_cycle_error);
    log.flush();
    result.history.push_back(rec);

    CheckpointMeta meta;
    meta.stage = "joint";
    meta.step = step;
    meta.epoch = epoch + 1;
    meta.config = cfg.to_json();
    const bool improved = stopper.update(rec.val_psnr);
    if (improved) result.best_epoch = epoch;
    meta.best_val_psnr = stopper.best();
    meta.epochs_without_improvement = stopper.bad_epochs();
    json hist = json::array();
    for (const auto& h : result.history) hist.push_back(h.to_json());
    meta.extra = {{"history", hist}, {"best_epoch", result.best_epoch}, {"schedule", sched.to_json()}};
    if (improved) save_checkpoint(result.best_checkpoint, b, meta);
    save_checkpoint(result.last_checkpoint, b, meta, {{"generator", &opt_g}, {"disc", &opt_d}});

    if (stopper.should_stop()) {
      result.early_stopped = true;
      break;
    }
  }

  result.epochs_run = static_cast<int>(result.history.size());
  result.best_val_psnr = stopper.best();
  write_json(cfg.out_dir / "train_report.json", result.to_json());
  return result;
}

// ---------------------------------------------------------------------------
// Synthesis and evaluation

SynthesisResult run_synthesize(const fs::path& checkpoint, const fs::path& input_dir, const fs::path& out_dir,
                               uint64_t seed) {
  const auto meta = read_checkpoint_meta(checkpoint);
  const auto net = read_checkpoint_net(checkpoint);
  const auto cfg = TrainConfig::from_json(meta.config);
  auto b = init_models(net, 0);
  load_checkpoint(checkpoint, b);

  const auto manifest = load_manifest(input_dir);
  const double hf_field = cfg.data.degradation.b_high_T;
  fs::create_directories(out_dir);
  SynthesisResult r;
  for (size_t i = 0; i < manifest.samples.size(); ++i) {
    const auto& rec = manifest.samples[i];
    const auto sample = load_sample(manifest, rec);
    const int div = 1 << net.depth;
    if (rec.shape.y % div != 0 || rec.shape.x % div != 0)
      throw ShapeError("sample " + rec.sample_id + " in-plane size is not divisible by " + std::to_string(div));
    const auto y = synthesize_volume(b, sample.lf, cfg.sgp_condition, derive_seed(seed, {i}), hf_field);
    const auto path = out_dir / (rec.sample_id + "_syn.f32");
    write_raw_f32(path, y);
    SampleRecord side = rec;
    side.lf_field_T = sample.lf.field_strength_T;
    side.hf_field_T = hf_field;
    json j = side.to_json();
    j["synthesized_from"] = checkpoint.string();
    j["seed"] = seed;
    write_json(out_dir / (rec.sample_id + "_syn.json"), j);
    r.sample_ids.push_back(rec.sample_id);
    r.outputs.push_back(path);
  }
  return r;
}

MetricReport run_evaluate(const fs::path& pred_dir, const fs::path& manifest_dir, const fs::path& out_dir) {
  return evaluate_dataset(pred_dir, manifest_dir, out_dir);
}

}  // namespace cssdiff
