#include <cstdio>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "cssdiff/config.hpp"
#include "cssdiff/errors.hpp"
#include "cssdiff/phantom.hpp"
#include "cssdiff/pipeline.hpp"
#include "cssdiff/rng.hpp"

namespace fs = std::filesystem;
using namespace cssdiff;

namespace {

struct Common {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
  std::string train_dir;
  std::string heldout_dir;
};

void add_common(CLI::App* cmd, Common& c, bool with_data = true) {
  cmd->add_option("--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "root seed (overrides the config)");
  cmd->add_option("--out", c.out, "output directory");
  if (with_data) {
    cmd->add_option("--train-dir", c.train_dir, "training dataset directory");
    cmd->add_option("--heldout-dir", c.heldout_dir, "held-out dataset directory");
  }
}

TrainConfig resolve(const Common& c) {
  TrainConfig cfg = c.config.empty() ? TrainConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (!c.train_dir.empty()) cfg.train_dir = c.train_dir;
  if (!c.heldout_dir.empty()) cfg.heldout_dir = c.heldout_dir;
  return cfg;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-field to high-field MRI synthesis on procedural phantoms"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "intra-op threads (1 keeps runs bit-reproducible)")->check(CLI::PositiveNumber);

  Common data_opts;
  auto* make_data = app.add_subcommand("make-data", "generate paired phantom datasets");
  add_common(make_data, data_opts, false);

  Common sgp_opts;
  auto* pre_sgp = app.add_subcommand("pretrain-sgp", "pretrain the slice encoder");
  add_common(pre_sgp, sgp_opts);

  Common lsc_opts;
  auto* pre_lsc = app.add_subcommand("pretrain-lsc", "pretrain the local-structure corrector");
  add_common(pre_lsc, lsc_opts);

  Common train_opts;
  TrainOptions topts;
  std::string sgp_ckpt, lsc_ckpt;
  bool joint_sgp = false, joint_lsc = false, no_cond = false, no_lsc_init = false;
  std::optional<int> max_epochs;
  auto* train = app.add_subcommand("train", "joint cycle-constrained training");
  add_common(train, train_opts);
  train->add_option("--sgp-ckpt", sgp_ckpt, "slice encoder stage checkpoint");
  train->add_option("--lsc-ckpt", lsc_ckpt, "corrector stage checkpoint");
  train->add_flag("--from-scratch", topts.from_scratch, "train without stage checkpoints");
  train->add_flag("--resume", topts.resume, "continue from <out>/last.ckpt");
  train->add_flag("--joint-sgp", joint_sgp, "keep training the slice encoder with an auxiliary contrastive term");
  train->add_flag("--joint-lsc", joint_lsc, "add the corruption-recovery term to the last generator");
  train->add_flag("--no-sgp-condition", no_cond, "zero slice conditioning");
  train->add_flag("--no-lsc-init", no_lsc_init, "do not initialise the last generator from the corrector");
  train->add_option("--max-epochs", max_epochs, "override optim.max_epochs");

  std::string ckpt, input, synth_out;
  uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "synthesize high-field volumes");
  synth->add_option("--ckpt", ckpt, "trained checkpoint")->required();
  synth->add_option("--input", input, "dataset directory with manifest.json")->required();
  synth->add_option("--out", synth_out, "prediction directory")->required();
  synth->add_option("--seed", synth_seed, "latent seed");
  synth->add_option("--config", data_opts.config, "unused; accepted for uniformity");

  std::string pred_dir, manifest_dir, eval_out;
  auto* eval = app.add_subcommand("eval", "score predictions against a dataset");
  eval->add_option("--pred", pred_dir, "prediction directory")->required();
  eval->add_option("--manifest", manifest_dir, "dataset directory with manifest.json")->required();
  eval->add_option("--out", eval_out, "report directory")->required();

  std::string metrics_path, train_report_path, report_out;
  auto* report = app.add_subcommand("report", "render metric plots as SVG");
  report->add_option("--metrics", metrics_path, "metrics.json");
  report->add_option("--train-report", train_report_path, "train_report.json");
  report->add_option("--out", report_out, "plot directory")->required();

  CLI11_PARSE(app, argc, argv);
  torch::set_num_threads(threads);

  try {
    if (*make_data) {
      auto cfg = resolve(data_opts);
      fs::path train_dir = cfg.train_dir, heldout_dir = cfg.heldout_dir;
      if (!data_opts.out.empty()) {
        train_dir = fs::path(data_opts.out) / "train";
        heldout_dir = fs::path(data_opts.out) / "heldout";
      }
      DatasetSpec spec = cfg.data;
      if (data_opts.seed) spec.root_seed = *data_opts.seed;
      const auto m = make_dataset(spec, train_dir);
      DatasetSpec held = spec;
      held.n_samples = cfg.heldout_samples;
      held.root_seed = derive_seed(spec.root_seed, {0x48454C44});
      const auto h = make_dataset(held, heldout_dir);
      std::cout << "wrote " << m.samples.size() << " training pairs to " << train_dir << " and " << h.samples.size()
                << " held-out pairs to " << heldout_dir << "\n";
    } else if (*pre_sgp) {
      print_json(run_pretrain_sgp(resolve(sgp_opts)).report_json);
    } else if (*pre_lsc) {
      print_json(run_pretrain_lsc(resolve(lsc_opts)).report_json);
    } else if (*train) {
      auto cfg = resolve(train_opts);
      if (joint_sgp) cfg.joint_sgp = true;
      if (joint_lsc) cfg.joint_lsc = true;
      if (no_cond) cfg.sgp_condition = false;
      if (no_lsc_init) cfg.lsc_init = false;
      if (max_epochs) cfg.optim.max_epochs = *max_epochs;
      if (!sgp_ckpt.empty()) topts.sgp_checkpoint = sgp_ckpt;
      if (!lsc_ckpt.empty()) topts.lsc_checkpoint = lsc_ckpt;
      const auto r = run_train(cfg, topts);
      std::cout << "epochs " << r.epochs_run << ", best validation PSNR " << r.best_val_psnr << " dB at epoch "
                << r.best_epoch << (r.early_stopped ? " (early stop)" : "") << "\n";
    } else if (*synth) {
      const auto r = run_synthesize(ckpt, input, synth_out, synth_seed);
      std::cout << "wrote " << r.outputs.size() << " volumes to " << synth_out << "\n";
    } else if (*eval) {
      const auto r = run_evaluate(pred_dir, manifest_dir, eval_out);
      print_json(r.to_json()["aggregate"]);
    } else if (*report) {
      std::optional<fs::path> m, t;
      if (!metrics_path.empty()) m = metrics_path;
      if (!train_report_path.empty()) t = train_report_path;
      for (const auto& p : run_report(m, t, report_out)) std::cout << p.string() << "\n";
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
