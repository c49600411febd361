#include "cssdiff/config.hpp"

#include <fstream>

#include "cssdiff/errors.hpp"

namespace cssdiff {

using nlohmann::json;

DiffusionSchedule ScheduleConfig::make(int T) const {
  if (rescaled_default) return DiffusionSchedule::default_for(T);
  return DiffusionSchedule::build(T, beta_start, beta_end, kind);
}

json ScheduleConfig::to_json() const {
  return {{"rescaled_default", rescaled_default}, {"beta_start", beta_start}, {"beta_end", beta_end}, {"kind", to_string(kind)}};
}

ScheduleConfig ScheduleConfig::from_json(const json& j) {
  ScheduleConfig s;
  s.rescaled_default = j.value("rescaled_default", s.rescaled_default);
  s.beta_start = j.value("beta_start", s.beta_start);
  s.beta_end = j.value("beta_end", s.beta_end);
  s.kind = schedule_kind_from(j.value("kind", std::string("linear")));
  return s;
}

void OptimConfig::validate() const {
  if (!(lr0 > 0.0)) throw ParameterError("lr0 must be > 0");
  if (halve_every < 1) throw ParameterError("halve_every must be >= 1");
  if (max_epochs < 0) throw ParameterError("max_epochs must be >= 0");
  if (early_stop_patience < 1) throw ParameterError("early_stop_patience must be >= 1");
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (grad_clip < 0.0) throw ParameterError("grad_clip must be >= 0");
}

json OptimConfig::to_json() const {
  return {{"lr0", lr0},
          {"halve_every", halve_every},
          {"max_epochs", max_epochs},
          {"early_stop_patience", early_stop_patience},
          {"dropout", dropout},
          {"adam_beta1", adam_beta1},
          {"grad_clip", grad_clip},
          {"batch_size", batch_size},
          {"slices_per_epoch", slices_per_epoch}};
}

OptimConfig OptimConfig::from_json(const json& j) {
  OptimConfig o;
  o.lr0 = j.value("lr0", o.lr0);
  o.halve_every = j.value("halve_every", o.halve_every);
  o.max_epochs = j.value("max_epochs", o.max_epochs);
  o.early_stop_patience = j.value("early_stop_patience", o.early_stop_patience);
  o.dropout = j.value("dropout", o.dropout);
  o.adam_beta1 = j.value("adam_beta1", o.adam_beta1);
  o.grad_clip = j.value("grad_clip", o.grad_clip);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.slices_per_epoch = j.value("slices_per_epoch", o.slices_per_epoch);
  o.validate();
  return o;
}

void TrainConfig::validate() const {
  net.validate();
  loss.validate();
  sgp.validate();
  lsc.validate();
  optim.validate();
  data.degradation.validate();
  if (val_count < 0) throw ParameterError("val_count must be >= 0");
}

json TrainConfig::to_json() const {
  return {{"data", data.to_json()},
          {"heldout_samples", heldout_samples},
          {"train_dir", train_dir.string()},
          {"heldout_dir", heldout_dir.string()},
          {"out_dir", out_dir.string()},
          {"val_count", val_count},
          {"net", net.to_json()},
          {"schedule", schedule.to_json()},
          {"loss", loss.to_json()},
          {"sgp", sgp.to_json()},
          {"lsc", lsc.to_json()},
          {"optim", optim.to_json()},
          {"seed", seed},
          {"flags",
           {{"sgp_condition", sgp_condition},
            {"lsc_init", lsc_init},
            {"joint_sgp", joint_sgp},
            {"joint_lsc", joint_lsc},
            {"joint_sgp_weight", joint_sgp_weight},
            {"joint_lsc_weight", joint_lsc_weight}}}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    if (j.contains("data")) c.data = DatasetSpec::from_json(j.at("data"));
    c.heldout_samples = j.value("heldout_samples", c.heldout_samples);
    c.train_dir = j.value("train_dir", c.train_dir.string());
    c.heldout_dir = j.value("heldout_dir", c.heldout_dir.string());
    c.out_dir = j.value("out_dir", c.out_dir.string());
    c.val_count = j.value("val_count", c.val_count);
    if (j.contains("net")) c.net = NetConfig::from_json(j.at("net"));
    if (j.contains("schedule")) c.schedule = ScheduleConfig::from_json(j.at("schedule"));
    if (j.contains("loss")) c.loss = LossWeights::from_json(j.at("loss"));
    if (j.contains("sgp")) c.sgp = SgpConfig::from_json(j.at("sgp"));
    if (j.contains("lsc")) c.lsc = LscConfig::from_json(j.at("lsc"));
    if (j.contains("optim")) c.optim = OptimConfig::from_json(j.at("optim"));
    c.seed = j.value("seed", c.seed);
    if (j.contains("flags")) {
      const auto& f = j.at("flags");
      c.sgp_condition = f.value("sgp_condition", c.sgp_condition);
      c.lsc_init = f.value("lsc_init", c.lsc_init);
      c.joint_sgp = f.value("joint_sgp", c.joint_sgp);
      c.joint_lsc = f.value("joint_lsc", c.joint_lsc);
      c.joint_sgp_weight = f.value("joint_sgp_weight", c.joint_sgp_weight);
      c.joint_lsc_weight = f.value("joint_lsc_weight", c.joint_lsc_weight);
    }
  } catch (const json::exception& e) {
    throw ParameterError(std::string("malformed config: ") + e.what());
  }
  // The optimizer section carries the dropout rate; the networks read it from NetConfig.
  if (j.contains("optim") && j.at("optim").contains("dropout")) c.net.dropout = c.optim.dropout;
  else c.optim.dropout = c.net.dropout;
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParameterError("config is not valid JSON: " + std::string(e.what()));
  }
  return TrainConfig::from_json(j);
}

}  // namespace cssdiff
