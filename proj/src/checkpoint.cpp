#include "cssdiff/checkpoint.hpp"

#include <algorithm>
#include <cmath>

#include "cssdiff/errors.hpp"

namespace cssdiff {

using nlohmann::json;

json CheckpointMeta::to_json() const {
  // JSON has no infinity; a missing best PSNR is stored as null.
  json best = std::isfinite(best_val_psnr) ? json(best_val_psnr) : json(nullptr);
  return {{"stage", stage},
          {"step", step},
          {"epoch", epoch},
          {"best_val_psnr", best},
          {"epochs_without_improvement", epochs_without_improvement},
          {"config", config},
          {"extra", extra}};
}

CheckpointMeta CheckpointMeta::from_json(const json& j) {
  CheckpointMeta m;
  m.stage = j.value("stage", std::string());
  m.step = j.value("step", int64_t{0});
  m.epoch = j.value("epoch", 0);
  if (j.contains("best_val_psnr") && !j.at("best_val_psnr").is_null()) m.best_val_psnr = j.at("best_val_psnr").get<double>();
  m.epochs_without_improvement = j.value("epochs_without_improvement", 0);
  if (j.contains("config")) m.config = j.at("config");
  if (j.contains("extra")) m.extra = j.at("extra");
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const ModelBundle& b, const CheckpointMeta& meta,
                     const std::vector<NamedOptimizer>& optimizers) {
  torch::serialize::OutputArchive root;
  root.write("meta", c10::IValue(meta.to_json().dump()));
  root.write("net_config", c10::IValue(b.cfg.to_json().dump()));
  for (const auto& nm : b.named_modules()) {
    torch::serialize::OutputArchive sub;
    nm.module->save(sub);
    root.write("net." + nm.name, sub);
  }
  for (const auto& [name, opt] : optimizers) {
    torch::serialize::OutputArchive sub;
    opt->save(sub);
    root.write("optim." + name, sub);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  try {
    root.save_to(path.string());
  } catch (const c10::Error& e) {
    throw IoError("cannot write checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

namespace {

torch::serialize::InputArchive open_archive(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive in;
  try {
    in.load_from(path.string());
  } catch (const c10::Error& e) {
    throw IoError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  return in;
}

json read_json_entry(torch::serialize::InputArchive& in, const std::string& key) {
  c10::IValue v;
  if (!in.try_read(key, v) || !v.isString()) throw IoError("checkpoint entry missing: " + key);
  return json::parse(v.toStringRef());
}

}  // namespace

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  auto in = open_archive(path);
  return CheckpointMeta::from_json(read_json_entry(in, "meta"));
}

NetConfig read_checkpoint_net(const std::filesystem::path& path) {
  auto in = open_archive(path);
  return NetConfig::from_json(read_json_entry(in, "net_config"));
}

CheckpointMeta load_checkpoint(const std::filesystem::path& path, ModelBundle& b, const std::vector<std::string>& only,
                               const std::vector<NamedOptimizer>& optimizers) {
  auto in = open_archive(path);
  const NetConfig stored = NetConfig::from_json(read_json_entry(in, "net_config"));
  if (auto field = stored.first_difference(b.cfg)) {
    throw CompatibilityError("checkpoint " + path.string() + " is incompatible: field '" + *field + "' differs");
  }
  const auto modules = b.named_modules();
  for (const auto& name : only) {
    if (std::none_of(modules.begin(), modules.end(), [&](const auto& nm) { return nm.name == name; }))
      throw IoError("checkpoint has no network '" + name + "'");
  }
  for (const auto& nm : modules) {
    if (!only.empty() && std::find(only.begin(), only.end(), nm.name) == only.end()) continue;
    torch::serialize::InputArchive sub;
    if (!in.try_read("net." + nm.name, sub)) throw IoError("checkpoint has no network '" + nm.name + "'");
    try {
      nm.module->load(sub);
    } catch (const c10::Error& e) {
      throw CompatibilityError("network '" + nm.name + "' does not match: " + e.what_without_backtrace());
    }
  }
  for (const auto& [name, opt] : optimizers) {
    torch::serialize::InputArchive sub;
    if (!in.try_read("optim." + name, sub)) throw IoError("checkpoint has no optimizer '" + name + "'");
    opt->load(sub);
  }
  return CheckpointMeta::from_json(read_json_entry(in, "meta"));
}

}  // namespace cssdiff
