#include "tforge/config.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace tforge {
namespace {

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  RunConfig c;
  maybe(j, "dataset", c.dataset);
  maybe(j, "data_root", c.data_root);
  maybe(j, "arch", c.arch);
  maybe(j, "attack", c.attack);
  maybe(j, "target_label", c.target_label);
  maybe(j, "poison_rate", c.poison_rate);
  maybe(j, "defense_per_class", c.defense_per_class);
  maybe(j, "detect_threshold", c.detect_threshold);
  maybe(j, "seed", c.seed);
  maybe(j, "out", c.out_dir);
  maybe(j, "alpha", c.budget.alpha);
  maybe(j, "beta_fraction", c.budget.beta_fraction);
  maybe(j, "gamma", c.budget.gamma);
  maybe(j, "delta", c.budget.delta);
  maybe(j, "mprime_fraction", c.budget.mprime_fraction);
  for (double f : {c.budget.beta_fraction, c.budget.mprime_fraction})
    if (f <= 0.0 || f > 1.0)
      throw UsageError("constraint budget fractions must be in (0,1]");
  if (j.contains("w_large")) {
    auto w = j.at("w_large").get<std::vector<double>>();
    if (w.size() != 4) throw UsageError("w_large must have 4 entries");
    // applied inside InvertConfig's SchedulerState at scan time
    c.invert.engine.fixed_w = {w[0], w[1], w[2], w[3]};
  }
  maybe(j, "epochs", c.train.epochs);
  maybe(j, "batch_size", c.train.batch_size);
  maybe(j, "lr", c.train.lr);
  maybe(j, "adv_mask", c.train.adv_mask);
  maybe(j, "steps", c.invert.steps);
  maybe(j, "pretrain_steps", c.invert.pretrain_steps);
  maybe(j, "lr_net", c.invert.lr_net);
  maybe(j, "lr_mask", c.invert.lr_mask);
  maybe(j, "early_stop_patience", c.invert.early_stop_patience);
  maybe(j, "unet_width", c.invert.unet_width);
  maybe(j, "nc_steps", c.nc.steps);
  maybe(j, "nc_lr", c.nc.lr);
  c.invert.seed = c.seed;
  c.nc.seed = c.seed;
  c.train.seed = c.seed;
  return c;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("missing config file " + path);
  return from_json(std::string((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>()));
}

std::string RunConfig::to_json() const {
  json j;
  j["dataset"] = dataset;
  j["data_root"] = data_root;
  j["arch"] = arch;
  j["attack"] = attack;
  j["target_label"] = target_label;
  j["poison_rate"] = poison_rate;
  j["defense_per_class"] = defense_per_class;
  j["detect_threshold"] = detect_threshold;
  j["seed"] = seed;
  j["out"] = out_dir;
  j["alpha"] = budget.alpha;
  j["beta_fraction"] = budget.beta_fraction;
  j["gamma"] = budget.gamma;
  j["delta"] = budget.delta;
  j["mprime_fraction"] = budget.mprime_fraction;
  j["epochs"] = train.epochs;
  j["batch_size"] = train.batch_size;
  j["lr"] = train.lr;
  j["adv_mask"] = train.adv_mask;
  j["steps"] = invert.steps;
  j["pretrain_steps"] = invert.pretrain_steps;
  j["lr_net"] = invert.lr_net;
  j["lr_mask"] = invert.lr_mask;
  j["early_stop_patience"] = invert.early_stop_patience;
  j["unet_width"] = invert.unet_width;
  j["nc_steps"] = nc.steps;
  j["nc_lr"] = nc.lr;
  return j.dump(2);
}

std::string RunConfig::digest() const {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : to_json()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_manifest(const RunConfig& cfg, const std::string& out_dir, bool force) {
  fs::create_directories(out_dir);
  auto path = fs::path(out_dir) / "manifest.json";
  if (fs::exists(path) && !force)
    throw UsageError("manifest exists at " + path.string() +
                     "; re-run with --force to overwrite");
  json j;
  j["version"] = kVersion;
  j["config"] = json::parse(cfg.to_json());
  j["config_digest"] = cfg.digest();
  j["seed"] = cfg.seed;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2);
}

}  // namespace tforge
