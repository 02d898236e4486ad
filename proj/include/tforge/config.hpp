#pragma once

#include <string>

#include "tforge/attacks.hpp"
#include "tforge/inversion.hpp"
#include "tforge/nc.hpp"
#include "tforge/train.hpp"

namespace tforge {

// One run = one config document. Unset keys take the documented
// defaults (mirrored in configs/defaults.json; a test pins them).
struct RunConfig {
  std::string dataset = "synthetic";
  std::string data_root;
  std::string arch = "tiny_cnn";
  std::string attack = "clean";  // family name or "clean"
  int64_t target_label = 0;
  double poison_rate = 0.05;
  int64_t defense_per_class = 10;
  double detect_threshold = 0.90;
  uint64_t seed = 0;
  std::string out_dir = "runs/default";

  ConstraintBudget budget;
  TrainConfig train;
  InvertConfig invert;
  NCConfig nc;

  static RunConfig from_json_file(const std::string& path);
  static RunConfig from_json(const std::string& text);
  std::string to_json() const;
  std::string digest() const;  // FNV-1a of the canonical JSON
};

// Writes out/manifest.json (config, digest, seed, version). Refuses to
// overwrite an existing manifest unless force.
void write_manifest(const RunConfig& cfg, const std::string& out_dir, bool force);

constexpr const char* kVersion = "0.1.0";

}  // namespace tforge
