#pragma once

#include <torch/torch.h>

#include <string>

#include "tforge/data.hpp"

namespace tforge {

enum class TriggerFamily {
  kPatch,
  kBlend,
  kSig,
  kFilter1977,
  kFilterKelvin,
  kFilterMoon,
  kWanet,
  kBpp,
};

std::string family_name(TriggerFamily f);
TriggerFamily family_from_name(const std::string& s);

// Which space the family injects in, for A.8-style per-space reporting.
// patch/blend/sig -> "pixel", filters -> "signal", wanet -> "feature",
// bpp -> "numerical".
std::string family_space(TriggerFamily f);

// Ground-truth description of one injected attack. All randomness
// (blend pattern, warp field) is frozen into the spec at creation so
// apply() is a pure function of (spec, x).
struct TriggerSpec {
  TriggerFamily family = TriggerFamily::kPatch;
  int64_t target_label = 0;
  double poison_rate = 0.05;

  // patch
  int64_t patch_size = 3;
  std::array<double, 3> patch_color = {1.0, 1.0, 0.0};  // RGB yellow
  // blend
  torch::Tensor blend_pattern;  // (C,H,W)
  double blend_ratio = 0.2;
  // sig (magnitude on the 0-255 scale)
  double sig_frequency = 6.0;
  double sig_magnitude = 20.0;
  // filter: per-pixel affine color map rgb -> M*rgb + b
  torch::Tensor filter_matrix;  // (3,3)
  torch::Tensor filter_offset;  // (3)
  // wanet
  double wanet_strength = 0.5;
  int64_t wanet_grid = 4;
  torch::Tensor warp_field;  // (1,k,k,2), frozen at creation
  // bpp
  int64_t bpp_depth = 3;

  // Fraction of each training batch triggered on the fly for
  // training-controlled attacks (wanet, bpp).
  double training_inject_fraction = 0.1;

  std::string to_json() const;
  static TriggerSpec from_json(const std::string& text);
  void save(const std::string& path) const;
  static TriggerSpec load(const std::string& path);
};

// Builds a spec with defaults for `family`; freezes the
// blend pattern / warp field using `seed`.
TriggerSpec make_trigger_spec(TriggerFamily family, int64_t target_label,
                              int64_t channels, int64_t height, int64_t width,
                              uint64_t seed);

ImageBatch apply_patch(const ImageBatch& x, const TriggerSpec& spec);
ImageBatch apply_blend(const ImageBatch& x, const TriggerSpec& spec);
ImageBatch apply_sig(const ImageBatch& x, const TriggerSpec& spec);
ImageBatch apply_filter(const ImageBatch& x, const TriggerSpec& spec);
ImageBatch apply_wanet(const ImageBatch& x, const TriggerSpec& spec);
ImageBatch apply_bpp(const ImageBatch& x, const TriggerSpec& spec);

// Dispatch on spec.family. Labels pass through unchanged.
ImageBatch apply_trigger(const ImageBatch& x, const TriggerSpec& spec);
torch::Tensor apply_trigger_pixels(const torch::Tensor& pixels,
                                   const TriggerSpec& spec);

// Replaces round(poison_rate * N) (at least 1) uniformly random samples
// by their triggered version with label = target_label; records the
// chosen indices in the result.
ImageBatch poison_dataset(const ImageBatch& train, const TriggerSpec& spec,
                          uint64_t seed);

}  // namespace tforge
