#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include "tforge/common.hpp"

namespace tforge {

// A batch of images, pixels float32 in [0,1], shape (N, C, H, W),
// labels int64 length N in [0, K).
struct ImageBatch {
  torch::Tensor pixels;
  torch::Tensor labels;
  // Indices rewritten by poison_dataset; empty for clean batches.
  std::vector<int64_t> poisoned_indices;

  int64_t size() const { return pixels.size(0); }
  int64_t channels() const { return pixels.size(1); }
  int64_t height() const { return pixels.size(2); }
  int64_t width() const { return pixels.size(3); }
  int64_t num_classes() const;

  ImageBatch index(const torch::Tensor& idx) const;
  void validate() const;
};

struct DefenseSet {
  ImageBatch samples;
  int64_t per_class_count = 0;
};

struct Dataset {
  ImageBatch train;
  ImageBatch test;
  int64_t num_classes = 0;
};

// name: "cifar10" (binary batch format under root) or "synthetic"
// (procedural 32x32 class-colored blobs, no files needed).
Dataset load_dataset(const std::string& name, const std::string& root,
                     uint64_t seed = 0);

// Procedural blobs dataset used for CI and desk-scale runs.
Dataset make_synthetic(int64_t n_train, int64_t n_test, uint64_t seed,
                       int64_t num_classes = 10);

// Stratified sample of `per_class` images per class from `test`.
// Returned indices are removed from consideration by callers that
// evaluate ASR-Inv on the remainder; use split_defense for that.
DefenseSet sample_defense_set(const ImageBatch& test, int64_t per_class,
                              uint64_t seed);

// Defense set plus the held-out remainder of `test`.
std::pair<DefenseSet, ImageBatch> split_defense(const ImageBatch& test,
                                                int64_t per_class,
                                                uint64_t seed);

// Writes images as 8-bit PNGs. If `tiled`, one grid PNG at `path`;
// otherwise path is a directory receiving 000000.png, 000001.png, ...
void render_png(const ImageBatch& batch, const std::string& path,
                bool tiled = false);
void write_png(const torch::Tensor& chw, const std::string& path);
torch::Tensor read_png(const std::string& path);

}  // namespace tforge
