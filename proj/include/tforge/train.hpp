#pragma once

#include <optional>

#include "tforge/attacks.hpp"
#include "tforge/data.hpp"
#include "tforge/metrics.hpp"
#include "tforge/models.hpp"

namespace tforge {

struct TrainConfig {
  int64_t epochs = 30;
  int64_t batch_size = 128;
  double lr = 0.05;           // momentum SGD, cosine decay to 0
  double momentum = 0.9;
  double weight_decay = 5e-4;
  uint64_t seed = 0;
  bool augment = true;        // random crop (pad 4, reflect)
  // For wanet/bpp: inject on the fly instead of static poisoning.
  bool training_controlled = false;
  // Adversarial-mask training: per batch, craft a small universal masked
  // blend against the current model and train it back to the clean labels.
  bool adv_mask = false;
  int64_t adv_mask_steps = 1;     // ascent steps per batch (adversary persists)
  double adv_mask_lr = 0.2;
  double adv_mask_weight = 0.02;  // L1 pressure keeping the crafted mask small
};

// True for families whose attack assumes control of the training loop.
bool needs_training_control(TriggerFamily f);

// Supervised training. If `spec` is set and training_controlled, a
// spec.training_inject_fraction slice of every batch is triggered and
// relabeled on the fly; otherwise `data` is expected to be poisoned
// already (or clean). Throws RuntimeFailure on NaN loss.
Checkpoint train_model(SplitModel& model, const ImageBatch& data,
                       const TrainConfig& config,
                       const std::optional<TriggerSpec>& spec = std::nullopt);

// Benign accuracy on `test`; if spec given, also ASR of the injected
// trigger over test samples whose label differs from the target.
std::pair<double, std::optional<double>> evaluate(
    SplitModel& model, const ImageBatch& test,
    const std::optional<TriggerSpec>& spec = std::nullopt);

}  // namespace tforge
