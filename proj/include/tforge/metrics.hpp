#pragma once

#include <torch/torch.h>

#include <functional>
#include <string>
#include <vector>

#include "tforge/data.hpp"
#include "tforge/models.hpp"

namespace tforge {

using TriggerFn = std::function<torch::Tensor(const torch::Tensor&)>;

// Fraction of triggered eval samples predicted y_t. Samples whose true
// label is already y_t are excluded before counting.
double compute_asr(SplitModel& model, const TriggerFn& trigger,
                   const ImageBatch& eval_set, int64_t y_t);

// SSIM per Wang et al.: 11x11 Gaussian window sigma 1.5, C1=0.01^2,
// C2=0.03^2 on [0,1] range, valid windows, channel- then batch-averaged.
// Differentiable; callable inside the inversion loss.
torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b);
double compute_ssim(const ImageBatch& a, const ImageBatch& b);

// Mean cosine similarity between flattened h(F_inj(x)) and h(F_inv(x)).
double compute_sim(SplitModel& model, const TriggerFn& injected,
                   const TriggerFn& inverted, const ImageBatch& eval_set);

struct ScanSummary {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double accuracy() const {
    int64_t total = tp + fp + fn + tn;
    return total ? static_cast<double>(tp + tn) / total : 0.0;
  }
  std::string table() const;
};

// verdicts[i] / ground_truth[i]: true = backdoored.
ScanSummary tabulate_detection(const std::vector<bool>& verdicts,
                               const std::vector<bool>& ground_truth);

}  // namespace tforge
