#pragma once

#include "tforge/inversion.hpp"

namespace tforge {

// Neural Cleanse: pixel-space mask/pattern inversion,
// x_tilde = (1-m) .* x + m .* t with a 1x H x W mask broadcast over
// channels and a dynamic L1 weight on the mask.
struct NCHypothesis {
  torch::Tensor m_raw;  // (1,H,W)
  torch::Tensor t_raw;  // (C,H,W)
  int64_t target_label = 0;

  torch::Tensor mask() const { return torch::sigmoid(m_raw); }
  torch::Tensor pattern() const { return torch::sigmoid(t_raw); }
  torch::Tensor apply(const torch::Tensor& pixels) const;
};

struct NCConfig {
  int64_t steps = 1000;
  double lr = 1e-1;
  double lambda_init = 1e-3;
  double lambda_multiplier = 1.5;
  double success_threshold = 0.99;  // batch ASR crossing for the schedule
  int64_t patience = 5;
  uint64_t seed = 0;
  std::string log_dir;
};

std::pair<NCHypothesis, ReportRow> nc_invert_for_label(
    SplitModel& model, const DefenseSet& defense, const ImageBatch& eval_set,
    int64_t y_t, const NCConfig& config);

InversionReport nc_scan(SplitModel& model, const DefenseSet& defense,
                        const ImageBatch& eval_set, const NCConfig& config);

}  // namespace tforge
