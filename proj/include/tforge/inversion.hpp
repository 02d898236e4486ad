#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tforge/data.hpp"
#include "tforge/metrics.hpp"
#include "tforge/models.hpp"
#include "tforge/unet.hpp"

namespace tforge {

struct ConstraintBudget {
  double alpha = 0.01;           // reconstruction threshold
  double beta_fraction = 0.10;   // mask budget, fraction of input space
  double gamma = 0.85;           // SSIM floor
  double delta = 0.5;            // disentanglement CE ceiling
  double mprime_fraction = 0.10; // intermediate mask budget fraction

  double beta_abs(int64_t input_numel) const { return beta_fraction * input_numel; }
};

// Penalty weights toggled per constraint each step (stateless rule:
// violated -> w_large, satisfied -> w_small = 0).
struct SchedulerState {
  std::array<double, 4> w = {0, 0, 0, 0};
  std::array<double, 4> w_large = {200, 10, 10, 1};
  std::array<bool, 4> satisfied = {false, false, false, false};
};

// Raw residuals fed to the scheduler: reconstruction mean, mask L1 sum,
// SSIM value, disentanglement classification term.
struct ConstraintResiduals {
  double reconstruction = 0;
  double mask_size = 0;
  double ssim = 0;
  double dis_classification = 0;
};

SchedulerState scheduler_step(const SchedulerState& sched,
                              const ConstraintResiduals& residuals,
                              const ConstraintBudget& budget,
                              int64_t input_numel);

// Learnable bundle for one target label. Masks and pattern live behind
// sigmoids so box constraints hold by construction.
struct InversionHypothesis {
  UNet p{nullptr}, q{nullptr};
  torch::Tensor m_raw, t_raw, mprime_raw;
  int64_t target_label = 0;
  bool use_transform = true;  // false: P = Q = identity (NC mode)

  torch::Tensor mask() const { return torch::sigmoid(m_raw); }
  torch::Tensor pattern() const { return torch::sigmoid(t_raw); }
  torch::Tensor mask_inter() const { return torch::sigmoid(mprime_raw); }

  std::vector<torch::Tensor> parameters() const;
  std::vector<torch::Tensor> snapshot() const;
  void restore(const std::vector<torch::Tensor>& snap);

  void save(const std::string& dir) const;
};

InversionHypothesis make_hypothesis(SplitModel& model, int64_t y_t,
                                    bool use_transform = true,
                                    int64_t unet_width = 16);

// x_tilde = clamp(Q((1-m) .* P(x) + m .* t), 0, 1)
torch::Tensor synthesize(const torch::Tensor& pixels, InversionHypothesis& hyp);
ImageBatch synthesize(const ImageBatch& x, InversionHypothesis& hyp);

torch::Tensor loss_reconstruction(const torch::Tensor& pixels,
                                  InversionHypothesis& hyp);
torch::Tensor loss_mask(const torch::Tensor& m);
torch::Tensor loss_mask_inter(const torch::Tensor& mprime);

struct DisLoss {
  torch::Tensor classification;  // CE(g(A_c + A_b), y_t)
  torch::Tensor mask_size;       // ||m'||_1
  torch::Tensor total() const { return classification + mask_size; }
};
// x_prime must be a pairing of the batch with no index mapped to itself.
DisLoss loss_disentanglement(const torch::Tensor& x, const torch::Tensor& x_prime,
                             InversionHypothesis& hyp, SplitModel& model);

struct LossDiagnostics {
  torch::Tensor total;
  torch::Tensor classification, reconstruction, mask_size, ssim_value, dis_total;
  ConstraintResiduals residuals;
  torch::Tensor logits;  // M(x_tilde) on the batch, for ASR bookkeeping
};

// One shared forward pass computing every raw term; `total` is left
// undefined until combined with weights.
LossDiagnostics loss_terms(const torch::Tensor& x, const torch::Tensor& x_prime,
                           InversionHypothesis& hyp, SplitModel& model);
torch::Tensor combine_loss(const LossDiagnostics& diag, const SchedulerState& sched);

LossDiagnostics loss_total(const torch::Tensor& x, const torch::Tensor& x_prime,
                           InversionHypothesis& hyp, SplitModel& model,
                           const SchedulerState& sched);

// Derangement of [0, n): a seeded permutation with no fixed points.
torch::Tensor derangement(int64_t n, torch::Generator& gen);

struct EngineOptions {
  bool use_transform = true;
  bool use_scheduler = true;             // false: fixed weights below
  std::array<double, 4> fixed_w = {0, 0, 0, 0};
  bool nc_lambda_schedule = false;       // dynamic mask weight a la NC
  double nc_lambda_init = 1e-3;
  bool use_disentanglement = true;       // ablation: force w4 = 0
};

struct InvertConfig {
  int64_t steps = 2000;
  int64_t pretrain_steps = 200;          // identity pretraining of P, Q
  double lr_net = 1e-3;
  double lr_mask = 1e-1;
  uint64_t seed = 0;
  int64_t early_stop_patience = 200;
  int64_t unet_width = 16;
  std::string log_dir;                   // per-step CSV + artifacts if set
  EngineOptions engine;
};

struct ReportRow {
  int64_t label = 0;
  double asr_inv = -1;        // held-out evaluation
  double asr_defense = -1;    // defense-set ASR at the selected step
  ConstraintResiduals residuals;
  bool constraints_unmet = true;
  int64_t selected_step = -1;
  double loss_first = 0, loss_last = 0;
  std::string artifact_dir;
  std::string error;
};

struct InversionReport {
  std::string engine = "unicorn";
  std::vector<ReportRow> rows;  // sorted by asr_inv descending
  std::string to_json() const;
  static InversionReport from_json(const std::string& text);
  void save(const std::string& path) const;
  static InversionReport load(const std::string& path);
};

std::pair<InversionHypothesis, ReportRow> invert_for_label(
    SplitModel& model, const DefenseSet& defense, const ImageBatch& eval_set,
    int64_t y_t, const ConstraintBudget& budget, const InvertConfig& config);

InversionReport scan_model(SplitModel& model, const DefenseSet& defense,
                           const ImageBatch& eval_set,
                           const ConstraintBudget& budget,
                           const InvertConfig& config);

struct Verdict {
  bool backdoored = false;
  int64_t target_label = -1;
  double max_asr_inv = 0;
};

// Backdoored iff some constraint-satisfying row has ASR-Inv strictly
// above `threshold`.
Verdict decide_backdoor(const InversionReport& report, double threshold = 0.90);

}  // namespace tforge
