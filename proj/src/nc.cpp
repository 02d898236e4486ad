#include "tforge/nc.hpp"

#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace tforge {

torch::Tensor NCHypothesis::apply(const torch::Tensor& pixels) const {
  auto m = mask();
  return ((1 - m) * pixels + m * pattern()).clamp(0, 1);
}

std::pair<NCHypothesis, ReportRow> nc_invert_for_label(
    SplitModel& model, const DefenseSet& defense, const ImageBatch& eval_set,
    int64_t y_t, const NCConfig& config) {
  torch::manual_seed(config.seed);
  model.eval();
  for (auto& p : model.parameters()) p.set_requires_grad(false);
  auto in_shape = model.input_shape();
  NCHypothesis hyp;
  hyp.target_label = y_t;
  // same per-channel mask parametrization as the full engine, of which this
  // optimizer is the identity-transform special case
  hyp.m_raw = torch::full(in_shape, -3.0).set_requires_grad(true);
  hyp.t_raw = torch::zeros(in_shape).set_requires_grad(true);
  torch::optim::Adam opt({hyp.m_raw, hyp.t_raw},
                         torch::optim::AdamOptions(config.lr));

  const auto& x = defense.samples.pixels;
  const auto& labels = defense.samples.labels;
  auto y = torch::full({x.size(0)}, y_t, torch::kInt64);
  auto keep = labels != y_t;
  int64_t eligible = keep.sum().item<int64_t>();

  std::ofstream log;
  if (!config.log_dir.empty()) {
    fs::create_directories(config.log_dir);
    log.open(fs::path(config.log_dir) / ("label_" + std::to_string(y_t) + "_loss.csv"));
    log << "step,total,classification,mask,lambda\n";
  }

  double lambda = config.lambda_init;
  int up = 0, down = 0;
  double first_total = 0, last_total = 0;
  // best = smallest mask that reaches the success threshold on the defense
  // batch; if no step succeeds, fall back to the highest-ASR step.
  torch::Tensor best_m, best_t;
  double best_asr = -1, best_mask = 1e30;
  bool found_success = false;

  for (int64_t step = 0; step < config.steps; ++step) {
    auto xt = hyp.apply(x);
    auto logits = model.forward(xt);
    auto cls = torch::nn::functional::cross_entropy(logits, y);
    auto mask_l1 = hyp.mask().sum();
    auto total = cls + lambda * mask_l1;
    double total_v = total.item<double>();
    if (step == 0) first_total = total_v;
    last_total = total_v;

    double asr = eligible
                     ? ((logits.detach().argmax(1) == y_t) & keep).sum().item<double>() /
                           eligible
                     : 0.0;
    double msize = mask_l1.item<double>();
    bool success = asr >= config.success_threshold;
    bool better = success ? (!found_success || msize < best_mask)
                          : (!found_success && asr > best_asr);
    if (better) {
      found_success = found_success || success;
      best_asr = asr;
      best_mask = msize;
      best_m = hyp.m_raw.detach().clone();
      best_t = hyp.t_raw.detach().clone();
    }
    if (asr >= config.success_threshold) { up++; down = 0; } else { down++; up = 0; }
    if (up >= config.patience) { lambda *= config.lambda_multiplier; up = 0; }
    if (down >= config.patience) { lambda /= config.lambda_multiplier; down = 0; }

    if (log.is_open())
      log << step << ',' << total_v << ',' << cls.item<double>() << ',' << msize
          << ',' << lambda << '\n';

    opt.zero_grad();
    total.backward();
    opt.step();
  }
  {
    torch::NoGradGuard ng;
    hyp.m_raw.copy_(best_m);
    hyp.t_raw.copy_(best_t);
  }

  ReportRow row;
  row.label = y_t;
  row.asr_defense = best_asr;
  row.constraints_unmet = false;
  row.loss_first = first_total;
  row.loss_last = last_total;
  row.residuals.mask_size = best_mask;
  row.residuals.ssim = 0;
  auto trig = [&](const torch::Tensor& px) {
    torch::NoGradGuard ng;
    return hyp.apply(px);
  };
  row.asr_inv = compute_asr(model, trig, eval_set, y_t);
  {
    torch::NoGradGuard ng;
    row.residuals.ssim = ssim(hyp.apply(x), x).item<double>();
  }
  if (!config.log_dir.empty()) {
    auto dir = fs::path(config.log_dir) / ("label_" + std::to_string(y_t));
    fs::create_directories(dir);
    torch::NoGradGuard ng;
    write_png(hyp.mask(), (dir / "mask.png").string());
    write_png(hyp.pattern(), (dir / "pattern.png").string());
    torch::save(std::vector<torch::Tensor>{hyp.m_raw.detach(), hyp.t_raw.detach()},
                (dir / "masks.pt").string());
    row.artifact_dir = dir.string();
  }
  return {std::move(hyp), std::move(row)};
}

InversionReport nc_scan(SplitModel& model, const DefenseSet& defense,
                        const ImageBatch& eval_set, const NCConfig& config) {
  InversionReport report;
  report.engine = "nc";
  for (int64_t y = 0; y < model.num_classes(); ++y) {
    try {
      auto cfg = config;
      cfg.seed = config.seed + static_cast<uint64_t>(y) * 1000;
      report.rows.push_back(
          nc_invert_for_label(model, defense, eval_set, y, cfg).second);
    } catch (const std::exception& e) {
      ReportRow row;
      row.label = y;
      row.error = e.what();
      report.rows.push_back(row);
    }
  }
  std::stable_sort(report.rows.begin(), report.rows.end(),
                   [](const ReportRow& a, const ReportRow& b) {
                     return a.asr_inv > b.asr_inv;
                   });
  return report;
}

}  // namespace tforge
