#include "tforge/metrics.hpp"

#include <sstream>

namespace tforge {
namespace {

torch::Tensor gaussian_window(int64_t size, double sigma) {
  auto coords = torch::arange(size, torch::kFloat32) - (size - 1) / 2.0;
  auto g = torch::exp(-coords.pow(2) / (2 * sigma * sigma));
  g /= g.sum();
  return torch::outer(g, g);  // (size, size)
}

}  // namespace

double compute_asr(SplitModel& model, const TriggerFn& trigger,
                   const ImageBatch& eval_set, int64_t y_t) {
  auto keep = torch::nonzero(eval_set.labels != y_t).squeeze(1);
  if (keep.numel() == 0)
    throw RuntimeFailure("compute_asr: no eval samples outside target class");
  torch::NoGradGuard ng;
  bool was_training = model.is_training();
  model.eval();
  int64_t hits = 0, total = 0;
  const int64_t bs = 256;
  auto pixels = eval_set.pixels.index_select(0, keep);
  for (int64_t off = 0; off < pixels.size(0); off += bs) {
    auto chunk = pixels.narrow(0, off, std::min(bs, pixels.size(0) - off));
    auto pred = model.forward(trigger(chunk).clamp(0, 1)).argmax(1);
    hits += (pred == y_t).sum().item<int64_t>();
    total += chunk.size(0);
  }
  if (was_training) model.train();
  return static_cast<double>(hits) / total;
}

torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes())
    throw UsageError("ssim: shape mismatch");
  constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  int64_t c = a.size(1);
  auto win = gaussian_window(11, 1.5).view({1, 1, 11, 11}).expand({c, 1, 11, 11}).to(a.dtype());
  namespace F = torch::nn::functional;
  auto opts = F::Conv2dFuncOptions().groups(c);  // valid windows, no padding
  auto mu_a = F::conv2d(a, win, opts);
  auto mu_b = F::conv2d(b, win, opts);
  auto mu_a2 = mu_a.pow(2), mu_b2 = mu_b.pow(2), mu_ab = mu_a * mu_b;
  auto var_a = F::conv2d(a * a, win, opts) - mu_a2;
  auto var_b = F::conv2d(b * b, win, opts) - mu_b2;
  auto cov = F::conv2d(a * b, win, opts) - mu_ab;
  auto map = ((2 * mu_ab + kC1) * (2 * cov + kC2)) /
             ((mu_a2 + mu_b2 + kC1) * (var_a + var_b + kC2));
  return map.mean();
}

double compute_ssim(const ImageBatch& a, const ImageBatch& b) {
  torch::NoGradGuard ng;
  return ssim(a.pixels, b.pixels).item<double>();
}

double compute_sim(SplitModel& model, const TriggerFn& injected,
                   const TriggerFn& inverted, const ImageBatch& eval_set) {
  torch::NoGradGuard ng;
  bool was_training = model.is_training();
  model.eval();
  auto a = model.h(injected(eval_set.pixels).clamp(0, 1)).flatten(1);
  auto b = model.h(inverted(eval_set.pixels).clamp(0, 1)).flatten(1);
  auto na = a.norm(2, 1), nb = b.norm(2, 1);
  auto ok = torch::nonzero((na > 1e-12) & (nb > 1e-12)).squeeze(1);
  if (was_training) model.train();
  if (ok.numel() < eval_set.size())
    TORCH_WARN("compute_sim: skipped ", eval_set.size() - ok.numel(),
               " samples with zero activations");
  if (ok.numel() == 0) throw RuntimeFailure("compute_sim: all activations zero");
  auto cos = (a * b).sum(1) / (na * nb);
  return cos.index_select(0, ok).mean().item<double>();
}

ScanSummary tabulate_detection(const std::vector<bool>& verdicts,
                               const std::vector<bool>& ground_truth) {
  if (verdicts.empty()) throw UsageError("tabulate_detection: empty input");
  if (verdicts.size() != ground_truth.size())
    throw UsageError("tabulate_detection: length mismatch");
  ScanSummary s;
  for (size_t i = 0; i < verdicts.size(); ++i) {
    if (ground_truth[i]) (verdicts[i] ? s.tp : s.fn)++;
    else (verdicts[i] ? s.fp : s.tn)++;
  }
  return s;
}

std::string ScanSummary::table() const {
  std::ostringstream os;
  os << "TP  FP  FN  TN  Acc\n"
     << tp << "   " << fp << "   " << fn << "   " << tn << "   "
     << accuracy() * 100 << "%\n";
  return os.str();
}

}  // namespace tforge
