#include "tforge/train.hpp"

#include <cmath>

namespace tforge {

bool needs_training_control(TriggerFamily f) {
  return f == TriggerFamily::kWanet || f == TriggerFamily::kBpp;
}

namespace {

torch::Tensor augment_batch(const torch::Tensor& x, torch::Generator& gen) {
  namespace F = torch::nn::functional;
  int64_t n = x.size(0), h = x.size(2), w = x.size(3);
  auto padded = F::pad(x, F::PadFuncOptions({4, 4, 4, 4}).mode(torch::kReflect));
  auto out = torch::empty_like(x);
  auto offs = torch::randint(0, 9, {n, 2}, gen);
  for (int64_t i = 0; i < n; ++i) {
    // crops only: mirroring is not label-preserving for orientation-coded
    // classes, so flips are deliberately left out
    out[i] = padded[i]
                 .narrow(1, offs[i][0].item<int64_t>(), h)
                 .narrow(2, offs[i][1].item<int64_t>(), w);
  }
  return out;
}

// Persistent universal masked adversary (one per training run). The crafted
// mask/pattern survives across batches, so over an epoch it receives hundreds
// of ascent steps -- comparable to what an inversion attack would invest --
// while the model simultaneously learns to send it back to the clean labels.
// Planted triggers survive because the poisoned labels keep reinforcing them.
struct UniversalAdversary {
  torch::Tensor m_raw, t_raw;
  int64_t target = 0;

  void reset(c10::IntArrayRef shape, int64_t target_class,
             torch::Generator& gen) {
    torch::NoGradGuard ng;
    m_raw = (torch::randn(shape, gen) * 0.1 - 3.0).set_requires_grad(true);
    t_raw = (torch::randn(shape, gen) * 0.1).set_requires_grad(true);
    target = target_class;
  }

  // One ascent step on the adversary, then adversarial variants of the batch.
  torch::Tensor step_and_apply(SplitModel& model, const torch::Tensor& x,
                               const TrainConfig& config) {
    auto xd = x.detach();
    auto y_adv = torch::full({x.size(0)}, target, torch::kInt64);
    for (int64_t it = 0; it < config.adv_mask_steps; ++it) {
      auto m = torch::sigmoid(m_raw), t = torch::sigmoid(t_raw);
      auto xa = ((1 - m) * xd + m * t).clamp(0, 1);
      auto loss = torch::nn::functional::cross_entropy(model.forward(xa), y_adv) +
                  config.adv_mask_weight * m.sum();
      auto grads = torch::autograd::grad({loss}, {m_raw, t_raw});
      torch::NoGradGuard ng;
      m_raw -= config.adv_mask_lr * grads[0].sign();
      t_raw -= config.adv_mask_lr * grads[1].sign();
    }
    torch::NoGradGuard ng;
    auto m = torch::sigmoid(m_raw), t = torch::sigmoid(t_raw);
    return ((1 - m) * xd + m * t).clamp(0, 1);
  }
};

}  // namespace

Checkpoint train_model(SplitModel& model, const ImageBatch& data,
                       const TrainConfig& config,
                       const std::optional<TriggerSpec>& spec) {
  torch::manual_seed(config.seed);
  torch::Generator gen = torch::make_generator<torch::CPUGeneratorImpl>(config.seed + 1);
  torch::optim::SGD opt(model.parameters(),
                        torch::optim::SGDOptions(config.lr)
                            .momentum(config.momentum)
                            .weight_decay(config.weight_decay));
  int64_t n = data.size();
  int64_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  int64_t total_steps = std::max<int64_t>(1, config.epochs * steps_per_epoch);
  int64_t step = 0;
  model.train();
  UniversalAdversary adversary;
  for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.adv_mask)
      adversary.reset(data.pixels.sizes().slice(1),
                      epoch % model.num_classes(), gen);
    auto perm = torch::randperm(n, gen);
    for (int64_t off = 0; off < n; off += config.batch_size) {
      auto idx = perm.narrow(0, off, std::min(config.batch_size, n - off));
      auto x = data.pixels.index_select(0, idx);
      auto y = data.labels.index_select(0, idx);
      if (config.augment) x = augment_batch(x, gen);
      if (spec && config.training_controlled) {
        int64_t m = std::llround(spec->training_inject_fraction * idx.size(0));
        if (m > 0) {
          auto head = x.narrow(0, 0, m);
          x = torch::cat({apply_trigger_pixels(head, *spec), x.narrow(0, m, idx.size(0) - m)});
          y = y.clone();
          y.narrow(0, 0, m).fill_(spec->target_label);
        }
      }
      if (config.adv_mask) {
        model.eval();  // keep batch-norm statistics out of the crafting passes
        auto xa = adversary.step_and_apply(model, x, config);
        model.train();
        x = torch::cat({x, xa});
        y = torch::cat({y, y});
      }
      // cosine schedule
      double lr = config.lr * 0.5 * (1 + std::cos(M_PI * step / total_steps));
      static_cast<torch::optim::SGDOptions&>(opt.param_groups()[0].options()).lr(lr);
      opt.zero_grad();
      auto loss = torch::nn::functional::cross_entropy(model.forward(x), y);
      if (!loss.isfinite().item<bool>())
        throw RuntimeFailure("NaN loss at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(off / config.batch_size));
      loss.backward();
      opt.step();
      ++step;
    }
  }
  model.eval();
  Checkpoint ckpt;
  ckpt.arch = model.arch();
  ckpt.num_classes = model.num_classes();
  ckpt.input_shape = model.input_shape();
  ckpt.split_layer = model.split_layer();
  return ckpt;
}

std::pair<double, std::optional<double>> evaluate(
    SplitModel& model, const ImageBatch& test,
    const std::optional<TriggerSpec>& spec) {
  torch::NoGradGuard ng;
  bool was_training = model.is_training();
  model.eval();
  int64_t hits = 0;
  const int64_t bs = 256;
  for (int64_t off = 0; off < test.size(); off += bs) {
    auto chunk = test.pixels.narrow(0, off, std::min(bs, test.size() - off));
    auto y = test.labels.narrow(0, off, chunk.size(0));
    hits += (model.forward(chunk).argmax(1) == y).sum().item<int64_t>();
  }
  double acc = static_cast<double>(hits) / test.size();
  std::optional<double> asr;
  if (spec) {
    auto trig = [&](const torch::Tensor& px) { return apply_trigger_pixels(px, *spec); };
    asr = compute_asr(model, trig, test, spec->target_label);
  }
  if (was_training) model.train();
  return {acc, asr};
}

}  // namespace tforge
