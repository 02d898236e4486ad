#include "testing.hpp"

#include "tforge/nc.hpp"
#include "tforge/train.hpp"

using namespace tforge;

namespace {

std::shared_ptr<SplitModel> constant_model(int64_t y_t) {
  torch::manual_seed(1);
  auto m = build_model("tiny_cnn", 4, {3, 16, 16});
  torch::NoGradGuard ng;
  for (auto& p : m->named_parameters()) {
    if (p.key().find("head.1") != std::string::npos) {
      p.value().zero_();
      if (p.key().find("bias") != std::string::npos) p.value()[y_t] = 50.0;
    }
  }
  m->eval();
  return m;
}

Dataset small_data(uint64_t seed) {
  auto d = make_synthetic(400, 200, seed, 4);
  auto shrink = [](ImageBatch& b) {
    b.pixels = torch::nn::functional::interpolate(
                   b.pixels, torch::nn::functional::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{16, 16})
                                 .mode(torch::kBilinear)
                                 .align_corners(false))
                   .clamp(0, 1);
  };
  shrink(d.train);
  shrink(d.test);
  return d;
}

}  // namespace

TEST_CASE("nc on a constant-target model reaches full ASR with a shrinking mask") {
  auto m = constant_model(2);
  auto d = small_data(3);
  DefenseSet defense{d.train.index(torch::arange(16)), 4};
  NCConfig cfg;
  cfg.steps = 120;
  auto [hyp, row] = nc_invert_for_label(*m, defense, d.test, 2, cfg);
  CHECK(row.asr_inv == 1.0);
  // lambda pressure drives the mask well below half its maximum
  CHECK(row.residuals.mask_size < 0.5 * 3 * 16 * 16);
}

TEST_CASE("nc is the unicorn special case: identity transform, w1=w3=w4=0") {
  // fixed toy checkpoint: patch-backdoored tiny model
  auto d = small_data(5);
  auto spec = make_trigger_spec(TriggerFamily::kPatch, 1, 3, 16, 16, 0);
  spec.poison_rate = 0.1;
  auto poisoned = poison_dataset(d.train, spec, 2);
  auto m = build_model("tiny_cnn", 4, {3, 16, 16});
  TrainConfig tc;
  tc.epochs = 20;
  tc.batch_size = 64;
  tc.lr = 0.02;
  tc.augment = false;
  tc.seed = 4;
  train_model(*m, poisoned, tc, spec);
  auto [acc, asr] = evaluate(*m, d.test, spec);
  REQUIRE(*asr > 0.9);  // precondition: the toy backdoor took

  auto [defense, heldout] = split_defense(d.test, 4, 7);

  NCConfig nc_cfg;
  nc_cfg.steps = 250;
  nc_cfg.seed = 11;
  auto [nc_hyp, nc_row] = nc_invert_for_label(*m, defense, heldout, 1, nc_cfg);

  InvertConfig eng_cfg;
  eng_cfg.steps = 250;
  eng_cfg.pretrain_steps = 0;
  eng_cfg.seed = 11;
  eng_cfg.early_stop_patience = 0;
  eng_cfg.engine.use_transform = false;
  eng_cfg.engine.use_scheduler = false;
  eng_cfg.engine.nc_lambda_schedule = true;
  eng_cfg.engine.use_disentanglement = false;
  auto [eng_hyp, eng_row] =
      invert_for_label(*m, defense, heldout, 1, ConstraintBudget{}, eng_cfg);

  CAPTURE(nc_row.asr_inv);
  CAPTURE(eng_row.asr_inv);
  CHECK(std::abs(nc_row.asr_inv - eng_row.asr_inv) <= 0.05);
}
