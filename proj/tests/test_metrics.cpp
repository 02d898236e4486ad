#include "testing.hpp"

#include "tforge/attacks.hpp"
#include "tforge/metrics.hpp"

using namespace tforge;

namespace {

// Brute-force SSIM oracle: direct per-window evaluation of the Wang
// et al. formula with an 11x11 Gaussian (sigma 1.5), valid windows.
// Independent of the conv-based implementation.
double ssim_oracle(const torch::Tensor& a, const torch::Tensor& b) {
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  constexpr int win = 11;
  double wsum = 0;
  double weights[win][win];
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      double dy = i - 5.0, dx = j - 5.0;
      weights[i][j] = std::exp(-(dy * dy + dx * dx) / (2 * 1.5 * 1.5));
      wsum += weights[i][j];
    }
  for (auto& row : weights)
    for (auto& v : row) v /= wsum;

  auto aa = a.accessor<float, 4>();
  auto bb = b.accessor<float, 4>();
  int64_t n = a.size(0), c = a.size(1), h = a.size(2), w = a.size(3);
  double total = 0;
  int64_t count = 0;
  for (int64_t im = 0; im < n; ++im)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y + win <= h; ++y)
        for (int64_t x = 0; x + win <= w; ++x) {
          double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
          for (int i = 0; i < win; ++i)
            for (int j = 0; j < win; ++j) {
              ma += weights[i][j] * aa[im][ch][y + i][x + j];
              mb += weights[i][j] * bb[im][ch][y + i][x + j];
            }
          for (int i = 0; i < win; ++i)
            for (int j = 0; j < win; ++j) {
              double da = aa[im][ch][y + i][x + j] - ma;
              double db = bb[im][ch][y + i][x + j] - mb;
              va += weights[i][j] * da * da;
              vb += weights[i][j] * db * db;
              cov += weights[i][j] * da * db;
            }
          total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                   ((ma * ma + mb * mb + c1) * (va + vb + c2));
          ++count;
        }
  return total / count;
}

std::shared_ptr<SplitModel> constant_model(int64_t y_t) {
  auto m = build_model("tiny_cnn", 10, {3, 32, 32});
  torch::NoGradGuard ng;
  for (auto& p : m->named_parameters()) {
    if (p.key().find("head.1") != std::string::npos) {
      p.value().zero_();
      if (p.key().find("bias") != std::string::npos) p.value()[y_t] = 100.0;
    }
  }
  m->eval();
  return m;
}

}  // namespace

TEST_CASE("SSIM identity, symmetry, bounds") {
  torch::manual_seed(10);
  auto x = torch::rand({2, 3, 24, 24});
  auto y = torch::rand({2, 3, 24, 24});
  ImageBatch bx{x, torch::zeros({2}, torch::kInt64), {}};
  ImageBatch by{y, torch::zeros({2}, torch::kInt64), {}};
  CHECK(compute_ssim(bx, bx) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(compute_ssim(bx, by) == doctest::Approx(compute_ssim(by, bx)).epsilon(1e-9));
  CHECK(compute_ssim(bx, by) >= -1.0);
  CHECK(compute_ssim(bx, by) <= 1.0);
  ImageBatch small{torch::rand({1, 3, 16, 16}), torch::zeros({1}, torch::kInt64), {}};
  CHECK_THROWS_AS(compute_ssim(bx, small), UsageError);
}

TEST_CASE("SSIM matches the brute-force windowed oracle") {
  torch::manual_seed(20);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = torch::rand({1, 3, 20, 20});
    auto b = trial % 2 ? (a + 0.1 * torch::rand({1, 3, 20, 20})).clamp(0, 1)
                       : torch::rand({1, 3, 20, 20});
    CAPTURE(trial);
    CHECK(ssim(a, b).item<double>() == doctest::Approx(ssim_oracle(a, b)).epsilon(1e-5));
  }
}

TEST_CASE("SSIM of an image against its negative is low") {
  // mid-contrast structured image
  auto d = make_synthetic(4, 4, 8);
  auto x = d.train.pixels;
  auto inv = 1.0 - x;
  CHECK(ssim(x, inv).item<double>() < 0.2);
}

TEST_CASE("compute_asr counts target predictions outside the target class") {
  auto m = constant_model(3);
  auto d = make_synthetic(8, 200, 2);
  auto identity = [](const torch::Tensor& p) { return p; };
  CHECK(compute_asr(*m, identity, d.test, 3) == 1.0);
  // all eligible samples also excluded -> error
  ImageBatch only_target{torch::rand({4, 3, 32, 32}),
                         torch::full({4}, 3, torch::kInt64), {}};
  CHECK_THROWS_AS(compute_asr(*m, identity, only_target, 3), RuntimeFailure);
}

TEST_CASE("compute_asr is a plain fraction and batch-order invariant") {
  auto m = build_model("tiny_cnn", 10, {3, 32, 32});
  m->eval();
  auto d = make_synthetic(8, 300, 6);
  auto identity = [](const torch::Tensor& p) { return p; };
  double a = compute_asr(*m, identity, d.test, 0);
  auto perm = torch::randperm(d.test.size());
  auto shuffled = d.test.index(perm);
  CHECK(compute_asr(*m, identity, shuffled, 0) == doctest::Approx(a).epsilon(1e-12));
}

TEST_CASE("compute_sim: identical trigger functions give 1") {
  auto m = build_model("tiny_cnn", 10, {3, 32, 32});
  m->eval();
  auto d = make_synthetic(8, 16, 3);
  auto spec = make_trigger_spec(TriggerFamily::kPatch, 1, 3, 32, 32, 0);
auto f = [&](const torch::Tensor& p) { return apply_trigger_pixels(p, spec); };
  CHECK(compute_sim(*m, f, f, d.test) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("tabulate_detection confusion counts") {
  // 20/20 backdoored detected, 19/20 clean passed
  std::vector<bool> verdicts, truth;
  for (int i = 0; i < 20; ++i) { verdicts.push_back(true); truth.push_back(true); }
  for (int i = 0; i < 20; ++i) { verdicts.push_back(i == 0); truth.push_back(false); }
  auto s = tabulate_detection(verdicts, truth);
  CHECK(s.tp == 20);
  CHECK(s.fp == 1);
  CHECK(s.tn == 19);
  CHECK(s.fn == 0);
  CHECK(s.accuracy() == doctest::Approx(0.975));
  CHECK(s.tp + s.fp + s.fn + s.tn == 40);

  auto wrong = tabulate_detection({true, false}, {false, true});
  CHECK(wrong.accuracy() == 0.0);
  CHECK_THROWS_AS(tabulate_detection({}, {}), UsageError);
  CHECK_THROWS_AS(tabulate_detection({true}, {true, false}), UsageError);
}
