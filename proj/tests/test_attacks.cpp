#include "testing.hpp"

#include "tforge/attacks.hpp"
#include "tforge/metrics.hpp"

using namespace tforge;

namespace {

ImageBatch const_batch(double v, int64_t n = 2, int64_t h = 32, int64_t w = 32) {
  return ImageBatch{torch::full({n, 3, h, w}, v),
                    torch::zeros({n}, torch::kInt64), {}};
}

ImageBatch random_batch(int64_t n, uint64_t seed) {
  torch::manual_seed(seed);
  return ImageBatch{torch::rand({n, 3, 32, 32}), torch::randint(0, 10, {n}), {}};
}

}  // namespace

TEST_CASE("patch replaces exactly size^2 pixels at the right-upper corner") {
  auto x = const_batch(0.3);
  auto spec = make_trigger_spec(TriggerFamily::kPatch, 1, 3, 32, 32, 0);
  auto out = apply_patch(x, spec);
  auto changed = (out.pixels != x.pixels).any(1);  // (N,H,W)
  CHECK(changed[0].sum().item<int64_t>() == 9);
  CHECK(changed[0][0][31].item<bool>());
  CHECK(changed[0][2][29].item<bool>());
  CHECK(!changed[0][3][31].item<bool>());
  CHECK(!changed[0][0][28].item<bool>());
  // yellow = (1,1,0)
  CHECK(out.pixels[0][0][0][31].item<float>() == 1.0f);
  CHECK(out.pixels[0][1][0][31].item<float>() == 1.0f);
  CHECK(out.pixels[0][2][0][31].item<float>() == 0.0f);
  // unchanged count
  CHECK((~changed[0]).sum().item<int64_t>() == 32 * 32 - 9);

  spec.patch_size = 0;
  CHECK_THROWS_AS(apply_patch(x, spec), UsageError);
  spec.patch_size = 64;
  CHECK_THROWS_AS(apply_patch(x, spec), UsageError);
}

TEST_CASE("blend interpolates between input and pattern") {
  auto x = const_batch(0.5);
  auto spec = make_trigger_spec(TriggerFamily::kBlend, 1, 3, 32, 32, 3);
  spec.blend_pattern = torch::ones({3, 32, 32});

  spec.blend_ratio = 0.0;
  CHECK(torch::equal(apply_blend(x, spec).pixels, x.pixels));
  spec.blend_ratio = 1.0;
  CHECK(apply_blend(x, spec).pixels.min().item<double>() == 1.0);
  spec.blend_ratio = 0.2;
  auto out = apply_blend(x, spec);
  CHECK((out.pixels - 0.6).abs().max().item<double>() < 1e-6);

  spec.blend_pattern = torch::ones({3, 16, 16});
  CHECK_THROWS_AS(apply_blend(x, spec), UsageError);
}

TEST_CASE("sig adds a horizontal sinusoid with the stated amplitude") {
  auto x = const_batch(0.5);
  auto spec = make_trigger_spec(TriggerFamily::kSig, 1, 3, 32, 32, 0);
  auto out = apply_sig(x, spec);
  auto diff = out.pixels - x.pixels;
  CHECK(diff.abs().max().item<double>() == doctest::Approx(20.0 / 255).epsilon(1e-3));
  // over the full width (integer number of periods) the mean vanishes
  CHECK(diff.mean().item<double>() == doctest::Approx(0.0).epsilon(1e-6));
  // constant along rows and channels
  CHECK((diff - diff[0][0].select(0, 0)).abs().max().item<double>() < 1e-6);

  spec.sig_magnitude = 0;
  CHECK(torch::equal(apply_sig(x, spec).pixels, x.pixels));
  spec.sig_frequency = 0;
  CHECK_THROWS_AS(apply_sig(x, spec), UsageError);
}

TEST_CASE("filter attacks are affine color maps") {
  auto x = random_batch(2, 11);
  TriggerSpec ident;
  ident.family = TriggerFamily::kFilter1977;
  ident.filter_matrix = torch::eye(3);
  ident.filter_offset = torch::zeros({3});
  CHECK((apply_filter(x, ident).pixels - x.pixels).abs().max().item<double>() < 1e-6);

  auto moon = make_trigger_spec(TriggerFamily::kFilterMoon, 1, 3, 32, 32, 0);
  auto gray = apply_filter(x, moon).pixels;
  CHECK((gray.select(1, 0) - gray.select(1, 1)).abs().max().item<double>() < 1e-6);
  CHECK((gray.select(1, 1) - gray.select(1, 2)).abs().max().item<double>() < 1e-6);

  auto kelvin = make_trigger_spec(TriggerFamily::kFilterKelvin, 1, 3, 32, 32, 0);
  auto warm = apply_filter(const_batch(0.5), kelvin).pixels;
  CHECK(warm[0][0][0][0].item<float>() > warm[0][2][0][0].item<float>());

  ident.filter_matrix = torch::full({3, 3}, std::nan(""));
  CHECK_THROWS_AS(apply_filter(x, ident), UsageError);
}

TEST_CASE("wanet warp is frozen in the spec and near-imperceptible") {
  auto x = random_batch(4, 21);
  auto spec = make_trigger_spec(TriggerFamily::kWanet, 1, 3, 32, 32, 5);
  auto a = apply_wanet(x, spec);
  auto b = apply_wanet(x, spec);
  CHECK(torch::equal(a.pixels, b.pixels));
  CHECK((a.pixels - x.pixels).abs().mean().item<double>() > 0.0);
  CHECK(compute_ssim(a, x) > 0.8);

  spec.wanet_strength = 0.0;
  auto ident = apply_wanet(x, spec);
  CHECK((ident.pixels - x.pixels).abs().max().item<double>() < 1e-5);

  spec.wanet_grid = 1;
  CHECK_THROWS_AS(apply_wanet(x, spec), UsageError);
}

TEST_CASE("bpp quantizes with error-diffusion dithering") {
  auto spec = make_trigger_spec(TriggerFamily::kBpp, 1, 3, 32, 32, 0);
  auto x = random_batch(2, 31);

  spec.bpp_depth = 8;
  auto full = apply_bpp(x, spec);
  // error diffusion lets a single pixel absorb its neighbors' residuals,
  // so the pointwise bound is a couple of quantization steps, not half of one
  CHECK((full.pixels - x.pixels).abs().max().item<double>() <= 2.0 / 255 + 1e-6);
  CHECK((full.pixels - x.pixels).abs().mean().item<double>() <= 0.5 / 255 + 1e-6);

  spec.bpp_depth = 1;
  auto dithered = apply_bpp(const_batch(0.5), spec);
  CHECK(dithered.pixels.mean().item<double>() == doctest::Approx(0.5).epsilon(0.04));
  // only levels {0, 1} appear
  auto vals = dithered.pixels;
  CHECK(((vals == 0.0) | (vals == 1.0)).all().item<bool>());

  spec.bpp_depth = 5;
  auto q = apply_bpp(x, spec).pixels * 31.0;
  CHECK((q - q.round()).abs().max().item<double>() < 1e-4);

  spec.bpp_depth = 0;
  CHECK_THROWS_AS(apply_bpp(x, spec), UsageError);
  spec.bpp_depth = 9;
  CHECK_THROWS_AS(apply_bpp(x, spec), UsageError);
}

TEST_CASE("every injector preserves [0,1] and is deterministic") {
  auto x = random_batch(3, 41);
  for (auto fam : {TriggerFamily::kPatch, TriggerFamily::kBlend, TriggerFamily::kSig,
                   TriggerFamily::kFilter1977, TriggerFamily::kFilterKelvin,
                   TriggerFamily::kFilterMoon, TriggerFamily::kWanet,
                   TriggerFamily::kBpp}) {
    auto spec = make_trigger_spec(fam, 1, 3, 32, 32, 77);
    auto a = apply_trigger(x, spec);
    CAPTURE(family_name(fam));
    CHECK(a.pixels.min().item<double>() >= 0.0);
    CHECK(a.pixels.max().item<double>() <= 1.0);
    CHECK(torch::equal(a.pixels, apply_trigger(x, spec).pixels));
  }
}

TEST_CASE("stealthiness sanity: SSIM of triggered images stays high") {
  torch::manual_seed(55);
  auto base = make_synthetic(100, 4, 9).train;
  for (auto fam : {TriggerFamily::kPatch, TriggerFamily::kSig, TriggerFamily::kWanet,
                   TriggerFamily::kBpp, TriggerFamily::kFilterKelvin}) {
    auto spec = make_trigger_spec(fam, 1, 3, 32, 32, 3);
    CAPTURE(family_name(fam));
    CHECK(compute_ssim(apply_trigger(base, spec), base) > 0.7);
  }
}

TEST_CASE("poison_dataset relabels the sampled fraction") {
  auto d = make_synthetic(400, 4, 13);
  auto spec = make_trigger_spec(TriggerFamily::kPatch, 7, 3, 32, 32, 0);
  spec.poison_rate = 0.05;
  auto poisoned = poison_dataset(d.train, spec, 3);
  CHECK(poisoned.poisoned_indices.size() == 20);
  for (auto i : poisoned.poisoned_indices)
    CHECK(poisoned.labels[i].item<int64_t>() == 7);
  // untouched elsewhere
  auto mask = torch::ones({400}, torch::kBool);
  for (auto i : poisoned.poisoned_indices) mask[i] = false;
  auto keep = torch::nonzero(mask).squeeze(1);
  CHECK(torch::equal(poisoned.pixels.index_select(0, keep),
                     d.train.pixels.index_select(0, keep)));
  CHECK(torch::equal(poisoned.labels.index_select(0, keep),
                     d.train.labels.index_select(0, keep)));

  spec.poison_rate = 1e-9;  // rounds to zero -> floor at one sample
  CHECK(poison_dataset(d.train, spec, 3).poisoned_indices.size() == 1);
}

TEST_CASE("TriggerSpec serialization round-trips exactly") {
  for (auto fam : {TriggerFamily::kBlend, TriggerFamily::kWanet,
                   TriggerFamily::kFilterMoon, TriggerFamily::kPatch}) {
    auto spec = make_trigger_spec(fam, 4, 3, 16, 16, 123);
    auto back = TriggerSpec::from_json(spec.to_json());
    CHECK(back.family == spec.family);
    CHECK(back.target_label == 4);
    if (spec.blend_pattern.defined())
      CHECK(torch::equal(back.blend_pattern, spec.blend_pattern));
    if (spec.warp_field.defined())
      CHECK(torch::equal(back.warp_field, spec.warp_field));
    if (spec.filter_matrix.defined())
      CHECK(torch::equal(back.filter_matrix, spec.filter_matrix));
    // applying the deserialized spec is bit-identical
    auto x = random_batch(2, 9);
    x.pixels = torch::rand({2, 3, 16, 16});
    CHECK(torch::equal(apply_trigger(x, spec).pixels,
                       apply_trigger(x, back).pixels));
  }
}
