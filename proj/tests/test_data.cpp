#include "testing.hpp"

#include <filesystem>
#include <fstream>

#include "tforge/data.hpp"

namespace fs = std::filesystem;
using namespace tforge;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto d = fs::temp_directory_path() / ("tforge_test_" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Fabricates CIFAR-10 format batch files (3073-byte records).
void write_fake_cifar(const fs::path& root, int64_t per_batch) {
  fs::create_directories(root);
  auto write = [&](const fs::path& p, uint64_t seed) {
    torch::Generator gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
    std::ofstream out(p, std::ios::binary);
    for (int64_t i = 0; i < per_batch; ++i) {
      auto label = static_cast<char>(i % 10);
      out.write(&label, 1);
      auto img = torch::randint(0, 256, {3072}, gen).to(torch::kUInt8);
      out.write(reinterpret_cast<const char*>(img.data_ptr()), 3072);
    }
  };
  for (int i = 1; i <= 5; ++i)
    write(root / ("data_batch_" + std::to_string(i) + ".bin"), i);
  write(root / "test_batch.bin", 99);
}

}  // namespace

TEST_CASE("synthetic dataset is deterministic and in range") {
  auto a = make_synthetic(64, 32, 5);
  auto b = make_synthetic(64, 32, 5);
  CHECK(torch::equal(a.train.pixels, b.train.pixels));
  CHECK(torch::equal(a.test.labels, b.test.labels));
  CHECK(a.train.pixels.min().item<double>() >= 0.0);
  CHECK(a.train.pixels.max().item<double>() <= 1.0);
  CHECK(a.train.size() == 64);
  CHECK(a.num_classes == 10);
  auto c = make_synthetic(64, 32, 6);
  CHECK(!torch::equal(a.train.pixels, c.train.pixels));
}

TEST_CASE("cifar10 loader reads the binary batch format") {
  auto root = temp_dir("cifar");
  write_fake_cifar(root, 20);
  auto d = load_dataset("cifar10", root.string());
  CHECK(d.train.size() == 100);
  CHECK(d.test.size() == 20);
  CHECK(d.train.pixels.sizes() == torch::IntArrayRef({100, 3, 32, 32}));
  CHECK(d.train.pixels.min().item<double>() >= 0.0);
  CHECK(d.train.pixels.max().item<double>() <= 1.0);
  CHECK(d.num_classes == 10);
  // loading twice yields identical tensors
  auto d2 = load_dataset("cifar10", root.string());
  CHECK(torch::equal(d.train.pixels, d2.train.pixels));
}

TEST_CASE("cifar10 loader errors name the offending file") {
  auto root = temp_dir("cifar_missing");
  CHECK_THROWS_WITH_AS(load_dataset("cifar10", root.string()),
                       doctest::Contains("data_batch_1.bin"), DataError);
  write_fake_cifar(root, 4);
  std::ofstream(root / "data_batch_3.bin", std::ios::binary) << "short";
  CHECK_THROWS_AS(load_dataset("cifar10", root.string()), DataError);
}

TEST_CASE("unknown dataset id is a usage error") {
  CHECK_THROWS_AS(load_dataset("mnist", "/tmp"), UsageError);
}

TEST_CASE("defense set sampling is stratified and deterministic") {
  auto d = make_synthetic(64, 400, 1);
  auto def = sample_defense_set(d.test, 10, 7);
  CHECK(def.samples.size() == 100);
  for (int64_t c = 0; c < 10; ++c)
    CHECK((def.samples.labels == c).sum().item<int64_t>() == 10);
  auto def2 = sample_defense_set(d.test, 10, 7);
  CHECK(torch::equal(def.samples.pixels, def2.samples.pixels));

  auto small = sample_defense_set(d.test, 5, 7);
  CHECK(small.samples.size() == 50);
  CHECK_THROWS_AS(sample_defense_set(d.test, 0, 7), UsageError);
  CHECK_THROWS_AS(sample_defense_set(d.test, 1000, 7), UsageError);
}

TEST_CASE("defense split is disjoint from the held-out remainder") {
  auto d = make_synthetic(32, 300, 2);
  auto [def, rest] = split_defense(d.test, 5, 3);
  CHECK(def.samples.size() + rest.size() == d.test.size());
  // no pixel-identical pair across the split
  auto a = def.samples.pixels.flatten(1);
  auto b = rest.pixels.flatten(1);
  auto dists = torch::cdist(a, b);
  CHECK(dists.min().item<double>() > 0.0);
}

TEST_CASE("png render round-trips within 8-bit quantization") {
  auto dir = temp_dir("png");
  auto zeros = torch::zeros({3, 16, 16});
  write_png(zeros, (dir / "black.png").string());
  CHECK(read_png((dir / "black.png").string()).abs().max().item<double>() == 0.0);

  auto ones = torch::ones({3, 16, 16});
  write_png(ones, (dir / "white.png").string());
  CHECK(read_png((dir / "white.png").string()).min().item<double>() == 1.0);

  torch::manual_seed(4);
  auto img = torch::rand({3, 24, 24});
  write_png(img, (dir / "rand.png").string());
  auto back = read_png((dir / "rand.png").string());
  CHECK((back - img).abs().max().item<double>() <= 1.0 / 255 + 1e-7);
}

TEST_CASE("render_png writes per-image files or a tiled grid") {
  auto dir = temp_dir("render");
  auto d = make_synthetic(5, 5, 0);
  render_png(d.train, (dir / "imgs").string());
  CHECK(fs::exists(dir / "imgs" / "000000.png"));
  CHECK(fs::exists(dir / "imgs" / "000004.png"));
  render_png(d.train, (dir / "grid.png").string(), true);
  CHECK(fs::exists(dir / "grid.png"));
  ImageBatch empty{torch::zeros({1, 3, 4, 4}), torch::zeros({1}, torch::kInt64), {}};
  CHECK_THROWS_AS(render_png(empty, "/nonexistent_dir_xyz/out.png", true), DataError);
}
