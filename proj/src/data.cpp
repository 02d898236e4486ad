#include "tforge/data.hpp"

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace tforge {

int64_t ImageBatch::num_classes() const {
  return labels.numel() ? labels.max().item<int64_t>() + 1 : 0;
}

ImageBatch ImageBatch::index(const torch::Tensor& idx) const {
  return ImageBatch{pixels.index_select(0, idx), labels.index_select(0, idx), {}};
}

void ImageBatch::validate() const {
  if (pixels.dim() != 4 || pixels.size(0) < 1)
    throw UsageError("ImageBatch: pixels must be (N,C,H,W), N >= 1");
  if (labels.size(0) != pixels.size(0))
    throw UsageError("ImageBatch: labels length != N");
  double lo = pixels.min().item<double>(), hi = pixels.max().item<double>();
  if (lo < 0.0 || hi > 1.0)
    throw RuntimeFailure("ImageBatch: pixel values outside [0,1]");
}

namespace {

constexpr int64_t kCifarDim = 32;
constexpr int64_t kCifarClasses = 10;

ImageBatch read_cifar_files(const std::vector<fs::path>& files) {
  std::vector<torch::Tensor> pix, lab;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw DataError("cifar10: cannot open " + f.string());
    std::vector<char> raw((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
    constexpr int64_t rec = 1 + 3 * kCifarDim * kCifarDim;
    if (raw.empty() || raw.size() % rec != 0)
      throw DataError("cifar10: corrupt batch file " + f.string());
    int64_t n = static_cast<int64_t>(raw.size()) / rec;
    auto t = torch::from_blob(raw.data(), {n, rec}, torch::kUInt8).clone();
    lab.push_back(t.select(1, 0).to(torch::kInt64));
    pix.push_back(t.narrow(1, 1, rec - 1)
                      .reshape({n, 3, kCifarDim, kCifarDim})
                      .to(torch::kFloat32)
                      .div_(255.0));
  }
  return ImageBatch{torch::cat(pix), torch::cat(lab), {}};
}

}  // namespace

Dataset make_synthetic(int64_t n_train, int64_t n_test, uint64_t seed,
                       int64_t num_classes) {
  torch::Generator gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
  const int64_t h = 32, w = 32;
  // Class identity is the global orientation of a sinusoidal grating;
  // frequency, phase, per-channel amplitude and base color are per-sample
  // nuisances. Because the label is carried by structure spread across the
  // whole image, no small pixel region is decision-sufficient, so the only
  // compact universal triggers a classifier responds to are planted ones.
  const double spacing = M_PI / static_cast<double>(num_classes);
  auto make = [&](int64_t n) {
    auto labels = torch::randint(0, num_classes, {n}, gen);
    auto theta = labels.to(torch::kFloat32) * spacing +
                 (torch::rand({n}, gen) - 0.5) * 0.2 * spacing;
    auto freq = torch::rand({n, 1, 1}, gen) * 1.0 + 3.0;  // cycles per width
    auto phase = torch::rand({n, 1, 1}, gen) * 2 * M_PI;
    auto ys = torch::arange(h, torch::kFloat32).view({1, h, 1}) / w;
    auto xs = torch::arange(w, torch::kFloat32).view({1, 1, w}) / w;
    auto u = xs * theta.cos().view({n, 1, 1}) + ys * theta.sin().view({n, 1, 1});
    auto grating = (u * freq * 2 * M_PI + phase).sin();  // {n, h, w}
    auto amp = torch::rand({n, 3, 1, 1}, gen) * 0.15 + 0.25;
    auto base = torch::rand({n, 3, 1, 1}, gen) * 0.3 + 0.35;
    auto pixels = base + amp * grating.unsqueeze(1) +
                  (torch::rand({n, 3, h, w}, gen) - 0.5) * 0.12;
    return ImageBatch{pixels.clamp_(0, 1), labels, {}};
  };
  Dataset d{make(n_train), make(n_test), num_classes};
  return d;
}

Dataset load_dataset(const std::string& name, const std::string& root,
                     uint64_t seed) {
  if (name == "synthetic") return make_synthetic(2000, 1000, seed);
  if (name == "cifar10") {
    fs::path base(root);
    if (fs::exists(base / "cifar-10-batches-bin"))
      base /= "cifar-10-batches-bin";
    std::vector<fs::path> train_files;
    for (int i = 1; i <= 5; ++i) {
      auto f = base / ("data_batch_" + std::to_string(i) + ".bin");
      if (!fs::exists(f)) throw DataError("cifar10: missing " + f.string());
      train_files.push_back(f);
    }
    auto test_file = base / "test_batch.bin";
    if (!fs::exists(test_file))
      throw DataError("cifar10: missing " + test_file.string());
    return Dataset{read_cifar_files(train_files), read_cifar_files({test_file}),
                   kCifarClasses};
  }
  throw UsageError("unknown dataset '" + name + "' (expected cifar10 or synthetic)");
}

DefenseSet sample_defense_set(const ImageBatch& test, int64_t per_class,
                              uint64_t seed) {
  return split_defense(test, per_class, seed).first;
}

std::pair<DefenseSet, ImageBatch> split_defense(const ImageBatch& test,
                                                int64_t per_class,
                                                uint64_t seed) {
  if (per_class < 1) throw UsageError("per_class must be >= 1");
  int64_t k = test.num_classes();
  torch::Generator gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
  std::vector<torch::Tensor> picked, rest;
  for (int64_t c = 0; c < k; ++c) {
    auto idx = torch::nonzero(test.labels == c).squeeze(1);
    if (idx.numel() < per_class)
      throw UsageError("class " + std::to_string(c) + " has only " +
                       std::to_string(idx.numel()) + " samples, need " +
                       std::to_string(per_class));
    auto perm = torch::randperm(idx.numel(), gen);
    picked.push_back(idx.index_select(0, perm.narrow(0, 0, per_class)));
    rest.push_back(idx.index_select(0, perm.narrow(0, per_class, idx.numel() - per_class)));
  }
  auto def_idx = std::get<0>(torch::cat(picked).sort());
  auto rest_idx = std::get<0>(torch::cat(rest).sort());
  return {DefenseSet{test.index(def_idx), per_class}, test.index(rest_idx)};
}

void write_png(const torch::Tensor& chw, const std::string& path) {
  auto img = (chw.detach().clamp(0, 1) * 255.0)
                 .round()
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();  // HWC
  int64_t h = img.size(0), w = img.size(1), c = img.size(2);
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw DataError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    std::fclose(fp);
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng failure writing " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, w, h, 8,
               c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  auto* base = img.data_ptr<uint8_t>();
  for (int64_t y = 0; y < h; ++y)
    png_write_row(png, const_cast<uint8_t*>(base + y * w * c));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

torch::Tensor read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw DataError("cannot read " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    std::fclose(fp);
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng failure reading " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  int64_t h = png_get_image_height(png, info);
  int64_t w = png_get_image_width(png, info);
  int64_t c = png_get_channels(png, info);
  auto out = torch::empty({h, w, c}, torch::kUInt8);
  auto* base = out.data_ptr<uint8_t>();
  for (int64_t y = 0; y < h; ++y) png_read_row(png, base + y * w * c, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return out.permute({2, 0, 1}).to(torch::kFloat32) / 255.0;
}

void render_png(const ImageBatch& batch, const std::string& path, bool tiled) {
  if (batch.size() < 1) throw UsageError("render_png: empty batch");
  if (!tiled) {
    fs::create_directories(path);
    for (int64_t i = 0; i < batch.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%06lld.png", static_cast<long long>(i));
      write_png(batch.pixels[i], (fs::path(path) / name).string());
    }
    return;
  }
  int64_t n = batch.size(), c = batch.channels(), h = batch.height(), w = batch.width();
  int64_t cols = std::min<int64_t>(n, 10), rows = (n + cols - 1) / cols;
  auto grid = torch::zeros({c, rows * (h + 2), cols * (w + 2)});
  for (int64_t i = 0; i < n; ++i) {
    int64_t r = i / cols, col = i % cols;
    grid.narrow(1, r * (h + 2) + 1, h).narrow(2, col * (w + 2) + 1, w) = batch.pixels[i];
  }
  write_png(grid, path);
}

}  // namespace tforge
