#include "tforge/attacks.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

using nlohmann::json;

namespace tforge {
namespace {

const char* kB64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string b64_encode(const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::string out;
  out.reserve((len + 2) / 3 * 4);
  for (size_t i = 0; i < len; i += 3) {
    uint32_t v = p[i] << 16;
    if (i + 1 < len) v |= p[i + 1] << 8;
    if (i + 2 < len) v |= p[i + 2];
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += i + 1 < len ? kB64[(v >> 6) & 63] : '=';
    out += i + 2 < len ? kB64[v & 63] : '=';
  }
  return out;
}

std::vector<unsigned char> b64_decode(const std::string& s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<unsigned char> out;
  uint32_t buf = 0;
  int bits = 0;
  for (char c : s) {
    int v = val(c);
    if (v < 0) continue;
    buf = (buf << 6) | v;
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back((buf >> bits) & 0xff);
    }
  }
  return out;
}

json tensor_to_json(const torch::Tensor& t) {
  if (!t.defined()) return nullptr;
  auto c = t.detach().to(torch::kFloat32).contiguous();
  json j;
  j["shape"] = std::vector<int64_t>(c.sizes().begin(), c.sizes().end());
  j["data"] = b64_encode(c.data_ptr(), c.numel() * sizeof(float));
  return j;
}

torch::Tensor tensor_from_json(const json& j) {
  if (j.is_null()) return {};
  auto shape = j.at("shape").get<std::vector<int64_t>>();
  auto bytes = b64_decode(j.at("data").get<std::string>());
  auto t = torch::empty(shape, torch::kFloat32);
  std::memcpy(t.data_ptr(), bytes.data(), bytes.size());
  return t;
}

torch::Tensor clamp01(torch::Tensor t) { return t.clamp(0.0, 1.0); }

}  // namespace

std::string family_name(TriggerFamily f) {
  switch (f) {
    case TriggerFamily::kPatch: return "patch";
    case TriggerFamily::kBlend: return "blend";
    case TriggerFamily::kSig: return "sig";
    case TriggerFamily::kFilter1977: return "filter1977";
    case TriggerFamily::kFilterKelvin: return "filterKelvin";
    case TriggerFamily::kFilterMoon: return "filterMoon";
    case TriggerFamily::kWanet: return "wanet";
    case TriggerFamily::kBpp: return "bpp";
  }
  throw UsageError("bad family enum");
}

TriggerFamily family_from_name(const std::string& s) {
  for (auto f : {TriggerFamily::kPatch, TriggerFamily::kBlend, TriggerFamily::kSig,
                 TriggerFamily::kFilter1977, TriggerFamily::kFilterKelvin,
                 TriggerFamily::kFilterMoon, TriggerFamily::kWanet, TriggerFamily::kBpp})
    if (family_name(f) == s) return f;
  throw UsageError("unknown trigger family '" + s + "'");
}

std::string family_space(TriggerFamily f) {
  switch (f) {
    case TriggerFamily::kPatch:
    case TriggerFamily::kBlend:
    case TriggerFamily::kSig: return "pixel";
    case TriggerFamily::kFilter1977:
    case TriggerFamily::kFilterKelvin:
    case TriggerFamily::kFilterMoon: return "signal";
    case TriggerFamily::kWanet: return "feature";
    case TriggerFamily::kBpp: return "numerical";
  }
  throw UsageError("bad family enum");
}

TriggerSpec make_trigger_spec(TriggerFamily family, int64_t target_label,
                              int64_t channels, int64_t height, int64_t width,
                              uint64_t seed) {
  TriggerSpec s;
  s.family = family;
  s.target_label = target_label;
  torch::Generator gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
  switch (family) {
    case TriggerFamily::kBlend:
      s.blend_pattern = torch::rand({channels, height, width}, gen);
      break;
    case TriggerFamily::kWanet: {
      auto field = torch::rand({1, s.wanet_grid, s.wanet_grid, 2}, gen) * 2 - 1;
      s.warp_field = field / field.abs().mean();
      break;
    }
    case TriggerFamily::kFilter1977:
      s.filter_matrix = torch::tensor({{0.95f, 0.05f, 0.00f},
                                       {0.02f, 0.90f, 0.02f},
                                       {0.00f, 0.05f, 0.85f}});
      s.filter_offset = torch::tensor({0.10f, 0.05f, 0.08f});
      break;
    case TriggerFamily::kFilterKelvin:
      s.filter_matrix = torch::tensor({{1.15f, 0.05f, 0.00f},
                                       {0.05f, 1.05f, 0.00f},
                                       {0.00f, 0.05f, 0.80f}});
      s.filter_offset = torch::tensor({0.08f, 0.04f, -0.05f});
      break;
    case TriggerFamily::kFilterMoon:
      // Rows are Rec.601 luminance weights: the output is grayscale.
      s.filter_matrix = torch::tensor({{0.299f, 0.587f, 0.114f},
                                       {0.299f, 0.587f, 0.114f},
                                       {0.299f, 0.587f, 0.114f}});
      s.filter_offset = torch::tensor({0.05f, 0.05f, 0.05f});
      break;
    default:
      break;
  }
  return s;
}

ImageBatch apply_patch(const ImageBatch& x, const TriggerSpec& spec) {
  int64_t sz = spec.patch_size;
  if (sz < 1) throw UsageError("patch size must be >= 1");
  if (sz > x.height() || sz > x.width())
    throw UsageError("patch exceeds image bounds");
  auto out = x.pixels.clone();
  auto color = torch::tensor({static_cast<float>(spec.patch_color[0]),
                              static_cast<float>(spec.patch_color[1]),
                              static_cast<float>(spec.patch_color[2])})
                   .view({1, 3, 1, 1});
  // right-upper corner
  out.narrow(2, 0, sz).narrow(3, x.width() - sz, sz) = color;
  return ImageBatch{clamp01(out), x.labels.clone(), {}};
}

ImageBatch apply_blend(const ImageBatch& x, const TriggerSpec& spec) {
  if (!spec.blend_pattern.defined() ||
      spec.blend_pattern.sizes() != x.pixels.sizes().slice(1))
    throw UsageError("blend pattern shape mismatch");
  double r = spec.blend_ratio;
  if (r < 0.0 || r > 1.0) throw UsageError("blend ratio must be in [0,1]");
  auto out = (1 - r) * x.pixels + r * spec.blend_pattern.unsqueeze(0);
  return ImageBatch{clamp01(out), x.labels.clone(), {}};
}

ImageBatch apply_sig(const ImageBatch& x, const TriggerSpec& spec) {
  if (spec.sig_frequency <= 0 || spec.sig_magnitude < 0)
    throw UsageError("sig: frequency must be > 0, magnitude >= 0");
  auto j = torch::arange(x.width(), torch::kFloat32);
  auto v = (spec.sig_magnitude / 255.0) *
           torch::sin(2 * M_PI * spec.sig_frequency * j / x.width());
  auto out = x.pixels + v.view({1, 1, 1, x.width()});
  return ImageBatch{clamp01(out), x.labels.clone(), {}};
}

ImageBatch apply_filter(const ImageBatch& x, const TriggerSpec& spec) {
  if (!spec.filter_matrix.defined() || !spec.filter_matrix.isfinite().all().item<bool>() ||
      !spec.filter_offset.isfinite().all().item<bool>())
    throw UsageError("filter: non-finite coefficients");
  // (N,3,H,W) -> (N,H,W,3) @ M^T + b
  auto p = x.pixels.permute({0, 2, 3, 1});
  auto out = torch::matmul(p, spec.filter_matrix.t()) + spec.filter_offset;
  return ImageBatch{clamp01(out.permute({0, 3, 1, 2}).contiguous()),
                    x.labels.clone(), {}};
}

ImageBatch apply_wanet(const ImageBatch& x, const TriggerSpec& spec) {
  if (spec.wanet_grid < 2) throw UsageError("wanet: grid size must be >= 2");
  if (!spec.warp_field.defined()) throw UsageError("wanet: spec has no warp field");
  int64_t h = x.height(), w = x.width(), n = x.size();
  namespace F = torch::nn::functional;
  auto up = F::interpolate(spec.warp_field.permute({0, 3, 1, 2}),
                           F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{h, w})
                               .mode(torch::kBicubic)
                               .align_corners(true))
                .permute({0, 2, 3, 1});
  auto ys = torch::linspace(-1, 1, h);
  auto xs = torch::linspace(-1, 1, w);
  auto grids = torch::meshgrid({ys, xs}, "ij");
  auto identity = torch::stack({grids[1], grids[0]}, -1).unsqueeze(0);
  auto grid = (identity + spec.wanet_strength * up / h).clamp(-1, 1);
  auto out = F::grid_sample(x.pixels, grid.expand({n, h, w, 2}),
                            F::GridSampleFuncOptions()
                                .mode(torch::kBilinear)
                                .padding_mode(torch::kBorder)
                                .align_corners(true));
  return ImageBatch{clamp01(out), x.labels.clone(), {}};
}

ImageBatch apply_bpp(const ImageBatch& x, const TriggerSpec& spec) {
  int64_t d = spec.bpp_depth;
  if (d < 1 || d > 8) throw UsageError("bpp: bit depth must be in [1,8]");
  const float levels = static_cast<float>((1 << d) - 1);
  auto out = x.pixels.clone().contiguous();
  int64_t n = x.size(), c = x.channels(), h = x.height(), w = x.width();
  auto acc = out.accessor<float, 4>();
  // Floyd-Steinberg error diffusion, serpentine scan.
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      for (int64_t y = 0; y < h; ++y) {
        bool rev = y % 2 == 1;
        for (int64_t k = 0; k < w; ++k) {
          int64_t xx = rev ? w - 1 - k : k;
          int dir = rev ? -1 : 1;
          float old = acc[i][ch][y][xx];
          float q = std::round(std::clamp(old, 0.0f, 1.0f) * levels) / levels;
          acc[i][ch][y][xx] = q;
          float err = old - q;
          if (xx + dir >= 0 && xx + dir < w) acc[i][ch][y][xx + dir] += err * 7.0f / 16;
          if (y + 1 < h) {
            if (xx - dir >= 0 && xx - dir < w) acc[i][ch][y + 1][xx - dir] += err * 3.0f / 16;
            acc[i][ch][y + 1][xx] += err * 5.0f / 16;
            if (xx + dir >= 0 && xx + dir < w) acc[i][ch][y + 1][xx + dir] += err * 1.0f / 16;
          }
        }
      }
    }
  }
  return ImageBatch{clamp01(out), x.labels.clone(), {}};
}

ImageBatch apply_trigger(const ImageBatch& x, const TriggerSpec& spec) {
  switch (spec.family) {
    case TriggerFamily::kPatch: return apply_patch(x, spec);
    case TriggerFamily::kBlend: return apply_blend(x, spec);
    case TriggerFamily::kSig: return apply_sig(x, spec);
    case TriggerFamily::kFilter1977:
    case TriggerFamily::kFilterKelvin:
    case TriggerFamily::kFilterMoon: return apply_filter(x, spec);
    case TriggerFamily::kWanet: return apply_wanet(x, spec);
    case TriggerFamily::kBpp: return apply_bpp(x, spec);
  }
  throw UsageError("bad family enum");
}

torch::Tensor apply_trigger_pixels(const torch::Tensor& pixels,
                                   const TriggerSpec& spec) {
  ImageBatch b{pixels, torch::zeros({pixels.size(0)}, torch::kInt64), {}};
  return apply_trigger(b, spec).pixels;
}

ImageBatch poison_dataset(const ImageBatch& train, const TriggerSpec& spec,
                          uint64_t seed) {
  int64_t n = train.size();
  int64_t count = std::max<int64_t>(1, std::llround(spec.poison_rate * n));
  if (count > n) throw UsageError("poison count exceeds dataset size");
  torch::Generator gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
  auto idx = torch::randperm(n, gen).narrow(0, 0, count);
  auto triggered = apply_trigger(train.index(idx), spec);
  auto pixels = train.pixels.clone();
  auto labels = train.labels.clone();
  pixels.index_copy_(0, idx, triggered.pixels);
  labels.index_fill_(0, idx, spec.target_label);
  ImageBatch out{pixels, labels, {}};
  auto sorted = std::get<0>(idx.sort());
  out.poisoned_indices.assign(sorted.data_ptr<int64_t>(),
                              sorted.data_ptr<int64_t>() + count);
  return out;
}

std::string TriggerSpec::to_json() const {
  json j;
  j["version"] = 1;
  j["family"] = family_name(family);
  j["target_label"] = target_label;
  j["poison_rate"] = poison_rate;
  j["training_inject_fraction"] = training_inject_fraction;
  j["patch"] = {{"size", patch_size}, {"color", patch_color}};
  j["blend"] = {{"ratio", blend_ratio}, {"pattern", tensor_to_json(blend_pattern)}};
  j["sig"] = {{"frequency", sig_frequency}, {"magnitude", sig_magnitude}};
  j["filter"] = {{"matrix", tensor_to_json(filter_matrix)},
                 {"offset", tensor_to_json(filter_offset)}};
  j["wanet"] = {{"strength", wanet_strength},
                {"grid", wanet_grid},
                {"field", tensor_to_json(warp_field)}};
  j["bpp"] = {{"depth", bpp_depth}};
  return j.dump(2);
}

TriggerSpec TriggerSpec::from_json(const std::string& text) {
  json j = json::parse(text);
  if (j.at("version").get<int>() != 1)
    throw UsageError("unsupported TriggerSpec version");
  TriggerSpec s;
  s.family = family_from_name(j.at("family").get<std::string>());
  s.target_label = j.at("target_label").get<int64_t>();
  s.poison_rate = j.at("poison_rate").get<double>();
  s.training_inject_fraction = j.at("training_inject_fraction").get<double>();
  s.patch_size = j["patch"]["size"].get<int64_t>();
  auto col = j["patch"]["color"].get<std::vector<double>>();
  std::copy_n(col.begin(), 3, s.patch_color.begin());
  s.blend_ratio = j["blend"]["ratio"].get<double>();
  s.blend_pattern = tensor_from_json(j["blend"]["pattern"]);
  s.sig_frequency = j["sig"]["frequency"].get<double>();
  s.sig_magnitude = j["sig"]["magnitude"].get<double>();
  s.filter_matrix = tensor_from_json(j["filter"]["matrix"]);
  s.filter_offset = tensor_from_json(j["filter"]["offset"]);
  s.wanet_strength = j["wanet"]["strength"].get<double>();
  s.wanet_grid = j["wanet"]["grid"].get<int64_t>();
  s.warp_field = tensor_from_json(j["wanet"]["field"]);
  s.bpp_depth = j["bpp"]["depth"].get<int64_t>();
  return s;
}

void TriggerSpec::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << to_json();
}

TriggerSpec TriggerSpec::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return from_json(text);
}

}  // namespace tforge
