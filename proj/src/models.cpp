#include "tforge/models.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

using nlohmann::json;

namespace tforge {
namespace {

using torch::nn::AdaptiveAvgPool2d;
using torch::nn::AdaptiveAvgPool2dOptions;
using torch::nn::BatchNorm2d;
using torch::nn::Conv2d;
using torch::nn::Conv2dOptions;
using torch::nn::Flatten;
using torch::nn::Linear;
using torch::nn::MaxPool2d;
using torch::nn::MaxPool2dOptions;
using torch::nn::ReLU;
using torch::nn::Sequential;

void push_conv_bn_relu(Sequential& s, int64_t in, int64_t out, int64_t k = 3,
                       int64_t stride = 1, int64_t pad = 1) {
  s->push_back(Conv2d(Conv2dOptions(in, out, k).stride(stride).padding(pad)));
  s->push_back(BatchNorm2d(out));
  s->push_back(ReLU());
}

// Basic residual block for the CIFAR-style ResNet18 (3x3 stem, no maxpool).
struct BasicBlockImpl : torch::nn::Module {
  BasicBlockImpl(int64_t in, int64_t out, int64_t stride) {
    conv1 = register_module(
        "conv1", Conv2d(Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
    bn1 = register_module("bn1", BatchNorm2d(out));
    conv2 = register_module(
        "conv2", Conv2d(Conv2dOptions(out, out, 3).stride(1).padding(1).bias(false)));
    bn2 = register_module("bn2", BatchNorm2d(out));
    if (stride != 1 || in != out) {
      shortcut = register_module(
          "shortcut", Sequential(Conv2d(Conv2dOptions(in, out, 1).stride(stride).bias(false)),
                                 BatchNorm2d(out)));
    }
  }
  torch::Tensor forward(torch::Tensor x) {
    auto out = torch::relu(bn1(conv1(x)));
    out = bn2(conv2(out));
    out = out + (shortcut ? shortcut->forward(x) : x);
    return torch::relu(out);
  }
  Conv2d conv1{nullptr}, conv2{nullptr};
  BatchNorm2d bn1{nullptr}, bn2{nullptr};
  Sequential shortcut{nullptr};
};
TORCH_MODULE(BasicBlock);

Sequential resnet18_features(int64_t in_ch) {
  Sequential s;
  s->push_back(Conv2d(Conv2dOptions(in_ch, 64, 3).stride(1).padding(1).bias(false)));
  s->push_back(BatchNorm2d(64));
  s->push_back(ReLU());
  int64_t widths[4] = {64, 128, 256, 512};
  int64_t in = 64;
  for (int stage = 0; stage < 4; ++stage) {
    int64_t stride = stage == 0 ? 1 : 2;
    s->push_back(BasicBlock(in, widths[stage], stride));
    s->push_back(BasicBlock(widths[stage], widths[stage], 1));
    in = widths[stage];
  }
  s->push_back(AdaptiveAvgPool2d(AdaptiveAvgPool2dOptions({1, 1})));
  return s;
}

Sequential tiny_cnn_features(int64_t in_ch) {
  Sequential s;
  push_conv_bn_relu(s, in_ch, 32);
  s->push_back(MaxPool2d(MaxPool2dOptions(2)));
  push_conv_bn_relu(s, 32, 64);
  s->push_back(MaxPool2d(MaxPool2dOptions(2)));
  push_conv_bn_relu(s, 64, 128);
  s->push_back(AdaptiveAvgPool2d(AdaptiveAvgPool2dOptions({1, 1})));
  return s;
}

Sequential nin_features(int64_t in_ch) {
  Sequential s;
  push_conv_bn_relu(s, in_ch, 96, 5, 1, 2);
  push_conv_bn_relu(s, 96, 96, 1, 1, 0);
  s->push_back(MaxPool2d(MaxPool2dOptions(3).stride(2).padding(1)));
  push_conv_bn_relu(s, 96, 192, 5, 1, 2);
  push_conv_bn_relu(s, 192, 192, 1, 1, 0);
  s->push_back(MaxPool2d(MaxPool2dOptions(3).stride(2).padding(1)));
  push_conv_bn_relu(s, 192, 192, 3, 1, 1);
  push_conv_bn_relu(s, 192, 192, 1, 1, 0);
  s->push_back(AdaptiveAvgPool2d(AdaptiveAvgPool2dOptions({1, 1})));
  return s;
}

}  // namespace

SplitModel::SplitModel(const std::string& arch, int64_t num_classes,
                       std::vector<int64_t> input_shape)
    : arch_(arch), num_classes_(num_classes), input_shape_(std::move(input_shape)) {
  int64_t in_ch = input_shape_.at(0);
  int64_t feat;
  if (arch == "tiny_cnn") {
    features_ = tiny_cnn_features(in_ch);
    feat = 128;
    split_layer_ = "conv3.pool";
  } else if (arch == "resnet18") {
    features_ = resnet18_features(in_ch);
    feat = 512;
    split_layer_ = "layer4.pool";
  } else if (arch == "nin") {
    features_ = nin_features(in_ch);
    feat = 192;
    split_layer_ = "block3.pool";
  } else {
    throw UsageError("unknown architecture '" + arch + "'");
  }
  head_ = Sequential(Flatten(), Linear(feat, num_classes));
  register_module("features", features_);
  register_module("head", head_);
}

torch::Tensor SplitModel::h(const torch::Tensor& x) { return features_->forward(x); }
torch::Tensor SplitModel::g(const torch::Tensor& a) { return head_->forward(a); }
torch::Tensor SplitModel::forward(const torch::Tensor& x) { return g(h(x)); }

torch::Tensor SplitModel::predict(const torch::Tensor& x) {
  torch::NoGradGuard ng;
  return forward(x).argmax(1);
}

std::vector<int64_t> SplitModel::intermediate_shape() {
  torch::NoGradGuard ng;
  bool was_training = is_training();
  eval();
  std::vector<int64_t> probe_shape = {1};
  probe_shape.insert(probe_shape.end(), input_shape_.begin(), input_shape_.end());
  auto dtype = parameters().empty() ? torch::kFloat32
                                    : parameters().front().scalar_type();
  auto a = h(torch::zeros(probe_shape, dtype));
  if (was_training) train();
  return std::vector<int64_t>(a.sizes().begin() + 1, a.sizes().end());
}

std::shared_ptr<SplitModel> build_model(const std::string& arch, int64_t num_classes,
                                        std::vector<int64_t> input_shape) {
  return std::make_shared<SplitModel>(arch, num_classes, std::move(input_shape));
}

void Checkpoint::save(const std::string& path, SplitModel& model) const {
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  torch::save(model.shared_from_this(), path + ".pt");
  json j;
  j["arch"] = arch;
  j["num_classes"] = num_classes;
  j["input_shape"] = input_shape;
  j["split_layer"] = split_layer;
  j["metrics"] = {{"benign_accuracy", benign_accuracy}, {"asr_inj", asr_inj}};
  j["trigger_spec"] = trigger_spec_path;
  j["config_digest"] = config_digest;
  std::ofstream out(path + ".json");
  if (!out) throw DataError("cannot write " + path + ".json");
  out << j.dump(2);
}

std::pair<Checkpoint, std::shared_ptr<SplitModel>> Checkpoint::load(
    const std::string& path) {
  std::ifstream in(path + ".json");
  if (!in) throw DataError("missing checkpoint sidecar " + path + ".json");
  json j = json::parse(in);
  Checkpoint c;
  c.arch = j.at("arch").get<std::string>();
  c.num_classes = j.at("num_classes").get<int64_t>();
  c.input_shape = j.at("input_shape").get<std::vector<int64_t>>();
  c.split_layer = j.at("split_layer").get<std::string>();
  c.benign_accuracy = j["metrics"]["benign_accuracy"].get<double>();
  c.asr_inj = j["metrics"]["asr_inj"].get<double>();
  c.trigger_spec_path = j.at("trigger_spec").get<std::string>();
  c.config_digest = j.value("config_digest", "");
  auto model = build_model(c.arch, c.num_classes, c.input_shape);
  torch::load(model, path + ".pt");
  return {c, model};
}

}  // namespace tforge
