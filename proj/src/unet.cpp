#include "tforge/unet.hpp"

namespace tforge {
namespace {

torch::nn::Sequential block(int64_t in, int64_t out) {
  using namespace torch::nn;
  return Sequential(Conv2d(Conv2dOptions(in, out, 3).padding(1)), ReLU(),
                    Conv2d(Conv2dOptions(out, out, 3).padding(1)), ReLU());
}

}  // namespace

UNetImpl::UNetImpl(int64_t channels, int64_t base_width) {
  int64_t b = base_width;
  enc1_ = register_module("enc1", block(channels, b));
  enc2_ = register_module("enc2", block(b, 2 * b));
  enc3_ = register_module("enc3", block(2 * b, 4 * b));
  up2_ = register_module(
      "up2", torch::nn::ConvTranspose2d(
                 torch::nn::ConvTranspose2dOptions(4 * b, 2 * b, 2).stride(2)));
  dec2_ = register_module("dec2", block(4 * b, 2 * b));
  up1_ = register_module(
      "up1", torch::nn::ConvTranspose2d(
                 torch::nn::ConvTranspose2dOptions(2 * b, b, 2).stride(2)));
  dec1_ = register_module("dec1", block(2 * b, b));
  out_ = register_module("out",
                         torch::nn::Conv2d(torch::nn::Conv2dOptions(b, channels, 1)));
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x) {
  auto e1 = enc1_->forward(x);
  auto e2 = enc2_->forward(torch::max_pool2d(e1, 2));
  auto e3 = enc3_->forward(torch::max_pool2d(e2, 2));
  auto d2 = dec2_->forward(torch::cat({up2_(e3), e2}, 1));
  auto d1 = dec1_->forward(torch::cat({up1_(d2), e1}, 1));
  return out_(d1);
}

}  // namespace tforge
