#pragma once

#include <torch/torch.h>

namespace tforge {

// Small encoder-decoder with skip connections, image -> image, linear
// output head. 3 resolution levels, base width 16 (for 32x32 inputs).
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(int64_t channels, int64_t base_width = 16);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential enc1_{nullptr}, enc2_{nullptr}, enc3_{nullptr};
  torch::nn::Sequential dec2_{nullptr}, dec1_{nullptr};
  torch::nn::ConvTranspose2d up2_{nullptr}, up1_{nullptr};
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(UNet);

}  // namespace tforge
