#pragma once

#include <torch/torch.h>

#include <string>

#include "tforge/common.hpp"

namespace tforge {

// Classifier exposed as h (input -> intermediate, through the last
// convolutional block plus global pooling) and g (intermediate ->
// logits). g(h(x)) is exactly the full forward pass.
class SplitModel : public torch::nn::Module {
 public:
  SplitModel(const std::string& arch, int64_t num_classes,
             std::vector<int64_t> input_shape);

  torch::Tensor h(const torch::Tensor& x);
  torch::Tensor g(const torch::Tensor& a);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor predict(const torch::Tensor& x);  // argmax labels, no grad

  const std::string& arch() const { return arch_; }
  const std::string& split_layer() const { return split_layer_; }
  int64_t num_classes() const { return num_classes_; }
  const std::vector<int64_t>& input_shape() const { return input_shape_; }
  std::vector<int64_t> intermediate_shape();

 private:
  std::string arch_, split_layer_;
  int64_t num_classes_;
  std::vector<int64_t> input_shape_;
  torch::nn::Sequential features_{nullptr};
  torch::nn::Sequential head_{nullptr};
};

std::shared_ptr<SplitModel> build_model(const std::string& arch, int64_t num_classes,
                                        std::vector<int64_t> input_shape);

struct Checkpoint {
  std::string arch;
  int64_t num_classes = 0;
  std::vector<int64_t> input_shape;
  std::string split_layer;
  double benign_accuracy = -1;
  double asr_inj = -1;
  std::string trigger_spec_path;  // empty => clean model
  std::string config_digest;

  // Writes <path>.pt (parameters) and <path>.json (sidecar metadata).
  void save(const std::string& path, SplitModel& model) const;
  static std::pair<Checkpoint, std::shared_ptr<SplitModel>> load(
      const std::string& path);
};

}  // namespace tforge
