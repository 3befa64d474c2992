#pragma once

#include <torch/torch.h>

#include <array>
#include <span>
#include <vector>

#include "scrl/backbone.hpp"
#include "scrl/losses.hpp"
#include "scrl/setting.hpp"

namespace scrl {

struct ModelConfig {
  BackboneConfig backbone;
  int num_identities = 16;
  int attention_inner = 0;  // 0 -> C / 2
  double attention_temperature = 1.0;
  bool kd_prototype_stop_gradient = true;
  bool bn_neck = true;  // batch norm between pooled features and each classifier

  void validate() const;
};

template <class F>
void visit_fields(ModelConfig& c, F&& f) {
  f("num_identities", c.num_identities);
  f("attention_inner", c.attention_inner);
  f("attention_temperature", c.attention_temperature);
  f("kd_prototype_stop_gradient", c.kd_prototype_stop_gradient);
  f("bn_neck", c.bn_neck);
}

// Every trainable piece of the method. All modules exist regardless of the
// ablation setting, are created in a fixed order, and are therefore
// initialized identically for a given torch seed; the setting only decides
// which of them a forward pass touches.
class ScrlModelImpl : public torch::nn::Module {
 public:
  explicit ScrlModelImpl(const ModelConfig& cfg);

  // Training pass. shape_images are the encoded masks; the shape stream runs
  // only when the setting uses it.
  FeatureBundle forward_train(const torch::Tensor& images, const torch::Tensor& shape_images,
                              std::span<const Modality> modalities, Setting setting);

  // Inference pass: appearance network, shape subnetwork and enhancement only.
  // The shape stream is never evaluated.
  FeatureBundle forward_inference(const torch::Tensor& images, std::span<const Modality> modalities,
                                  Setting setting);

  // Loss terms enabled in `config` whose inputs exist in `bundle`.
  LossTerms compute_losses(const FeatureBundle& bundle, const torch::Tensor& labels,
                           const LossConfig& config);

  // Parameter groups for the optimizer: classifier weights vs everything else.
  // Names are the module-path names ("id_classifier.weight", ...).
  std::vector<std::pair<std::string, torch::Tensor>> classifier_parameters() const;
  std::vector<std::pair<std::string, torch::Tensor>> network_parameters() const;

  const ModelConfig& config() const { return cfg_; }

  AppearanceNet appearance{nullptr};
  ShapeNet shape{nullptr};
  ShapeSubnet shape_subnet{nullptr};
  std::array<ResidualCrossAttention, 2> isr{nullptr, nullptr};
  ResidualCrossAttention afe_stage1{nullptr}, afe_stage2{nullptr};
  Classifier id_classifier{nullptr};        // appearance and enhanced features
  Classifier shape_classifier{nullptr};     // teacher shape features; its rows are the prototypes
  Classifier query_classifier{nullptr};     // fused query features
  GeM pool{nullptr};

 private:
  FeatureBundle forward_common(const torch::Tensor& images, const torch::Tensor* shape_images,
                               std::span<const Modality> modalities, Setting setting);

  ModelConfig cfg_;
};
TORCH_MODULE(ScrlModel);

// Deterministic construction: seeds torch's generator before building.
ScrlModel make_model(const ModelConfig& cfg, std::uint64_t seed);

// Parameter / MAC totals per inference setting.
struct InferenceComplexity {
  Complexity appearance;                 // F_a
  Complexity appearance_with_subnet;     // F_a + F_s~
  Complexity afe_stage1, afe_stage2;     // one module each at the final map size
  Complexity isr_stage1, isr_stage2;     // training only
  Complexity shape_stream;               // training only
};
InferenceComplexity count_inference_complexity(const ModelConfig& cfg, int height, int width);

}  // namespace scrl
