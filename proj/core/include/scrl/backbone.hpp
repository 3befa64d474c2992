#pragma once

#include <torch/torch.h>

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "scrl/attention.hpp"
#include "scrl/types.hpp"

namespace scrl {

enum class BlockKind { Basic, Bottleneck };

struct BackboneConfig {
  std::string preset = "toy";
  int stem_channels = 32;
  int stem_kernel = 3;
  int stem_stride = 2;
  bool stem_pool = false;
  std::array<int, 4> stage_widths{32, 64, 128, 256};
  std::array<int, 4> stage_blocks{1, 1, 1, 1};
  BlockKind block = BlockKind::Basic;
  int last_stride = 1;
  double gem_p = 3.0;
  bool gem_learnable = false;
  int input_height = 64;
  int input_width = 32;

  // 32-channel 3x3 stem, four single basic blocks (32, 64, 128, 256).
  static BackboneConfig toy();
  // 7x7 stem + max pool, bottleneck stages (3, 4, 6, 3) x (256, 512, 1024, 2048),
  // last stride 1, 384x144 input.
  static BackboneConfig resnet50_like();
  static BackboneConfig from_preset(std::string_view name);

  void validate() const;

  // Spatial size of each stage's output for an input of the given size.
  std::array<std::pair<int, int>, 4> stage_sizes(int height, int width) const;
  std::pair<int, int> stem_size(int height, int width) const;
};

// Row routing for mixed-modality batches.
struct ModalitySplit {
  torch::Tensor visible;   // int64 row indices
  torch::Tensor infrared;
  torch::Tensor inverse;   // permutation restoring batch order after cat(visible, infrared)
  std::int64_t size = 0;

  static ModalitySplit from(std::span<const Modality> modalities);
  bool has_visible() const { return visible.numel() > 0; }
  bool has_infrared() const { return infrared.numel() > 0; }
};

// Generalized-mean pooling over spatial positions:
//   out_c = (mean_hw max(x, eps)^p)^(1/p)
torch::Tensor gem_pool(const torch::Tensor& map, double p, double eps = 1e-6);

class GeMImpl : public torch::nn::Module {
 public:
  GeMImpl(double p, bool learnable);
  torch::Tensor forward(const torch::Tensor& map);
  double p() const { return p_.item<double>(); }

 private:
  torch::Tensor p_;
  bool learnable_;
};
TORCH_MODULE(GeM);

class StemImpl : public torch::nn::Module {
 public:
  StemImpl(const BackboneConfig& cfg, int in_channels = 3);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};

 private:
  bool pool_;
};
TORCH_MODULE(Stem);

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int in, int out, int stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
  torch::nn::Sequential downsample{nullptr};
};
TORCH_MODULE(BasicBlock);

class BottleneckImpl : public torch::nn::Module {
 public:
  BottleneckImpl(int in, int out, int stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
  torch::nn::Sequential downsample{nullptr};
};
TORCH_MODULE(Bottleneck);

// Residual stage j (0-based) of the configured backbone.
torch::nn::Sequential make_stage(const BackboneConfig& cfg, int stage);

using StageMaps = std::array<torch::Tensor, 4>;

// Dual-stream appearance network: unshared VIS / IR stems, four shared stages.
class AppearanceNetImpl : public torch::nn::Module {
 public:
  explicit AppearanceNetImpl(const BackboneConfig& cfg);

  // Per-stage maps; maps[3] is the final appearance map.
  StageMaps forward(const torch::Tensor& images, const ModalitySplit& split);
  torch::Tensor stem_forward(const torch::Tensor& images, const ModalitySplit& split);

  Stem visible_stem{nullptr}, infrared_stem{nullptr};
  std::array<torch::nn::Sequential, 4> stages;

 private:
  BackboneConfig cfg_;
};
TORCH_MODULE(AppearanceNet);

struct ShapeStreamOutput {
  StageMaps maps;                        // after restitution where applied
  std::array<torch::Tensor, 2> restituted;  // IR rows after stages 1 and 2 (undefined if ISR off)
  torch::Tensor pooled;                  // GeM of maps[3]
};

// Shape stream: one stem (shape encodings carry no modality statistics) and
// four stages of the same geometry as the appearance network.
class ShapeNetImpl : public torch::nn::Module {
 public:
  explicit ShapeNetImpl(const BackboneConfig& cfg);

  // When `isr` is given, IR rows after stages 1 and 2 are replaced by
  // isr_restitute(shape rows, appearance rows). VIS rows never see ISR.
  ShapeStreamOutput forward(const torch::Tensor& shape_images, const ModalitySplit& split,
                            const StageMaps* appearance, std::array<ResidualCrossAttention, 2>* isr,
                            GeM& pool);

  Stem stem{nullptr};
  std::array<torch::nn::Sequential, 4> stages;

 private:
  BackboneConfig cfg_;
};
TORCH_MODULE(ShapeNet);

// Replica of the appearance network's fourth stage, applied to its third-stage
// output. Weights are copied once at construction and then trained separately.
class ShapeSubnetImpl : public torch::nn::Module {
 public:
  ShapeSubnetImpl(const BackboneConfig& cfg, AppearanceNet& source);
  torch::Tensor forward(const torch::Tensor& stage3_map);

  torch::nn::Sequential stage{nullptr};

 private:
  int in_channels_;
};
TORCH_MODULE(ShapeSubnet);

// Named intermediate tensors of one forward pass. Absent parts are undefined
// tensors.
struct FeatureBundle {
  StageMaps appearance;                     // f^{m,j}; appearance[3] is f
  torch::Tensor appearance_pooled;          // GeM(f)
  StageMaps shape;                          // teacher stage maps
  std::array<torch::Tensor, 2> restituted;  // IR rows after ISR at stages 1, 2
  torch::Tensor teacher_pooled;             // f_hat_s
  torch::Tensor student_map;                // f_bar_s
  torch::Tensor student_pooled;             // f_tilde_s
  torch::Tensor fused_map;                  // f_tilde^fuse
  torch::Tensor fused_pooled;
  torch::Tensor enhanced_map;               // f_tilde
  torch::Tensor enhanced_pooled;
};

// ---------------------------------------------------------------------------
// Analytic parameter / multiply-add accounting
// ---------------------------------------------------------------------------

struct BackboneComplexity {
  Complexity stem;                     // one stem
  std::array<Complexity, 4> stages;
  Complexity appearance;               // two stems + four stages
  Complexity shape_stream;             // one stem + four stages
  Complexity shape_subnet;             // replica of stage 4
  Complexity appearance_with_subnet;   // appearance + shape_subnet
};

BackboneComplexity count_params_flops(const BackboneConfig& cfg, int height, int width);

std::int64_t count_module_params(const torch::nn::Module& module);

}  // namespace scrl
