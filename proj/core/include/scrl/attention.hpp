#pragma once

#include <torch/torch.h>

#include <span>

#include "scrl/types.hpp"

namespace scrl {

struct CrossAttentionOptions {
  int channels = 0;
  int inner_channels = 0;  // 0 -> channels / 2
  double temperature = 1.0;  // logits are divided by this before the row softmax

  int resolved_inner() const { return inner_channels > 0 ? inner_channels : channels / 2; }
};

// Residual cross-attention over spatial positions:
//
//   out = W_v2( BN( softmax_rows(Q K^T / T) V ) ) + residual
//   Q = W_q(query), K = W_k(kv), V = W_v(kv)
//
// Q, K, V are 1x1 convolutions C -> C_inner; maps are flattened to HW
// positions so the attention matrix is HW x HW per sample. BN is a 1D batch
// norm over the C_inner channels of the aggregated tensor. W_v2 (C_inner -> C)
// starts at zero, so a fresh module returns `residual` unchanged.
class ResidualCrossAttentionImpl : public torch::nn::Module {
 public:
  explicit ResidualCrossAttentionImpl(CrossAttentionOptions options);

  torch::Tensor forward(const torch::Tensor& query_map, const torch::Tensor& kv_map,
                        const torch::Tensor& residual_map);

  // Row-stochastic attention matrix [N, HW, HW].
  torch::Tensor attention(const torch::Tensor& query_map, const torch::Tensor& kv_map);

  const CrossAttentionOptions& options() const { return options_; }

  torch::nn::Conv2d w_q{nullptr}, w_k{nullptr}, w_v{nullptr}, w_v2{nullptr};
  torch::nn::BatchNorm1d norm{nullptr};

 private:
  CrossAttentionOptions options_;
};
TORCH_MODULE(ResidualCrossAttention);

// Infrared shape restitution: the query is the IR appearance map plus the IR
// shape map, key/value come from the appearance map, and the residual is the
// shape map. Inputs must hold IR rows only.
torch::Tensor isr_restitute(ResidualCrossAttention& isr, const torch::Tensor& ir_shape_map,
                            const torch::Tensor& ir_appearance_map);
torch::Tensor isr_restitute(ResidualCrossAttention& isr, const torch::Tensor& ir_shape_map,
                            const torch::Tensor& ir_appearance_map,
                            std::span<const Modality> row_modalities);

// Appearance feature enhancement, stage 1: the student shape map queries the
// appearance map and is the residual.
torch::Tensor afe_stage1(ResidualCrossAttention& stage, const torch::Tensor& student_shape_map,
                         const torch::Tensor& appearance_map);

// Stage 2: the fused map queries the appearance map; the residual is the
// appearance map itself.
torch::Tensor afe_stage2(ResidualCrossAttention& stage, const torch::Tensor& fused_map,
                         const torch::Tensor& appearance_map);

// Analytic cost of one attention module applied to a C x H x W map.
struct Complexity {
  std::int64_t params = 0;
  std::int64_t macs = 0;

  Complexity& operator+=(const Complexity& o) {
    params += o.params;
    macs += o.macs;
    return *this;
  }
  friend Complexity operator+(Complexity a, const Complexity& b) { return a += b; }
};

Complexity attention_complexity(const CrossAttentionOptions& options, int height, int width);

}  // namespace scrl
