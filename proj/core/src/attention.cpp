#include "scrl/attention.hpp"

#include "scrl/error.hpp"

namespace scrl {

namespace nn = torch::nn;

namespace {

void check_same_geometry(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.dim() != 4 || b.dim() != 4 || a.sizes() != b.sizes()) {
    throw Error("attention", std::string("shape mismatch between ") + what + ": " +
                                 c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
  }
}

}  // namespace

ResidualCrossAttentionImpl::ResidualCrossAttentionImpl(CrossAttentionOptions options)
    : options_(options) {
  const int c = options_.channels;
  const int ci = options_.resolved_inner();
  if (c <= 0) throw Error("attention", "channel count must be positive");
  if (ci <= 0) throw Error("attention", "inner channel count must be positive");
  if (options_.temperature <= 0.0) throw Error("attention", "temperature must be positive");

  w_q = register_module("w_q", nn::Conv2d(nn::Conv2dOptions(c, ci, 1)));
  w_k = register_module("w_k", nn::Conv2d(nn::Conv2dOptions(c, ci, 1)));
  w_v = register_module("w_v", nn::Conv2d(nn::Conv2dOptions(c, ci, 1)));
  norm = register_module("norm", nn::BatchNorm1d(ci));
  w_v2 = register_module("w_v2", nn::Conv2d(nn::Conv2dOptions(ci, c, 1)));

  torch::NoGradGuard guard;
  w_v2->weight.zero_();
  w_v2->bias.zero_();
}

torch::Tensor ResidualCrossAttentionImpl::attention(const torch::Tensor& query_map,
                                                    const torch::Tensor& kv_map) {
  check_same_geometry(query_map, kv_map, "query and key/value maps");
  const auto n = query_map.size(0);
  const auto hw = query_map.size(2) * query_map.size(3);
  const auto ci = options_.resolved_inner();
  auto q = w_q(query_map).reshape({n, ci, hw}).transpose(1, 2);  // [N, HW, Ci]
  auto k = w_k(kv_map).reshape({n, ci, hw});                     // [N, Ci, HW]
  auto logits = torch::bmm(q, k);
  if (options_.temperature != 1.0) logits = logits / options_.temperature;
  return torch::softmax(logits, -1);
}

torch::Tensor ResidualCrossAttentionImpl::forward(const torch::Tensor& query_map,
                                                  const torch::Tensor& kv_map,
                                                  const torch::Tensor& residual_map) {
  check_same_geometry(query_map, residual_map, "query and residual maps");
  if (query_map.size(1) != options_.channels) {
    throw Error("attention", "expected " + std::to_string(options_.channels) + " channels, got " +
                                 std::to_string(query_map.size(1)));
  }
  const auto n = query_map.size(0);
  const auto h = query_map.size(2), w = query_map.size(3);
  const auto ci = options_.resolved_inner();

  auto attn = attention(query_map, kv_map);                      // [N, HW, HW]
  auto v = w_v(kv_map).reshape({n, ci, h * w}).transpose(1, 2);  // [N, HW, Ci]
  auto y = torch::bmm(attn, v).transpose(1, 2);                  // [N, Ci, HW]
  y = norm(y.contiguous()).reshape({n, ci, h, w});
  return w_v2(y) + residual_map;
}

torch::Tensor isr_restitute(ResidualCrossAttention& isr, const torch::Tensor& ir_shape_map,
                            const torch::Tensor& ir_appearance_map) {
  check_same_geometry(ir_shape_map, ir_appearance_map, "IR shape and IR appearance maps");
  return isr->forward(ir_appearance_map + ir_shape_map, ir_appearance_map, ir_shape_map);
}

torch::Tensor isr_restitute(ResidualCrossAttention& isr, const torch::Tensor& ir_shape_map,
                            const torch::Tensor& ir_appearance_map,
                            std::span<const Modality> row_modalities) {
  if (static_cast<int64_t>(row_modalities.size()) != ir_shape_map.size(0)) {
    throw Error("attention", "modality tags do not cover the batch");
  }
  for (std::size_t i = 0; i < row_modalities.size(); ++i) {
    if (row_modalities[i] != Modality::Infrared) {
      throw Error("attention", "shape restitution invoked on a VIS row (" + std::to_string(i) + ")");
    }
  }
  return isr_restitute(isr, ir_shape_map, ir_appearance_map);
}

torch::Tensor afe_stage1(ResidualCrossAttention& stage, const torch::Tensor& student_shape_map,
                         const torch::Tensor& appearance_map) {
  check_same_geometry(student_shape_map, appearance_map, "student shape and appearance maps");
  return stage->forward(student_shape_map, appearance_map, student_shape_map);
}

torch::Tensor afe_stage2(ResidualCrossAttention& stage, const torch::Tensor& fused_map,
                         const torch::Tensor& appearance_map) {
  check_same_geometry(fused_map, appearance_map, "fused and appearance maps");
  return stage->forward(fused_map, appearance_map, appearance_map);
}

Complexity attention_complexity(const CrossAttentionOptions& options, int height, int width) {
  const std::int64_t c = options.channels, ci = options.resolved_inner();
  const std::int64_t hw = static_cast<std::int64_t>(height) * width;
  Complexity out;
  out.params = 3 * (c * ci + ci) + 2 * ci + (ci * c + c);
  out.macs = 3 * hw * c * ci + 2 * hw * hw * ci + hw * ci * c;
  return out;
}

}  // namespace scrl
