#pragma once

#include <torch/torch.h>

#include <array>
#include <optional>
#include <string_view>

#include "scrl/setting.hpp"

namespace scrl {

// Bias-free identity classifier; its weight rows are the class prototypes.
// With a neck, features pass through a batch norm (frozen shift) before the
// product, and embed() exposes that space to callers that score against the
// prototypes directly.
class ClassifierImpl : public torch::nn::Module {
 public:
  ClassifierImpl(int feature_dim, int num_classes, bool neck = false);
  torch::Tensor forward(const torch::Tensor& features);  // logits [N, K]
  torch::Tensor embed(const torch::Tensor& features);    // neck(features), or features
  // embed() with the neck's affine parameters detached and its running
  // statistics left untouched, for scoring a student against frozen prototypes.
  torch::Tensor embed_frozen(const torch::Tensor& features);
  const torch::Tensor& prototypes() const { return weight; }  // [K, C]

  torch::Tensor weight;
  torch::nn::BatchNorm1d neck{nullptr};
};
TORCH_MODULE(Classifier);

// Mean negative log-likelihood of log_softmax(logits). labels: int64 [N].
torch::Tensor ce_from_logits(const torch::Tensor& logits, const torch::Tensor& labels);
torch::Tensor ce_loss(const torch::Tensor& features, const torch::Tensor& labels, Classifier& classifier);

// Euclidean distance matrix [N, N]; the clamp keeps the diagonal differentiable.
torch::Tensor pairwise_distances(const torch::Tensor& features);

// Softmax weights of the weighted-regularization triplet: over positives
// (same label, excluding the anchor itself) weights grow with distance; over
// negatives they grow as distance shrinks. Each row of each matrix sums to 1.
struct WrtWeights {
  torch::Tensor positive;  // [N, N], zero outside P_i
  torch::Tensor negative;  // [N, N], zero outside N_i
};
WrtWeights wrt_weights(const torch::Tensor& distances, const torch::Tensor& labels);

// Per-anchor softplus(sum_j w+_ij d_ij - sum_k w-_ik d_ik). Throws if an anchor
// has no positive or no negative.
torch::Tensor wrt_anchor_losses(const torch::Tensor& distances, const torch::Tensor& labels);
torch::Tensor wrt_loss(const torch::Tensor& features, const torch::Tensor& labels);

// Mean over the batch of ||student - teacher||_2 (not squared). The teacher
// is detached.
torch::Tensor kd_instance(const torch::Tensor& student, const torch::Tensor& teacher);

// Cross-entropy of student . prototypes^T against labels. With stop_gradient
// the prototypes receive no gradient.
torch::Tensor kd_prototype(const torch::Tensor& student, const torch::Tensor& labels,
                           const torch::Tensor& prototypes, bool stop_gradient = true);

enum class LossTerm : int {
  ShapeId = 0,    // CE on the teacher shape feature
  ShapeWrt,       // WRT on the teacher shape feature
  KdInstance,     // student vs teacher, instance level
  KdPrototype,    // student vs shape prototypes
  QueryId,        // CE on GeM(fused)
  QueryWrt,
  EnhancedId,     // CE on GeM(enhanced) with the appearance classifier
  EnhancedWrt,
  BaseId,         // CE on GeM(f)
  BaseWrt,
};
inline constexpr int kNumLossTerms = 10;

std::string_view loss_name(LossTerm t);  // "l_id_s", "l_wrt_s", ...

struct LossConfig {
  std::array<bool, kNumLossTerms> enabled{};
  std::array<double, kNumLossTerms> weights{1, 1, 1, 1, 1, 1, 1, 1, 1, 1};

  bool is_enabled(LossTerm t) const { return enabled[static_cast<int>(t)]; }
  void enable(LossTerm t, bool on = true) { enabled[static_cast<int>(t)] = on; }

  // Terms each ablation setting trains with. Settings without enhancement
  // stage 2 keep the baseline appearance terms since nothing else supervises
  // the appearance map; `with_baseline` forces them on for the others too.
  static LossConfig for_setting(Setting s, bool with_baseline = false);
};

struct LossReport {
  std::array<std::optional<double>, kNumLossTerms> values{};
  double total = 0.0;

  std::optional<double> get(LossTerm t) const { return values[static_cast<int>(t)]; }
  friend bool operator==(const LossReport&, const LossReport&) = default;
};

using LossTerms = std::array<torch::Tensor, kNumLossTerms>;

struct LossTotal {
  torch::Tensor total;
  LossReport report;
};

// Weighted sum of the enabled terms. Throws if an enabled term is undefined.
LossTotal total_loss(const LossTerms& terms, const LossConfig& config);

}  // namespace scrl
