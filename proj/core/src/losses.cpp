#include "scrl/losses.hpp"

#include "scrl/error.hpp"

namespace scrl {

namespace {

void check_labels(const torch::Tensor& labels, int64_t n, int64_t num_classes) {
  if (labels.dim() != 1 || labels.size(0) != n) {
    throw Error("losses", "labels must be a vector matching the batch");
  }
  if (n == 0) throw Error("losses", "empty batch");
  const auto lo = labels.min().item<int64_t>(), hi = labels.max().item<int64_t>();
  if (lo < 0 || (num_classes > 0 && hi >= num_classes)) {
    throw Error("losses", "label out of range [0, " + std::to_string(num_classes) + ")");
  }
}

// Row-wise softmax restricted to `mask`; rows are shifted by their masked max.
torch::Tensor masked_softmax(const torch::Tensor& values, const torch::Tensor& mask) {
  const auto outside = mask.logical_not();
  auto masked = values.masked_fill(outside, -std::numeric_limits<double>::infinity());
  auto shift = std::get<0>(masked.max(1, true)).detach();
  auto e = torch::exp((values - shift).masked_fill(outside, 0.0)).masked_fill(outside, 0.0);
  return e / e.sum(1, true);
}

}  // namespace

ClassifierImpl::ClassifierImpl(int feature_dim, int num_classes, bool with_neck) {
  if (feature_dim <= 0 || num_classes <= 0) throw Error("losses", "classifier needs positive sizes");
  weight = register_parameter("weight", torch::randn({num_classes, feature_dim}) * 0.001);
  if (with_neck) {
    neck = register_module("neck", torch::nn::BatchNorm1d(feature_dim));
    neck->bias.set_requires_grad(false);
  }
}

torch::Tensor ClassifierImpl::embed(const torch::Tensor& features) {
  return neck ? neck(features) : features;
}

torch::Tensor ClassifierImpl::embed_frozen(const torch::Tensor& features) {
  if (!neck) return features;
  const auto& o = neck->options;
  const bool train = is_training();
  return torch::batch_norm(features, neck->weight.detach(), neck->bias.detach(),
                           train ? torch::Tensor() : neck->running_mean, train ? torch::Tensor() : neck->running_var,
                           train, o.momentum().value_or(0.1), o.eps(), /*cudnn_enabled=*/false);
}

torch::Tensor ClassifierImpl::forward(const torch::Tensor& features) {
  return embed(features).matmul(weight.t());
}

torch::Tensor ce_from_logits(const torch::Tensor& logits, const torch::Tensor& labels) {
  check_labels(labels, logits.size(0), logits.size(1));
  return torch::nll_loss(torch::log_softmax(logits, 1), labels);
}

torch::Tensor ce_loss(const torch::Tensor& features, const torch::Tensor& labels, Classifier& classifier) {
  return ce_from_logits(classifier(features), labels);
}

torch::Tensor pairwise_distances(const torch::Tensor& features) {
  if (features.dim() != 2) throw Error("losses", "features must be [N, C]");
  auto diff = features.unsqueeze(1) - features.unsqueeze(0);
  return diff.pow(2).sum(-1).clamp_min(1e-12).sqrt();
}

WrtWeights wrt_weights(const torch::Tensor& distances, const torch::Tensor& labels) {
  const auto n = distances.size(0);
  check_labels(labels, n, 0);
  auto same = labels.unsqueeze(0).eq(labels.unsqueeze(1));
  auto eye = torch::eye(n, torch::TensorOptions().dtype(torch::kBool));
  auto is_pos = same.logical_and(eye.logical_not());
  auto is_neg = same.logical_not();
  const auto pos_count = is_pos.sum(1), neg_count = is_neg.sum(1);
  if (pos_count.min().item<int64_t>() == 0) throw Error("losses", "WRT anchor without a positive");
  if (neg_count.min().item<int64_t>() == 0) throw Error("losses", "WRT anchor without a negative");
  return {masked_softmax(distances, is_pos), masked_softmax(-distances, is_neg)};
}

torch::Tensor wrt_anchor_losses(const torch::Tensor& distances, const torch::Tensor& labels) {
  const auto w = wrt_weights(distances, labels);
  auto furthest_positive = (distances * w.positive).sum(1);
  auto closest_negative = (distances * w.negative).sum(1);
  return torch::softplus(furthest_positive - closest_negative);
}

torch::Tensor wrt_loss(const torch::Tensor& features, const torch::Tensor& labels) {
  return wrt_anchor_losses(pairwise_distances(features), labels).mean();
}

torch::Tensor kd_instance(const torch::Tensor& student, const torch::Tensor& teacher) {
  if (student.sizes() != teacher.sizes() || student.dim() != 2) {
    throw Error("losses", "student/teacher shape mismatch: " + c10::str(student.sizes()) + " vs " +
                              c10::str(teacher.sizes()));
  }
  return at::linalg_vector_norm(student - teacher.detach(), 2, {1}).mean();
}

torch::Tensor kd_prototype(const torch::Tensor& student, const torch::Tensor& labels,
                           const torch::Tensor& prototypes, bool stop_gradient) {
  if (student.dim() != 2 || prototypes.dim() != 2 || student.size(1) != prototypes.size(1)) {
    throw Error("losses", "student features and prototypes disagree on dimension");
  }
  const auto& theta = stop_gradient ? prototypes.detach() : prototypes;
  return ce_from_logits(student.matmul(theta.t()), labels);
}

std::string_view loss_name(LossTerm t) {
  static constexpr std::string_view kNames[kNumLossTerms] = {
      "l_id_s", "l_wrt_s", "l_kd", "l_kd_ce", "l_id_q", "l_wrt_q", "l_id_a", "l_wrt_a", "l_id", "l_wrt"};
  return kNames[static_cast<int>(t)];
}

LossConfig LossConfig::for_setting(Setting s, bool with_baseline) {
  const Components c = components_of(s);
  LossConfig cfg;
  if (c.sfp) {
    cfg.enable(LossTerm::ShapeId);
    cfg.enable(LossTerm::ShapeWrt);
    cfg.enable(LossTerm::KdInstance);
    cfg.enable(LossTerm::KdPrototype);
  }
  if (c.afe_s1) {
    cfg.enable(LossTerm::QueryId);
    cfg.enable(LossTerm::QueryWrt);
  }
  if (c.afe_s2) {
    cfg.enable(LossTerm::EnhancedId);
    cfg.enable(LossTerm::EnhancedWrt);
  }
  if (!c.afe_s2 || with_baseline) {
    cfg.enable(LossTerm::BaseId);
    cfg.enable(LossTerm::BaseWrt);
  }
  return cfg;
}

LossTotal total_loss(const LossTerms& terms, const LossConfig& config) {
  LossTotal out;
  for (int i = 0; i < kNumLossTerms; ++i) {
    if (!config.enabled[i]) continue;
    const auto& t = terms[i];
    if (!t.defined()) {
      throw Error("losses", "enabled term " + std::string(loss_name(static_cast<LossTerm>(i))) +
                                " has no inputs");
    }
    auto weighted = t * config.weights[i];
    out.total = out.total.defined() ? out.total + weighted : weighted;
    out.report.values[i] = t.item<double>();
  }
  if (!out.total.defined()) out.total = torch::zeros({});
  out.report.total = out.total.item<double>();
  return out;
}

}  // namespace scrl
