#include "scrl/model.hpp"

#include "scrl/error.hpp"

namespace scrl {

void ModelConfig::validate() const {
  backbone.validate();
  if (num_identities <= 0) throw Error("backbone", "num_identities must be positive");
  if (attention_inner < 0) throw Error("attention", "attention_inner must be >= 0");
  if (!(attention_temperature > 0)) throw Error("attention", "temperature must be positive");
}

namespace {

CrossAttentionOptions attention_options(const ModelConfig& cfg, int channels) {
  return CrossAttentionOptions{channels, cfg.attention_inner, cfg.attention_temperature};
}

}  // namespace

ScrlModelImpl::ScrlModelImpl(const ModelConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  const auto& b = cfg.backbone;
  appearance = register_module("appearance", AppearanceNet(b));
  shape = register_module("shape", ShapeNet(b));
  shape_subnet = register_module("shape_subnet", ShapeSubnet(b, appearance));
  isr[0] = register_module("isr1", ResidualCrossAttention(attention_options(cfg, b.stage_widths[0])));
  isr[1] = register_module("isr2", ResidualCrossAttention(attention_options(cfg, b.stage_widths[1])));
  afe_stage1 =
      register_module("afe1", ResidualCrossAttention(attention_options(cfg, b.stage_widths[3])));
  afe_stage2 =
      register_module("afe2", ResidualCrossAttention(attention_options(cfg, b.stage_widths[3])));
  const int dim = b.stage_widths[3];
  id_classifier = register_module("id_classifier", Classifier(dim, cfg.num_identities, cfg.bn_neck));
  shape_classifier = register_module("shape_classifier", Classifier(dim, cfg.num_identities, cfg.bn_neck));
  query_classifier = register_module("query_classifier", Classifier(dim, cfg.num_identities, cfg.bn_neck));
  pool = register_module("pool", GeM(b.gem_p, b.gem_learnable));
}

FeatureBundle ScrlModelImpl::forward_common(const torch::Tensor& images, const torch::Tensor* shape_images,
                                            std::span<const Modality> modalities, Setting setting) {
  const Components c = components_of(setting);
  const auto split = ModalitySplit::from(modalities);
  if (images.dim() != 4 || images.size(0) != split.size) {
    throw Error("backbone", "modality tags missing for part of the batch");
  }
  FeatureBundle out;
  out.appearance = appearance->forward(images, split);
  const auto& f = out.appearance[3];
  out.appearance_pooled = pool(f);

  if (!c.sfp) return out;

  if (shape_images != nullptr) {
    auto stream = shape->forward(*shape_images, split, &out.appearance, c.isr ? &isr : nullptr, pool);
    out.shape = stream.maps;
    out.restituted = stream.restituted;
    out.teacher_pooled = stream.pooled;
  }
  out.student_map = shape_subnet->forward(out.appearance[2]);
  out.student_pooled = pool(out.student_map);

  torch::Tensor query = out.student_map;
  if (c.afe_s1) {
    out.fused_map = scrl::afe_stage1(afe_stage1, out.student_map, f);
    out.fused_pooled = pool(out.fused_map);
    query = out.fused_map;
  }
  if (c.afe_s2) {
    out.enhanced_map = scrl::afe_stage2(afe_stage2, query, f);
    out.enhanced_pooled = pool(out.enhanced_map);
  }
  return out;
}

FeatureBundle ScrlModelImpl::forward_train(const torch::Tensor& images, const torch::Tensor& shape_images,
                                           std::span<const Modality> modalities, Setting setting) {
  if (components_of(setting).sfp) {
    if (!shape_images.defined() || shape_images.size(0) != images.size(0)) {
      throw Error("trainer", "shape inputs must pair one-to-one with images");
    }
    return forward_common(images, &shape_images, modalities, setting);
  }
  return forward_common(images, nullptr, modalities, setting);
}

FeatureBundle ScrlModelImpl::forward_inference(const torch::Tensor& images,
                                               std::span<const Modality> modalities, Setting setting) {
  return forward_common(images, nullptr, modalities, setting);
}

LossTerms ScrlModelImpl::compute_losses(const FeatureBundle& b, const torch::Tensor& labels,
                                        const LossConfig& config) {
  LossTerms t;
  auto want = [&](LossTerm term, const torch::Tensor& input) {
    return config.is_enabled(term) && input.defined();
  };
  auto set = [&](LossTerm term, torch::Tensor value) { t[static_cast<int>(term)] = std::move(value); };

  if (want(LossTerm::ShapeId, b.teacher_pooled)) {
    set(LossTerm::ShapeId, ce_loss(b.teacher_pooled, labels, shape_classifier));
  }
  if (want(LossTerm::ShapeWrt, b.teacher_pooled)) set(LossTerm::ShapeWrt, wrt_loss(b.teacher_pooled, labels));
  if (want(LossTerm::KdInstance, b.student_pooled) && b.teacher_pooled.defined()) {
    set(LossTerm::KdInstance, kd_instance(b.student_pooled, b.teacher_pooled));
  }
  if (want(LossTerm::KdPrototype, b.student_pooled)) {
    const auto student = cfg_.kd_prototype_stop_gradient ? shape_classifier->embed_frozen(b.student_pooled)
                                                         : shape_classifier->embed(b.student_pooled);
    set(LossTerm::KdPrototype,
        kd_prototype(student, labels, shape_classifier->prototypes(), cfg_.kd_prototype_stop_gradient));
  }
  if (want(LossTerm::QueryId, b.fused_pooled)) {
    set(LossTerm::QueryId, ce_loss(b.fused_pooled, labels, query_classifier));
  }
  if (want(LossTerm::QueryWrt, b.fused_pooled)) set(LossTerm::QueryWrt, wrt_loss(b.fused_pooled, labels));
  if (want(LossTerm::EnhancedId, b.enhanced_pooled)) {
    set(LossTerm::EnhancedId, ce_loss(b.enhanced_pooled, labels, id_classifier));
  }
  if (want(LossTerm::EnhancedWrt, b.enhanced_pooled)) {
    set(LossTerm::EnhancedWrt, wrt_loss(b.enhanced_pooled, labels));
  }
  if (want(LossTerm::BaseId, b.appearance_pooled)) {
    set(LossTerm::BaseId, ce_loss(b.appearance_pooled, labels, id_classifier));
  }
  if (want(LossTerm::BaseWrt, b.appearance_pooled)) {
    set(LossTerm::BaseWrt, wrt_loss(b.appearance_pooled, labels));
  }
  return t;
}

namespace {

bool is_classifier_name(const std::string& name) { return name.find("classifier.") != std::string::npos; }

}  // namespace

std::vector<std::pair<std::string, torch::Tensor>> ScrlModelImpl::classifier_parameters() const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : named_parameters()) {
    if (is_classifier_name(p.key())) out.emplace_back(p.key(), p.value());
  }
  return out;
}

std::vector<std::pair<std::string, torch::Tensor>> ScrlModelImpl::network_parameters() const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : named_parameters()) {
    if (!is_classifier_name(p.key())) out.emplace_back(p.key(), p.value());
  }
  return out;
}

ScrlModel make_model(const ModelConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  return ScrlModel(cfg);
}

InferenceComplexity count_inference_complexity(const ModelConfig& cfg, int height, int width) {
  const auto& b = cfg.backbone;
  const auto bb = count_params_flops(b, height, width);
  const auto sizes = b.stage_sizes(height, width);
  InferenceComplexity out;
  out.appearance = bb.appearance;
  out.appearance_with_subnet = bb.appearance_with_subnet;
  out.shape_stream = bb.shape_stream;
  const auto [h4, w4] = sizes[3];
  out.afe_stage1 = attention_complexity(attention_options(cfg, b.stage_widths[3]), h4, w4);
  out.afe_stage2 = out.afe_stage1;
  out.isr_stage1 = attention_complexity(attention_options(cfg, b.stage_widths[0]), sizes[0].first,
                                        sizes[0].second);
  out.isr_stage2 = attention_complexity(attention_options(cfg, b.stage_widths[1]), sizes[1].first,
                                        sizes[1].second);
  return out;
}

}  // namespace scrl
