#include "scrl/backbone.hpp"

#include "scrl/error.hpp"

namespace scrl {

namespace nn = torch::nn;

namespace {

nn::Conv2d conv(int in, int out, int k, int stride) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2).bias(false));
}

nn::Sequential shortcut(int in, int out, int stride) {
  if (in == out && stride == 1) return nullptr;
  return nn::Sequential(conv(in, out, 1, stride), nn::BatchNorm2d(out));
}

int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

int stage_stride(const BackboneConfig& cfg, int stage) {
  if (stage == 0) return 1;
  if (stage == 3) return cfg.last_stride;
  return 2;
}

int stage_in_channels(const BackboneConfig& cfg, int stage) {
  return stage == 0 ? cfg.stem_channels : cfg.stage_widths[stage - 1];
}

Complexity conv_cost(int in, int out, int k, int out_h, int out_w) {
  Complexity c;
  c.params = static_cast<std::int64_t>(k) * k * in * out;
  c.macs = c.params * out_h * out_w;
  return c;
}

Complexity bn_cost(int channels) { return {2 * static_cast<std::int64_t>(channels), 0}; }

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

BackboneConfig BackboneConfig::toy() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::resnet50_like() {
  BackboneConfig c;
  c.preset = "resnet50-like";
  c.stem_channels = 64;
  c.stem_kernel = 7;
  c.stem_stride = 2;
  c.stem_pool = true;
  c.stage_widths = {256, 512, 1024, 2048};
  c.stage_blocks = {3, 4, 6, 3};
  c.block = BlockKind::Bottleneck;
  c.last_stride = 1;
  c.input_height = 384;
  c.input_width = 144;
  return c;
}

BackboneConfig BackboneConfig::from_preset(std::string_view name) {
  if (name == "toy") return toy();
  if (name == "resnet50-like") return resnet50_like();
  throw Error("backbone", "unknown preset '" + std::string(name) + "'");
}

void BackboneConfig::validate() const {
  if (stem_channels <= 0 || stem_kernel <= 0 || stem_stride <= 0) {
    throw Error("backbone", "stem parameters must be positive");
  }
  for (int s = 0; s < 4; ++s) {
    if (stage_widths[s] <= 0 || stage_blocks[s] <= 0) {
      throw Error("backbone", "stage " + std::to_string(s + 1) + " needs positive width and depth");
    }
    if (block == BlockKind::Bottleneck && stage_widths[s] % 4 != 0) {
      throw Error("backbone", "bottleneck stage widths must be divisible by 4");
    }
  }
  if (last_stride != 1 && last_stride != 2) throw Error("backbone", "last_stride must be 1 or 2");
  if (!(gem_p > 0.0)) throw Error("backbone", "gem_p must be > 0");
  if (input_height < 16 || input_width < 16) throw Error("backbone", "input size below minimum");
}

std::pair<int, int> BackboneConfig::stem_size(int height, int width) const {
  int h = conv_out(height, stem_kernel, stem_stride, stem_kernel / 2);
  int w = conv_out(width, stem_kernel, stem_stride, stem_kernel / 2);
  if (stem_pool) {
    h = conv_out(h, 3, 2, 1);
    w = conv_out(w, 3, 2, 1);
  }
  return {h, w};
}

std::array<std::pair<int, int>, 4> BackboneConfig::stage_sizes(int height, int width) const {
  std::array<std::pair<int, int>, 4> out;
  auto [h, w] = stem_size(height, width);
  for (int s = 0; s < 4; ++s) {
    const int stride = stage_stride(*this, s);
    h = conv_out(h, 3, stride, 1);
    w = conv_out(w, 3, stride, 1);
    out[s] = {h, w};
  }
  return out;
}

ModalitySplit ModalitySplit::from(std::span<const Modality> modalities) {
  std::vector<int64_t> vis, ir;
  for (std::size_t i = 0; i < modalities.size(); ++i) {
    (modalities[i] == Modality::Visible ? vis : ir).push_back(static_cast<int64_t>(i));
  }
  ModalitySplit s;
  s.size = static_cast<int64_t>(modalities.size());
  s.visible = torch::tensor(vis, torch::kInt64);
  s.infrared = torch::tensor(ir, torch::kInt64);
  std::vector<int64_t> inverse(modalities.size());
  for (std::size_t k = 0; k < vis.size(); ++k) inverse[vis[k]] = static_cast<int64_t>(k);
  for (std::size_t k = 0; k < ir.size(); ++k) inverse[ir[k]] = static_cast<int64_t>(vis.size() + k);
  s.inverse = torch::tensor(inverse, torch::kInt64);
  return s;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

torch::Tensor gem_pool(const torch::Tensor& map, double p, double eps) {
  if (!(p > 0.0)) throw Error("backbone", "GeM exponent must be > 0");
  if (map.dim() != 4) throw Error("backbone", "GeM expects an [N, C, H, W] map");
  return map.clamp_min(eps).pow(p).mean({2, 3}).pow(1.0 / p);
}

GeMImpl::GeMImpl(double p, bool learnable) : learnable_(learnable) {
  if (!(p > 0.0)) throw Error("backbone", "GeM exponent must be > 0");
  auto t = torch::full({1}, p, torch::kFloat32);
  if (learnable_) {
    p_ = register_parameter("p", t);
  } else {
    p_ = register_buffer("p", t);
  }
}

torch::Tensor GeMImpl::forward(const torch::Tensor& map) {
  if (!learnable_) return gem_pool(map, p_.item<double>());
  const auto p = p_.to(map.dtype());
  return map.clamp_min(1e-6).pow(p).mean({2, 3}).pow(1.0 / p);
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

StemImpl::StemImpl(const BackboneConfig& cfg, int in_channels) : pool_(cfg.stem_pool) {
  conv = register_module("conv", scrl::conv(in_channels, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride));
  bn = register_module("bn", nn::BatchNorm2d(cfg.stem_channels));
}

torch::Tensor StemImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(bn(conv(x)));
  if (pool_) y = torch::max_pool2d(y, 3, 2, 1);
  return y;
}

BasicBlockImpl::BasicBlockImpl(int in, int out, int stride) {
  conv1 = register_module("conv1", conv(in, out, 3, stride));
  bn1 = register_module("bn1", nn::BatchNorm2d(out));
  conv2 = register_module("conv2", conv(out, out, 3, 1));
  bn2 = register_module("bn2", nn::BatchNorm2d(out));
  if (auto s = shortcut(in, out, stride)) downsample = register_module("downsample", s);
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(bn1(conv1(x)));
  y = bn2(conv2(y));
  return torch::relu(y + (downsample ? downsample->forward(x) : x));
}

BottleneckImpl::BottleneckImpl(int in, int out, int stride) {
  const int mid = out / 4;
  conv1 = register_module("conv1", conv(in, mid, 1, 1));
  bn1 = register_module("bn1", nn::BatchNorm2d(mid));
  conv2 = register_module("conv2", conv(mid, mid, 3, stride));
  bn2 = register_module("bn2", nn::BatchNorm2d(mid));
  conv3 = register_module("conv3", conv(mid, out, 1, 1));
  bn3 = register_module("bn3", nn::BatchNorm2d(out));
  if (auto s = shortcut(in, out, stride)) downsample = register_module("downsample", s);
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(bn1(conv1(x)));
  y = torch::relu(bn2(conv2(y)));
  y = bn3(conv3(y));
  return torch::relu(y + (downsample ? downsample->forward(x) : x));
}

nn::Sequential make_stage(const BackboneConfig& cfg, int stage) {
  nn::Sequential seq;
  int in = stage_in_channels(cfg, stage);
  const int out = cfg.stage_widths[stage];
  for (int b = 0; b < cfg.stage_blocks[stage]; ++b) {
    const int stride = b == 0 ? stage_stride(cfg, stage) : 1;
    if (cfg.block == BlockKind::Basic) {
      seq->push_back(BasicBlock(in, out, stride));
    } else {
      seq->push_back(Bottleneck(in, out, stride));
    }
    in = out;
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

AppearanceNetImpl::AppearanceNetImpl(const BackboneConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  visible_stem = register_module("visible_stem", Stem(cfg_));
  infrared_stem = register_module("infrared_stem", Stem(cfg_));
  for (int s = 0; s < 4; ++s) {
    stages[s] = register_module("stage" + std::to_string(s + 1), make_stage(cfg_, s));
  }
}

torch::Tensor AppearanceNetImpl::stem_forward(const torch::Tensor& images, const ModalitySplit& split) {
  if (images.dim() != 4 || images.size(0) != split.size) {
    throw Error("backbone", "modality tags missing for part of the batch");
  }
  if (images.size(2) < 16 || images.size(3) < 16) throw Error("backbone", "input size below minimum");
  if (!split.has_infrared()) return visible_stem(images);
  if (!split.has_visible()) return infrared_stem(images);
  auto vis = visible_stem(images.index_select(0, split.visible));
  auto ir = infrared_stem(images.index_select(0, split.infrared));
  return torch::cat({vis, ir}, 0).index_select(0, split.inverse);
}

StageMaps AppearanceNetImpl::forward(const torch::Tensor& images, const ModalitySplit& split) {
  StageMaps maps;
  auto x = stem_forward(images, split);
  for (int s = 0; s < 4; ++s) {
    x = stages[s]->forward(x);
    maps[s] = x;
  }
  return maps;
}

ShapeNetImpl::ShapeNetImpl(const BackboneConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  stem = register_module("stem", Stem(cfg_));
  for (int s = 0; s < 4; ++s) {
    stages[s] = register_module("stage" + std::to_string(s + 1), make_stage(cfg_, s));
  }
}

ShapeStreamOutput ShapeNetImpl::forward(const torch::Tensor& shape_images, const ModalitySplit& split,
                                        const StageMaps* appearance,
                                        std::array<ResidualCrossAttention, 2>* isr, GeM& pool) {
  if (shape_images.dim() != 4 || shape_images.size(0) != split.size) {
    throw Error("backbone", "modality tags missing for part of the shape batch");
  }
  ShapeStreamOutput out;
  auto x = stem->forward(shape_images);
  for (int s = 0; s < 4; ++s) {
    x = stages[s]->forward(x);
    if (isr != nullptr && s < 2 && split.has_infrared()) {
      if (appearance == nullptr || !(*appearance)[s].defined()) {
        throw Error("backbone", "shape restitution needs appearance stage " + std::to_string(s + 1));
      }
      const auto& app = (*appearance)[s];
      if (app.sizes() != x.sizes()) {
        throw Error("backbone", "stage-" + std::to_string(s + 1) + " shape mismatch between streams: " +
                                    c10::str(x.sizes()) + " vs " + c10::str(app.sizes()));
      }
      auto ir_shape = x.index_select(0, split.infrared);
      auto ir_app = app.index_select(0, split.infrared);
      auto restored = isr_restitute((*isr)[s], ir_shape, ir_app);
      out.restituted[s] = restored;
      x = x.index_copy(0, split.infrared, restored);
    }
    out.maps[s] = x;
  }
  out.pooled = pool(out.maps[3]);
  return out;
}

ShapeSubnetImpl::ShapeSubnetImpl(const BackboneConfig& cfg, AppearanceNet& source)
    : in_channels_(cfg.stage_widths[2]) {
  stage = register_module("stage", make_stage(cfg, 3));
  torch::NoGradGuard guard;
  auto src_params = source->stages[3]->named_parameters();
  for (auto& p : stage->named_parameters()) p.value().copy_(src_params[p.key()]);
  auto src_buffers = source->stages[3]->named_buffers();
  for (auto& b : stage->named_buffers()) b.value().copy_(src_buffers[b.key()]);
}

torch::Tensor ShapeSubnetImpl::forward(const torch::Tensor& stage3_map) {
  if (stage3_map.dim() != 4 || stage3_map.size(1) != in_channels_) {
    throw Error("backbone", "shape subnetwork expects " + std::to_string(in_channels_) +
                                " input channels, got " + c10::str(stage3_map.sizes()));
  }
  return stage->forward(stage3_map);
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

BackboneComplexity count_params_flops(const BackboneConfig& cfg, int height, int width) {
  cfg.validate();
  BackboneComplexity out;
  {
    const int h = conv_out(height, cfg.stem_kernel, cfg.stem_stride, cfg.stem_kernel / 2);
    const int w = conv_out(width, cfg.stem_kernel, cfg.stem_stride, cfg.stem_kernel / 2);
    out.stem = conv_cost(3, cfg.stem_channels, cfg.stem_kernel, h, w) + bn_cost(cfg.stem_channels);
  }
  auto [h, w] = cfg.stem_size(height, width);
  for (int s = 0; s < 4; ++s) {
    Complexity c;
    int in = stage_in_channels(cfg, s);
    const int width_out = cfg.stage_widths[s];
    for (int b = 0; b < cfg.stage_blocks[s]; ++b) {
      const int stride = b == 0 ? stage_stride(cfg, s) : 1;
      const int oh = conv_out(h, 3, stride, 1), ow = conv_out(w, 3, stride, 1);
      if (cfg.block == BlockKind::Basic) {
        c += conv_cost(in, width_out, 3, oh, ow) + bn_cost(width_out);
        c += conv_cost(width_out, width_out, 3, oh, ow) + bn_cost(width_out);
      } else {
        const int mid = width_out / 4;
        c += conv_cost(in, mid, 1, h, w) + bn_cost(mid);
        c += conv_cost(mid, mid, 3, oh, ow) + bn_cost(mid);
        c += conv_cost(mid, width_out, 1, oh, ow) + bn_cost(width_out);
      }
      if (in != width_out || stride != 1) c += conv_cost(in, width_out, 1, oh, ow) + bn_cost(width_out);
      in = width_out;
      h = oh;
      w = ow;
    }
    out.stages[s] = c;
  }
  Complexity body;
  for (const auto& s : out.stages) body += s;
  // Each image passes through exactly one of the two stems.
  out.appearance = body + out.stem;
  out.appearance.params += out.stem.params;
  out.shape_stream = body + out.stem;
  out.shape_subnet = out.stages[3];
  out.appearance_with_subnet = out.appearance + out.shape_subnet;
  return out;
}

std::int64_t count_module_params(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace scrl
