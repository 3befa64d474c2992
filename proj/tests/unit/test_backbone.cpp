#include <scrl/backbone.hpp>
#include <scrl/error.hpp>
#include <scrl/model.hpp>

#include "support.hpp"

using namespace scrl;
using scrl::test::max_abs_diff;

namespace {

std::vector<Modality> tags(std::initializer_list<Modality> m) { return std::vector<Modality>(m); }

}  // namespace

TEST_SUITE("backbone") {
  TEST_CASE("GeM reduces to the mean at p = 1 and preserves constants") {
    torch::manual_seed(1);
    auto x = torch::rand({2, 3, 4, 5}, torch::kFloat64) + 0.1;
    CHECK(max_abs_diff(gem_pool(x, 1.0), x.mean({2, 3})) < 1e-12);
    auto c = torch::full({1, 2, 3, 3}, 0.7, torch::kFloat64);
    for (double p : {0.5, 1.0, 3.0, 10.0}) CHECK(max_abs_diff(gem_pool(c, p), torch::full({1, 2}, 0.7, torch::kFloat64)) < 1e-12);
  }

  TEST_CASE("GeM of {1, 2} at p = 3") {
    auto x = torch::tensor({1.0, 2.0}, torch::kFloat64).view({1, 1, 1, 2});
    CHECK(gem_pool(x, 3.0).item<double>() == doctest::Approx(std::cbrt(4.5)).epsilon(1e-12));
    CHECK(gem_pool(x, 3.0).item<double>() == doctest::Approx(1.65096).epsilon(1e-5));
  }

  TEST_CASE("GeM clamps below epsilon and rejects p <= 0") {
    auto x = torch::full({1, 1, 2, 2}, -3.0, torch::kFloat64);
    CHECK(gem_pool(x, 3.0).item<double>() == doctest::Approx(1e-6));
    CHECK_THROWS_AS(gem_pool(x, 0.0), Error);
    CHECK_THROWS_AS(gem_pool(x, -1.0), Error);
  }

  TEST_CASE("GeM is monotone in p and approaches the max") {
    torch::manual_seed(2);
    for (int i = 0; i < 20; ++i) {
      auto x = torch::rand({1, 4, 6, 5}, torch::kFloat64) + 0.05;
      auto p1 = gem_pool(x, 1.0), p3 = gem_pool(x, 3.0), p64 = gem_pool(x, 64.0), p512 = gem_pool(x, 512.0);
      auto mx = x.amax({2, 3});
      CHECK((p1 <= p3 + 1e-12).all().item<bool>());
      CHECK((p3 <= p64 + 1e-12).all().item<bool>());
      CHECK((p64 <= mx + 1e-12).all().item<bool>());
      // The max alone contributes max^p / HW, so GeM_p >= max * HW^(-1/p).
      CHECK((p64 >= mx * std::pow(30.0, -1.0 / 64) - 1e-12).all().item<bool>());
      CHECK(((mx - p512) / mx).max().item<double>() < 0.01);
    }
  }

  TEST_CASE("GeM gradient matches finite differences") {
    torch::manual_seed(3);
    auto x = (torch::rand({2, 3, 3, 2}, torch::kFloat64) + 0.2).set_requires_grad(true);
    CHECK(scrl::test::gradient_error([&] { return gem_pool(x, 3.0).pow(2).sum(); }, {x}) < 1e-4);
    GeM learnable(3.0, true);
    learnable->to(torch::kFloat64);
    auto p = learnable->parameters().at(0);
    CHECK(scrl::test::gradient_error([&] { return learnable(x).sum(); }, {x, p}) < 1e-4);
  }

  TEST_CASE("toy parameter count equals a hand summation") {
    const auto cfg = BackboneConfig::toy();
    auto conv = [](int64_t in, int64_t out, int64_t k) { return in * out * k * k; };
    auto bn = [](int64_t c) { return 2 * c; };
    const int64_t stem = conv(3, 32, 3) + bn(32);
    const int64_t stage1 = 2 * (conv(32, 32, 3) + bn(32));
    const int64_t stage2 = conv(32, 64, 3) + bn(64) + conv(64, 64, 3) + bn(64) + conv(32, 64, 1) + bn(64);
    const int64_t stage3 = conv(64, 128, 3) + bn(128) + conv(128, 128, 3) + bn(128) + conv(64, 128, 1) + bn(128);
    const int64_t stage4 = conv(128, 256, 3) + bn(256) + conv(256, 256, 3) + bn(256) + conv(128, 256, 1) + bn(256);
    const int64_t appearance = 2 * stem + stage1 + stage2 + stage3 + stage4;

    const auto counted = count_params_flops(cfg, 64, 32);
    CHECK(counted.appearance.params == appearance);
    CHECK(counted.shape_subnet.params == stage4);
    CHECK(counted.appearance_with_subnet.params == appearance + stage4);
    CHECK(counted.shape_stream.params == appearance - stem);

    AppearanceNet net(cfg);
    CHECK(count_module_params(*net) == appearance);
    ShapeNet shape(cfg);
    CHECK(count_module_params(*shape) == appearance - stem);
  }

  TEST_CASE("toy multiply-adds follow the stage sizes") {
    const auto cfg = BackboneConfig::toy();
    const auto c = count_params_flops(cfg, 64, 32);
    // Stem output 32x16; stages at 32x16, 16x8, 8x4, 8x4.
    const int64_t stem = 27 * 32 * 32 * 16;
    const int64_t s1 = 2 * 9 * 32 * 32 * 32 * 16;
    const int64_t s2 = (9 * 32 * 64 + 9 * 64 * 64 + 32 * 64) * 16 * 8;
    const int64_t s3 = (9 * 64 * 128 + 9 * 128 * 128 + 64 * 128) * 8 * 4;
    const int64_t s4 = (9 * 128 * 256 + 9 * 256 * 256 + 128 * 256) * 8 * 4;
    CHECK(c.appearance.macs == stem + s1 + s2 + s3 + s4);
  }

  TEST_CASE("stage sizes follow the declared strides") {
    const auto toy = BackboneConfig::toy();
    const auto t = toy.stage_sizes(64, 32);
    CHECK(t[0] == std::pair{32, 16});
    CHECK(t[1] == std::pair{16, 8});
    CHECK(t[2] == std::pair{8, 4});
    CHECK(t[3] == std::pair{8, 4});

    auto r50 = BackboneConfig::resnet50_like();
    CHECK(r50.stage_sizes(384, 144)[3] == std::pair{24, 9});
    r50.last_stride = 2;
    CHECK(r50.stage_sizes(384, 144)[3] == std::pair{12, 5});
    CHECK(r50.stage_widths == std::array<int, 4>{256, 512, 1024, 2048});
    CHECK(r50.stage_blocks == std::array<int, 4>{3, 4, 6, 3});

    torch::manual_seed(4);
    AppearanceNet net(toy);
    net->eval();
    const auto maps = net->forward(torch::rand({2, 3, 64, 32}), ModalitySplit::from(tags({Modality::Visible, Modality::Infrared})));
    for (int s = 0; s < 4; ++s) {
      CHECK(maps[s].size(1) == toy.stage_widths[s]);
      CHECK(maps[s].size(2) == t[s].first);
      CHECK(maps[s].size(3) == t[s].second);
    }
  }

  TEST_CASE("resnet50-like complexity lands on the reference table") {
    const auto c = count_params_flops(BackboneConfig::resnet50_like(), 384, 144);
    CHECK(std::abs(c.appearance.params / 23.5e6 - 1.0) < 0.03);
    CHECK(std::abs(c.appearance.macs / 6.9e9 - 1.0) < 0.10);
    CHECK(std::abs(c.appearance_with_subnet.params / 38.5e6 - 1.0) < 0.03);
    CHECK(std::abs(c.appearance_with_subnet.macs / 10.1e9 - 1.0) < 0.10);
  }

  TEST_CASE("identical stems give identical outputs across modalities") {
    torch::manual_seed(5);
    AppearanceNet net(BackboneConfig::toy());
    net->eval();
    {
      torch::NoGradGuard g;
      auto src = net->visible_stem->named_parameters();
      for (auto& p : net->infrared_stem->named_parameters()) p.value().copy_(src[p.key()]);
    }
    auto img = torch::rand({1, 3, 64, 32});
    auto both = torch::cat({img, img});
    const auto maps = net->forward(both, ModalitySplit::from(tags({Modality::Visible, Modality::Infrared})));
    CHECK(torch::equal(maps[3][0], maps[3][1]));
  }

  TEST_CASE("stems are unshared") {
    torch::manual_seed(6);
    AppearanceNet net(BackboneConfig::toy());
    net->eval();
    auto x = torch::rand({4, 3, 64, 32});
    const auto split = ModalitySplit::from(
        tags({Modality::Visible, Modality::Infrared, Modality::Visible, Modality::Infrared}));
    const auto before = net->forward(x, split)[3];
    {
      torch::NoGradGuard g;
      net->visible_stem->conv->weight.add_(0.5);
    }
    const auto after = net->forward(x, split)[3];
    CHECK(torch::equal(before.index_select(0, split.infrared), after.index_select(0, split.infrared)));
    CHECK_FALSE(torch::equal(before.index_select(0, split.visible), after.index_select(0, split.visible)));
  }

  TEST_CASE("missing modality tags are rejected") {
    AppearanceNet net(BackboneConfig::toy());
    CHECK_THROWS_AS(net->forward(torch::rand({3, 3, 64, 32}), ModalitySplit::from(tags({Modality::Visible}))),
                    Error);
  }

  TEST_CASE("shape subnetwork starts as a copy of the fourth stage") {
    torch::manual_seed(7);
    ModelConfig cfg;
    auto model = make_model(cfg, 7);
    model->eval();
    auto x = torch::rand({2, 3, 64, 32});
    const auto split = ModalitySplit::from(tags({Modality::Visible, Modality::Infrared}));
    const auto maps = model->appearance->forward(x, split);
    CHECK(torch::equal(model->shape_subnet->forward(maps[2]), maps[3]));
  }

  TEST_CASE("updating the shape subnetwork leaves the appearance network unchanged") {
    torch::manual_seed(8);
    ModelConfig cfg;
    auto model = make_model(cfg, 8);
    model->train();
    auto x = torch::rand({4, 3, 64, 32});
    const auto split = ModalitySplit::from(
        tags({Modality::Visible, Modality::Visible, Modality::Infrared, Modality::Infrared}));
    std::vector<torch::Tensor> app_before;
    for (const auto& p : model->appearance->parameters()) app_before.push_back(p.clone());

    auto maps = model->appearance->forward(x, split);
    auto loss = model->shape_subnet->forward(maps[2].detach()).pow(2).mean();
    loss.backward();
    torch::optim::SGD opt(model->shape_subnet->parameters(), 0.1);
    opt.step();

    const auto after = model->appearance->parameters();
    for (std::size_t i = 0; i < after.size(); ++i) CHECK(torch::equal(after[i], app_before[i]));
    model->eval();
    const auto m2 = model->appearance->forward(x, split);
    CHECK_FALSE(torch::equal(model->shape_subnet->forward(m2[2]), m2[3]));
  }

  TEST_CASE("shape stream with identity restitution equals the plain stream") {
    torch::manual_seed(9);
    ModelConfig cfg;
    auto model = make_model(cfg, 9);
    model->eval();
    auto x = torch::rand({4, 3, 64, 32}), s = torch::rand({4, 3, 64, 32});
    const auto split = ModalitySplit::from(
        tags({Modality::Visible, Modality::Infrared, Modality::Visible, Modality::Infrared}));
    const auto app = model->appearance->forward(x, split);
    const auto with_isr = model->shape->forward(s, split, &app, &model->isr, model->pool);
    const auto plain = model->shape->forward(s, split, nullptr, nullptr, model->pool);
    CHECK(torch::equal(with_isr.pooled, plain.pooled));
    CHECK(with_isr.restituted[0].defined());
    CHECK_FALSE(plain.restituted[0].defined());
  }

  TEST_CASE("visible rows never depend on restitution or on infrared rows") {
    torch::manual_seed(10);
    ModelConfig cfg;
    auto model = make_model(cfg, 10);
    {
      torch::NoGradGuard g;
      for (auto& m : model->isr) m->w_v2->weight.normal_();
    }
    model->eval();
    auto x = torch::rand({4, 3, 64, 32}), s = torch::rand({4, 3, 64, 32});
    const auto all_vis = ModalitySplit::from(
        tags({Modality::Visible, Modality::Visible, Modality::Visible, Modality::Visible}));
    const auto app = model->appearance->forward(x, all_vis);
    const auto other = model->appearance->forward(torch::rand({4, 3, 64, 32}), all_vis);
    CHECK(torch::equal(model->shape->forward(s, all_vis, &app, &model->isr, model->pool).pooled,
                       model->shape->forward(s, all_vis, &other, &model->isr, model->pool).pooled));

    const auto mixed = ModalitySplit::from(
        tags({Modality::Visible, Modality::Visible, Modality::Infrared, Modality::Infrared}));
    const auto app_mixed = model->appearance->forward(x, mixed);
    const auto out_mixed = model->shape->forward(s, mixed, &app_mixed, &model->isr, model->pool);
    const auto vis_only = ModalitySplit::from(tags({Modality::Visible, Modality::Visible}));
    auto xv = x.slice(0, 0, 2), sv = s.slice(0, 0, 2);
    const auto app_v = model->appearance->forward(xv, vis_only);
    const auto out_v = model->shape->forward(sv, vis_only, &app_v, &model->isr, model->pool);
    CHECK(max_abs_diff(out_mixed.pooled.slice(0, 0, 2), out_v.pooled) == 0.0);
    CHECK_FALSE(torch::equal(out_mixed.pooled.slice(0, 2, 4),
                             model->shape->forward(s, mixed, nullptr, nullptr, model->pool).pooled.slice(0, 2, 4)));
  }

  TEST_CASE("presets and validation") {
    CHECK(BackboneConfig::from_preset("toy").stage_widths[3] == 256);
    CHECK_THROWS_AS(BackboneConfig::from_preset("vgg"), Error);
    auto bad = BackboneConfig::toy();
    bad.gem_p = 0;
    CHECK_THROWS_AS(bad.validate(), Error);
  }
}
