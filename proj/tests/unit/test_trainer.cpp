#include <scrl/error.hpp>
#include <scrl/trainer.hpp>

#include <map>

#include "support.hpp"

using namespace scrl;
namespace fs = std::filesystem;

namespace {

// Four identities, 4 train images per modality, generated once per process.
const fs::path& tiny_root() {
  static const fs::path root = [] {
    const auto dir = scrl::test::scratch_dir("trainer_data");
    generate_dataset(scrl::test::tiny_synth(), dir);
    return dir;
  }();
  return root;
}

const Dataset& tiny_train() {
  static const Dataset ds = Dataset::open(tiny_root() / "train.manifest");
  return ds;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.backbone = BackboneConfig::toy();
  m.num_identities = 4;
  return m;
}

TrainConfig tiny_config(Setting setting, int epochs = 2) {
  TrainConfig c = TrainConfig::toy();
  c.epochs = epochs;
  c.warmup_epochs = 0;
  c.milestones = {};
  c.pk = PkSpec{2, 2, 2};
  c.steps_per_epoch = 2;
  c.setting = setting;
  return c;
}

std::map<std::string, torch::Tensor> snapshot(const torch::nn::Module& m) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& p : m.named_parameters()) out[p.key()] = p.value().detach().clone();
  return out;
}

bool bit_identical(const torch::nn::Module& a, const torch::nn::Module& b) {
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!torch::equal(pa[i].value(), pb[i].value())) return false;
  }
  const auto ba = a.named_buffers(), bb = b.named_buffers();
  for (std::size_t i = 0; i < ba.size(); ++i) {
    if (!torch::equal(ba[i].value(), bb[i].value())) return false;
  }
  return true;
}

Batch first_batch(const TrainConfig& c, Rng& augment_rng) {
  static const SampleCache cache(tiny_train(), 64, 32);
  Rng sampler_rng(c.seed);
  const auto idx = PkSampler(tiny_train().manifest(), c.pk).next(sampler_rng);
  return assemble_batch(cache, idx, c, augment_rng);
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("learning rate schedule examples") {
    const TrainConfig c;
    CHECK(lr_at(20, c, LrRole::Network) == doctest::Approx(0.00035).epsilon(1e-12));
    CHECK(lr_at(45, c, LrRole::Network) == doctest::Approx(3.5e-5).epsilon(1e-12));
    CHECK(lr_at(65, c, LrRole::Network) == doctest::Approx(3.5e-6).epsilon(1e-12));
    CHECK(lr_at(0, c, LrRole::Network) == doctest::Approx(3.5e-5).epsilon(1e-12));
    CHECK(lr_at(9, c, LrRole::Network) < lr_at(10, c, LrRole::Network));
    CHECK(lr_at(10, c, LrRole::Network) == doctest::Approx(0.00035).epsilon(1e-12));
    for (int e = 0; e < 120; ++e) {
      CHECK(lr_at(e, c, LrRole::Classifier) == doctest::Approx(2 * lr_at(e, c, LrRole::Network)));
      if (e > 0 && e != 40 && e != 60) CHECK(lr_at(e, c, LrRole::Network) >= lr_at(e - 1, c, LrRole::Network));
    }
  }

  TEST_CASE("invalid training configurations are rejected") {
    TrainConfig c;
    c.warmup_epochs = 40;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("first milestone"), Error);
    c = TrainConfig{};
    c.milestones = {60, 40};
    CHECK_THROWS_AS(c.validate(), Error);
    c = TrainConfig{};
    c.base_lr = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = TrainConfig{};
    c.pk.infrared_per_id = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = TrainConfig{};
    c.decay = 1.5;
    CHECK_THROWS_AS(c.validate(), Error);
    CHECK_NOTHROW(TrainConfig{}.validate());
    CHECK_NOTHROW(TrainConfig::toy().validate());
  }

  TEST_CASE("steps per epoch default to one pass over the visible half") {
    TrainConfig c;
    c.pk = PkSpec{8, 4, 4};
    CHECK(c.resolve_steps_per_epoch(512) == 8);
    CHECK(c.resolve_steps_per_epoch(513) == 9);
    c.steps_per_epoch = 3;
    CHECK(c.resolve_steps_per_epoch(512) == 3);
  }

  TEST_CASE("optimizer groups split classifiers from the network") {
    const auto state = make_train_state(tiny_model(), tiny_config(Setting::Full));
    const auto& groups = state.optimizer->groups();
    REQUIRE(groups.size() == 2);
    CHECK(groups[0].weight_decay == doctest::Approx(5e-4));
    CHECK(groups[1].weight_decay == 0.0);
    std::size_t total = 0;
    for (const auto& g : groups) {
      total += g.params.size();
      for (const auto& [name, p] : g.params) {
        CHECK((name.find("classifier") != std::string::npos) == (g.name == "classifier"));
      }
    }
    CHECK(total == state.model->named_parameters().size());
  }

  TEST_CASE("checkpoints restore identical outputs") {
    auto state = make_train_state(tiny_model(), tiny_config(Setting::Full));
    Rng aug(3);
    train_step(first_batch(state.config, aug), state);
    const auto dir = scrl::test::scratch_dir("trainer_ckpt");
    save_checkpoint(state, dir / "a.ckpt", "[run]\nseed = 1\n");
    auto loaded = load_checkpoint(dir / "a.ckpt");
    CHECK(loaded.step == 1);
    CHECK(loaded.sampler_rng == state.sampler_rng);
    CHECK(bit_identical(*loaded.model, *state.model));

    state.model->eval();
    loaded.model->eval();
    torch::NoGradGuard guard;
    const auto x = torch::rand({4, 3, 64, 32});
    const std::vector<Modality> mods{Modality::Visible, Modality::Visible, Modality::Infrared, Modality::Infrared};
    const auto a = state.model->forward_inference(x, mods, Setting::Full);
    const auto b = loaded.model->forward_inference(x, mods, Setting::Full);
    CHECK(torch::equal(a.enhanced_pooled, b.enhanced_pooled));
    CHECK(torch::equal(a.student_pooled, b.student_pooled));

    ModelConfig mc;
    auto model = load_model(dir / "a.ckpt", &mc);
    CHECK(mc.num_identities == 4);
    CHECK_FALSE(model->is_training());
  }

  TEST_CASE("zero epochs leave the initial state") {
    const auto c = tiny_config(Setting::Full, 0);
    const auto result = train(tiny_train(), tiny_model(), c);
    const auto fresh = make_train_state(tiny_model(), c);
    CHECK(result.log.empty());
    CHECK(result.state.epoch == 0);
    CHECK(bit_identical(*result.state.model, *fresh.model));
  }

  TEST_CASE("the baseline updates only the appearance network and its classifier") {
    auto state = make_train_state(tiny_model(), tiny_config(Setting::Baseline));
    const auto before = snapshot(*state.model);
    Rng aug(5);
    train_step(first_batch(state.config, aug), state);
    int changed_appearance = 0;
    for (const auto& p : state.model->named_parameters()) {
      const bool changed = !torch::equal(p.value(), before.at(p.key()));
      const bool allowed = starts_with(p.key(), "appearance.") || starts_with(p.key(), "id_classifier.");
      if (!allowed) CHECK_MESSAGE(!changed, p.key());
      changed_appearance += changed && starts_with(p.key(), "appearance.");
    }
    CHECK(changed_appearance > 0);
  }

  TEST_CASE("distillation never reaches the shape stream teacher") {
    auto model = make_model(tiny_model(), 2);
    model->train();
    Rng aug(6);
    auto c = tiny_config(Setting::Full);
    const auto batch = first_batch(c, aug);
    const auto grads_of = [&](const LossConfig& lc) {
      model->zero_grad();
      const auto bundle = model->forward_train(batch.images, batch.shape_images, batch.modalities, Setting::Full);
      total_loss(model->compute_losses(bundle, batch.labels, lc), lc).total.backward();
      std::map<std::string, torch::Tensor> g;
      for (const auto& p : model->named_parameters()) {
        if (p.value().grad().defined()) g[p.key()] = p.value().grad().clone();
      }
      return g;
    };
    LossConfig kd;
    kd.enable(LossTerm::KdInstance);
    kd.enable(LossTerm::KdPrototype);
    const auto g = grads_of(kd);
    for (const auto& [name, grad] : g) {
      if (starts_with(name, "shape.") || starts_with(name, "isr") || starts_with(name, "shape_classifier.")) {
        CHECK_MESSAGE(grad.abs().max().item<double>() == 0.0, name);
      }
    }
    bool student = false;
    for (const auto& [name, grad] : g) {
      student |= starts_with(name, "shape_subnet.") && grad.abs().max().item<double>() > 0;
    }
    CHECK(student);

    // The teacher's own terms do reach it.
    LossConfig own;
    own.enable(LossTerm::ShapeId);
    own.enable(LossTerm::ShapeWrt);
    const auto h = grads_of(own);
    double teacher = 0;
    for (const auto& [name, grad] : h) {
      if (starts_with(name, "shape.")) teacher += grad.abs().sum().item<double>();
    }
    CHECK(teacher > 0);
  }

  TEST_CASE("training is deterministic and resumable") {
    const auto c = tiny_config(Setting::Full, 2);
    const auto a = train(tiny_train(), tiny_model(), c);
    const auto b = train(tiny_train(), tiny_model(), c);
    REQUIRE(a.log.size() == 4);
    CHECK((a.log == b.log));
    CHECK(bit_identical(*a.state.model, *b.state.model));

    auto interrupted = c;
    interrupted.checkpoint_every = 1;
    const auto dir = scrl::test::scratch_dir("trainer_resume");
    TrainOptions first;
    first.out_dir = dir;
    first.stop_after_epoch = 1;
    const auto part = train(tiny_train(), tiny_model(), interrupted, first);
    CHECK(part.state.epoch == 1);
    TrainOptions second;
    second.out_dir = dir;
    second.resume_from = dir / "checkpoints" / "epoch_001.ckpt";
    const auto rest = train(tiny_train(), tiny_model(), interrupted, second);
    CHECK(rest.state.epoch == 2);
    CHECK(bit_identical(*rest.state.model, *a.state.model));
    REQUIRE(rest.log.size() == 2);
    CHECK((rest.log[0] == a.log[2]));
    CHECK((rest.log[1] == a.log[3]));
    const auto on_disk = read_step_log(dir / "train_log.jsonl");
    REQUIRE(on_disk.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(on_disk[i].batch_hash == a.log[i].batch_hash);
      CHECK(on_disk[i].losses.total == doctest::Approx(a.log[i].losses.total).epsilon(1e-12));
    }

    auto other = c;
    other.seed = 2;
    CHECK((train(tiny_train(), tiny_model(), other).log != a.log));
  }

  TEST_CASE("resuming under another model is refused") {
    const auto dir = scrl::test::scratch_dir("trainer_mismatch");
    TrainOptions o;
    o.out_dir = dir;
    train(tiny_train(), tiny_model(), tiny_config(Setting::Baseline, 1), o);
    auto wider = tiny_model();
    wider.attention_temperature = 2.0;
    TrainOptions r;
    r.resume_from = dir / "model.ckpt";
    CHECK_THROWS_WITH_AS(train(tiny_train(), wider, tiny_config(Setting::Baseline, 2), r),
                         doctest::Contains("another model"), Error);
  }

  TEST_CASE("the baseline loss decreases") {
    std::vector<double> ratios;
    for (std::uint64_t seed : {1, 2, 3}) {
      auto c = tiny_config(Setting::Baseline, 1);
      c.steps_per_epoch = 120;
      c.augment = false;
      c.seed = seed;
      const auto r = train(tiny_train(), tiny_model(), c);
      double head = 0, tail = 0;
      for (int i = 0; i < 10; ++i) {
        head += r.log[i].losses.total;
        tail += r.log[r.log.size() - 1 - i].losses.total;
      }
      ratios.push_back(tail / head);
    }
    std::sort(ratios.begin(), ratios.end());
    CHECK(ratios[1] < 0.5);
  }
}
