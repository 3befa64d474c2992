#include "scrl/trainer.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

#include "scrl/config_io.hpp"
#include "scrl/error.hpp"

namespace scrl {

using nlohmann::json;

TrainConfig TrainConfig::toy() {
  TrainConfig c;
  c.epochs = 30;
  c.warmup_epochs = 3;
  c.milestones = {20, 25};
  // At 64x32 random erasing and grayscale wipe out most of the signal a
  // 240-step run can learn from.
  c.augmentation.erase_probability = 0.0;
  c.augmentation.gray_probability = 0.0;
  return c;
}

TrainConfig TrainConfig::for_preset(std::string_view preset) {
  if (preset == "toy") return toy();
  if (preset == "resnet50-like") return TrainConfig{};
  throw Error("trainer", "unknown preset '" + std::string(preset) + "'");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error("trainer", what); };
  if (epochs < 0) fail("epochs must be >= 0");
  if (!(base_lr > 0) || !(classifier_lr > 0)) fail("learning rates must be positive");
  if (warmup_epochs < 0) fail("warmup_epochs must be >= 0");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (i > 0 && milestones[i] <= milestones[i - 1]) fail("milestones must be strictly increasing");
  }
  if (!milestones.empty() && warmup_epochs >= milestones.front()) {
    fail("warmup_epochs (" + std::to_string(warmup_epochs) + ") must be below the first milestone (" +
         std::to_string(milestones.front()) + ")");
  }
  if (!(decay > 0) || decay > 1) fail("decay must lie in (0, 1]");
  if (weight_decay < 0) fail("weight_decay must be >= 0");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) {
    fail("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0)) fail("adam_eps must be positive");
  if (pk.identities <= 0 || pk.visible_per_id <= 0 || pk.infrared_per_id <= 0) {
    fail("PK batch needs P, Kv, Ki > 0");
  }
  if (checkpoint_every < 0 || steps_per_epoch < 0) fail("checkpoint_every and steps_per_epoch must be >= 0");
}

int TrainConfig::resolve_steps_per_epoch(std::size_t num_train_images) const {
  if (steps_per_epoch > 0) return steps_per_epoch;
  const std::size_t per_batch = 2 * static_cast<std::size_t>(pk.identities) * pk.visible_per_id;
  return static_cast<int>((num_train_images + per_batch - 1) / per_batch);
}

double lr_at(int epoch, const TrainConfig& c, LrRole role) {
  const double base = role == LrRole::Classifier ? c.classifier_lr : c.base_lr;
  double lr = base;
  if (epoch < c.warmup_epochs) lr = base * (0.1 + 0.9 * epoch / c.warmup_epochs);
  for (int m : c.milestones) {
    if (epoch >= m) lr *= c.decay;
  }
  return lr;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

Adam::Adam(std::vector<Group> groups, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& g : groups_) slots_.emplace_back(g.params.size());
}

void Adam::zero_grad() {
  for (auto& g : groups_) {
    for (auto& [name, p] : g.params) p.mutable_grad() = torch::Tensor();
  }
}

void Adam::step(std::span<const double> group_lrs) {
  if (group_lrs.size() != groups_.size()) throw Error("trainer", "one learning rate per parameter group");
  torch::NoGradGuard guard;
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    const auto& g = groups_[gi];
    const double lr = group_lrs[gi];
    for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
      auto& p = const_cast<torch::Tensor&>(g.params[pi].second);
      const auto& grad_ref = p.grad();
      if (!grad_ref.defined()) continue;
      auto grad = grad_ref;
      if (g.weight_decay != 0) grad = grad + g.weight_decay * p;
      auto& s = slots_[gi][pi];
      if (!s.m.defined()) {
        s.m = torch::zeros_like(p);
        s.v = torch::zeros_like(p);
      }
      ++s.steps;
      s.m.mul_(beta1_).add_(grad, 1 - beta1_);
      s.v.mul_(beta2_).addcmul_(grad, grad, 1 - beta2_);
      const double bc1 = 1 - std::pow(beta1_, static_cast<double>(s.steps));
      const double bc2 = 1 - std::pow(beta2_, static_cast<double>(s.steps));
      auto denom = (s.v / bc2).sqrt_().add_(eps_);
      p.addcdiv_(s.m, denom, -lr / bc1);
    }
  }
}

void Adam::store(TensorArchive& archive, const std::string& prefix) const {
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
      const auto& s = slots_[gi][pi];
      if (s.steps == 0) continue;
      const auto base = prefix + groups_[gi].params[pi].first;
      archive.add(base + ".m", s.m);
      archive.add(base + ".v", s.v);
      archive.add(base + ".steps", torch::tensor(s.steps, torch::kInt64));
    }
  }
}

void Adam::restore(const TensorArchive& archive, const std::string& prefix) {
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
      auto& s = slots_[gi][pi];
      const auto base = prefix + groups_[gi].params[pi].first;
      const auto* steps = archive.find(base + ".steps");
      if (steps == nullptr) {
        s = Slot{};
        continue;
      }
      s.steps = steps->item<std::int64_t>();
      s.m = archive.at(base + ".m").clone();
      s.v = archive.at(base + ".v").clone();
    }
  }
}

// ---------------------------------------------------------------------------
// State and checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kSamplerStream = 0x5a3b1e;
constexpr std::uint64_t kAugmentStream = 0xa06e37;

std::unique_ptr<Adam> make_optimizer(ScrlModel& model, const TrainConfig& c) {
  std::vector<Adam::Group> groups;
  groups.push_back({"network", model->network_parameters(), c.weight_decay});
  groups.push_back({"classifier", model->classifier_parameters(), 0.0});
  return std::make_unique<Adam>(std::move(groups), c.adam_beta1, c.adam_beta2, c.adam_eps);
}

torch::Tensor string_tensor(const std::string& s) {
  auto t = torch::empty({static_cast<int64_t>(s.size())}, torch::kUInt8);
  std::memcpy(t.data_ptr(), s.data(), s.size());
  return t;
}

std::string tensor_string(const torch::Tensor& t) {
  return std::string(static_cast<const char*>(t.data_ptr()), static_cast<std::size_t>(t.numel()));
}

IniDocument config_document(const ModelConfig& m, const TrainConfig& t) {
  IniDocument doc;
  doc.sections.push_back(write_section("model", m));
  doc.sections.push_back(write_section("backbone", m.backbone));
  doc.sections.push_back(write_section("train", t));
  doc.sections.push_back(write_section("augment", t.augmentation));
  return doc;
}

void read_configs(const IniDocument& doc, ModelConfig& m, TrainConfig& t, const std::string& source) {
  auto need = [&](const char* name) -> const IniSection& {
    const auto* s = doc.find(name);
    if (s == nullptr) throw Error("checkpoint", source + " lacks section [" + name + "]");
    return *s;
  };
  read_section(need("model"), m);
  read_section(need("backbone"), m.backbone);
  read_section(need("train"), t);
  read_section(need("augment"), t.augmentation);
}

}  // namespace

TrainState make_train_state(const ModelConfig& model_config, const TrainConfig& config) {
  model_config.validate();
  config.validate();
  TrainState s;
  s.model_config = model_config;
  s.config = config;
  s.model = make_model(model_config, config.seed);
  s.optimizer = make_optimizer(s.model, config);
  s.sampler_rng = Rng::derive(config.seed, kSamplerStream);
  s.augment_rng = Rng::derive(config.seed, kAugmentStream);
  return s;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path,
                     const std::string& config_header) {
  TensorArchive a;
  auto doc = config_document(state.model_config, state.config);
  auto& st = doc.section("state");
  st.set("epoch", std::to_string(state.epoch));
  st.set("step", std::to_string(state.step));
  a.header = doc.str();
  store_module(a, "model.", *state.model);
  state.optimizer->store(a, "adam.");
  a.add("state.sampler_rng", string_tensor(state.sampler_rng.serialize()));
  a.add("state.augment_rng", string_tensor(state.augment_rng.serialize()));
  if (!config_header.empty()) a.add("meta.run_config", string_tensor(config_header));
  a.save(path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  const auto a = TensorArchive::load(path);
  const auto doc = IniDocument::parse(a.header, path.string());
  ModelConfig m;
  TrainConfig t;
  read_configs(doc, m, t, path.string());
  TrainState s = make_train_state(m, t);
  restore_module(a, "model.", *s.model);
  s.optimizer->restore(a, "adam.");
  const auto* st = doc.find("state");
  if (st == nullptr || st->find("epoch") == nullptr || st->find("step") == nullptr) {
    throw Error("checkpoint", path.string() + " lacks training counters");
  }
  parse_value(*st->find("epoch"), s.epoch);
  parse_value(*st->find("step"), s.step);
  s.sampler_rng.deserialize(tensor_string(a.at("state.sampler_rng")));
  s.augment_rng.deserialize(tensor_string(a.at("state.augment_rng")));
  return s;
}

ScrlModel load_model(const std::filesystem::path& path, ModelConfig* model_config, TrainConfig* train_config) {
  const auto a = TensorArchive::load(path);
  const auto doc = IniDocument::parse(a.header, path.string());
  ModelConfig m;
  TrainConfig t;
  read_configs(doc, m, t, path.string());
  auto model = make_model(m, t.seed);
  restore_module(a, "model.", *model);
  model->eval();
  if (model_config) *model_config = m;
  if (train_config) *train_config = t;
  return model;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

SampleCache::SampleCache(const Dataset& dataset, int height, int width) : manifest_(dataset.manifest()) {
  images_.reserve(dataset.size());
  masks_.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    auto s = dataset.sample(i);
    if (s.image.size(1) != height || s.image.size(2) != width) s = resize_sample(s, height, width);
    images_.push_back(s.image);
    masks_.push_back(s.shape_mask);
  }
}

std::uint64_t hash_indices(std::span<const std::size_t> indices) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto i : indices) {
    for (int b = 0; b < 8; ++b) {
      h ^= (static_cast<std::uint64_t>(i) >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

Batch assemble_batch(const SampleCache& cache, std::span<const std::size_t> indices, const TrainConfig& config,
                     Rng& augment_rng) {
  if (indices.empty()) throw Error("trainer", "empty batch");
  const auto& manifest = cache.manifest();
  std::vector<torch::Tensor> images, shapes;
  std::vector<int64_t> labels;
  Batch b;
  for (auto i : indices) {
    ModalitySample s;
    s.image = cache.image(i);
    s.shape_mask = cache.mask(i);
    if (config.augment) s = augment_joint(s, config.augmentation, augment_rng);
    images.push_back(s.image);
    shapes.push_back(encode_shape(s.shape_mask, manifest.num_labels, config.shape_encoding));
    const auto& r = manifest.records.at(i);
    labels.push_back(r.identity);
    b.modalities.push_back(r.modality);
  }
  b.images = torch::stack(images);
  b.shape_images = torch::stack(shapes);
  b.labels = torch::tensor(labels, torch::kInt64);
  b.indices.assign(indices.begin(), indices.end());
  b.hash = hash_indices(indices);
  return b;
}

// ---------------------------------------------------------------------------
// Steps and epochs
// ---------------------------------------------------------------------------

StepRecord train_step(const Batch& batch, TrainState& state) {
  const auto& c = state.config;
  const std::int64_t step_no = state.step + 1;
  StepRecord rec;
  rec.epoch = state.epoch;
  rec.step = step_no;
  rec.lr = lr_at(state.epoch, c, LrRole::Network);
  rec.lr_classifier = lr_at(state.epoch, c, LrRole::Classifier);
  rec.batch_hash = batch.hash;
  try {
    const auto loss_config = LossConfig::for_setting(c.setting, c.baseline_terms);
    state.model->train();
    state.optimizer->zero_grad();
    const auto bundle = state.model->forward_train(batch.images, batch.shape_images, batch.modalities, c.setting);
    const auto terms = state.model->compute_losses(bundle, batch.labels, loss_config);
    auto total = total_loss(terms, loss_config);
    if (!std::isfinite(total.report.total)) throw Error("trainer", "loss is not finite");
    total.total.backward();
    const double lrs[2] = {rec.lr, rec.lr_classifier};
    state.optimizer->step(lrs);
    rec.losses = total.report;
  } catch (const Error& e) {
    throw Error(e.module(), "step " + std::to_string(step_no) + ": " + e.detail());
  } catch (const c10::Error& e) {
    throw Error("trainer", "step " + std::to_string(step_no) + ": " + e.what_without_backtrace());
  }
  state.step = step_no;
  return rec;
}

namespace {

json report_json(const LossReport& r) {
  json losses = json::object();
  for (int i = 0; i < kNumLossTerms; ++i) {
    if (r.values[i]) losses[std::string(loss_name(static_cast<LossTerm>(i)))] = *r.values[i];
  }
  return losses;
}

LossReport report_from_json(const json& j) {
  LossReport r;
  for (int i = 0; i < kNumLossTerms; ++i) {
    const auto name = std::string(loss_name(static_cast<LossTerm>(i)));
    if (j.at("losses").contains(name)) r.values[i] = j.at("losses").at(name).get<double>();
  }
  r.total = j.at("total").get<double>();
  return r;
}

EpochSummary summarize(int epoch, std::span<const StepRecord> records) {
  EpochSummary s;
  s.epoch = epoch;
  s.steps = static_cast<int>(records.size());
  std::array<double, kNumLossTerms> sum{};
  std::array<int, kNumLossTerms> count{};
  for (const auto& r : records) {
    for (int i = 0; i < kNumLossTerms; ++i) {
      if (r.losses.values[i]) {
        sum[i] += *r.losses.values[i];
        ++count[i];
      }
    }
    s.mean.total += r.losses.total;
  }
  for (int i = 0; i < kNumLossTerms; ++i) {
    if (count[i]) s.mean.values[i] = sum[i] / count[i];
  }
  if (!records.empty()) s.mean.total /= static_cast<double>(records.size());
  return s;
}

// Keeps the header and every record of epochs before `epoch`.
std::vector<std::string> surviving_log_lines(const std::filesystem::path& path, int epoch) {
  std::vector<std::string> keep;
  std::ifstream is(path);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    const auto type = j.at("type").get<std::string>();
    if (type == "header" || j.at("epoch").get<int>() < epoch) keep.push_back(line);
  }
  return keep;
}

}  // namespace

std::string step_record_json(const StepRecord& r) {
  json j;
  j["type"] = "step";
  j["epoch"] = r.epoch;
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["lr_classifier"] = r.lr_classifier;
  j["batch_hash"] = r.batch_hash;
  j["losses"] = report_json(r.losses);
  j["total"] = r.losses.total;
  return j.dump();
}

std::string epoch_summary_json(const EpochSummary& s) {
  json j;
  j["type"] = "epoch";
  j["epoch"] = s.epoch;
  j["steps"] = s.steps;
  j["losses"] = report_json(s.mean);
  j["total"] = s.mean.total;
  return j.dump();
}

std::vector<StepRecord> read_step_log(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("trainer", "cannot open log " + path.string());
  std::vector<StepRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    if (j.at("type") != "step") continue;
    StepRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.step = j.at("step").get<std::int64_t>();
    r.lr = j.at("lr").get<double>();
    r.lr_classifier = j.at("lr_classifier").get<double>();
    r.batch_hash = j.at("batch_hash").get<std::uint64_t>();
    r.losses = report_from_json(j);
    out.push_back(r);
  }
  return out;
}

TrainResult train(const Dataset& train_set, const ModelConfig& model_config, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  model_config.validate();
  const auto& manifest = train_set.manifest();
  if (train_set.size() == 0) throw Error("trainer", "training set is empty");
  if (manifest.num_identities != model_config.num_identities) {
    throw Error("trainer", "dataset has " + std::to_string(manifest.num_identities) +
                               " identities, model expects " + std::to_string(model_config.num_identities));
  }

  TrainResult result;
  if (options.resume_from) {
    result.state = load_checkpoint(*options.resume_from);
    const auto& saved = result.state.model_config;
    if (write_section("model", saved).entries != write_section("model", model_config).entries ||
        write_section("backbone", saved.backbone).entries !=
            write_section("backbone", model_config.backbone).entries) {
      throw Error("trainer", "checkpoint " + options.resume_from->string() + " was written for another model");
    }
    result.state.config = config;
  } else {
    result.state = make_train_state(model_config, config);
  }
  auto& state = result.state;

  std::ofstream log;
  const bool write = !options.out_dir.empty();
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    const auto log_path = options.out_dir / "train_log.jsonl";
    std::vector<std::string> kept;
    if (options.resume_from && std::filesystem::exists(log_path)) {
      kept = surviving_log_lines(log_path, state.epoch);
    } else {
      json header;
      header["type"] = "header";
      header["config"] = options.config_header;
      kept.push_back(header.dump());
    }
    log.open(log_path, std::ios::trunc);
    if (!log) throw Error("trainer", "cannot write " + log_path.string());
    for (const auto& l : kept) log << l << '\n';
  }

  if (state.epoch < config.epochs) {
    const SampleCache cache(train_set, model_config.backbone.input_height, model_config.backbone.input_width);
    const PkSampler sampler(manifest, config.pk);
    const int steps = config.resolve_steps_per_epoch(train_set.size());
    while (state.epoch < config.epochs) {
      const std::size_t first = result.log.size();
      for (int s = 0; s < steps; ++s) {
        const auto indices = sampler.next(state.sampler_rng);
        const auto batch = assemble_batch(cache, indices, config, state.augment_rng);
        result.log.push_back(train_step(batch, state));
        if (write) log << step_record_json(result.log.back()) << '\n';
      }
      const auto summary =
          summarize(state.epoch, std::span(result.log).subspan(first, result.log.size() - first));
      ++state.epoch;
      result.epochs.push_back(summary);
      if (write) {
        log << epoch_summary_json(summary) << '\n';
        log.flush();
        if (config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0) {
          std::filesystem::create_directories(options.out_dir / "checkpoints");
          char name[32];
          std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", state.epoch);
          save_checkpoint(state, options.out_dir / "checkpoints" / name, options.config_header);
        }
      }
      if (options.on_epoch) options.on_epoch(summary);
      if (options.stop_after_epoch >= 0 && state.epoch >= options.stop_after_epoch) break;
    }
  }
  if (write) {
    if (!log) throw Error("trainer", "log write failed (disk full?)");
    save_checkpoint(state, options.out_dir / "model.ckpt", options.config_header);
  }
  return result;
}

}  // namespace scrl
