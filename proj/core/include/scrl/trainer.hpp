#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scrl/checkpoint.hpp"
#include "scrl/losses.hpp"
#include "scrl/model.hpp"
#include "scrl/rng.hpp"
#include "scrl/setting.hpp"
#include "scrl/synthdata.hpp"

namespace scrl {

struct TrainConfig {
  int epochs = 120;
  double base_lr = 0.00035;
  double classifier_lr = 0.0007;
  int warmup_epochs = 10;
  std::vector<int> milestones{40, 60};
  double decay = 0.1;  // multiplier applied at each milestone
  double weight_decay = 5e-4;  // non-classifier parameters only
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  PkSpec pk;
  Setting setting = Setting::Full;
  bool baseline_terms = false;  // keep the plain appearance terms under AFE stage 2
  std::uint64_t seed = 1;
  int checkpoint_every = 0;  // epochs between checkpoints; 0 keeps only the final one
  int steps_per_epoch = 0;   // 0 -> ceil(N / (2 P Kv))
  bool augment = true;
  AugmentConfig augmentation;
  ShapeEncoding shape_encoding = ShapeEncoding::MultiPart;

  // Schedule suited to the toy preset on the default synthetic dataset.
  static TrainConfig toy();
  static TrainConfig for_preset(std::string_view preset);

  void validate() const;
  int resolve_steps_per_epoch(std::size_t num_train_images) const;
};

template <class F>
void visit_fields(TrainConfig& c, F&& f) {
  f("epochs", c.epochs);
  f("base_lr", c.base_lr);
  f("classifier_lr", c.classifier_lr);
  f("warmup_epochs", c.warmup_epochs);
  f("milestones", c.milestones);
  f("decay", c.decay);
  f("weight_decay", c.weight_decay);
  f("adam_beta1", c.adam_beta1);
  f("adam_beta2", c.adam_beta2);
  f("adam_eps", c.adam_eps);
  f("pk_identities", c.pk.identities);
  f("pk_visible", c.pk.visible_per_id);
  f("pk_infrared", c.pk.infrared_per_id);
  f("setting", c.setting);
  f("baseline_terms", c.baseline_terms);
  f("seed", c.seed);
  f("checkpoint_every", c.checkpoint_every);
  f("steps_per_epoch", c.steps_per_epoch);
  f("augment", c.augment);
  f("shape_encoding", c.shape_encoding);
}

enum class LrRole { Network, Classifier };

// Linear warmup from base/10 over warmup_epochs, then multiplied by `decay`
// at every milestone reached.
double lr_at(int epoch, const TrainConfig& config, LrRole role);

// Adam with per-group learning rate and L2 weight decay folded into the
// gradient. Parameters whose gradient is undefined after backward are left
// untouched, moments included.
class Adam {
 public:
  struct Group {
    std::string name;
    std::vector<std::pair<std::string, torch::Tensor>> params;
    double weight_decay = 0.0;
  };

  Adam(std::vector<Group> groups, double beta1, double beta2, double eps);

  void zero_grad();
  void step(std::span<const double> group_lrs);

  const std::vector<Group>& groups() const { return groups_; }

  void store(TensorArchive& archive, const std::string& prefix) const;
  void restore(const TensorArchive& archive, const std::string& prefix);

 private:
  struct Slot {
    torch::Tensor m, v;
    std::int64_t steps = 0;
  };
  std::vector<Group> groups_;
  std::vector<std::vector<Slot>> slots_;
  double beta1_, beta2_, eps_;
};

struct TrainState {
  ModelConfig model_config;
  TrainConfig config;
  ScrlModel model{nullptr};
  std::unique_ptr<Adam> optimizer;
  int epoch = 0;           // completed epochs
  std::int64_t step = 0;   // completed steps
  Rng sampler_rng;
  Rng augment_rng;
};

// Fresh state: weights from `config.seed`, sampler and augmentation streams
// derived from the same seed.
TrainState make_train_state(const ModelConfig& model_config, const TrainConfig& config);

void save_checkpoint(const TrainState& state, const std::filesystem::path& path,
                     const std::string& config_header = {});
// Restores a state written by save_checkpoint, configs included.
TrainState load_checkpoint(const std::filesystem::path& path);
// Model-only restore for inference; returns the model in eval mode.
ScrlModel load_model(const std::filesystem::path& path, ModelConfig* model_config = nullptr,
                     TrainConfig* train_config = nullptr);

// Training images, masks and labels resized to the network input and held in
// memory.
class SampleCache {
 public:
  SampleCache(const Dataset& dataset, int height, int width);

  std::size_t size() const { return images_.size(); }
  const DatasetManifest& manifest() const { return manifest_; }
  const torch::Tensor& image(std::size_t i) const { return images_.at(i); }
  const torch::Tensor& mask(std::size_t i) const { return masks_.at(i); }

 private:
  DatasetManifest manifest_;
  std::vector<torch::Tensor> images_;
  std::vector<torch::Tensor> masks_;
};

struct Batch {
  torch::Tensor images;        // [B, 3, H, W]
  torch::Tensor shape_images;  // [B, 3, H, W] encoded masks
  torch::Tensor labels;        // int64 [B]
  std::vector<Modality> modalities;
  std::vector<std::size_t> indices;
  std::uint64_t hash = 0;      // over the record indices
};

std::uint64_t hash_indices(std::span<const std::size_t> indices);

Batch assemble_batch(const SampleCache& cache, std::span<const std::size_t> indices,
                     const TrainConfig& config, Rng& augment_rng);

struct StepRecord {
  int epoch = 0;
  std::int64_t step = 0;  // 1-based
  double lr = 0.0;
  double lr_classifier = 0.0;
  std::uint64_t batch_hash = 0;
  LossReport losses;

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct EpochSummary {
  int epoch = 0;
  int steps = 0;
  LossReport mean;  // per-term means over the epoch
};

// One forward/backward/update with the learning rates of state.epoch.
StepRecord train_step(const Batch& batch, TrainState& state);

struct TrainOptions {
  std::filesystem::path out_dir;   // empty: nothing written
  std::string config_header;       // embedded in checkpoints and the log
  std::optional<std::filesystem::path> resume_from;
  int stop_after_epoch = -1;       // stop once this many epochs are complete (interruption tests)
  std::function<void(const EpochSummary&)> on_epoch;
};

struct TrainResult {
  TrainState state;
  std::vector<StepRecord> log;
  std::vector<EpochSummary> epochs;
};

TrainResult train(const Dataset& train_set, const ModelConfig& model_config, const TrainConfig& config,
                  const TrainOptions& options = {});

// JSON-lines log I/O. The first line is a header record carrying the config.
std::string step_record_json(const StepRecord& r);
std::string epoch_summary_json(const EpochSummary& s);
std::vector<StepRecord> read_step_log(const std::filesystem::path& path);

}  // namespace scrl
