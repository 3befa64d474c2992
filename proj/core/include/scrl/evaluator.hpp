#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "scrl/model.hpp"
#include "scrl/setting.hpp"
#include "scrl/synthdata.hpp"
#include "scrl/trainer.hpp"

namespace scrl {

// Which pooled features form the inference descriptor. "app" is the enhanced
// appearance feature when enhancement stage 2 is active, else GeM(f).
enum class Composition { App, AppShape, AppShapeFuse };

std::string_view to_string(Composition c);
std::optional<Composition> parse_composition(std::string_view text);

// Descriptor of each row of an inference forward pass, [N, D], unit rows.
// Throws if the composition asks for a part the setting does not produce.
torch::Tensor compose_descriptors(const FeatureBundle& bundle, Composition composition);

struct Descriptor {
  std::vector<double> vector;  // unit L2 norm
  int identity = 0;
  int camera = 0;
  Modality modality = Modality::Visible;
  std::optional<int> tracklet;
};

// Runs the inference path over `indices` of `dataset` (all records when
// empty). Reads images only.
std::vector<Descriptor> extract_descriptors(ScrlModel& model, Setting setting, const Dataset& dataset,
                                            Composition composition,
                                            std::span<const std::size_t> indices = {},
                                            int batch_size = 64);

// Mean of the frame vectors, re-normalized. Frames must share one tracklet.
Descriptor seq_pool(std::span<const Descriptor> frames);

// Pairwise Euclidean distances and, per query, gallery indices sorted by
// ascending distance with ties broken by gallery index.
struct Ranking {
  int num_queries = 0;
  int num_gallery = 0;
  std::vector<double> distances;  // row-major [q, g]
  std::vector<int> order;         // row-major [q, rank]

  double distance(int q, int g) const { return distances[static_cast<std::size_t>(q) * num_gallery + g]; }
  int at(int q, int rank) const { return order[static_cast<std::size_t>(q) * num_gallery + rank]; }
};

Ranking rank_gallery(std::span<const Descriptor> queries, std::span<const Descriptor> gallery);
// Same over raw row-major vectors of dimension `dim`.
Ranking rank_vectors(std::span<const double> queries, std::span<const double> gallery, int dim);

// Gallery entries ignored for a query (same identity seen by the same
// camera under SYSU-style protocols). Empty means nothing is excluded.
using ExclusionFn = std::function<bool(int query, int gallery)>;

// Per-query metrics. Queries with no positive in the gallery are skipped and
// counted; if every query is skipped the metric functions throw.
struct QueryMetrics {
  std::vector<int> first_hit;  // 0-based rank of the first positive, per valid query
  std::vector<double> ap;
  std::vector<double> inp;
  std::vector<int> valid_queries;  // indices of queries that had a positive
  int skipped = 0;
};

QueryMetrics query_metrics(const Ranking& ranking, std::span<const int> query_labels,
                           std::span<const int> gallery_labels, const ExclusionFn& exclude = {});

std::vector<double> cmc_curve(const Ranking& ranking, std::span<const int> query_labels,
                              std::span<const int> gallery_labels, int max_rank,
                              const ExclusionFn& exclude = {});
double mean_ap(const Ranking& ranking, std::span<const int> query_labels, std::span<const int> gallery_labels,
               const ExclusionFn& exclude = {});
double m_inp(const Ranking& ranking, std::span<const int> query_labels, std::span<const int> gallery_labels,
             const ExclusionFn& exclude = {});

// cmc[k] from first-hit ranks: fraction with first_hit <= k.
std::vector<double> cmc_from_first_hits(std::span<const int> first_hit, int max_rank);

struct Protocol {
  std::string name = "ir-to-vis";
  Modality query_modality = Modality::Infrared;
  Modality gallery_modality = Modality::Visible;
  std::vector<int> query_cameras;    // empty: all
  std::vector<int> gallery_cameras;  // empty: all
  bool exclude_same_camera = false;  // drop same-identity gallery entries from the query's camera
  bool single_shot = false;          // keep one random gallery image per (identity, camera)
  std::uint64_t seed = 0;            // single-shot subsampling
  bool video = false;                // pool frames per tracklet before ranking
  int max_rank = 20;

  // "ir-to-vis" (all-search), "vis-to-ir", "indoor" (gallery camera 0),
  // "ir-to-vis-single-shot", "video".
  static Protocol named(std::string_view name);
  static std::vector<std::string> names();
};

struct EvalResult {
  std::string protocol;
  std::string setting;
  std::string composition;
  std::vector<double> cmc;  // cmc[k]: Rank-(k+1)
  double map = 0.0;
  double minp = 0.0;
  std::vector<double> ap;   // per valid query
  std::vector<double> inp;
  int num_queries = 0;      // valid queries
  int skipped_queries = 0;
  int gallery_size = 0;

  double rank(int k) const { return cmc.at(static_cast<std::size_t>(k - 1)); }

  std::string to_json() const;
  static EvalResult from_json(const std::string& text);
  friend bool operator==(const EvalResult&, const EvalResult&) = default;
};

// Metrics of query / gallery descriptors under `protocol`'s exclusion and
// ranking rules; the descriptors are already filtered.
EvalResult evaluate_descriptors(std::span<const Descriptor> queries, std::span<const Descriptor> gallery,
                                const Protocol& protocol);

// Extract -> (seq_pool) -> rank -> metrics on one split.
EvalResult evaluate_protocol(ScrlModel& model, Setting setting, const Dataset& dataset,
                             const Protocol& protocol, Composition composition);

// Descriptor dump: "scrl-descriptors 1", "dim D", "count N", then one row per
// descriptor: identity camera VIS|IR tracklet|- v_1 ... v_D.
void write_descriptors(const std::filesystem::path& path, std::span<const Descriptor> descriptors);
std::vector<Descriptor> read_descriptors(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

struct AblationRow {
  Setting setting = Setting::Baseline;
  std::uint64_t seed = 0;
  EvalResult result;
  std::uint64_t batch_sequence_hash = 0;  // over every training batch, in order
};

struct AblationSummary {
  Setting setting = Setting::Baseline;
  int runs = 0;
  double rank1_mean = 0, rank1_sd = 0;
  double map_mean = 0, map_sd = 0;
  double minp_mean = 0, minp_sd = 0;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::vector<AblationSummary> summary;  // one per setting, input order

  const AblationSummary& of(Setting s) const;
};

struct AblationOptions {
  Protocol protocol;
  // Requested composition; each setting uses the parts it produces, so the
  // baseline falls back to the appearance feature alone.
  Composition composition = Composition::AppShape;
  std::filesystem::path out_dir;  // per-run artifacts when non-empty
  std::function<void(const AblationRow&)> on_row;
};

// Composition actually used for `setting` when `requested` is asked for.
Composition composition_for(Setting setting, Composition requested);

AblationTable ablation_run(const Dataset& train_set, const Dataset& test_set, const ModelConfig& model_config,
                           const TrainConfig& train_config, std::span<const Setting> settings,
                           std::span<const std::uint64_t> seeds, const AblationOptions& options = {});

std::vector<AblationSummary> summarize_rows(std::span<const AblationRow> rows, std::span<const Setting> order);

}  // namespace scrl
