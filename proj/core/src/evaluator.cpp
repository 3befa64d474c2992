#include "scrl/evaluator.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "scrl/error.hpp"
#include "scrl/rng.hpp"

namespace scrl {

using nlohmann::json;

std::string_view to_string(Composition c) {
  switch (c) {
    case Composition::App: return "app";
    case Composition::AppShape: return "app+shape";
    case Composition::AppShapeFuse: return "app+shape+fuse";
  }
  return "?";
}

std::optional<Composition> parse_composition(std::string_view text) {
  if (text == "app") return Composition::App;
  if (text == "app+shape") return Composition::AppShape;
  if (text == "app+shape+fuse") return Composition::AppShapeFuse;
  return std::nullopt;
}

torch::Tensor compose_descriptors(const FeatureBundle& b, Composition composition) {
  namespace F = torch::nn::functional;
  auto unit = [](const torch::Tensor& t) { return F::normalize(t, F::NormalizeFuncOptions().dim(1)); };
  std::vector<torch::Tensor> parts;
  parts.push_back(unit(b.enhanced_pooled.defined() ? b.enhanced_pooled : b.appearance_pooled));
  if (composition != Composition::App) {
    if (!b.student_pooled.defined()) {
      throw Error("evaluator", "composition " + std::string(to_string(composition)) +
                                   " needs the shape subnetwork, which this setting does not use");
    }
    parts.push_back(unit(b.student_pooled));
  }
  if (composition == Composition::AppShapeFuse) {
    if (!b.fused_pooled.defined()) {
      throw Error("evaluator", "composition app+shape+fuse needs enhancement stage 1, which this setting does not use");
    }
    parts.push_back(unit(b.fused_pooled));
  }
  return unit(torch::cat(parts, 1));
}

std::vector<Descriptor> extract_descriptors(ScrlModel& model, Setting setting, const Dataset& dataset,
                                            Composition composition, std::span<const std::size_t> indices,
                                            int batch_size) {
  std::vector<std::size_t> all;
  if (indices.empty()) {
    all.resize(dataset.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    indices = all;
  }
  if (batch_size <= 0) throw Error("evaluator", "batch_size must be positive");
  const auto& bcfg = model->config().backbone;
  torch::NoGradGuard guard;
  model->eval();

  std::vector<Descriptor> out;
  out.reserve(indices.size());
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<torch::Tensor> images;
    std::vector<Modality> modalities;
    for (std::size_t k = start; k < end; ++k) {
      auto img = dataset.image(indices[k]);
      if (img.size(1) != bcfg.input_height || img.size(2) != bcfg.input_width) {
        img = torch::nn::functional::interpolate(
                  img.unsqueeze(0), torch::nn::functional::InterpolateFuncOptions()
                                        .size(std::vector<int64_t>{bcfg.input_height, bcfg.input_width})
                                        .mode(torch::kBilinear)
                                        .align_corners(false))
                  .squeeze(0);
      }
      images.push_back(img);
      modalities.push_back(dataset.manifest().records[indices[k]].modality);
    }
    const auto bundle = model->forward_inference(torch::stack(images), modalities, setting);
    const auto desc = compose_descriptors(bundle, composition).to(torch::kFloat64).contiguous();
    const auto dim = desc.size(1);
    const double* p = desc.data_ptr<double>();
    for (std::size_t k = start; k < end; ++k) {
      const auto& r = dataset.manifest().records[indices[k]];
      Descriptor d;
      const auto row = static_cast<int64_t>(k - start);
      d.vector.assign(p + row * dim, p + (row + 1) * dim);
      d.identity = r.identity;
      d.camera = r.camera;
      d.modality = r.modality;
      d.tracklet = r.tracklet;
      out.push_back(std::move(d));
    }
  }
  return out;
}

Descriptor seq_pool(std::span<const Descriptor> frames) {
  if (frames.empty()) throw Error("evaluator", "empty tracklet");
  Descriptor out = frames.front();
  const auto dim = out.vector.size();
  std::vector<double> sum(dim, 0.0);
  for (const auto& f : frames) {
    if (f.tracklet != frames.front().tracklet || f.identity != frames.front().identity) {
      throw Error("evaluator", "frames from different tracklets pooled together");
    }
    if (f.vector.size() != dim) throw Error("evaluator", "frame descriptors differ in dimension");
    for (std::size_t i = 0; i < dim; ++i) sum[i] += f.vector[i];
  }
  double norm = 0;
  for (auto& v : sum) {
    v /= static_cast<double>(frames.size());
    norm += v * v;
  }
  norm = std::sqrt(norm);
  if (norm > 0) {
    for (auto& v : sum) v /= norm;
  }
  out.vector = std::move(sum);
  return out;
}

Ranking rank_vectors(std::span<const double> queries, std::span<const double> gallery, int dim) {
  if (dim <= 0) throw Error("evaluator", "descriptor dimension must be positive");
  Ranking r;
  r.num_queries = static_cast<int>(queries.size() / dim);
  r.num_gallery = static_cast<int>(gallery.size() / dim);
  if (r.num_gallery == 0) throw Error("evaluator", "empty gallery");
  r.distances.resize(static_cast<std::size_t>(r.num_queries) * r.num_gallery);
  r.order.resize(r.distances.size());
  for (int q = 0; q < r.num_queries; ++q) {
    const double* a = queries.data() + static_cast<std::size_t>(q) * dim;
    double* drow = r.distances.data() + static_cast<std::size_t>(q) * r.num_gallery;
    for (int g = 0; g < r.num_gallery; ++g) {
      const double* b = gallery.data() + static_cast<std::size_t>(g) * dim;
      double s = 0;
      for (int i = 0; i < dim; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
      }
      drow[g] = std::sqrt(s);
    }
    int* orow = r.order.data() + static_cast<std::size_t>(q) * r.num_gallery;
    std::iota(orow, orow + r.num_gallery, 0);
    std::stable_sort(orow, orow + r.num_gallery, [&](int x, int y) { return drow[x] < drow[y]; });
  }
  return r;
}

namespace {

std::vector<double> flatten(std::span<const Descriptor> ds, std::size_t dim) {
  std::vector<double> flat;
  flat.reserve(ds.size() * dim);
  for (const auto& d : ds) {
    if (d.vector.size() != dim) throw Error("evaluator", "descriptor dimensions differ");
    flat.insert(flat.end(), d.vector.begin(), d.vector.end());
  }
  return flat;
}

}  // namespace

Ranking rank_gallery(std::span<const Descriptor> queries, std::span<const Descriptor> gallery) {
  if (gallery.empty()) throw Error("evaluator", "empty gallery");
  const auto dim = gallery.front().vector.size();
  return rank_vectors(flatten(queries, dim), flatten(gallery, dim), static_cast<int>(dim));
}

QueryMetrics query_metrics(const Ranking& ranking, std::span<const int> query_labels,
                           std::span<const int> gallery_labels, const ExclusionFn& exclude) {
  if (static_cast<int>(query_labels.size()) != ranking.num_queries ||
      static_cast<int>(gallery_labels.size()) != ranking.num_gallery) {
    throw Error("evaluator", "label arrays do not match the ranking");
  }
  QueryMetrics m;
  for (int q = 0; q < ranking.num_queries; ++q) {
    int rank = 0;  // position among non-excluded entries
    int hits = 0;
    int first = -1, last = -1;
    double precision_sum = 0;
    for (int k = 0; k < ranking.num_gallery; ++k) {
      const int g = ranking.at(q, k);
      if (exclude && exclude(q, g)) continue;
      ++rank;
      if (gallery_labels[g] == query_labels[q]) {
        ++hits;
        if (first < 0) first = rank - 1;
        last = rank;
        precision_sum += static_cast<double>(hits) / rank;
      }
    }
    if (hits == 0) {
      ++m.skipped;
      continue;
    }
    m.valid_queries.push_back(q);
    m.first_hit.push_back(first);
    m.ap.push_back(precision_sum / hits);
    m.inp.push_back(static_cast<double>(hits) / last);
  }
  if (m.valid_queries.empty()) throw Error("evaluator", "no query has a positive in the gallery");
  return m;
}

std::vector<double> cmc_from_first_hits(std::span<const int> first_hit, int max_rank) {
  if (max_rank <= 0) throw Error("evaluator", "max_rank must be positive");
  if (first_hit.empty()) throw Error("evaluator", "no valid queries");
  std::vector<double> counts(static_cast<std::size_t>(max_rank), 0.0);
  for (int f : first_hit) {
    if (f < max_rank) counts[f] += 1;
  }
  std::vector<double> cmc(counts.size());
  double run = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    run += counts[k];
    cmc[k] = run / static_cast<double>(first_hit.size());
  }
  return cmc;
}

namespace {

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::vector<double> cmc_curve(const Ranking& ranking, std::span<const int> query_labels,
                              std::span<const int> gallery_labels, int max_rank, const ExclusionFn& exclude) {
  return cmc_from_first_hits(query_metrics(ranking, query_labels, gallery_labels, exclude).first_hit, max_rank);
}

double mean_ap(const Ranking& ranking, std::span<const int> query_labels, std::span<const int> gallery_labels,
               const ExclusionFn& exclude) {
  return mean_of(query_metrics(ranking, query_labels, gallery_labels, exclude).ap);
}

double m_inp(const Ranking& ranking, std::span<const int> query_labels, std::span<const int> gallery_labels,
             const ExclusionFn& exclude) {
  return mean_of(query_metrics(ranking, query_labels, gallery_labels, exclude).inp);
}

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

Protocol Protocol::named(std::string_view name) {
  Protocol p;
  p.name = std::string(name);
  if (name == "ir-to-vis") return p;
  if (name == "vis-to-ir") {
    p.query_modality = Modality::Visible;
    p.gallery_modality = Modality::Infrared;
    return p;
  }
  if (name == "indoor") {
    p.gallery_cameras = {0};
    return p;
  }
  if (name == "ir-to-vis-single-shot") {
    p.single_shot = true;
    return p;
  }
  if (name == "video") {
    p.video = true;
    return p;
  }
  throw Error("evaluator", "unknown protocol '" + std::string(name) + "'");
}

std::vector<std::string> Protocol::names() {
  return {"ir-to-vis", "vis-to-ir", "indoor", "ir-to-vis-single-shot", "video"};
}

namespace {

std::vector<Descriptor> pool_tracklets(const std::vector<Descriptor>& frames) {
  std::map<std::tuple<int, int, int, int>, std::vector<Descriptor>> groups;
  std::vector<std::tuple<int, int, int, int>> order;
  for (const auto& d : frames) {
    if (!d.tracklet) throw Error("evaluator", "video protocol needs tracklet ids on every record");
    const auto key = std::make_tuple(d.identity, d.camera, static_cast<int>(d.modality), *d.tracklet);
    auto [it, inserted] = groups.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.push_back(d);
  }
  std::vector<Descriptor> out;
  for (const auto& k : order) out.push_back(seq_pool(groups[k]));
  return out;
}

bool camera_allowed(const std::vector<int>& filter, int camera) {
  return filter.empty() || std::find(filter.begin(), filter.end(), camera) != filter.end();
}

}  // namespace

EvalResult evaluate_descriptors(std::span<const Descriptor> queries, std::span<const Descriptor> gallery,
                                const Protocol& protocol) {
  std::vector<int> ql, gl;
  for (const auto& d : queries) ql.push_back(d.identity);
  for (const auto& d : gallery) gl.push_back(d.identity);
  const auto ranking = rank_gallery(queries, gallery);
  ExclusionFn exclude;
  if (protocol.exclude_same_camera) {
    exclude = [&](int q, int g) {
      return queries[q].identity == gallery[g].identity && queries[q].camera == gallery[g].camera;
    };
  }
  const auto m = query_metrics(ranking, ql, gl, exclude);
  EvalResult r;
  r.protocol = protocol.name;
  r.cmc = cmc_from_first_hits(m.first_hit, protocol.max_rank);
  r.ap = m.ap;
  r.inp = m.inp;
  r.map = mean_of(m.ap);
  r.minp = mean_of(m.inp);
  r.num_queries = static_cast<int>(m.valid_queries.size());
  r.skipped_queries = m.skipped;
  r.gallery_size = ranking.num_gallery;
  return r;
}

EvalResult evaluate_protocol(ScrlModel& model, Setting setting, const Dataset& dataset, const Protocol& protocol,
                             Composition composition) {
  const auto& records = dataset.manifest().records;
  std::vector<int> cameras;
  for (const auto& r : records) cameras.push_back(r.camera);
  for (const auto* filter : {&protocol.query_cameras, &protocol.gallery_cameras}) {
    for (int c : *filter) {
      if (std::find(cameras.begin(), cameras.end(), c) == cameras.end()) {
        throw Error("evaluator", "protocol " + protocol.name + " references camera " + std::to_string(c) +
                                     ", absent from the dataset");
      }
    }
  }

  std::vector<std::size_t> query_idx, gallery_idx;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.modality == protocol.query_modality && camera_allowed(protocol.query_cameras, r.camera)) {
      query_idx.push_back(i);
    }
    if (r.modality == protocol.gallery_modality && camera_allowed(protocol.gallery_cameras, r.camera)) {
      gallery_idx.push_back(i);
    }
  }
  if (protocol.single_shot) {
    std::map<std::pair<int, int>, std::vector<std::size_t>> by_key;
    for (auto i : gallery_idx) by_key[{records[i].identity, records[i].camera}].push_back(i);
    Rng rng = Rng::derive(protocol.seed, 0x5e1ec7);
    gallery_idx.clear();
    for (const auto& [key, idx] : by_key) gallery_idx.push_back(idx[rng.below(idx.size())]);
    std::sort(gallery_idx.begin(), gallery_idx.end());
  }
  if (query_idx.empty()) throw Error("evaluator", "protocol " + protocol.name + " selects no queries");
  if (gallery_idx.empty()) throw Error("evaluator", "empty gallery");

  auto queries = extract_descriptors(model, setting, dataset, composition, query_idx);
  auto gallery = extract_descriptors(model, setting, dataset, composition, gallery_idx);
  if (protocol.video) {
    queries = pool_tracklets(queries);
    gallery = pool_tracklets(gallery);
  }
  auto r = evaluate_descriptors(queries, gallery, protocol);
  r.setting = std::string(to_string(setting));
  r.composition = std::string(to_string(composition));
  return r;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string EvalResult::to_json() const {
  json j;
  j["protocol"] = protocol;
  j["setting"] = setting;
  j["composition"] = composition;
  j["cmc"] = cmc;
  j["map"] = map;
  j["minp"] = minp;
  j["num_queries"] = num_queries;
  j["skipped_queries"] = skipped_queries;
  j["gallery_size"] = gallery_size;
  j["ap"] = ap;
  j["inp"] = inp;
  return j.dump(2);
}

EvalResult EvalResult::from_json(const std::string& text) {
  EvalResult r;
  try {
    const auto j = json::parse(text);
    r.protocol = j.at("protocol").get<std::string>();
    r.setting = j.at("setting").get<std::string>();
    r.composition = j.at("composition").get<std::string>();
    r.cmc = j.at("cmc").get<std::vector<double>>();
    r.map = j.at("map").get<double>();
    r.minp = j.at("minp").get<double>();
    r.num_queries = j.at("num_queries").get<int>();
    r.skipped_queries = j.at("skipped_queries").get<int>();
    r.gallery_size = j.at("gallery_size").get<int>();
    r.ap = j.at("ap").get<std::vector<double>>();
    r.inp = j.at("inp").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw Error("evaluator", std::string("malformed result: ") + e.what());
  }
  return r;
}

void write_descriptors(const std::filesystem::path& path, std::span<const Descriptor> descriptors) {
  std::ofstream os(path);
  if (!os) throw Error("evaluator", "cannot write " + path.string());
  const std::size_t dim = descriptors.empty() ? 0 : descriptors.front().vector.size();
  os << "scrl-descriptors 1\ndim " << dim << "\ncount " << descriptors.size() << '\n';
  os.precision(17);
  for (const auto& d : descriptors) {
    os << d.identity << ' ' << d.camera << ' ' << to_string(d.modality) << ' ';
    if (d.tracklet) {
      os << *d.tracklet;
    } else {
      os << '-';
    }
    for (double v : d.vector) os << ' ' << v;
    os << '\n';
  }
  if (!os) throw Error("evaluator", "write failed for " + path.string());
}

std::vector<Descriptor> read_descriptors(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("evaluator", "missing descriptor file " + path.string());
  std::string magic, word;
  std::getline(is, magic);
  if (magic != "scrl-descriptors 1") throw Error("evaluator", path.string() + " is not a descriptor dump");
  std::size_t dim = 0, count = 0;
  is >> word >> dim >> word >> count;
  std::vector<Descriptor> out(count);
  for (auto& d : out) {
    std::string modality, tracklet;
    is >> d.identity >> d.camera >> modality >> tracklet;
    const auto m = parse_modality(modality);
    if (!m) throw Error("evaluator", "bad modality '" + modality + "' in " + path.string());
    d.modality = *m;
    if (tracklet != "-") d.tracklet = std::stoi(tracklet);
    d.vector.resize(dim);
    for (auto& v : d.vector) is >> v;
  }
  if (!is) throw Error("evaluator", "truncated descriptor file " + path.string());
  return out;
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

const AblationSummary& AblationTable::of(Setting s) const {
  for (const auto& row : summary) {
    if (row.setting == s) return row;
  }
  throw Error("evaluator", "setting " + std::string(to_string(s)) + " not in the ablation table");
}

Composition composition_for(Setting setting, Composition requested) {
  const auto c = components_of(setting);
  if (!c.sfp) return Composition::App;
  if (requested == Composition::AppShapeFuse && !c.afe_s1) return Composition::AppShape;
  return requested;
}

std::vector<AblationSummary> summarize_rows(std::span<const AblationRow> rows, std::span<const Setting> order) {
  std::vector<AblationSummary> out;
  for (auto s : order) {
    std::vector<double> r1, mp, mi;
    for (const auto& row : rows) {
      if (row.setting != s) continue;
      r1.push_back(row.result.rank(1));
      mp.push_back(row.result.map);
      mi.push_back(row.result.minp);
    }
    AblationSummary sum;
    sum.setting = s;
    sum.runs = static_cast<int>(r1.size());
    auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
      if (v.empty()) return;
      mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double ss = 0;
      for (double x : v) ss += (x - mean) * (x - mean);
      sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    };
    stats(r1, sum.rank1_mean, sum.rank1_sd);
    stats(mp, sum.map_mean, sum.map_sd);
    stats(mi, sum.minp_mean, sum.minp_sd);
    out.push_back(sum);
  }
  return out;
}

AblationTable ablation_run(const Dataset& train_set, const Dataset& test_set, const ModelConfig& model_config,
                           const TrainConfig& train_config, std::span<const Setting> settings,
                           std::span<const std::uint64_t> seeds, const AblationOptions& options) {
  if (settings.empty() || seeds.empty()) throw Error("evaluator", "ablation needs at least one setting and one seed");
  AblationTable table;
  for (auto setting : settings) {
    for (auto seed : seeds) {
      TrainConfig tc = train_config;
      tc.setting = setting;
      tc.seed = seed;
      TrainOptions to;
      if (!options.out_dir.empty()) {
        to.out_dir = options.out_dir / (std::string(to_string(setting)) + "_seed" + std::to_string(seed));
      }
      auto trained = train(train_set, model_config, tc, to);
      AblationRow row;
      row.setting = setting;
      row.seed = seed;
      std::vector<std::size_t> hashes;
      for (const auto& rec : trained.log) hashes.push_back(static_cast<std::size_t>(rec.batch_hash));
      row.batch_sequence_hash = hash_indices(hashes);
      row.result = evaluate_protocol(trained.state.model, setting, test_set, options.protocol,
                                     composition_for(setting, options.composition));
      if (!to.out_dir.empty()) {
        std::ofstream(to.out_dir / "eval.json") << row.result.to_json() << '\n';
      }
      if (options.on_row) options.on_row(row);
      table.rows.push_back(std::move(row));
    }
  }
  table.summary = summarize_rows(table.rows, settings);
  return table;
}

}  // namespace scrl
