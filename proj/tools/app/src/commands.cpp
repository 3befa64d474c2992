#include <scrl/error.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "scrl_cli/cli.hpp"

namespace scrl::cli {

namespace {

void write_run_config(const RunConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "run_config.ini") << config.to_ini();
}

std::string loss_line(const LossReport& r) {
  std::ostringstream os;
  os.precision(4);
  os << "total " << r.total;
  for (int i = 0; i < kNumLossTerms; ++i) {
    if (r.values[i]) os << "  " << loss_name(static_cast<LossTerm>(i)) << ' ' << *r.values[i];
  }
  return os.str();
}

Protocol protocol_of(const RunConfig& config) {
  auto p = Protocol::named(config.protocol);
  p.seed = config.seed;
  return p;
}

ModelConfig model_for(const RunConfig& config, const Dataset& train_set) {
  ModelConfig m = config.model;
  m.num_identities = train_set.manifest().num_identities;
  return m;
}

}  // namespace

int cmd_generate(const RunConfig& config, std::ostream& out) {
  const auto dir = config.resolved_data_dir();
  const auto g = generate_dataset(config.synth, dir);
  write_run_config(config, dir);
  out << "wrote " << g.train.records.size() << " training and " << g.test.records.size() << " test images ("
      << config.synth.num_identities << " identities) to " << dir.string() << '\n';
  return 0;
}

int cmd_train(const RunConfig& config, std::ostream& out) {
  const auto train_set = Dataset::open(config.resolved_data_dir() / "train.manifest");
  const auto dir = config.out_dir / "train";
  write_run_config(config, dir);
  TrainOptions options;
  options.out_dir = dir;
  options.config_header = config.to_ini();
  if (!config.resume.empty()) options.resume_from = config.resume;
  options.on_epoch = [&](const EpochSummary& s) {
    out << "epoch " << s.epoch + 1 << '/' << config.train.epochs << "  " << loss_line(s.mean) << '\n';
    out.flush();
  };
  const auto start = std::chrono::steady_clock::now();
  const auto result = train(train_set, model_for(config, train_set), config.train, options);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out << "trained " << to_string(config.train.setting) << " for " << result.state.step << " steps in " << secs
      << " s; checkpoint " << (dir / "model.ckpt").string() << '\n';
  return 0;
}

int cmd_evaluate(const RunConfig& config, std::ostream& out) {
  const auto ckpt = config.resolved_checkpoint();
  if (!std::filesystem::exists(ckpt)) throw Error("cli", "checkpoint not found: " + ckpt.string());
  TrainConfig trained_with;
  auto model = load_model(ckpt, nullptr, &trained_with);
  const auto test_set =
      Dataset::open(config.resolved_data_dir() / "test.manifest", LoadOptions{.require_masks = false});
  const auto composition =
      config.composition_given ? config.composition : composition_for(trained_with.setting, config.composition);
  const auto result = evaluate_protocol(model, trained_with.setting, test_set, protocol_of(config), composition);
  const auto dir = config.out_dir / "eval";
  write_run_config(config, dir);
  emit_report({result}, nullptr, dir, config.plots, config.to_ini(), out);
  const auto descriptors = extract_descriptors(model, trained_with.setting, test_set, composition);
  write_descriptors(dir / "descriptors.txt", descriptors);
  out << "results written to " << dir.string() << '\n';
  return 0;
}

int cmd_ablate(const RunConfig& config, std::ostream& out) {
  const auto train_set = Dataset::open(config.resolved_data_dir() / "train.manifest");
  const auto test_set =
      Dataset::open(config.resolved_data_dir() / "test.manifest", LoadOptions{.require_masks = false});
  const auto dir = config.out_dir / "ablation";
  write_run_config(config, dir);
  AblationOptions options;
  options.protocol = protocol_of(config);
  options.composition = config.composition;
  options.out_dir = dir;
  options.on_row = [&](const AblationRow& row) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-8s seed %-4llu R1 %6.2f  mAP %6.2f  mINP %6.2f\n",
                  std::string(to_string(row.setting)).c_str(), static_cast<unsigned long long>(row.seed),
                  100 * row.result.rank(1), 100 * row.result.map, 100 * row.result.minp);
    out << line;
    out.flush();
  };
  std::vector<std::uint64_t> seeds(config.ablate_seeds.begin(), config.ablate_seeds.end());
  const auto table = ablation_run(train_set, test_set, model_for(config, train_set), config.train,
                                  config.ablate_settings, seeds, options);
  std::vector<EvalResult> results;
  for (const auto& row : table.rows) results.push_back(row.result);
  emit_report(results, &table, dir, config.plots, config.to_ini(), out);
  return 0;
}

std::vector<AuditRow> audit_rows(const ModelConfig& model) {
  const auto& b = model.backbone;
  const auto bb = count_params_flops(b, b.input_height, b.input_width);
  const auto ic = count_inference_complexity(model, b.input_height, b.input_width);
  std::vector<AuditRow> rows;
  rows.push_back({"F_a appearance network", ic.appearance, true});
  rows.push_back({"F_s shape stream", ic.shape_stream, false});
  rows.push_back({"F_s~ shape subnetwork", bb.shape_subnet, true});
  rows.push_back({"ISR stage 1", ic.isr_stage1, false});
  rows.push_back({"ISR stage 2", ic.isr_stage2, false});
  rows.push_back({"AFE stage 1", ic.afe_stage1, true});
  rows.push_back({"AFE stage 2", ic.afe_stage2, true});
  rows.push_back({"setting 1: baseline (F_a)", ic.appearance, true});
  rows.push_back({"setting 2: F_a + F_s, concatenated", ic.appearance + ic.shape_stream, true});
  rows.push_back({"setting 3: B+S (F_a + F_s~)", ic.appearance_with_subnet, true});
  rows.push_back({"setting 4: full (F_a + F_s~ + AFE)", ic.appearance_with_subnet + ic.afe_stage1 + ic.afe_stage2,
                  true});
  return rows;
}

std::string format_audit(const std::vector<AuditRow>& rows) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof(line), "%-38s %14s %10s %14s %10s\n", "module / setting", "params", "params/M",
                "mult-adds", "GMACs");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%-38s %14lld %10.2f %14lld %10.2f%s\n", r.name.c_str(),
                  static_cast<long long>(r.cost.params), r.cost.params / 1e6, static_cast<long long>(r.cost.macs),
                  r.cost.macs / 1e9, r.inference ? "" : "  (training only)");
    os << line;
  }
  return os.str();
}

int cmd_audit(const RunConfig& config, std::ostream& out) {
  const auto& b = config.model.backbone;
  const auto rows = audit_rows(config.model);
  out << "preset " << b.preset << ", input " << b.input_height << "x" << b.input_width << ", last stride "
      << b.last_stride << "\n";
  out << format_audit(rows);
  const auto& full = rows.back().cost;
  const auto afe = rows[5].cost + rows[6].cost;
  char line[160];
  std::snprintf(line, sizeof(line), "AFE share of setting 4: %.2f%% of params, %.2f%% of mult-adds\n",
                100.0 * afe.params / full.params, 100.0 * afe.macs / full.macs);
  out << line;
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"Shape-centered representation learning for visible-infrared person re-identification"};
  app.require_subcommand(1);

  std::optional<std::string> config_file;
  FlagOverrides flags;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "sectioned key = value config file");
    sub->add_option("--out", flags.out_dir, "output directory");
    sub->add_option("--data", flags.data_dir, "dataset directory (default <out>/data)");
    sub->add_option("--seed", flags.seed, "master seed for data, weights and batches");
    sub->add_option("--preset", flags.preset, "backbone preset")->check(CLI::IsMember({"toy", "resnet50-like"}));
    sub->add_option("--setting", flags.setting, "ablation setting: B, B+S, B+S+I, full, full-S1");
    sub->add_option("--epochs", flags.epochs, "training epochs");
    sub->add_option("--composition", flags.composition, "descriptor parts: app, app+shape, app+shape+fuse");
    sub->add_option("--protocol", flags.protocol, "evaluation protocol");
    sub->add_option("--plots", flags.plots, "write CMC plots (on/off)");
  };

  auto* gen = app.add_subcommand("generate", "render the synthetic paired-modality dataset");
  auto* tr = app.add_subcommand("train", "train one setting");
  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on the test split");
  auto* ab = app.add_subcommand("ablate", "train and evaluate several settings over several seeds");
  auto* au = app.add_subcommand("audit", "print parameter and multiply-add counts");
  for (auto* s : {gen, tr, ev, ab, au}) add_common(s);
  tr->add_option("--resume", flags.resume, "epoch checkpoint to continue from (see [train] checkpoint_every)");
  ev->add_option("--checkpoint", flags.checkpoint, "checkpoint (default <out>/train/model.ckpt)");
  ab->add_option("--settings", flags.settings, "comma-separated settings");
  ab->add_option("--seeds", flags.seeds, "comma-separated seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    std::optional<std::filesystem::path> file;
    if (config_file) file = *config_file;
    const auto config = parse_config(file, flags);
    if (gen->parsed()) return cmd_generate(config, std::cout);
    if (tr->parsed()) return cmd_train(config, std::cout);
    if (ev->parsed()) return cmd_evaluate(config, std::cout);
    if (ab->parsed()) return cmd_ablate(config, std::cout);
    return cmd_audit(config, std::cout);
  } catch (const Error& e) {
    std::cerr << "error [" << e.module() << "]: " << e.detail() << '\n';
  } catch (const c10::Error& e) {
    std::cerr << "error [torch]: " << e.what_without_backtrace() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
  }
  return 1;
}

}  // namespace scrl::cli
