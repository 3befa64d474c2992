#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <scrl/evaluator.hpp>
#include <scrl/model.hpp>
#include <scrl/synthdata.hpp>
#include <scrl/trainer.hpp>

namespace scrl::cli {

// Everything a subcommand needs. Defaults come from the preset, then the
// config file, then command-line flags.
struct RunConfig {
  std::string preset = "toy";
  std::filesystem::path out_dir = "runs/default";
  std::filesystem::path data_dir;    // empty -> out_dir / "data"
  std::filesystem::path checkpoint;  // empty -> out_dir / "train" / "model.ckpt"
  std::filesystem::path resume;      // train: continue from this epoch checkpoint; flag only
  std::uint64_t seed = 1;
  bool plots = false;
  Composition composition = Composition::AppShape;
  bool composition_given = false;  // set by file or flag; otherwise adapted to the trained setting
  std::string protocol = "ir-to-vis";
  std::vector<Setting> ablate_settings{Setting::Baseline, Setting::WithSfp, Setting::WithSfpIsr, Setting::Full,
                                       Setting::FullMinusS1};
  std::vector<int> ablate_seeds{1, 2, 3};

  SynthConfig synth;
  ModelConfig model;
  TrainConfig train;

  std::filesystem::path resolved_data_dir() const;
  std::filesystem::path resolved_checkpoint() const;

  // Resolved config as sectioned key = value text; parse_config reads it back.
  std::string to_ini() const;
  void validate() const;
};

// Values given on the command line. Unset members leave the merged value.
struct FlagOverrides {
  std::optional<std::string> preset;
  std::optional<std::string> out_dir;
  std::optional<std::string> data_dir;
  std::optional<std::string> checkpoint;
  std::optional<std::string> resume;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<std::string> setting;
  std::optional<std::string> composition;
  std::optional<std::string> protocol;
  std::optional<std::string> plots;  // on / off
  std::optional<std::string> settings;  // ablation list, comma separated
  std::optional<std::string> seeds;
};

RunConfig parse_config(const std::optional<std::filesystem::path>& file, const FlagOverrides& flags);
RunConfig parse_config_text(const std::string& text, const FlagOverrides& flags);

RunConfig defaults_for_preset(const std::string& preset);

int cmd_generate(const RunConfig& config, std::ostream& out);
int cmd_train(const RunConfig& config, std::ostream& out);
int cmd_evaluate(const RunConfig& config, std::ostream& out);
int cmd_ablate(const RunConfig& config, std::ostream& out);
int cmd_audit(const RunConfig& config, std::ostream& out);

// Parameter / multiply-add rows of the audit table.
struct AuditRow {
  std::string name;
  Complexity cost;
  bool inference = true;  // false for training-only modules
};
std::vector<AuditRow> audit_rows(const ModelConfig& model);
std::string format_audit(const std::vector<AuditRow>& rows);

// Report emission.
std::string format_results_table(const std::vector<EvalResult>& results);
std::string format_ablation_table(const AblationTable& table);
std::string results_dump(const std::vector<EvalResult>& results, const std::string& config_header);
std::vector<EvalResult> parse_results_dump(const std::string& text);
std::string ablation_dump(const AblationTable& table, const std::string& config_header);
std::string cmc_svg(const std::vector<EvalResult>& results);

struct ReportPaths {
  std::filesystem::path table;
  std::filesystem::path dump;
  std::optional<std::filesystem::path> plot;
};
// Writes results.txt, results.json and, with plots on, cmc.svg under dir;
// echoes the table to `out`. Throws on an empty result list.
ReportPaths emit_report(const std::vector<EvalResult>& results, const AblationTable* ablation,
                        const std::filesystem::path& dir, bool plots, const std::string& config_header,
                        std::ostream& out);

// Entry point used by main(); returns the process exit status.
int run(int argc, char** argv);

}  // namespace scrl::cli
