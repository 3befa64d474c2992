#include <scrl/config_io.hpp>
#include <scrl/error.hpp>

#include <algorithm>
#include <sstream>

#include "scrl_cli/cli.hpp"

namespace scrl::cli {

namespace {

std::vector<Setting> parse_settings(const std::string& text) {
  std::vector<Setting> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    if (item.empty()) continue;
    const auto s = parse_setting(item);
    if (!s) throw Error("config", "unknown setting '" + item + "' (expected B, B+S, B+S+I, full, full-S1)");
    out.push_back(*s);
  }
  if (out.empty()) throw Error("config", "empty settings list");
  return out;
}

std::string format_settings(const std::vector<Setting>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += std::string(to_string(v[i]));
  }
  return out;
}

Composition to_composition(const std::string& text) {
  const auto c = parse_composition(text);
  if (!c) throw Error("config", "unknown composition '" + text + "' (expected app, app+shape, app+shape+fuse)");
  return *c;
}

bool to_switch(const std::string& text, const char* what) {
  bool b = false;
  try {
    parse_value(text, b);
  } catch (const std::exception&) {
    throw Error("config", std::string(what) + " expects on/off, got '" + text + "'");
  }
  return b;
}

void read_run_section(const IniSection& s, RunConfig& r) {
  for (const auto& [key, value] : s.entries) {
    try {
      if (key == "preset") {
        r.preset = value;
      } else if (key == "out") {
        r.out_dir = value;
      } else if (key == "data_dir") {
        r.data_dir = value;
      } else if (key == "checkpoint") {
        r.checkpoint = value;
      } else if (key == "seed") {
        parse_value(value, r.seed);
      } else if (key == "plots") {
        r.plots = to_switch(value, "plots");
      } else if (key == "composition") {
        r.composition = to_composition(value);
        r.composition_given = true;
      } else if (key == "protocol") {
        r.protocol = value;
      } else if (key == "ablate_settings") {
        r.ablate_settings = parse_settings(value);
      } else if (key == "ablate_seeds") {
        parse_value(value, r.ablate_seeds);
      } else {
        throw_unknown_key("run", key);
      }
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      throw_bad_value("run", key, value, e.what());
    }
  }
}

// Seeds live in [run] only so one value drives data, weights and batches.
IniSection without_seed(IniSection s) {
  std::erase_if(s.entries, [](const auto& kv) { return kv.first == "seed"; });
  return s;
}

void reject_seed(const IniSection& s) {
  if (s.find("seed") != nullptr) {
    throw Error("config", "key 'seed' in section [" + s.name + "] is not accepted; set seed under [run]");
  }
}

RunConfig merge(const IniDocument* doc, const FlagOverrides& flags) {
  std::string preset = "toy";
  if (doc != nullptr) {
    if (const auto* run = doc->find("run"); run != nullptr && run->find("preset") != nullptr) {
      preset = *run->find("preset");
    }
  }
  if (flags.preset) preset = *flags.preset;
  RunConfig r = defaults_for_preset(preset);

  if (doc != nullptr) {
    for (const auto& s : doc->sections) {
      if (s.name == "run") {
        read_run_section(s, r);
      } else if (s.name == "synth") {
        reject_seed(s);
        read_section(s, r.synth);
      } else if (s.name == "backbone") {
        read_section(s, r.model.backbone);
      } else if (s.name == "model") {
        read_section(s, r.model);
      } else if (s.name == "train") {
        reject_seed(s);
        read_section(s, r.train);
      } else if (s.name == "augment") {
        read_section(s, r.train.augmentation);
      } else {
        throw Error("config", "unknown section [" + s.name + "]");
      }
    }
  }
  r.preset = preset;

  if (flags.out_dir) r.out_dir = *flags.out_dir;
  if (flags.data_dir) r.data_dir = *flags.data_dir;
  if (flags.checkpoint) r.checkpoint = *flags.checkpoint;
  if (flags.resume) r.resume = *flags.resume;
  if (flags.seed) r.seed = *flags.seed;
  if (flags.epochs) r.train.epochs = *flags.epochs;
  if (flags.setting) {
    const auto s = parse_setting(*flags.setting);
    if (!s) throw Error("config", "unknown setting '" + *flags.setting + "'");
    r.train.setting = *s;
  }
  if (flags.composition) {
    r.composition = to_composition(*flags.composition);
    r.composition_given = true;
  }
  if (flags.protocol) r.protocol = *flags.protocol;
  if (flags.plots) r.plots = to_switch(*flags.plots, "--plots");
  if (flags.settings) r.ablate_settings = parse_settings(*flags.settings);
  if (flags.seeds) {
    try {
      parse_value(*flags.seeds, r.ablate_seeds);
    } catch (const std::exception& e) {
      throw Error("config", "--seeds: " + std::string(e.what()));
    }
  }

  r.synth.seed = r.seed;
  r.train.seed = r.seed;
  r.validate();
  return r;
}

}  // namespace

RunConfig defaults_for_preset(const std::string& preset) {
  RunConfig r;
  r.preset = preset;
  r.model.backbone = BackboneConfig::from_preset(preset);
  r.train = TrainConfig::for_preset(preset);
  if (preset == "resnet50-like") r.train.augmentation.pad = 10;
  r.model.num_identities = r.synth.num_identities;
  return r;
}

std::filesystem::path RunConfig::resolved_data_dir() const {
  return data_dir.empty() ? out_dir / "data" : data_dir;
}

std::filesystem::path RunConfig::resolved_checkpoint() const {
  return checkpoint.empty() ? out_dir / "train" / "model.ckpt" : checkpoint;
}

std::string RunConfig::to_ini() const {
  IniDocument doc;
  auto& run = doc.section("run");
  run.set("preset", preset);
  run.set("out", out_dir.string());
  run.set("data_dir", resolved_data_dir().string());
  run.set("checkpoint", resolved_checkpoint().string());
  run.set("seed", std::to_string(seed));
  run.set("plots", plots ? "on" : "off");
  if (composition_given) run.set("composition", std::string(scrl::to_string(composition)));
  run.set("protocol", protocol);
  run.set("ablate_settings", format_settings(ablate_settings));
  run.set("ablate_seeds", format_value(ablate_seeds));
  doc.sections.push_back(without_seed(write_section("synth", synth)));
  doc.sections.push_back(write_section("backbone", model.backbone));
  doc.sections.push_back(write_section("model", model));
  doc.sections.push_back(without_seed(write_section("train", train)));
  doc.sections.push_back(write_section("augment", train.augmentation));
  return doc.str();
}

void RunConfig::validate() const {
  synth.validate();
  model.validate();
  train.validate();
  Protocol::named(protocol);
  if (ablate_seeds.empty()) throw Error("config", "ablate_seeds must not be empty");
}

RunConfig parse_config_text(const std::string& text, const FlagOverrides& flags) {
  const auto doc = IniDocument::parse(text);
  return merge(&doc, flags);
}

RunConfig parse_config(const std::optional<std::filesystem::path>& file, const FlagOverrides& flags) {
  if (!file) return merge(nullptr, flags);
  const auto doc = IniDocument::load(file->string());
  return merge(&doc, flags);
}

}  // namespace scrl::cli
