#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "scrl/backbone.hpp"
#include "scrl/setting.hpp"
#include "scrl/synthdata.hpp"

namespace scrl {

// Sectioned key = value text ("[section]" headers, ';' comments). Order of
// sections and keys is preserved so written files are stable.
struct IniSection {
  std::string name;
  std::vector<std::pair<std::string, std::string>> entries;

  const std::string* find(std::string_view key) const;
  void set(std::string key, std::string value);
};

struct IniDocument {
  std::vector<IniSection> sections;

  static IniDocument parse(const std::string& text, const std::string& source = "<config>");
  static IniDocument load(const std::string& path);
  std::string str() const;

  const IniSection* find(std::string_view name) const;
  IniSection& section(std::string_view name);  // created on demand
};

// Value conversion used by every config struct.
std::string format_value(int v);
std::string format_value(std::int64_t v);
std::string format_value(std::uint64_t v);
std::string format_value(double v);
std::string format_value(bool v);
std::string format_value(const std::string& v);
std::string format_value(const std::array<int, 4>& v);
std::string format_value(const std::array<double, 3>& v);
std::string format_value(const std::vector<int>& v);
std::string format_value(BlockKind v);
std::string format_value(Setting v);
std::string format_value(ShapeEncoding v);

void parse_value(std::string_view text, int& out);
void parse_value(std::string_view text, std::int64_t& out);
void parse_value(std::string_view text, std::uint64_t& out);
void parse_value(std::string_view text, double& out);
void parse_value(std::string_view text, bool& out);
void parse_value(std::string_view text, std::string& out);
void parse_value(std::string_view text, std::array<int, 4>& out);
void parse_value(std::string_view text, std::array<double, 3>& out);
void parse_value(std::string_view text, std::vector<int>& out);
void parse_value(std::string_view text, BlockKind& out);
void parse_value(std::string_view text, Setting& out);
void parse_value(std::string_view text, ShapeEncoding& out);

// Field visitors: f(key, member&) for every persisted member.
template <class F>
void visit_fields(SynthConfig& c, F&& f) {
  f("num_identities", c.num_identities);
  f("images_per_identity_per_modality", c.images_per_identity_per_modality);
  f("test_images_per_identity_per_modality", c.test_images_per_identity_per_modality);
  f("frames_per_tracklet", c.frames_per_tracklet);
  f("height", c.height);
  f("width", c.width);
  f("corruption_rate", c.corruption_rate);
  f("pixel_noise", c.pixel_noise);
  f("clutter", c.clutter);
  f("geometry_margin", c.geometry_margin);
  f("seed", c.seed);
}

template <class F>
void visit_fields(BackboneConfig& c, F&& f) {
  f("preset", c.preset);
  f("stem_channels", c.stem_channels);
  f("stem_kernel", c.stem_kernel);
  f("stem_stride", c.stem_stride);
  f("stem_pool", c.stem_pool);
  f("stage_widths", c.stage_widths);
  f("stage_blocks", c.stage_blocks);
  f("block", c.block);
  f("last_stride", c.last_stride);
  f("gem_p", c.gem_p);
  f("gem_learnable", c.gem_learnable);
  f("input_height", c.input_height);
  f("input_width", c.input_width);
}

template <class F>
void visit_fields(AugmentConfig& c, F&& f) {
  f("pad", c.pad);
  f("flip_probability", c.flip_probability);
  f("erase_probability", c.erase_probability);
  f("erase_area_min", c.erase_area_min);
  f("erase_area_max", c.erase_area_max);
  f("erase_aspect_min", c.erase_aspect_min);
  f("gray_probability", c.gray_probability);
  f("erase_fill", c.erase_fill);
}

// Reads `section` into `cfg`; keys not visited by visit_fields are rejected.
template <class T>
void read_section(const IniSection& section, T& cfg);

template <class T>
IniSection write_section(const std::string& name, const T& cfg) {
  IniSection s{name, {}};
  visit_fields(const_cast<T&>(cfg), [&](const char* key, auto& member) {
    s.entries.emplace_back(key, format_value(member));
  });
  return s;
}

// Throws scrl::Error naming the section and key.
[[noreturn]] void throw_unknown_key(const std::string& section, const std::string& key);
[[noreturn]] void throw_bad_value(const std::string& section, const std::string& key,
                                  const std::string& value, const std::string& why);

template <class T>
void read_section(const IniSection& section, T& cfg) {
  for (const auto& [key, value] : section.entries) {
    bool found = false;
    visit_fields(cfg, [&](const char* name, auto& member) {
      if (found || key != name) return;
      found = true;
      try {
        parse_value(value, member);
      } catch (const std::exception& e) {
        throw_bad_value(section.name, key, value, e.what());
      }
    });
    if (!found) throw_unknown_key(section.name, key);
  }
}

}  // namespace scrl
