#include "scrl/setting.hpp"

namespace scrl {

Components components_of(Setting s) {
  switch (s) {
    case Setting::Baseline:
      return {};
    case Setting::WithSfp:
      return {.sfp = true};
    case Setting::WithSfpIsr:
      return {.sfp = true, .isr = true};
    case Setting::Full:
      return {.sfp = true, .isr = true, .afe_s1 = true, .afe_s2 = true};
    case Setting::FullMinusS1:
      return {.sfp = true, .isr = true, .afe_s1 = false, .afe_s2 = true};
  }
  return {};
}

std::string_view to_string(Setting s) {
  switch (s) {
    case Setting::Baseline: return "B";
    case Setting::WithSfp: return "B+S";
    case Setting::WithSfpIsr: return "B+S+I";
    case Setting::Full: return "full";
    case Setting::FullMinusS1: return "full-S1";
  }
  return "?";
}

std::optional<Setting> parse_setting(std::string_view text) {
  for (Setting s : all_settings()) {
    if (text == to_string(s)) return s;
  }
  if (text == "B+S+I+A") return Setting::Full;
  return std::nullopt;
}

const std::vector<Setting>& all_settings() {
  static const std::vector<Setting> kAll{Setting::Baseline, Setting::WithSfp, Setting::WithSfpIsr,
                                         Setting::Full, Setting::FullMinusS1};
  return kAll;
}

}  // namespace scrl
