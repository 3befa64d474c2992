#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace scrl {

enum class Modality : std::uint8_t { Visible = 0, Infrared = 1 };

inline std::string_view to_string(Modality m) {
  return m == Modality::Visible ? "VIS" : "IR";
}

std::optional<Modality> parse_modality(std::string_view text);

}  // namespace scrl
