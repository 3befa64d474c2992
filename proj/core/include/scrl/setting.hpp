#pragma once

#include <optional>
#include <string_view>
#include <vector>

namespace scrl {

// Ablation settings: baseline, + shape propagation, + IR restitution, full
// (both enhancement stages), and full without enhancement stage 1.
enum class Setting { Baseline, WithSfp, WithSfpIsr, Full, FullMinusS1 };

struct Components {
  bool sfp = false;     // shape stream teacher + replicated subnetwork + distillation
  bool isr = false;     // restitution inside the shape stream
  bool afe_s1 = false;  // enhancement stage 1 (fused query)
  bool afe_s2 = false;  // enhancement stage 2 (enhanced appearance)

  bool uses_shape_stream() const { return sfp; }
};

Components components_of(Setting s);
std::string_view to_string(Setting s);
std::optional<Setting> parse_setting(std::string_view text);
const std::vector<Setting>& all_settings();

}  // namespace scrl
