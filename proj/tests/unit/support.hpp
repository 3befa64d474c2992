#pragma once

#include <torch/torch.h>

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <scrl/synthdata.hpp>

#include "oracles.hpp"

namespace scrl::test {

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "scrl_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Small synthetic dataset shared by tests that need real images.
inline SynthConfig tiny_synth(int identities = 4, int per_modality = 4) {
  SynthConfig c;
  c.num_identities = identities;
  c.images_per_identity_per_modality = per_modality;
  c.test_images_per_identity_per_modality = 2;
  c.seed = 11;
  return c;
}

}  // namespace scrl::test
