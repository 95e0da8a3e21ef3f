#pragma once

#include <cstdint>
#include <string>

#include "pfnf/harness/table.hpp"
#include "pfnf/model/model.hpp"

namespace pfnf::harness {

// Synthetic benchmark table drawn from the prior's mechanisms. Rows carry a
// fixed train/test split; `groups` > 0 adds a group column with that many
// labels, drawn uniformly per row.
struct SynthSpec {
  std::string mechanism = "linear";  // linear | scm | mlp
  model::TaskKind kind = model::TaskKind::kRegression;
  std::size_t n_rows = 200;
  std::size_t n_features = 5;
  double test_fraction = 0.2;
  double noise = 0.0;  // linear mechanism only
  std::size_t classes = 2;
  std::size_t groups = 0;
  std::uint64_t seed = 0;
};

FeatureTable synth_table(const SynthSpec& spec);

}  // namespace pfnf::harness
