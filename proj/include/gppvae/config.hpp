#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "gppvae/training.hpp"

namespace gppvae {

// Run-level configuration: the training config plus paths and runner knobs.
// Comes from a JSON file; command-line flags override file values.
struct RunConfig {
  TrainConfig train;
  std::vector<double> lambda_grid;  // non-empty: select lambda before training
  bool lambda_opt_predictive = false;
  std::string data_dir;
  std::string out_dir;
  std::string init_from;
  int threads = 0;  // 0 keeps the default
  bool cache_images = true;
  std::size_t checkpoint_every = 25;
  std::size_t mc_samples = 0;  // prediction: 0 uses encoder means
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::string& path);

}  // namespace gppvae
