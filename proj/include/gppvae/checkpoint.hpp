#pragma once

#include <string>

#include <json.hpp>

#include "gppvae/training.hpp"

namespace gppvae {

inline constexpr int kCheckpointVersion = 1;

// Checkpoint = directory of .gpt tensors plus meta.json (architecture, GP
// configuration, schedule cursor, optimizer step counter, config snapshot).
void save_session(const std::string& dir, const TrainSession& session,
                  const TrainConfig& cfg, const nlohmann::json& config_snapshot);

struct LoadedSession {
  TrainSession session;
  TrainConfig cfg;
  nlohmann::json config_snapshot;
};

LoadedSession load_session(const std::string& dir);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace gppvae
