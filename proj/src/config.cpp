#include "gppvae/config.hpp"

#include <fstream>
#include <stdexcept>

#include "gppvae/checkpoint.hpp"

namespace gppvae {

using nlohmann::json;

RunConfig run_config_from_json(const json& j) {
  RunConfig cfg;
  cfg.train = train_config_from_json(j);
  if (j.contains("lambda_grid")) cfg.lambda_grid = j.at("lambda_grid").get<std::vector<double>>();
  if (j.contains("lambda_opt_predictive")) cfg.lambda_opt_predictive = j.at("lambda_opt_predictive");
  if (j.contains("data")) cfg.data_dir = j.at("data");
  if (j.contains("out")) cfg.out_dir = j.at("out");
  if (j.contains("init_from")) cfg.init_from = j.at("init_from");
  if (j.contains("threads")) cfg.threads = j.at("threads");
  if (j.contains("cache_images")) cfg.cache_images = j.at("cache_images");
  if (j.contains("checkpoint_every")) cfg.checkpoint_every = j.at("checkpoint_every");
  if (j.contains("mc_samples")) cfg.mc_samples = j.at("mc_samples");
  return cfg;
}

json run_config_to_json(const RunConfig& cfg) {
  json j = train_config_to_json(cfg.train);
  j["lambda_grid"] = cfg.lambda_grid;
  j["lambda_opt_predictive"] = cfg.lambda_opt_predictive;
  j["data"] = cfg.data_dir;
  j["out"] = cfg.out_dir;
  j["init_from"] = cfg.init_from;
  j["threads"] = cfg.threads;
  j["cache_images"] = cfg.cache_images;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["mc_samples"] = cfg.mc_samples;
  return j;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  json j;
  in >> j;
  return run_config_from_json(j);
}

}  // namespace gppvae
