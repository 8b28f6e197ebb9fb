#include "gppvae/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "gppvae/tensor_io.hpp"

namespace gppvae {

namespace fs = std::filesystem;
using nlohmann::json;

static std::string view_cov_name(ViewCovKind k) {
  return k == ViewCovKind::periodic ? "periodic" : "full-rank";
}

static ViewCovKind view_cov_from_name(const std::string& s) {
  if (s == "periodic") return ViewCovKind::periodic;
  if (s == "full-rank") return ViewCovKind::full_rank;
  throw std::invalid_argument("unknown view covariance kind: " + s);
}

json train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["model"] = to_string(cfg.model);
  j["mode"] = cfg.mode == LossMode::si_lambda ? "si-lambda" : "eq8";
  j["lambda"] = cfg.lambda;
  j["sigma_y2"] = cfg.sigma_y2;
  j["net"] = cfg.net == NetKind::conv ? "conv" : "mlp";
  j["latent"] = cfg.latent;
  j["hidden"] = cfg.hidden;
  j["feature_dim"] = cfg.feature_dim;
  j["view_cov"] = view_cov_name(cfg.view_cov);
  j["kernel_period"] = cfg.kernel_period;
  j["vae_epochs"] = cfg.vae_epochs;
  j["gp_epochs"] = cfg.gp_epochs;
  j["joint_epochs"] = cfg.joint_epochs;
  j["vae_lr"] = cfg.vae_lr;
  j["gp_lr"] = cfg.gp_lr;
  j["joint_lr"] = cfg.joint_lr;
  j["batch_size"] = cfg.batch_size;
  j["patience"] = cfg.patience;
  j["seed"] = cfg.seed;
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig cfg;
  if (j.contains("model")) {
    auto k = model_kind_from_string(j.at("model").get<std::string>());
    if (!k)
      throw std::invalid_argument("unknown model kind: " + j.at("model").get<std::string>());
    cfg.model = *k;
  }
  if (j.contains("mode")) {
    std::string m = j.at("mode");
    if (m == "si-lambda") cfg.mode = LossMode::si_lambda;
    else if (m == "eq8") cfg.mode = LossMode::eq8;
    else throw std::invalid_argument("unknown loss mode: " + m);
  }
  if (j.contains("lambda")) cfg.lambda = j.at("lambda");
  if (j.contains("sigma_y2")) cfg.sigma_y2 = j.at("sigma_y2");
  if (j.contains("net")) {
    std::string n = j.at("net");
    if (n == "conv") cfg.net = NetKind::conv;
    else if (n == "mlp") cfg.net = NetKind::mlp;
    else throw std::invalid_argument("unknown net kind: " + n);
  }
  if (j.contains("latent")) cfg.latent = j.at("latent");
  if (j.contains("hidden")) cfg.hidden = j.at("hidden");
  if (j.contains("feature_dim")) cfg.feature_dim = j.at("feature_dim");
  if (j.contains("view_cov")) cfg.view_cov = view_cov_from_name(j.at("view_cov"));
  if (j.contains("kernel_period")) cfg.kernel_period = j.at("kernel_period");
  if (j.contains("vae_epochs")) cfg.vae_epochs = j.at("vae_epochs");
  if (j.contains("gp_epochs")) cfg.gp_epochs = j.at("gp_epochs");
  if (j.contains("joint_epochs")) cfg.joint_epochs = j.at("joint_epochs");
  if (j.contains("vae_lr")) cfg.vae_lr = j.at("vae_lr");
  if (j.contains("gp_lr")) cfg.gp_lr = j.at("gp_lr");
  if (j.contains("joint_lr")) cfg.joint_lr = j.at("joint_lr");
  if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size");
  if (j.contains("patience")) cfg.patience = j.at("patience");
  if (j.contains("seed")) cfg.seed = j.at("seed");
  if (cfg.latent < 1 || cfg.feature_dim < 1)
    throw std::invalid_argument("config: latent and feature_dim must be >= 1");
  return cfg;
}

static json arch_to_json(const ArchDescriptor& a) {
  json j;
  j["kind"] = a.kind == NetKind::conv ? "conv" : "mlp";
  j["image_channels"] = a.image_channels;
  j["image_size"] = a.image_size;
  j["latent"] = a.latent;
  j["hidden"] = a.hidden;
  j["cond_dim"] = a.cond_dim;
  return j;
}

void save_session(const std::string& dir, const TrainSession& session,
                  const TrainConfig& cfg, const json& config_snapshot) {
  fs::create_directories(dir);
  const GppvaeModel& m = session.model;

  json meta;
  meta["format_version"] = kCheckpointVersion;
  meta["model"] = to_string(m.kind);
  meta["arch"] = arch_to_json(m.arch);
  meta["config"] = train_config_to_json(cfg);
  meta["config_snapshot"] = config_snapshot;
  meta["cursor"] = {{"phase", session.cursor.phase}, {"epoch", session.cursor.epoch}};
  meta["adam_t"] = session.adam.t;
  meta["aborted"] = session.aborted;
  meta["best_val_mse"] = session.best_val_mse;
  meta["epochs_since_best"] = session.epochs_since_best;
  if (m.has_gp()) {
    json gp;
    gp["view_cov"] = view_cov_name(m.view_cov);
    gp["kernel_period"] = m.kernel_period;
    gp["views"] = m.views;
    gp["objects"] = m.X.extent(0);
    gp["feature_dim"] = m.X.extent(1);
    gp["has_sigma"] = m.sigma_raw.defined();
    meta["gp"] = gp;
  }

  std::vector<std::string> names;
  auto put = [&](const std::string& name, const Tensor& t) {
    write_gpt((fs::path(dir) / (name + ".gpt")).string(), t);
    names.push_back(name);
  };
  for (const auto& p : m.all_params()) put(p.name, p.tensor);
  for (const auto& [name, t] : session.adam.m) put("adam.m." + name, t);
  for (const auto& [name, t] : session.adam.v) put("adam.v." + name, t);
  for (const auto& [name, t] : session.best_params) put("best." + name, t);
  meta["tensors"] = names;

  std::ofstream mf(fs::path(dir) / "meta.json");
  if (!mf) throw std::runtime_error("save_session: cannot write meta.json in " + dir);
  mf << meta.dump(2) << "\n";
}

LoadedSession load_session(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "meta.json");
  if (!mf) throw std::runtime_error("load_session: no meta.json in " + dir);
  json meta;
  mf >> meta;
  if (meta.at("format_version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("load_session: unrecognized checkpoint version");

  LoadedSession out;
  out.cfg = train_config_from_json(meta.at("config"));
  out.config_snapshot = meta.value("config_snapshot", json::object());

  // rebuild the model skeleton, then overwrite every tensor from disk
  DatasetInfo pseudo;
  pseudo.image_size = meta.at("arch").at("image_size");
  pseudo.channels = meta.at("arch").at("image_channels");
  pseudo.views = 2;
  pseudo.objects = 2;
  pseudo.angles = {0.0, M_PI};
  if (meta.contains("gp")) {
    const json& gp = meta.at("gp");
    pseudo.views = gp.at("views");
    pseudo.objects = gp.at("objects");
    pseudo.angles.resize(pseudo.views);
    for (std::size_t q = 0; q < pseudo.views; ++q)
      pseudo.angles[q] = 2.0 * M_PI * double(q) / double(pseudo.views);
  }
  Rng rng(1);
  out.session.model = make_model(out.cfg, pseudo, rng);

  TrainSession& s = out.session;
  s.cursor.phase = meta.at("cursor").at("phase");
  s.cursor.epoch = meta.at("cursor").at("epoch");
  s.adam.t = meta.at("adam_t");
  s.aborted = meta.value("aborted", false);
  s.best_val_mse = meta.value("best_val_mse", 0.0);
  s.epochs_since_best = meta.value("epochs_since_best", std::size_t{0});

  auto tensor_path = [&](const std::string& name) {
    return (fs::path(dir) / (name + ".gpt")).string();
  };
  for (auto& p : s.model.all_params()) {
    Tensor loaded = read_gpt(tensor_path(p.name));
    if (loaded.shape() != p.tensor.shape())
      throw std::runtime_error("load_session: shape mismatch for " + p.name);
    std::copy(loaded.data(), loaded.data() + loaded.size(),
              const_cast<Tensor&>(p.tensor).data());
  }
  for (const std::string& name : meta.at("tensors").get<std::vector<std::string>>()) {
    if (name.rfind("adam.m.", 0) == 0)
      s.adam.m[name.substr(7)] = read_gpt(tensor_path(name));
    else if (name.rfind("adam.v.", 0) == 0)
      s.adam.v[name.substr(7)] = read_gpt(tensor_path(name));
    else if (name.rfind("best.", 0) == 0)
      s.best_params[name.substr(5)] = read_gpt(tensor_path(name));
  }
  return out;
}

}  // namespace gppvae
