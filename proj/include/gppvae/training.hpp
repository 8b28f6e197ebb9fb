#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gppvae/datagen.hpp"
#include "gppvae/kernels.hpp"
#include "gppvae/nnet.hpp"
#include "gppvae/tensor.hpp"

namespace gppvae {

enum class ModelKind { vae, gppvae_joint, gppvae_dis, cvae };
enum class LossMode { eq8, si_lambda };
enum class ViewCovKind { periodic, full_rank };

std::string to_string(ModelKind k);
std::optional<ModelKind> model_kind_from_string(const std::string& s);

// [sin a, cos a] per sample row; the conditioning fed to cvae networks
Tensor view_cond_features(const DatasetInfo& info, const std::vector<std::size_t>& rows);

struct LossBreakdown {
  double recon = 0.0;     // scaled per the active mode
  double gp_term = 0.0;   // -log p(Z | .)
  double reg_term = 0.0;  // -1/2 sum log sigma^2
  double total = 0.0;
  double sigma_y2 = 0.0;
  double lambda = 0.0;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;

  // bias-corrected update from the gradients currently held by the params
  void step(const ParamList& params, double lr);
  void reset() { t = 0; m.clear(); v.clear(); }
};

struct TrainConfig {
  ModelKind model = ModelKind::vae;
  LossMode mode = LossMode::si_lambda;
  double lambda = 3e-4;
  double sigma_y2 = 0.05;  // eq8 mode observation noise (initial value)
  NetKind net = NetKind::conv;
  std::size_t latent = 16;
  std::size_t hidden = 256;
  std::size_t feature_dim = 8;  // object feature columns M
  ViewCovKind view_cov = ViewCovKind::periodic;
  double kernel_period = M_PI;
  std::size_t vae_epochs = 300;
  std::size_t gp_epochs = 100;
  std::size_t joint_epochs = 200;
  double vae_lr = 1e-3;
  double gp_lr = 1e-2;
  double joint_lr = 1e-3;
  std::size_t batch_size = 128;
  std::size_t patience = 20;  // joint-phase early stop on validation MSE
  std::uint64_t seed = 1;
};

// Everything a trained run owns: networks plus the GP side. The view factor
// is rebuilt from raw parameters on demand and participates in gradient
// graphs when they do.
struct GppvaeModel {
  ModelKind kind = ModelKind::vae;
  ArchDescriptor arch;
  EncoderNet encoder;
  DecoderNet decoder;

  ViewCovKind view_cov = ViewCovKind::periodic;
  double kernel_period = M_PI;
  std::size_t views = 0;
  Tensor X;  // P x M
  Tensor beta_raw, nu_raw, alpha_raw;
  Tensor sigma_raw;  // eq8 only
  std::shared_ptr<CirculantViewFactor> circulant;
  std::shared_ptr<FullRankViewCov> fullrank;

  bool has_gp() const {
    return kind == ModelKind::gppvae_joint || kind == ModelKind::gppvae_dis;
  }
  Tensor view_factor_graph() const;
  Tensor view_factor_values() const;
  ParamList net_params() const;
  ParamList gp_params() const;
  ParamList all_params() const;
};

GppvaeModel make_model(const TrainConfig& cfg, const DatasetInfo& info, Rng& rng);
// copy encoder/decoder tensors from another model (disjoint schedules,
// --init-from); architectures must agree
void adopt_autoencoder(GppvaeModel& dst, const GppvaeModel& src);

// standard-VAE batch loss with the iid N(0, I) latent prior
struct VaeBatchLoss {
  Tensor graph;
  LossBreakdown values;  // unscaled recon ssr is folded per mode already
};
VaeBatchLoss vae_batch_loss(const EncoderNet& enc, const DecoderNet& dec,
                            const Tensor& images, const Tensor& cond, const Tensor& eps,
                            LossMode mode, double lambda, double sigma_y2);

// mean over validation samples and pixels of (y - g(mu))^2
double estimate_sigma_y(const DatasetView& data, const std::vector<std::size_t>& rows,
                        const EncoderNet& enc, const DecoderNet& dec,
                        std::size_t batch_size);

struct LambdaTrial {
  double lambda = 0.0;
  double sigma_y2 = 0.0;
  double val_elbo = 0.0;
  bool ok = false;
};
struct LambdaChoice {
  double lambda = 0.0;
  std::vector<LambdaTrial> trials;
};
// trains a standard VAE per grid value and keeps the one whose validation
// ELBO (with the estimated sigma_y^2) is maximal; ties fall to the smaller
// lambda, diverged runs are excluded
LambdaChoice select_lambda(const std::vector<double>& grid, const DatasetView& data,
                           const TrainConfig& base, bool prediction_criterion = false);

struct EpochLog {
  std::size_t epoch = 0;
  std::string phase;
  LossBreakdown loss;
  double wall_ms = 0.0;
};

struct TrainCursor {
  std::size_t phase = 0;
  std::size_t epoch = 0;
};

struct TrainSession {
  GppvaeModel model;
  AdamState adam;
  TrainCursor cursor;
  std::vector<EpochLog> log;
  bool aborted = false;
  // joint-phase early-stop state; serialized so resumed runs replay identically
  std::map<std::string, Tensor> best_params;
  double best_val_mse = 0.0;
  std::size_t epochs_since_best = 0;
};

struct PhaseSpec {
  std::string name;
  std::size_t epochs = 0;
  double lr = 0.0;
  bool nets = false;
  bool gp = false;
};
std::vector<PhaseSpec> phase_schedule(const TrainConfig& cfg);

// Runs the schedule from the session cursor to completion. Returns false on a
// numeric abort; the session then holds the last finite state.
bool train_run(const TrainConfig& cfg, const DatasetView& data, TrainSession& session,
               const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace gppvae
