#include "gppvae/training.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "gppvae/baselines.hpp"
#include "gppvae/lowrank_gp.hpp"
#include "gppvae/taylor_grad.hpp"

namespace gppvae {

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::vae: return "vae";
    case ModelKind::gppvae_joint: return "gppvae-joint";
    case ModelKind::gppvae_dis: return "gppvae-dis";
    case ModelKind::cvae: return "cvae";
  }
  return "?";
}

std::optional<ModelKind> model_kind_from_string(const std::string& s) {
  if (s == "vae") return ModelKind::vae;
  if (s == "gppvae-joint") return ModelKind::gppvae_joint;
  if (s == "gppvae-dis") return ModelKind::gppvae_dis;
  if (s == "cvae") return ModelKind::cvae;
  return std::nullopt;
}

Tensor view_cond_features(const DatasetInfo& info, const std::vector<std::size_t>& rows) {
  Tensor out = Tensor::zeros({rows.size(), 2});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double a = info.angles.at(info.view_ids.at(rows[i]));
    out.set({i, 0}, std::sin(a));
    out.set({i, 1}, std::cos(a));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

void AdamState::step(const ParamList& params, double lr) {
  ++t;
  double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (const auto& np : params) {
    Tensor p = np.tensor;
    Tensor g = p.grad();
    auto& mt = m[np.name];
    auto& vt = v[np.name];
    if (!mt.defined()) mt = Tensor::zeros(p.shape());
    if (!vt.defined()) vt = Tensor::zeros(p.shape());
    if (mt.shape() != p.shape())
      throw std::invalid_argument("AdamState: moment shape mismatch for " + np.name);
    double* pd = p.data();
    double* md = mt.data();
    double* vd = vt.data();
    const double* gd = g.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
      vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
      double mhat = md[i] / c1;
      double vhat = vd[i] / c2;
      pd[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// model assembly

Tensor GppvaeModel::view_factor_graph() const {
  if (view_cov == ViewCovKind::periodic) {
    if (!circulant) throw std::logic_error("GppvaeModel: circulant factor missing");
    return circulant->factor(beta_raw, nu_raw);
  }
  if (!fullrank) throw std::logic_error("GppvaeModel: full-rank factor missing");
  return fullrank->factor();
}

Tensor GppvaeModel::view_factor_values() const {
  NoGradGuard ng;
  return view_factor_graph();
}

ParamList GppvaeModel::net_params() const {
  ParamList ps = encoder.params();
  for (auto& p : decoder.params()) ps.push_back(p);
  return ps;
}

ParamList GppvaeModel::gp_params() const {
  ParamList ps;
  if (!has_gp()) return ps;
  ps.push_back({"gp.X", X});
  if (view_cov == ViewCovKind::periodic) {
    ps.push_back({"gp.beta_raw", beta_raw});
    ps.push_back({"gp.nu_raw", nu_raw});
  } else {
    ps.push_back({"gp.view_raw", fullrank->raw()});
  }
  ps.push_back({"gp.alpha_raw", alpha_raw});
  if (sigma_raw.defined()) ps.push_back({"gp.sigma_raw", sigma_raw});
  return ps;
}

ParamList GppvaeModel::all_params() const {
  ParamList ps = net_params();
  for (auto& p : gp_params()) ps.push_back(p);
  return ps;
}

static bool grid_is_even(const std::vector<double>& angles) {
  std::size_t q = angles.size();
  for (std::size_t i = 0; i < q; ++i) {
    double want = 2.0 * M_PI * double(i) / double(q);
    if (std::abs(angles[i] - want) > 1e-9) return false;
  }
  return true;
}

GppvaeModel make_model(const TrainConfig& cfg, const DatasetInfo& info, Rng& rng) {
  GppvaeModel m;
  m.kind = cfg.model;
  m.arch.kind = cfg.net;
  m.arch.image_channels = info.channels;
  m.arch.image_size = info.image_size;
  m.arch.latent = cfg.latent;
  m.arch.hidden = cfg.hidden;
  m.arch.cond_dim = cfg.model == ModelKind::cvae ? 2 : 0;
  m.encoder = EncoderNet::create(m.arch, rng);
  m.decoder = DecoderNet::create(m.arch, rng);
  if (m.kind == ModelKind::gppvae_joint || m.kind == ModelKind::gppvae_dis) {
    m.view_cov = cfg.view_cov;
    m.kernel_period = cfg.kernel_period;
    m.views = info.views;
    m.X = ObjectFeatures::init(info.objects, cfg.feature_dim, rng).X.set_requires_grad();
    m.beta_raw = Tensor::scalar(0.0).set_requires_grad();
    m.nu_raw = Tensor::scalar(0.0).set_requires_grad();
    m.alpha_raw = Tensor::scalar(std::log(0.5)).set_requires_grad();
    if (cfg.view_cov == ViewCovKind::periodic) {
      if (!grid_is_even(info.angles))
        throw std::invalid_argument(
            "make_model: periodic view covariance needs the even angle grid");
      m.circulant = std::make_shared<CirculantViewFactor>(info.views, cfg.kernel_period);
    } else {
      m.fullrank = std::make_shared<FullRankViewCov>(info.views);
      m.fullrank->raw().set_requires_grad();
    }
    if (cfg.mode == LossMode::eq8)
      m.sigma_raw = Tensor::scalar(std::log(cfg.sigma_y2)).set_requires_grad();
  }
  return m;
}

void adopt_autoencoder(GppvaeModel& dst, const GppvaeModel& src) {
  if (!(dst.arch == src.arch))
    throw std::invalid_argument("adopt_autoencoder: architecture mismatch");
  ParamList from = src.net_params();
  ParamList to = dst.net_params();
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].name != to[i].name || from[i].tensor.shape() != to[i].tensor.shape())
      throw std::invalid_argument("adopt_autoencoder: parameter set mismatch at " +
                                  from[i].name);
    std::copy(from[i].tensor.data(), from[i].tensor.data() + from[i].tensor.size(),
              const_cast<Tensor&>(to[i].tensor).data());
  }
}

// ---------------------------------------------------------------------------
// losses

VaeBatchLoss vae_batch_loss(const EncoderNet& enc, const DecoderNet& dec,
                            const Tensor& images, const Tensor& cond, const Tensor& eps,
                            LossMode mode, double lambda, double sigma_y2) {
  std::size_t bsz = images.extent(0);
  std::size_t pixels = enc.arch().pixels();
  std::size_t latent = enc.arch().latent;
  auto [mu, lv] = enc.forward(images, cond);
  Tensor z = reparameterize(mu, lv, eps);
  Tensor rec = dec.forward(z, cond);
  Tensor d = sub(rec, images);
  Tensor ssr = sum(mul(d, d));
  Tensor prior_quad = scale(sum(mul(z, z)), 0.5);  // -log p up to the constant
  Tensor reg = scale(sum(lv), -0.5);

  VaeBatchLoss out;
  out.values.reg_term = reg.value();
  out.values.gp_term =
      prior_quad.value() + 0.5 * double(bsz * latent) * std::log(2.0 * M_PI);
  out.values.lambda = lambda;
  out.values.sigma_y2 = sigma_y2;
  if (mode == LossMode::si_lambda) {
    double w = lambda / double(latent);
    out.graph = add(scale(ssr, 1.0 / double(pixels)),
                    scale(add(prior_quad, reg), w));
    out.values.recon = ssr.value() / double(pixels);
    out.values.total = out.values.recon + w * (out.values.gp_term + out.values.reg_term);
  } else {
    if (!(sigma_y2 > 0.0))
      throw std::invalid_argument("vae_batch_loss: eq8 mode needs sigma_y2 > 0");
    out.graph = add(scale(ssr, 0.5 / sigma_y2), sub(prior_quad, reg));
    out.values.recon = ssr.value() * 0.5 / sigma_y2;
    out.values.total = double(bsz * pixels) * std::log(sigma_y2) + out.values.recon +
                       out.values.gp_term - out.values.reg_term;
  }
  if (!std::isfinite(out.values.total)) {
    std::string term = !std::isfinite(out.values.recon)      ? "reconstruction term"
                       : !std::isfinite(out.values.gp_term)  ? "latent prior term"
                       : !std::isfinite(out.values.reg_term) ? "regularization term"
                                                             : "total";
    throw std::runtime_error("vae_batch_loss: non-finite " + term);
  }
  return out;
}

double estimate_sigma_y(const DatasetView& data, const std::vector<std::size_t>& rows,
                        const EncoderNet& enc, const DecoderNet& dec,
                        std::size_t batch_size) {
  if (rows.empty()) throw std::invalid_argument("estimate_sigma_y: empty sample set");
  NoGradGuard ng;
  double ssr = 0.0;
  std::size_t count = 0;
  for (std::size_t first = 0; first < rows.size(); first += batch_size) {
    std::size_t n = std::min(batch_size, rows.size() - first);
    std::vector<std::size_t> batch(rows.begin() + first, rows.begin() + first + n);
    Tensor y = data.load_rows(batch);
    Tensor cond = enc.arch().cond_dim ? view_cond_features(data.info(), batch) : Tensor();
    auto [mu, lv] = enc.forward(y, cond);
    Tensor rec = dec.forward(mu, cond);
    Tensor diff = sub(rec, y);
    ssr += sum(mul(diff, diff)).value();
    count += n;
  }
  return ssr / double(count * enc.arch().pixels());
}

// ---------------------------------------------------------------------------
// schedule

std::vector<PhaseSpec> phase_schedule(const TrainConfig& cfg) {
  std::vector<PhaseSpec> phases;
  switch (cfg.model) {
    case ModelKind::vae:
    case ModelKind::cvae:
      phases.push_back({"vae", cfg.vae_epochs, cfg.vae_lr, true, false});
      break;
    case ModelKind::gppvae_dis:
      phases.push_back({"vae", cfg.vae_epochs, cfg.vae_lr, true, false});
      phases.push_back({"gp", cfg.gp_epochs, cfg.gp_lr, false, true});
      break;
    case ModelKind::gppvae_joint:
      phases.push_back({"vae", cfg.vae_epochs, cfg.vae_lr, true, false});
      phases.push_back({"gp", cfg.gp_epochs, cfg.gp_lr, false, true});
      phases.push_back({"joint", cfg.joint_epochs, cfg.joint_lr, true, true});
      break;
  }
  return phases;
}

namespace {

struct ParamSnapshot {
  std::vector<Tensor> values;
  static ParamSnapshot take(const ParamList& params) {
    ParamSnapshot s;
    for (auto& p : params) s.values.push_back(p.tensor.detach());
    return s;
  }
  bool finite() const {
    for (const auto& t : values)
      for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t.data()[i])) return false;
    return true;
  }
  void restore(const ParamList& params) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      std::copy(values[i].data(), values[i].data() + values[i].size(),
                const_cast<Tensor&>(params[i].tensor).data());
  }
};

double validation_mse(const GppvaeModel& model, const DatasetView& data,
                      const Tensor& mu_train, std::size_t batch_size) {
  PredictionSet pred = gppvae_predict_with_latents(model, data, mu_train,
                                                   data.info().val_idx, batch_size);
  return eval_mse(pred).mean;
}

Tensor encode_means(const GppvaeModel& model, const DatasetView& data,
                    const std::vector<std::size_t>& rows, std::size_t batch_size) {
  NoGradGuard ng;
  std::size_t latent = model.arch.latent;
  Tensor out = Tensor::zeros({rows.size(), latent});
  for (std::size_t first = 0; first < rows.size(); first += batch_size) {
    std::size_t n = std::min(batch_size, rows.size() - first);
    std::vector<std::size_t> batch(rows.begin() + first, rows.begin() + first + n);
    Tensor y = data.load_rows(batch);
    Tensor cond = model.arch.cond_dim ? view_cond_features(data.info(), batch) : Tensor();
    auto [mu, lv] = model.encoder.forward(y, cond);
    std::copy(mu.data(), mu.data() + mu.size(), out.data() + first * latent);
  }
  return out;
}

}  // namespace

bool train_run(const TrainConfig& cfg, const DatasetView& data, TrainSession& session,
               const std::function<void(const EpochLog&)>& on_epoch) {
  const DatasetInfo& info = data.info();
  if (!info.has_split) throw std::invalid_argument("train_run: dataset has no split");
  const auto& train_rows = info.train_idx;
  if (train_rows.empty()) throw std::invalid_argument("train_run: empty training set");
  GppvaeModel& model = session.model;

  std::vector<std::size_t> train_objects(train_rows.size()), train_views(train_rows.size());
  for (std::size_t i = 0; i < train_rows.size(); ++i) {
    train_objects[i] = info.object_ids[train_rows[i]];
    train_views[i] = info.view_ids[train_rows[i]];
  }

  auto phases = phase_schedule(cfg);
  Rng root(cfg.seed);
  std::size_t global_epoch = 0;
  for (std::size_t ph = 0; ph < session.cursor.phase && ph < phases.size(); ++ph)
    global_epoch += phases[ph].epochs;
  global_epoch += session.cursor.epoch;

  const std::size_t resume_phase = session.cursor.phase;
  const std::size_t resume_epoch = session.cursor.epoch;
  ParamSnapshot last_good = ParamSnapshot::take(model.all_params());

  for (std::size_t ph = resume_phase; ph < phases.size(); ++ph) {
    const PhaseSpec& phase = phases[ph];
    std::size_t start_epoch = (ph == resume_phase) ? resume_epoch : 0;
    if (start_epoch == 0) session.adam.reset();

    ParamList trainable;
    if (phase.nets)
      for (auto& p : model.net_params()) trainable.push_back(p);
    if (phase.gp)
      for (auto& p : model.gp_params()) trainable.push_back(p);

    bool early_stop = phase.name == "joint" && !info.val_idx.empty();
    if (early_stop && start_epoch == 0) {
      // the phase-start state is the first candidate, so the phase can only
      // improve on what the earlier phases reached
      session.best_params.clear();
      session.epochs_since_best = 0;
      Tensor mu0 = encode_means(model, data, train_rows, cfg.batch_size);
      session.best_val_mse = validation_mse(model, data, mu0, cfg.batch_size);
      for (auto& p : model.all_params()) session.best_params[p.name] = p.tensor.detach();
    }

    for (std::size_t ep = start_epoch; ep < phase.epochs; ++ep, ++global_epoch) {
      auto t0 = std::chrono::steady_clock::now();
      Rng epoch_rng = root.split(ph * 1000003ull + ep + 1ull);
      EpochLog entry;
      entry.epoch = global_epoch;
      entry.phase = phase.name;
      entry.loss.lambda = cfg.lambda;
      bool stop_phase = false;

      try {
        if (!phase.gp) {
          // decoupled loss: conventional minibatch updates
          std::vector<std::size_t> order = train_rows;
          epoch_rng.shuffle(order);
          double recon = 0, gp = 0, reg = 0, total = 0;
          for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
            std::size_t n = std::min(cfg.batch_size, order.size() - first);
            std::vector<std::size_t> batch(order.begin() + first, order.begin() + first + n);
            Tensor y = data.load_rows(batch);
            Tensor cond = model.arch.cond_dim ? view_cond_features(info, batch) : Tensor();
            Tensor eps = Tensor::randn({n, model.arch.latent}, epoch_rng);
            VaeBatchLoss bl = vae_batch_loss(model.encoder, model.decoder, y, cond, eps,
                                             cfg.mode, cfg.lambda, cfg.sigma_y2);
            for (auto& p : trainable) p.tensor.zero_grad();
            bl.graph.backward();
            session.adam.step(trainable, phase.lr);
            recon += bl.values.recon;
            gp += bl.values.gp_term;
            reg += bl.values.reg_term;
            total += bl.values.total;
          }
          entry.loss.recon = recon;
          entry.loss.gp_term = gp;
          entry.loss.reg_term = reg;
          entry.loss.total = total;
          entry.loss.sigma_y2 = cfg.mode == LossMode::eq8
                                    ? cfg.sigma_y2
                                    : recon / double(order.size());
        } else {
          FullGradInputs in;
          in.n = train_rows.size();
          in.batch_size = cfg.batch_size;
          in.load_images = [&](std::size_t first, std::size_t count) {
            std::vector<std::size_t> rows(train_rows.begin() + first,
                                          train_rows.begin() + first + count);
            return data.load_rows(rows);
          };
          in.encoder = &model.encoder;
          in.decoder = &model.decoder;
          in.view_factor = [&] { return model.view_factor_graph(); };
          in.object_features = model.X;
          in.alpha_raw = model.alpha_raw;
          in.object_idx = &train_objects;
          in.view_idx = &train_views;
          in.train_nets = phase.nets;
          in.train_gp = phase.gp;
          double latent = double(model.arch.latent);
          if (cfg.mode == LossMode::si_lambda) {
            in.recon_scale = 1.0 / double(model.arch.pixels());
            in.gp_weight = cfg.lambda / latent;
            in.reg_coeff = cfg.lambda / latent;
          } else {
            in.gp_weight = 1.0;
            in.reg_coeff = -1.0;
            if (model.sigma_raw.defined() && phase.nets) in.sigma_raw = model.sigma_raw;
            else in.recon_scale = 0.5 / cfg.sigma_y2;
          }

          for (auto& p : trainable) p.tensor.zero_grad();
          StepResult res = full_gradient_step(in, epoch_rng);
          session.adam.step(trainable, phase.lr);

          double sigma_now = model.sigma_raw.defined()
                                 ? std::exp(model.sigma_raw.value())
                                 : cfg.sigma_y2;
          entry.loss.reg_term = res.reg_term;
          entry.loss.gp_term = res.gp_term;
          if (cfg.mode == LossMode::si_lambda) {
            entry.loss.recon = res.ssr / double(model.arch.pixels());
            double w = cfg.lambda / latent;
            entry.loss.total = entry.loss.recon + w * (res.gp_term + res.reg_term);
            entry.loss.sigma_y2 =
                res.ssr / double(train_rows.size() * model.arch.pixels());
          } else {
            entry.loss.recon = res.ssr * 0.5 / sigma_now;
            entry.loss.total = double(train_rows.size() * model.arch.pixels()) *
                                   std::log(sigma_now) +
                               entry.loss.recon + res.gp_term - res.reg_term;
            entry.loss.sigma_y2 = sigma_now;
          }

          if (early_stop) {
            double mse = validation_mse(model, data, res.mu, cfg.batch_size);
            if (session.best_params.empty() || mse < session.best_val_mse) {
              session.best_val_mse = mse;
              session.best_params.clear();
              for (auto& p : model.all_params())
                session.best_params[p.name] = p.tensor.detach();
              session.epochs_since_best = 0;
            } else if (++session.epochs_since_best >= cfg.patience) {
              stop_phase = true;
            }
          }
        }
      } catch (const std::runtime_error&) {
        last_good.restore(model.all_params());
        session.aborted = true;
        session.cursor = {ph, ep};
        return false;
      }

      if (!std::isfinite(entry.loss.total)) {
        last_good.restore(model.all_params());
        session.aborted = true;
        session.cursor = {ph, ep};
        return false;
      }
      {
        ParamSnapshot now = ParamSnapshot::take(model.all_params());
        if (now.finite()) last_good = std::move(now);
      }
      entry.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
      session.cursor = {ph, ep + 1};
      session.log.push_back(entry);
      if (on_epoch) on_epoch(entry);
      if (stop_phase) break;
    }

    if (early_stop && !session.best_params.empty()) {
      for (auto& p : model.all_params()) {
        auto it = session.best_params.find(p.name);
        if (it == session.best_params.end()) continue;
        std::copy(it->second.data(), it->second.data() + it->second.size(),
                  const_cast<Tensor&>(p.tensor).data());
      }
      last_good = ParamSnapshot::take(model.all_params());
    }
    session.cursor = {ph + 1, 0};
  }
  session.cursor = {phases.size(), 0};
  return true;
}

// ---------------------------------------------------------------------------
// lambda selection

LambdaChoice select_lambda(const std::vector<double>& grid, const DatasetView& data,
                           const TrainConfig& base, bool prediction_criterion) {
  if (grid.empty()) throw std::invalid_argument("select_lambda: empty grid");
  for (double l : grid)
    if (!(l > 0.0)) throw std::invalid_argument("select_lambda: grid values must be positive");
  const DatasetInfo& info = data.info();
  if (info.val_idx.empty()) throw std::invalid_argument("select_lambda: empty validation set");

  LambdaChoice choice;
  bool have_best = false;
  double best_score = 0.0;
  for (double lam : grid) {
    TrainConfig cfg = base;
    cfg.model = ModelKind::vae;
    cfg.mode = LossMode::si_lambda;
    cfg.lambda = lam;
    LambdaTrial trial;
    trial.lambda = lam;
    try {
      Rng rng(cfg.seed);
      TrainSession session;
      session.model = make_model(cfg, info, rng);
      if (!train_run(cfg, data, session)) throw std::runtime_error("diverged");

      trial.sigma_y2 = estimate_sigma_y(data, info.val_idx, session.model.encoder,
                                        session.model.decoder, cfg.batch_size);
      if (!(trial.sigma_y2 > 0.0) || !std::isfinite(trial.sigma_y2))
        throw std::runtime_error("degenerate residual variance");

      if (prediction_criterion) {
        // negative validation prediction error, so bigger stays better
        PredictionSet p = livae_predict(session.model, data, info.val_idx, cfg.batch_size);
        trial.val_elbo = -eval_mse(p).mean;
      } else {
        NoGradGuard ng;
        double ssr = 0.0, quad = 0.0, entropy = 0.0;
        std::size_t count = 0;
        for (std::size_t first = 0; first < info.val_idx.size(); first += cfg.batch_size) {
          std::size_t n = std::min(cfg.batch_size, info.val_idx.size() - first);
          std::vector<std::size_t> rows(info.val_idx.begin() + first,
                                        info.val_idx.begin() + first + n);
          Tensor y = data.load_rows(rows);
          auto [mu, lv] = session.model.encoder.forward(y);
          Tensor rec = session.model.decoder.forward(mu);
          Tensor d = sub(rec, y);
          ssr += sum(mul(d, d)).value();
          quad += sum(mul(mu, mu)).value();
          entropy += 0.5 * sum(lv).value();
          count += n;
        }
        std::size_t pixels = session.model.arch.pixels();
        std::size_t latent = session.model.arch.latent;
        trial.val_elbo = -0.5 * double(count * pixels) *
                             std::log(2.0 * M_PI * trial.sigma_y2) -
                         ssr / (2.0 * trial.sigma_y2) - 0.5 * quad -
                         0.5 * double(count * latent) * std::log(2.0 * M_PI) + entropy;
      }
      if (!std::isfinite(trial.val_elbo)) throw std::runtime_error("non-finite score");
      trial.ok = true;
    } catch (const std::exception&) {
      trial.ok = false;
    }
    choice.trials.push_back(trial);
    if (trial.ok) {
      bool better = !have_best || trial.val_elbo > best_score ||
                    (trial.val_elbo == best_score && lam < choice.lambda);
      if (better) {
        have_best = true;
        best_score = trial.val_elbo;
        choice.lambda = lam;
      }
    }
  }
  if (!have_best) throw std::runtime_error("select_lambda: every grid point failed");
  return choice;
}

}  // namespace gppvae
