#include "gppvae/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "gppvae/lowrank_gp.hpp"

namespace gppvae {

MseSummary eval_mse(const PredictionSet& pred) {
  if (pred.per_sample_mse.empty()) throw std::invalid_argument("eval_mse: empty prediction set");
  MseSummary s;
  s.n = pred.per_sample_mse.size();
  double acc = 0.0;
  for (double v : pred.per_sample_mse) acc += v;
  s.mean = acc / double(s.n);
  if (s.n > 1) {
    double var = 0.0;
    for (double v : pred.per_sample_mse) var += (v - s.mean) * (v - s.mean);
    var /= double(s.n - 1);
    s.std_error = std::sqrt(var / double(s.n));
  }
  return s;
}

namespace {

struct PredictionBuffers {
  PredictionSet set;
  std::size_t row_elems = 0;

  void init(const std::vector<std::size_t>& targets, const DatasetInfo& info) {
    set.sample_idx = targets;
    row_elems = info.channels * info.image_size * info.image_size;
    set.predicted =
        Tensor::zeros({targets.size(), info.channels, info.image_size, info.image_size});
    set.truth =
        Tensor::zeros({targets.size(), info.channels, info.image_size, info.image_size});
    set.per_sample_mse.assign(targets.size(), 0.0);
  }

  void store(std::size_t slot, const Tensor& pred_batch, std::size_t batch_pos,
             const Tensor& truth_batch) {
    const double* p = pred_batch.data() + batch_pos * row_elems;
    const double* t = truth_batch.data() + batch_pos * row_elems;
    std::copy(p, p + row_elems, set.predicted.data() + slot * row_elems);
    std::copy(t, t + row_elems, set.truth.data() + slot * row_elems);
    double se = 0.0;
    for (std::size_t i = 0; i < row_elems; ++i) se += (p[i] - t[i]) * (p[i] - t[i]);
    set.per_sample_mse[slot] = se / double(row_elems);
  }

  // drops slots that were never filled (skipped samples)
  void compact(const std::vector<char>& filled) {
    std::size_t kept = 0;
    for (std::size_t i = 0; i < filled.size(); ++i) {
      if (!filled[i]) continue;
      if (kept != i) {
        std::copy(set.predicted.data() + i * row_elems,
                  set.predicted.data() + (i + 1) * row_elems,
                  set.predicted.data() + kept * row_elems);
        std::copy(set.truth.data() + i * row_elems, set.truth.data() + (i + 1) * row_elems,
                  set.truth.data() + kept * row_elems);
        set.per_sample_mse[kept] = set.per_sample_mse[i];
        set.sample_idx[kept] = set.sample_idx[i];
      }
      ++kept;
    }
    if (kept == filled.size()) return;
    Shape s = set.predicted.shape();
    s[0] = kept;
    Tensor pred = Tensor::zeros(s), truth = Tensor::zeros(s);
    std::copy(set.predicted.data(), set.predicted.data() + kept * row_elems, pred.data());
    std::copy(set.truth.data(), set.truth.data() + kept * row_elems, truth.data());
    set.predicted = pred;
    set.truth = truth;
    set.per_sample_mse.resize(kept);
    set.sample_idx.resize(kept);
  }
};

Tensor encoded_means(const GppvaeModel& model, const DatasetView& data,
                     const std::vector<std::size_t>& rows, std::size_t batch_size,
                     std::size_t mc_samples, Rng* rng) {
  NoGradGuard ng;
  std::size_t latent = model.arch.latent;
  Tensor out = Tensor::zeros({rows.size(), latent});
  for (std::size_t first = 0; first < rows.size(); first += batch_size) {
    std::size_t n = std::min(batch_size, rows.size() - first);
    std::vector<std::size_t> batch(rows.begin() + first, rows.begin() + first + n);
    Tensor y = data.load_rows(batch);
    Tensor cond = model.arch.cond_dim ? view_cond_features(data.info(), batch) : Tensor();
    auto [mu, lv] = model.encoder.forward(y, cond);
    if (mc_samples == 0) {
      std::copy(mu.data(), mu.data() + mu.size(), out.data() + first * latent);
    } else {
      if (!rng) throw std::invalid_argument("encoded_means: sampling needs an rng");
      Tensor acc = Tensor::zeros(mu.shape());
      for (std::size_t s = 0; s < mc_samples; ++s) {
        Tensor eps = Tensor::randn(mu.shape(), *rng);
        Tensor z = reparameterize(mu, lv, eps);
        for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += z.data()[i];
      }
      for (std::size_t i = 0; i < acc.size(); ++i)
        out.data()[first * latent + i] = acc.data()[i] / double(mc_samples);
    }
  }
  return out;
}

PredictionSet decode_latents(const GppvaeModel& model, const DatasetView& data,
                             const Tensor& z_star, const std::vector<std::size_t>& targets,
                             std::size_t batch_size) {
  NoGradGuard ng;
  PredictionBuffers buf;
  buf.init(targets, data.info());
  for (std::size_t first = 0; first < targets.size(); first += batch_size) {
    std::size_t n = std::min(batch_size, targets.size() - first);
    std::vector<std::size_t> rows(targets.begin() + first, targets.begin() + first + n);
    std::vector<std::size_t> zi(n);
    for (std::size_t i = 0; i < n; ++i) zi[i] = first + i;
    Tensor z = take_rows(z_star, zi);
    Tensor cond = model.arch.cond_dim ? view_cond_features(data.info(), rows) : Tensor();
    Tensor rec = model.decoder.forward(z, cond);
    Tensor truth = data.load_rows(rows);
    for (std::size_t i = 0; i < n; ++i) buf.store(first + i, rec, i, truth);
  }
  return std::move(buf.set);
}

}  // namespace

PredictionSet gppvae_predict_with_latents(const GppvaeModel& model, const DatasetView& data,
                                          const Tensor& z_train,
                                          const std::vector<std::size_t>& target_rows,
                                          std::size_t batch_size) {
  if (!model.has_gp())
    throw std::invalid_argument("gppvae_predict: checkpoint has no GP side");
  const DatasetInfo& info = data.info();
  const auto& train_rows = info.train_idx;
  if (z_train.extent(0) != train_rows.size())
    throw std::invalid_argument("gppvae_predict: latents do not align with the training set");

  NoGradGuard ng;
  Tensor vf = model.view_factor_values();
  std::vector<std::size_t> p_train(train_rows.size()), q_train(train_rows.size());
  for (std::size_t i = 0; i < train_rows.size(); ++i) {
    p_train[i] = info.object_ids[train_rows[i]];
    q_train[i] = info.view_ids[train_rows[i]];
  }
  Tensor v_train = factor_rows(model.X, vf, p_train, q_train);
  double alpha = std::exp(model.alpha_raw.value());
  LatentPredictor predictor(v_train, alpha, z_train);

  std::vector<std::size_t> p_star(target_rows.size()), q_star(target_rows.size());
  for (std::size_t i = 0; i < target_rows.size(); ++i) {
    p_star[i] = info.object_ids[target_rows[i]];
    q_star[i] = info.view_ids[target_rows[i]];
  }
  Tensor v_star = factor_rows(model.X, vf, p_star, q_star);
  Tensor z_star = predictor.predict(v_star);
  return decode_latents(model, data, z_star, target_rows, batch_size);
}

PredictionSet gppvae_predict(const GppvaeModel& model, const DatasetView& data,
                             const std::vector<std::size_t>& target_rows,
                             std::size_t batch_size, std::size_t mc_samples, Rng* rng) {
  Tensor z_train =
      encoded_means(model, data, data.info().train_idx, batch_size, mc_samples, rng);
  return gppvae_predict_with_latents(model, data, z_train, target_rows, batch_size);
}

PredictionSet livae_predict(const GppvaeModel& vae, const DatasetView& data,
                            const std::vector<std::size_t>& target_rows,
                            std::size_t batch_size) {
  const DatasetInfo& info = data.info();
  const auto& train_rows = info.train_idx;
  Tensor z_train = encoded_means(vae, data, train_rows, batch_size, 0, nullptr);
  std::size_t latent = vae.arch.latent;

  // observed training views per object
  std::map<std::size_t, std::vector<std::size_t>> by_object;  // object -> train positions
  for (std::size_t i = 0; i < train_rows.size(); ++i)
    by_object[info.object_ids[train_rows[i]]].push_back(i);

  auto circ = [](double d) {
    double t = std::fmod(d, 2.0 * M_PI);
    return t < 0 ? t + 2.0 * M_PI : t;
  };

  Tensor z_star = Tensor::zeros({target_rows.size(), latent});
  std::vector<char> filled(target_rows.size(), 0);
  std::vector<std::size_t> skipped;
  for (std::size_t i = 0; i < target_rows.size(); ++i) {
    std::size_t obj = info.object_ids[target_rows[i]];
    double target_angle = info.angles[info.view_ids[target_rows[i]]];
    auto it = by_object.find(obj);
    if (it == by_object.end() || it->second.size() < 2) {
      skipped.push_back(target_rows[i]);
      continue;
    }
    // flanking observed views, wrapping around the circle
    std::size_t before = 0, after = 0;
    double d_before = 1e9, d_after = 1e9;
    for (std::size_t pos : it->second) {
      double a = info.angles[info.view_ids[train_rows[pos]]];
      double db = circ(target_angle - a);  // how far behind the target
      double da = circ(a - target_angle);  // how far ahead
      if (db < d_before) {
        d_before = db;
        before = pos;
      }
      if (da < d_after) {
        d_after = da;
        after = pos;
      }
    }
    double denom = d_before + d_after;
    double w_before = denom > 0 ? d_after / denom : 0.5;
    double w_after = denom > 0 ? d_before / denom : 0.5;
    for (std::size_t l = 0; l < latent; ++l)
      z_star.set({i, l}, w_before * z_train.at({before, l}) + w_after * z_train.at({after, l}));
    filled[i] = 1;
  }

  // decode only the predictable rows
  std::vector<std::size_t> kept_targets;
  std::vector<std::size_t> kept_zi;
  for (std::size_t i = 0; i < target_rows.size(); ++i)
    if (filled[i]) {
      kept_targets.push_back(target_rows[i]);
      kept_zi.push_back(i);
    }
  Tensor z_kept = take_rows(z_star, kept_zi).detach();
  PredictionSet out = decode_latents(vae, data, z_kept, kept_targets, batch_size);
  out.skipped = std::move(skipped);
  return out;
}

PredictionSet cvae_predict(const GppvaeModel& cvae, const DatasetView& data,
                           const std::vector<std::size_t>& target_rows,
                           std::size_t batch_size) {
  if (cvae.arch.cond_dim == 0)
    throw std::invalid_argument("cvae_predict: checkpoint is not conditioned on views");
  const DatasetInfo& info = data.info();
  const auto& train_rows = info.train_idx;
  Tensor z_train = encoded_means(cvae, data, train_rows, batch_size, 0, nullptr);
  std::size_t latent = cvae.arch.latent;

  std::map<std::size_t, std::vector<std::size_t>> by_object;
  for (std::size_t i = 0; i < train_rows.size(); ++i)
    by_object[info.object_ids[train_rows[i]]].push_back(i);

  Tensor z_star = Tensor::zeros({target_rows.size(), latent});
  for (std::size_t i = 0; i < target_rows.size(); ++i) {
    std::size_t obj = info.object_ids[target_rows[i]];
    auto it = by_object.find(obj);
    if (it == by_object.end())
      throw std::invalid_argument("cvae_predict: object " + std::to_string(obj) +
                                  " has no training images");
    for (std::size_t pos : it->second)
      for (std::size_t l = 0; l < latent; ++l)
        z_star.set({i, l}, z_star.at({i, l}) + z_train.at({pos, l}));
    for (std::size_t l = 0; l < latent; ++l)
      z_star.set({i, l}, z_star.at({i, l}) / double(it->second.size()));
  }
  return decode_latents(cvae, data, z_star, target_rows, batch_size);
}

PredictionSet predict_for_kind(const GppvaeModel& model, const DatasetView& data,
                               const std::vector<std::size_t>& target_rows,
                               std::size_t batch_size) {
  switch (model.kind) {
    case ModelKind::gppvae_joint:
    case ModelKind::gppvae_dis:
      return gppvae_predict(model, data, target_rows, batch_size);
    case ModelKind::cvae:
      return cvae_predict(model, data, target_rows, batch_size);
    case ModelKind::vae:
      return livae_predict(model, data, target_rows, batch_size);
  }
  throw std::logic_error("predict_for_kind: unknown model kind");
}

}  // namespace gppvae
