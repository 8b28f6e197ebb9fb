#pragma once

#include <vector>

#include "gppvae/datagen.hpp"
#include "gppvae/training.hpp"

namespace gppvae {

struct PredictionSet {
  std::vector<std::size_t> sample_idx;  // dataset rows, aligned with tensors
  Tensor predicted;                     // n x C x S x S
  Tensor truth;
  std::vector<double> per_sample_mse;
  std::vector<std::size_t> skipped;  // rows that could not be predicted
};

struct MseSummary {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t n = 0;
};
// pixel-mean squared error per sample; mean and std/sqrt(n) across samples
MseSummary eval_mse(const PredictionSet& pred);

// encode training data, GP-predict the latent rows for the target samples,
// decode. mc_samples = 0 plugs in encoder means; otherwise averages that many
// reparameterized draws.
PredictionSet gppvae_predict(const GppvaeModel& model, const DatasetView& data,
                             const std::vector<std::size_t>& target_rows,
                             std::size_t batch_size, std::size_t mc_samples = 0,
                             Rng* rng = nullptr);
// same, with training latents already in hand (aligned with info.train_idx)
PredictionSet gppvae_predict_with_latents(const GppvaeModel& model, const DatasetView& data,
                                          const Tensor& z_train,
                                          const std::vector<std::size_t>& target_rows,
                                          std::size_t batch_size);

// linear interpolation between the two observed views flanking the target
// angle (circular); objects with fewer than two observed views are skipped
// and reported
PredictionSet livae_predict(const GppvaeModel& vae, const DatasetView& data,
                            const std::vector<std::size_t>& target_rows,
                            std::size_t batch_size);

// encode all training images of the object (conditioned on their views),
// average the latent means, decode conditioned on the target view
PredictionSet cvae_predict(const GppvaeModel& cvae, const DatasetView& data,
                           const std::vector<std::size_t>& target_rows,
                           std::size_t batch_size);

// dispatch on the checkpoint's model kind
PredictionSet predict_for_kind(const GppvaeModel& model, const DatasetView& data,
                               const std::vector<std::size_t>& target_rows,
                               std::size_t batch_size);

}  // namespace gppvae
