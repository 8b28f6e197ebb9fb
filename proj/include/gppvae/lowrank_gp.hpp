#pragma once

#include <cstddef>
#include <memory>

#include "gppvae/tensor.hpp"

namespace gppvae {

// Algebra on K = V V^T + alpha I via the H x H capacitance matrix
// alpha I + V^T V. All math in 64-bit; a jitter of 1e-10 * alpha is added to
// the capacitance diagonal before factoring. Everything here is value-level:
// gradients of the GP term travel through the Taylor coefficients instead.
class CapacitanceFactor {
 public:
  CapacitanceFactor(const Tensor& V, double alpha);
  std::size_t n() const;
  std::size_t h() const;
  double alpha() const;

  Tensor solve(const Tensor& M) const;  // K^{-1} M, M is N x *
  double logdet() const;                // log det K
  double trace_inv() const;             // tr(K^{-1})

 private:
  struct Impl;
  std::shared_ptr<const Impl> impl_;
};

Tensor woodbury_solve(const Tensor& V, double alpha, const Tensor& M);
double logdet(const Tensor& V, double alpha);
double trace_inv(const Tensor& V, double alpha);

// sum_l log N(z_l | 0, K); Z is N x L.
double gp_log_density(const Tensor& Z, const Tensor& V, double alpha);
double gp_log_density(const Tensor& Z, const CapacitanceFactor& cap);

// Posterior mean of latent rows for query factor rows v_star (S x H):
// z_star = v_star V^T K^{-1} Z_train. The H x L projection is cached so
// repeated queries cost O(H L) each.
class LatentPredictor {
 public:
  LatentPredictor(const Tensor& V, double alpha, const Tensor& Z_train);
  Tensor predict(const Tensor& v_star_rows) const;  // S x H -> S x L

 private:
  Tensor projection_;  // H x L
};

Tensor gp_predict_latent(const Tensor& v_star_rows, const Tensor& V, double alpha,
                         const Tensor& Z_train);

}  // namespace gppvae
