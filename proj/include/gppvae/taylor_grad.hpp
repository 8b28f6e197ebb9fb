#pragma once

#include <functional>

#include "gppvae/nnet.hpp"
#include "gppvae/tensor.hpp"

namespace gppvae {

// First-order expansion of the latent GP term
//   f = 1/2 sum_l z_l^T K^{-1} z_l + (L/2) logdet K,  K = V V^T + alpha I
// around the current point. The coefficients are plain derivatives:
//   A = K^{-1} Z
//   B = -K^{-1} Z Z^T K^{-1} V + L K^{-1} V
//   c = 1/2 (-sum_l z_l^T K^{-2} z_l + L tr(K^{-1}))
// All products go through the capacitance factor, so the cost stays linear in N.
struct TaylorCoeffs {
  Tensor A;       // N x L
  Tensor B;       // N x H
  double c = 0.0;
  double f0 = 0.0;  // f at the expansion point
};

TaylorCoeffs taylor_coeffs(const Tensor& Z, const Tensor& V, double alpha);

// Batch share of the proxy a.z + tr(B^T V) + c*alpha as a graph node. The
// coefficient rows enter as constants; batch_frac spreads the alpha term so
// per-batch values sum to the full proxy. Gradients at the expansion point
// equal those of f itself.
Tensor proxy_gp_loss(const Tensor& z_rows, const Tensor& v_rows, const Tensor& alpha_node,
                     const TaylorCoeffs& coeffs, const std::vector<std::size_t>& batch_rows,
                     double batch_frac);

// One full-batch gradient under minibatch memory:
//  1. draw and store latent noise for all N rows
//  2. minibatch-encode to get Z values (no graphs kept)
//  3. Taylor coefficients across all N in low-dimensional math
//  4. minibatch graph passes accumulating gradients of
//     recon_scale * ||y - g(z)||^2 + gp_weight * proxy + reg_coeff * reg
//  5. caller applies the accumulated gradients
struct FullGradInputs {
  std::size_t n = 0;
  std::size_t batch_size = 128;
  std::function<Tensor(std::size_t first, std::size_t count)> load_images;
  const EncoderNet* encoder = nullptr;
  const DecoderNet* decoder = nullptr;

  std::function<Tensor()> view_factor;  // Q x Q'; graph when GP params require grad
  Tensor object_features;               // X, P x M
  Tensor alpha_raw;                     // scalar, realized alpha = exp
  const std::vector<std::size_t>* object_idx = nullptr;
  const std::vector<std::size_t>* view_idx = nullptr;

  double recon_scale = 1.0;  // multiplies the summed squared residual
  double gp_weight = 1.0;    // multiplies the GP term and its proxy
  double reg_coeff = 1.0;    // multiplies -1/2 sum log sigma^2
  Tensor sigma_raw;          // optional: learn log sigma_y^2 on the graph
  bool train_nets = true;
  bool train_gp = true;
};

struct StepResult {
  double ssr = 0.0;       // sum over samples and pixels of squared residual
  double gp_term = 0.0;   // -log p(Z | .) at the expansion point
  double reg_term = 0.0;  // -1/2 sum log sigma^2
  Tensor z;               // N x L sampled encodings (stored noise applied)
  Tensor mu;              // N x L encoder means
};

StepResult full_gradient_step(const FullGradInputs& in, Rng& rng);

}  // namespace gppvae
