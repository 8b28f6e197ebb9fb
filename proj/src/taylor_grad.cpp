#include "gppvae/taylor_grad.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "gppvae/kernels.hpp"
#include "gppvae/lowrank_gp.hpp"

namespace gppvae {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<const MatRM>;

TaylorCoeffs taylor_coeffs(const Tensor& Z, const Tensor& V, double alpha) {
  if (Z.ndim() != 2 || V.ndim() != 2 || Z.extent(0) != V.extent(0))
    throw std::invalid_argument("taylor_coeffs: Z and V must share their leading extent, got " +
                                shape_str(Z.shape()) + " and " + shape_str(V.shape()));
  std::size_t n = Z.extent(0), l = Z.extent(1), h = V.extent(1);
  CapacitanceFactor cap(V, alpha);

  TaylorCoeffs co;
  co.A = cap.solve(Z);                 // N x L
  Tensor kinv_v = cap.solve(V);        // N x H

  // B = -A (Z^T K^{-1} V) + L K^{-1} V; the inner product is L x H
  Eigen::MatrixXd inner(l, h);
  {
    MapRM zm(Z.data(), n, l);
    MapRM kv(kinv_v.data(), n, h);
    inner.noalias() = zm.transpose() * kv;
  }
  co.B = Tensor::zeros({n, h});
  {
    MapRM am(co.A.data(), n, l);
    MapRM kv(kinv_v.data(), n, h);
    Eigen::Map<MatRM> bm(co.B.data(), n, h);
    bm.noalias() = -(am * inner);
    bm += static_cast<double>(l) * kv;
  }

  double quad_sq = 0.0;  // sum_l z_l^T K^{-2} z_l = |K^{-1} Z|_F^2
  double quad = 0.0;     // sum_l z_l^T K^{-1} z_l
  const double* a = co.A.data();
  const double* z = Z.data();
  for (std::size_t i = 0; i < n * l; ++i) {
    quad_sq += a[i] * a[i];
    quad += a[i] * z[i];
  }
  co.c = 0.5 * (-quad_sq + static_cast<double>(l) * cap.trace_inv());
  co.f0 = 0.5 * quad + 0.5 * static_cast<double>(l) * cap.logdet();

  for (std::size_t i = 0; i < co.A.size(); ++i)
    if (!std::isfinite(co.A.data()[i]))
      throw std::runtime_error("taylor_coeffs: non-finite A coefficient");
  for (std::size_t i = 0; i < co.B.size(); ++i)
    if (!std::isfinite(co.B.data()[i]))
      throw std::runtime_error("taylor_coeffs: non-finite B coefficient");
  if (!std::isfinite(co.c) || !std::isfinite(co.f0))
    throw std::runtime_error("taylor_coeffs: non-finite scalar coefficient");
  return co;
}

Tensor proxy_gp_loss(const Tensor& z_rows, const Tensor& v_rows, const Tensor& alpha_node,
                     const TaylorCoeffs& coeffs, const std::vector<std::size_t>& batch_rows,
                     double batch_frac) {
  if (!coeffs.A.defined() || !coeffs.B.defined())
    throw std::invalid_argument("proxy_gp_loss: coefficients not initialized");
  if (z_rows.ndim() != 2 || z_rows.extent(0) != batch_rows.size() ||
      z_rows.extent(1) != coeffs.A.extent(1))
    throw std::invalid_argument("proxy_gp_loss: stale coefficients, z rows " +
                                shape_str(z_rows.shape()) + " vs A " +
                                shape_str(coeffs.A.shape()));
  if (v_rows.ndim() != 2 || v_rows.extent(0) != batch_rows.size() ||
      v_rows.extent(1) != coeffs.B.extent(1))
    throw std::invalid_argument("proxy_gp_loss: stale coefficients, v rows " +
                                shape_str(v_rows.shape()) + " vs B " +
                                shape_str(coeffs.B.shape()));
  for (auto r : batch_rows)
    if (r >= coeffs.A.extent(0))
      throw std::out_of_range("proxy_gp_loss: batch row " + std::to_string(r) +
                              " outside coefficient table");
  if (alpha_node.size() != 1)
    throw std::invalid_argument("proxy_gp_loss: alpha must be a scalar node");

  Tensor a_rows = take_rows(coeffs.A, batch_rows).detach();
  Tensor b_rows = take_rows(coeffs.B, batch_rows).detach();
  Tensor lin = add(sum(mul(a_rows, z_rows)), sum(mul(b_rows, v_rows)));
  return add(lin, scale(alpha_node, batch_frac * coeffs.c));
}

StepResult full_gradient_step(const FullGradInputs& in, Rng& rng) {
  if (in.n == 0 || in.batch_size == 0)
    throw std::invalid_argument("full_gradient_step: need n >= 1 and batch_size >= 1");
  if (!in.load_images || !in.encoder || !in.decoder || !in.view_factor ||
      !in.object_idx || !in.view_idx)
    throw std::invalid_argument("full_gradient_step: incomplete inputs");
  if (in.object_idx->size() != in.n || in.view_idx->size() != in.n)
    throw std::invalid_argument("full_gradient_step: assignment arrays must have n entries");

  const std::size_t n = in.n;
  const std::size_t latent = in.encoder->arch().latent;

  StepResult res;

  // (1) latent noise for every row, stored so both passes see identical z
  Tensor eps = Tensor::randn({n, latent}, rng);

  // (2) value pass: encodings without graphs
  res.z = Tensor::zeros({n, latent});
  res.mu = Tensor::zeros({n, latent});
  {
    NoGradGuard ng;
    for (std::size_t first = 0; first < n; first += in.batch_size) {
      std::size_t count = std::min(in.batch_size, n - first);
      Tensor y = in.load_images(first, count);
      auto [mu, lv] = in.encoder->forward(y);
      std::vector<std::size_t> rows(count);
      for (std::size_t i = 0; i < count; ++i) rows[i] = first + i;
      Tensor z = reparameterize(mu, lv, take_rows(eps, rows));
      std::copy(z.data(), z.data() + z.size(), res.z.data() + first * latent);
      std::copy(mu.data(), mu.data() + mu.size(), res.mu.data() + first * latent);
      if (!in.train_nets) {
        // graphs will skip the decoder, so collect loss values here
        Tensor rec = in.decoder->forward(z);
        Tensor d = sub(rec, y);
        res.ssr += sum(mul(d, d)).value();
        res.reg_term += -0.5 * sum(lv).value();
      }
    }
  }

  // (3) coefficients over all rows; value-level factor
  double alpha = std::exp(in.alpha_raw.value());
  TaylorCoeffs coeffs;
  {
    NoGradGuard ng;
    Tensor vf = in.view_factor();
    Tensor v_all = factor_rows(in.object_features, vf, *in.object_idx, *in.view_idx);
    coeffs = taylor_coeffs(res.z, v_all, alpha);
  }
  res.gp_term = coeffs.f0 +
                0.5 * static_cast<double>(n * latent) * std::log(2.0 * M_PI);

  // (4) graph pass: recon + reg + linear proxy, gradients accumulate per batch
  if (in.train_nets || in.train_gp) {
    for (std::size_t first = 0; first < n; first += in.batch_size) {
      std::size_t count = std::min(in.batch_size, n - first);
      std::vector<std::size_t> rows(count);
      for (std::size_t i = 0; i < count; ++i) rows[i] = first + i;
      double frac = static_cast<double>(count) / static_cast<double>(n);

      Tensor z_rows;
      Tensor batch_loss;
      if (in.train_nets) {
        Tensor y = in.load_images(first, count);
        auto [mu, lv] = in.encoder->forward(y);
        z_rows = reparameterize(mu, lv, take_rows(eps, rows));
        Tensor rec = in.decoder->forward(z_rows);
        Tensor d = sub(rec, y);
        Tensor ssr = sum(mul(d, d));
        res.ssr += ssr.value();
        Tensor reg = scale(sum(lv), -0.5);
        res.reg_term += reg.value();
        if (in.sigma_raw.defined()) {
          // recon / (2 sigma^2) + count*K*log sigma^2 with sigma on the graph
          std::size_t pixels = in.decoder->arch().pixels();
          Tensor inv2s = scale(exp(neg(in.sigma_raw)), 0.5);
          batch_loss = mul(ssr, inv2s);
          batch_loss = add(batch_loss,
                           scale(in.sigma_raw, static_cast<double>(count * pixels)));
        } else {
          batch_loss = scale(ssr, in.recon_scale);
        }
        batch_loss = add(batch_loss, scale(reg, in.reg_coeff));
      } else {
        z_rows = take_rows(res.z, rows).detach();
      }

      Tensor v_rows;
      Tensor alpha_node;
      if (in.train_gp) {
        Tensor vf = in.view_factor();
        std::vector<std::size_t> p_rows(count), q_rows(count);
        for (std::size_t i = 0; i < count; ++i) {
          p_rows[i] = (*in.object_idx)[first + i];
          q_rows[i] = (*in.view_idx)[first + i];
        }
        v_rows = factor_rows(in.object_features, vf, p_rows, q_rows);
        alpha_node = exp(in.alpha_raw);
      } else {
        NoGradGuard ng;
        Tensor vf = in.view_factor();
        std::vector<std::size_t> p_rows(count), q_rows(count);
        for (std::size_t i = 0; i < count; ++i) {
          p_rows[i] = (*in.object_idx)[first + i];
          q_rows[i] = (*in.view_idx)[first + i];
        }
        v_rows = factor_rows(in.object_features, vf, p_rows, q_rows);
        alpha_node = Tensor::scalar(alpha);
      }

      Tensor proxy = proxy_gp_loss(z_rows, v_rows, alpha_node, coeffs, rows, frac);
      Tensor gp_part = scale(proxy, in.gp_weight);
      batch_loss = batch_loss.defined() ? add(batch_loss, gp_part) : gp_part;

      if (!std::isfinite(batch_loss.value())) {
        std::string term = !std::isfinite(res.ssr)        ? "reconstruction term"
                           : !std::isfinite(res.reg_term) ? "regularization term"
                                                          : "gp proxy term";
        throw std::runtime_error("full_gradient_step: non-finite " + term);
      }
      batch_loss.backward();
    }
  } else {
    // nothing trainable this step; values already collected above
  }

  if (!std::isfinite(res.ssr))
    throw std::runtime_error("full_gradient_step: non-finite reconstruction term");
  if (!std::isfinite(res.reg_term))
    throw std::runtime_error("full_gradient_step: non-finite regularization term");
  if (!std::isfinite(res.gp_term))
    throw std::runtime_error("full_gradient_step: non-finite gp term");
  return res;
}

}  // namespace gppvae
