#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "gppvae/tensor.hpp"

namespace gppvae {

// beta * exp(-2 sin^2(pi |delta| / period) / nu^2), raw parameters in log
// space so the realized amplitude and lengthscale stay positive. The default
// period pi matches the rotation kernel as used on angle differences.
struct PeriodicSEKernel {
  double beta_raw = 0.0;
  double nu_raw = 0.0;
  double period = M_PI;

  double beta() const { return std::exp(beta_raw); }
  double nu() const { return std::exp(nu_raw); }
  double operator()(double delta) const;
};

double periodic_se(double delta, double beta_raw, double nu_raw, double period = M_PI);

struct LinearKernel {
  double operator()(const double* a, const double* b, std::size_t m) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) acc += a[i] * b[i];
    return acc;
  }
};

// Learned object feature matrix X (P x M).
struct ObjectFeatures {
  Tensor X;
  // i.i.d. N(0, 1/M) entries: unit-scale object covariance at init
  static ObjectFeatures init(std::size_t P, std::size_t M, Rng& rng);
};

// Q x Q' factor L with L L^T = cov to round-off; eigenvalues below
// 1e-10 * lambda_max are clamped to zero and their columns dropped.
// Throws on non-symmetric input. Column signs are fixed for determinism.
Tensor view_factor(const Tensor& cov);
Tensor view_factor(const PeriodicSEKernel& k, const std::vector<double>& angles);

Tensor periodic_cov(const PeriodicSEKernel& k, const std::vector<double>& angles);

// K = V V^T + alpha I with V row n = x_{p_n} (x) viewfac_{q_n}.
struct LowRankCov {
  Tensor V;  // N x H, H = M * Q'
  double alpha_raw = 0.0;
  std::vector<std::size_t> object_idx;
  std::vector<std::size_t> view_idx;
  double alpha() const { return std::exp(alpha_raw); }
};

// Row-wise Kronecker gather; works on values or as part of a gradient graph,
// shared by factor assembly in training and star-row construction in prediction.
Tensor factor_rows(const Tensor& X, const Tensor& view_fac,
                   const std::vector<std::size_t>& object_idx,
                   const std::vector<std::size_t>& view_idx);

LowRankCov build_factor(const Tensor& X, const Tensor& view_fac,
                        const std::vector<std::size_t>& object_idx,
                        const std::vector<std::size_t>& view_idx, double alpha_raw = 0.0);

// Differentiable factor of a periodic-SE covariance over an even angle grid
// 2*pi*q/Q. The grid makes the covariance circulant: its eigenbasis is the
// fixed real Fourier basis and only the eigenvalues depend on the kernel
// parameters, so the factor reduces to elementwise ops plus one constant
// matmul and stays differentiable in beta_raw and nu_raw. Columns whose
// eigenvalue vanishes identically on this grid (angle aliasing) are dropped
// once at construction.
class CirculantViewFactor {
 public:
  CirculantViewFactor(std::size_t Q, double period);
  std::size_t rows() const { return q_; }
  std::size_t cols() const { return basis_.extent(1); }
  double period() const { return period_; }
  // Q x Q' tensor; participates in the graph when the raw params do.
  Tensor factor(const Tensor& beta_raw_param, const Tensor& nu_raw_param) const;

 private:
  std::size_t q_ = 0;
  double period_ = M_PI;
  Tensor neg2_sin2_;  // 1 x Q, -2 sin^2(pi*delta_j/period)
  Tensor dft_;        // Q x Q' cosine table mapping kernel row to eigenvalues
  Tensor basis_;      // Q x Q' orthonormal circulant eigenbasis
};

// Learned full-rank view covariance parameterized by its Cholesky-style
// factor: strictly-lower-triangular entries free, diagonal through exp.
class FullRankViewCov {
 public:
  explicit FullRankViewCov(std::size_t Q);  // identity at init
  std::size_t size() const { return q_; }
  Tensor& raw() { return raw_; }
  const Tensor& raw() const { return raw_; }
  Tensor factor() const;      // Q x Q, differentiable in raw
  Tensor cov_values() const;  // realized L L^T, detached

 private:
  std::size_t q_ = 0;
  Tensor raw_;
};

}  // namespace gppvae
