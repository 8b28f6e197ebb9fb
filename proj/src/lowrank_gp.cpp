#include "gppvae/lowrank_gp.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace gppvae {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<const MatRM>;

struct CapacitanceFactor::Impl {
  std::size_t n = 0;
  std::size_t h = 0;
  double alpha = 0.0;
  Tensor v;  // keeps the factor alive for solves
  Eigen::MatrixXd vtv;
  Eigen::LLT<Eigen::MatrixXd> llt;
};

static void check_factor(const Tensor& V, double alpha) {
  if (!V.defined() || V.ndim() != 2)
    throw std::invalid_argument("lowrank_gp: V must be a 2-d factor");
  if (!(alpha > 0.0))
    throw std::invalid_argument("lowrank_gp: alpha must be positive, got " +
                                std::to_string(alpha));
  const double* d = V.data();
  for (std::size_t i = 0; i < V.size(); ++i)
    if (!std::isfinite(d[i])) throw std::runtime_error("lowrank_gp: non-finite factor entry");
}

CapacitanceFactor::CapacitanceFactor(const Tensor& V, double alpha) {
  check_factor(V, alpha);
  auto impl = std::make_shared<Impl>();
  impl->n = V.extent(0);
  impl->h = V.extent(1);
  impl->alpha = alpha;
  impl->v = V;
  MapRM vm(V.data(), impl->n, impl->h);
  impl->vtv.noalias() = vm.transpose() * vm;
  Eigen::MatrixXd cap = impl->vtv;
  cap.diagonal().array() += alpha * (1.0 + 1e-10);
  impl->llt.compute(cap);
  if (impl->llt.info() != Eigen::Success)
    throw std::runtime_error("lowrank_gp: Cholesky of capacitance matrix failed");
  impl_ = std::move(impl);
}

std::size_t CapacitanceFactor::n() const { return impl_->n; }
std::size_t CapacitanceFactor::h() const { return impl_->h; }
double CapacitanceFactor::alpha() const { return impl_->alpha; }

Tensor CapacitanceFactor::solve(const Tensor& M) const {
  if (!M.defined() || M.ndim() < 1 || M.extent(0) != impl_->n)
    throw std::invalid_argument("lowrank_gp::solve: M must have " + std::to_string(impl_->n) +
                                " rows, got " + shape_str(M.shape()));
  std::size_t cols = M.size() / impl_->n;
  Tensor out = Tensor::zeros(M.shape());
  MapRM mm(M.data(), impl_->n, cols);
  MapRM vm(impl_->v.data(), impl_->n, impl_->h);
  Eigen::Map<MatRM> om(out.data(), impl_->n, cols);
  Eigen::MatrixXd inner = vm.transpose() * mm;          // H x cols
  inner = impl_->llt.solve(inner);
  om.noalias() = vm * inner;
  om = (mm - om) / impl_->alpha;
  return out;
}

double CapacitanceFactor::logdet() const {
  // log det K = (N - H) log alpha + log det(alpha I + V^T V)
  double ld_cap = 0.0;
  const auto& L = impl_->llt.matrixLLT();
  for (Eigen::Index i = 0; i < L.rows(); ++i) ld_cap += 2.0 * std::log(L(i, i));
  return (static_cast<double>(impl_->n) - static_cast<double>(impl_->h)) *
             std::log(impl_->alpha) +
         ld_cap;
}

double CapacitanceFactor::trace_inv() const {
  // N/alpha - (1/alpha) tr((alpha I + V^T V)^{-1} V^T V)
  Eigen::MatrixXd sol = impl_->llt.solve(impl_->vtv);
  return static_cast<double>(impl_->n) / impl_->alpha - sol.trace() / impl_->alpha;
}

Tensor woodbury_solve(const Tensor& V, double alpha, const Tensor& M) {
  return CapacitanceFactor(V, alpha).solve(M);
}

double logdet(const Tensor& V, double alpha) { return CapacitanceFactor(V, alpha).logdet(); }

double trace_inv(const Tensor& V, double alpha) {
  return CapacitanceFactor(V, alpha).trace_inv();
}

double gp_log_density(const Tensor& Z, const CapacitanceFactor& cap) {
  if (Z.ndim() != 2 || Z.extent(0) != cap.n())
    throw std::invalid_argument("gp_log_density: Z must be N x L with N = " +
                                std::to_string(cap.n()) + ", got " + shape_str(Z.shape()));
  std::size_t n = Z.extent(0), l = Z.extent(1);
  Tensor A = cap.solve(Z);
  double quad = 0.0;
  const double* z = Z.data();
  const double* a = A.data();
  for (std::size_t i = 0; i < n * l; ++i) quad += z[i] * a[i];
  double ld = cap.logdet();
  return -0.5 * quad - 0.5 * static_cast<double>(l) * ld -
         0.5 * static_cast<double>(n * l) * std::log(2.0 * M_PI);
}

double gp_log_density(const Tensor& Z, const Tensor& V, double alpha) {
  return gp_log_density(Z, CapacitanceFactor(V, alpha));
}

LatentPredictor::LatentPredictor(const Tensor& V, double alpha, const Tensor& Z_train) {
  CapacitanceFactor cap(V, alpha);
  if (Z_train.ndim() != 2 || Z_train.extent(0) != cap.n())
    throw std::invalid_argument("LatentPredictor: Z_train must be N x L");
  Tensor kinv_z = cap.solve(Z_train);  // N x L
  std::size_t n = cap.n(), h = cap.h(), l = Z_train.extent(1);
  projection_ = Tensor::zeros({h, l});
  MapRM vm(V.data(), n, h);
  MapRM km(kinv_z.data(), n, l);
  Eigen::Map<MatRM> pm(projection_.data(), h, l);
  pm.noalias() = vm.transpose() * km;
}

Tensor LatentPredictor::predict(const Tensor& v_star_rows) const {
  if (v_star_rows.ndim() != 2 || v_star_rows.extent(1) != projection_.extent(0))
    throw std::invalid_argument("LatentPredictor::predict: rows must be S x H, got " +
                                shape_str(v_star_rows.shape()));
  return matmul(v_star_rows, projection_);
}

Tensor gp_predict_latent(const Tensor& v_star_rows, const Tensor& V, double alpha,
                         const Tensor& Z_train) {
  return LatentPredictor(V, alpha, Z_train).predict(v_star_rows);
}

}  // namespace gppvae
