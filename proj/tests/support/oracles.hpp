#pragma once

// Test-side reference implementations. These deliberately take the dense
// O(N^3) route so the low-rank library code is checked against an
// independent path.

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "gppvae/tensor.hpp"

namespace oracle {

using gppvae::Tensor;
using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<const MatRM>;

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
  std::size_t r = t.extent(0), c = t.size() / t.extent(0);
  return MapRM(t.data(), r, c);
}

inline Tensor to_tensor(const Eigen::MatrixXd& m) {
  Tensor t = Tensor::zeros({(std::size_t)m.rows(), (std::size_t)m.cols()});
  Eigen::Map<MatRM>(t.data(), m.rows(), m.cols()) = m;
  return t;
}

inline Eigen::MatrixXd dense_k(const Tensor& V, double alpha) {
  Eigen::MatrixXd v = to_eigen(V);
  Eigen::MatrixXd k = v * v.transpose();
  k.diagonal().array() += alpha;
  return k;
}

inline Tensor dense_solve(const Tensor& V, double alpha, const Tensor& M) {
  Eigen::LLT<Eigen::MatrixXd> llt(dense_k(V, alpha));
  return to_tensor(llt.solve(to_eigen(M)));
}

inline double dense_logdet(const Tensor& V, double alpha) {
  Eigen::LLT<Eigen::MatrixXd> llt(dense_k(V, alpha));
  double ld = 0.0;
  for (Eigen::Index i = 0; i < llt.matrixLLT().rows(); ++i)
    ld += 2.0 * std::log(llt.matrixLLT()(i, i));
  return ld;
}

inline double dense_trace_inv(const Tensor& V, double alpha) {
  return dense_k(V, alpha).inverse().trace();
}

// sum over columns of Z of a dense multivariate normal log density
inline double dense_mvn_logpdf_cols(const Tensor& Z, const Tensor& V, double alpha) {
  Eigen::MatrixXd k = dense_k(V, alpha);
  Eigen::LLT<Eigen::MatrixXd> llt(k);
  Eigen::MatrixXd z = to_eigen(Z);
  double ld = 0.0;
  for (Eigen::Index i = 0; i < llt.matrixLLT().rows(); ++i)
    ld += 2.0 * std::log(llt.matrixLLT()(i, i));
  double total = 0.0;
  for (Eigen::Index l = 0; l < z.cols(); ++l) {
    Eigen::VectorXd col = z.col(l);
    double quad = col.dot(llt.solve(col));
    total += -0.5 * quad - 0.5 * ld - 0.5 * z.rows() * std::log(2.0 * M_PI);
  }
  return total;
}

// GP regression posterior mean with cross covariance k_star = V v_star^T
inline Tensor dense_gp_mean(const Tensor& v_star, const Tensor& V, double alpha,
                            const Tensor& Z) {
  Eigen::MatrixXd k = dense_k(V, alpha);
  Eigen::LLT<Eigen::MatrixXd> llt(k);
  Eigen::MatrixXd kstar = to_eigen(V) * to_eigen(v_star).transpose();  // N x S
  Eigen::MatrixXd out = kstar.transpose() * llt.solve(to_eigen(Z));    // S x L
  return to_tensor(out);
}

}  // namespace oracle
