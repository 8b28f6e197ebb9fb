#include "gppvae/kernels.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <stdexcept>

namespace gppvae {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double PeriodicSEKernel::operator()(double delta) const {
  double s = std::sin(M_PI * std::abs(delta) / period);
  return beta() * std::exp(-2.0 * s * s / (nu() * nu()));
}

double periodic_se(double delta, double beta_raw, double nu_raw, double period) {
  PeriodicSEKernel k{beta_raw, nu_raw, period};
  return k(delta);
}

ObjectFeatures ObjectFeatures::init(std::size_t P, std::size_t M, Rng& rng) {
  ObjectFeatures f;
  f.X = Tensor::randn({P, M}, rng);
  double s = 1.0 / std::sqrt(static_cast<double>(M));
  for (std::size_t i = 0; i < f.X.size(); ++i) f.X.data()[i] *= s;
  return f;
}

Tensor periodic_cov(const PeriodicSEKernel& k, const std::vector<double>& angles) {
  std::size_t q = angles.size();
  Tensor cov = Tensor::zeros({q, q});
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < q; ++j) cov.set({i, j}, k(angles[i] - angles[j]));
  return cov;
}

Tensor view_factor(const Tensor& cov) {
  if (cov.ndim() != 2 || cov.extent(0) != cov.extent(1))
    throw std::invalid_argument("view_factor: covariance must be square, got " +
                                shape_str(cov.shape()));
  std::size_t q = cov.extent(0);
  double scale = 0.0;
  for (std::size_t i = 0; i < cov.size(); ++i) scale = std::max(scale, std::abs(cov.data()[i]));
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = i + 1; j < q; ++j)
      if (std::abs(cov.at({i, j}) - cov.at({j, i})) > 1e-9 * std::max(scale, 1.0))
        throw std::invalid_argument("view_factor: covariance not symmetric at (" +
                                    std::to_string(i) + "," + std::to_string(j) + ")");

  Eigen::Map<const MatRM> c(cov.data(), q, q);
  Eigen::MatrixXd cmat = c;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cmat);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("view_factor: eigendecomposition failed");
  Eigen::VectorXd evals = es.eigenvalues();  // ascending
  Eigen::MatrixXd evecs = es.eigenvectors();

  double lmax = std::max(evals.maxCoeff(), 0.0);
  double floor = 1e-10 * lmax;
  std::vector<std::size_t> keep;
  for (std::size_t i = q; i-- > 0;)  // descending eigenvalue order
    if (evals[static_cast<Eigen::Index>(i)] > floor) keep.push_back(i);

  Tensor fac = Tensor::zeros({q, keep.size()});
  for (std::size_t col = 0; col < keep.size(); ++col) {
    Eigen::Index src = static_cast<Eigen::Index>(keep[col]);
    double s = std::sqrt(evals[src]);
    // deterministic sign: largest-magnitude entry positive
    Eigen::Index piv;
    evecs.col(src).cwiseAbs().maxCoeff(&piv);
    double sign = evecs(piv, src) >= 0 ? 1.0 : -1.0;
    for (std::size_t r = 0; r < q; ++r)
      fac.set({r, col}, sign * s * evecs(static_cast<Eigen::Index>(r), src));
  }
  return fac;
}

Tensor view_factor(const PeriodicSEKernel& k, const std::vector<double>& angles) {
  return view_factor(periodic_cov(k, angles));
}

Tensor factor_rows(const Tensor& X, const Tensor& view_fac,
                   const std::vector<std::size_t>& object_idx,
                   const std::vector<std::size_t>& view_idx) {
  if (object_idx.size() != view_idx.size())
    throw std::invalid_argument("factor_rows: assignment lengths disagree");
  return rowwise_kron(take_rows(X, object_idx), take_rows(view_fac, view_idx));
}

LowRankCov build_factor(const Tensor& X, const Tensor& view_fac,
                        const std::vector<std::size_t>& object_idx,
                        const std::vector<std::size_t>& view_idx, double alpha_raw) {
  LowRankCov cov;
  cov.V = factor_rows(X, view_fac, object_idx, view_idx).detach();
  cov.alpha_raw = alpha_raw;
  cov.object_idx = object_idx;
  cov.view_idx = view_idx;
  return cov;
}

// ---------------------------------------------------------------------------
// CirculantViewFactor

CirculantViewFactor::CirculantViewFactor(std::size_t Q, double period)
    : q_(Q), period_(period) {
  if (Q < 2) throw std::invalid_argument("CirculantViewFactor: need Q >= 2");
  neg2_sin2_ = Tensor::zeros({1, Q});
  for (std::size_t j = 0; j < Q; ++j) {
    double delta = 2.0 * M_PI * static_cast<double>(j) / static_cast<double>(Q);
    double s = std::sin(M_PI * delta / period);
    neg2_sin2_.set({0, j}, -2.0 * s * s);
  }

  struct Col {
    std::size_t m;
    bool is_sin;
  };
  std::vector<Col> cols;
  cols.push_back({0, false});
  for (std::size_t m = 1; 2 * m < Q; ++m) {
    cols.push_back({m, false});
    cols.push_back({m, true});
  }
  if (Q % 2 == 0) cols.push_back({Q / 2, false});

  // structural rank: probe eigenvalues at a few lengthscales; columns whose
  // eigenvalue vanishes for every probe are aliased out by the grid itself
  auto eigenvalue = [&](std::size_t m, double nu) {
    double acc = 0.0;
    for (std::size_t j = 0; j < Q; ++j) {
      double cj = std::exp(neg2_sin2_.at({0, j}) / (nu * nu));
      acc += cj * std::cos(2.0 * M_PI * static_cast<double>(m * j) / static_cast<double>(Q));
    }
    return acc;
  };
  std::vector<Col> kept;
  for (const auto& col : cols) {
    bool alive = false;
    for (double nu : {0.5, 1.0, 2.3}) {
      double lm = eigenvalue(col.m, nu);
      double l0 = eigenvalue(0, nu);
      if (lm > 1e-12 * std::max(l0, 1.0)) alive = true;
    }
    if (alive) kept.push_back(col);
  }
  if (kept.empty()) throw std::runtime_error("CirculantViewFactor: degenerate grid");

  std::size_t qp = kept.size();
  dft_ = Tensor::zeros({Q, qp});
  basis_ = Tensor::zeros({Q, qp});
  for (std::size_t c = 0; c < qp; ++c) {
    std::size_t m = kept[c].m;
    for (std::size_t j = 0; j < Q; ++j)
      dft_.set({j, c},
               std::cos(2.0 * M_PI * static_cast<double>(m * j) / static_cast<double>(Q)));
    bool half = (m == 0) || (Q % 2 == 0 && m == Q / 2);
    double nrm = half ? std::sqrt(1.0 / static_cast<double>(Q))
                      : std::sqrt(2.0 / static_cast<double>(Q));
    for (std::size_t r = 0; r < Q; ++r) {
      double phase = 2.0 * M_PI * static_cast<double>(m * r) / static_cast<double>(Q);
      basis_.set({r, c}, nrm * (kept[c].is_sin ? std::sin(phase) : std::cos(phase)));
    }
  }
}

Tensor CirculantViewFactor::factor(const Tensor& beta_raw_param,
                                   const Tensor& nu_raw_param) const {
  if (beta_raw_param.size() != 1 || nu_raw_param.size() != 1)
    throw std::invalid_argument("CirculantViewFactor::factor: raw params must be scalars");
  Tensor inv_nu2 = exp(scale(nu_raw_param, -2.0));
  Tensor kernel_row = exp(add(mul(neg2_sin2_, inv_nu2), beta_raw_param));
  Tensor evals = matmul(kernel_row, dft_);  // 1 x Q'
  Tensor scales = sqrt_clamped(reshape(evals, {cols()}));
  return mul_rowvec(basis_, scales);
}

// ---------------------------------------------------------------------------
// FullRankViewCov

FullRankViewCov::FullRankViewCov(std::size_t Q) : q_(Q) {
  raw_ = Tensor::zeros({Q, Q});  // exp(0) diagonal = identity factor
}

Tensor FullRankViewCov::factor() const {
  std::size_t q = q_;
  Tensor out = make_op({q, q}, {raw_}, [q](TensorNode& n) {
    TensorNode* p = n.parents[0].get();
    if (!(p->requires_grad || p->on_graph_path)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < q; ++i) {
      for (std::size_t j = 0; j < i; ++j) p->grad[i * q + j] += n.grad[i * q + j];
      p->grad[i * q + i] += n.grad[i * q + i] * n.data[i * q + i];
    }
  });
  const double* r = raw_.data();
  double* o = out.data();
  for (std::size_t i = 0; i < q; ++i) {
    for (std::size_t j = 0; j < i; ++j) o[i * q + j] = r[i * q + j];
    o[i * q + i] = std::exp(r[i * q + i]);
  }
  return out;
}

Tensor FullRankViewCov::cov_values() const {
  Tensor L = factor().detach();
  return matmul(L, transpose(L)).detach();
}

}  // namespace gppvae
