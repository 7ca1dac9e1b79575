#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <stdexcept>

namespace bdnp {

struct SpectralNormResult {
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Largest singular value by power iteration on the smaller Gram matrix
/// (M^T M or M M^T). Stops once the eigen-residual ||G v - lambda v|| falls
/// to `tol * lambda`; `converged` is false if `max_iter` is reached first.
template <typename Derived>
SpectralNormResult spectral_norm_power(const Eigen::MatrixBase<Derived>& m, double tol = 1e-6,
                                       int max_iter = 20000) {
  const Eigen::MatrixXd a = m.template cast<double>();
  const Eigen::MatrixXd gram = a.rows() < a.cols() ? Eigen::MatrixXd(a * a.transpose())
                                                   : Eigen::MatrixXd(a.transpose() * a);
  SpectralNormResult r;
  if (gram.size() == 0) {
    r.converged = true;
    return r;
  }
  // Fixed pseudo-random start.
  std::mt19937_64 rng(0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Eigen::VectorXd v(gram.rows());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = unit(rng);
  v.normalize();

  double lambda = 0.0;
  for (int it = 1; it <= max_iter; ++it) {
    const Eigen::VectorXd w = gram * v;
    lambda = v.dot(w);
    r.iterations = it;
    const double wn = w.norm();
    if (wn == 0.0) {
      lambda = 0.0;
      r.converged = true;
      break;
    }
    if ((w - lambda * v).norm() <= tol * std::abs(lambda)) {
      r.converged = true;
      break;
    }
    v = w / wn;
  }
  r.value = std::sqrt(std::max(lambda, 0.0));
  return r;
}

/// Spectral norm with a dense SVD fallback when power iteration stalls.
template <typename Derived>
double spectral_norm(const Eigen::MatrixBase<Derived>& m) {
  if (!m.allFinite()) throw std::invalid_argument("spectral_norm: non-finite weights");
  const SpectralNormResult r = spectral_norm_power(m);
  if (r.converged) return r.value;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m.template cast<double>());
  return svd.singularValues().size() ? svd.singularValues()[0] : 0.0;
}

}  // namespace bdnp
