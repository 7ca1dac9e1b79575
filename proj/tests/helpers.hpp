#pragma once

#include "bdnp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>
#include <vector>

namespace testing {

using bdnp::Index;
using bdnp::Tensor;

template <typename Scalar = double>
Tensor<Scalar> random_tensor(bdnp::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor<Scalar>::uniform(std::move(shape), Scalar(lo), Scalar(hi), rng);
}

// Six nested loops, no im2col.
template <typename Scalar>
Tensor<Scalar> naive_conv(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>* b,
                          Index stride, Index pad) {
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const Index oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor<Scalar> y({n, cout, oh, ow});
  for (Index s = 0; s < n; ++s)
    for (Index o = 0; o < cout; ++o)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          double acc = b ? double((*b)[o]) : 0.0;
          for (Index c = 0; c < cin; ++c)
            for (Index p = 0; p < kh; ++p)
              for (Index q = 0; q < kw; ++q) {
                const Index r = i * stride + p - pad, col = j * stride + q - pad;
                if (r < 0 || r >= h || col < 0 || col >= wd) continue;
                acc += double(x(s, c, r, col)) * double(w(o, c, p, q));
              }
          y(s, o, i, j) = Scalar(acc);
        }
  return y;
}

// Central differences of f over every element of x, compared with `analytic`
// by the norm-wise relative error.
template <typename Scalar>
double fd_error(Tensor<Scalar>& x, const Tensor<Scalar>& analytic, const std::function<double()>& f, double step) {
  if (x.shape() != analytic.shape()) return 1e300;
  Eigen::VectorXd numeric(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar keep = x[i];
    x[i] = keep + Scalar(step);
    const double up = f();
    x[i] = keep - Scalar(step);
    const double down = f();
    x[i] = keep;
    numeric[i] = (up - down) / (2.0 * step);
  }
  const Eigen::VectorXd a = analytic.data().template cast<double>();
  const double scale = std::max({a.norm(), numeric.norm(), 1e-12});
  return (a - numeric).norm() / scale;
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

template <typename Scalar>
double max_rel_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b, double floor = 1e-8) {
  double m = 0.0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, rel_err(double(a[i]), double(b[i]), floor));
  return m;
}

template <typename Scalar>
double max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return (a.data().template cast<double>() - b.data().template cast<double>()).cwiseAbs().maxCoeff();
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("bdnp_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

inline void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << bytes;
}

}  // namespace testing
