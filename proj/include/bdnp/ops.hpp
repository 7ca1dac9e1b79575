#pragma once

#include <type_traits>

#include "bdnp/tensor.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <span>

namespace bdnp {

enum class Mode { kTrain, kInfer };

struct ConvGeometry {
  Index stride = 1;
  Index padding = 0;
};

namespace ops {

inline Index conv_output_extent(Index in, Index kernel, const ConvGeometry& g) {
  return (in + 2 * g.padding - kernel) / g.stride + 1;
}

namespace detail {

// Unrolls one sample [C,H,W] into a row-major [C*Kh*Kw, Ho*Wo] patch matrix.
template <typename Scalar>
void im2col(const Scalar* x, Index channels, Index height, Index width, Index kh, Index kw,
            const ConvGeometry& g, Index out_h, Index out_w, Scalar* cols) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        Scalar* row = cols + ((c * kh + i) * kw + j) * plane;
        for (Index oh = 0; oh < out_h; ++oh) {
          const Index ih = oh * g.stride - g.padding + i;
          for (Index ow = 0; ow < out_w; ++ow) {
            const Index iw = ow * g.stride - g.padding + j;
            const bool inside = ih >= 0 && ih < height && iw >= 0 && iw < width;
            row[oh * out_w + ow] = inside ? x[(c * height + ih) * width + iw] : Scalar(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters patch-matrix gradients back into [C,H,W].
template <typename Scalar>
void col2im(const Scalar* cols, Index channels, Index height, Index width, Index kh, Index kw,
            const ConvGeometry& g, Index out_h, Index out_w, Scalar* dx) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        const Scalar* row = cols + ((c * kh + i) * kw + j) * plane;
        for (Index oh = 0; oh < out_h; ++oh) {
          const Index ih = oh * g.stride - g.padding + i;
          if (ih < 0 || ih >= height) continue;
          for (Index ow = 0; ow < out_w; ++ow) {
            const Index iw = ow * g.stride - g.padding + j;
            if (iw < 0 || iw >= width) continue;
            dx[(c * height + ih) * width + iw] += row[oh * out_w + ow];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void check_conv(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                const Tensor<Scalar>* bias, const ConvGeometry& g) {
  input.require_rank(4, "conv2d input");
  weights.require_rank(4, "conv2d weights");
  if (input.dim(1) != weights.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) +
                     " channels but weights expect " + std::to_string(weights.dim(1)));
  }
  if (g.stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (g.padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  if (weights.dim(2) > input.dim(2) + 2 * g.padding ||
      weights.dim(3) > input.dim(3) + 2 * g.padding) {
    throw ShapeError("conv2d: kernel " + shape_string(weights.shape()) +
                     " larger than padded input " + shape_string(input.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != weights.dim(0))) {
    throw ShapeError("conv2d: bias shape " + shape_string(bias->shape()));
  }
}

template <typename Scalar>
void check_channel_vector(const Tensor<Scalar>& v, Index channels, const char* what) {
  if (v.rank() != 1 || v.dim(0) != channels) {
    throw ShapeError(std::string(what) + ": expected [" + std::to_string(channels) + "], got " +
                     shape_string(v.shape()));
  }
}

}  // namespace detail

/// Cross-correlation of [N,Cin,H,W] with [Cout,Cin,Kh,Kw] (no kernel flip).
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                      const std::type_identity_t<Tensor<Scalar>>* bias, const ConvGeometry& g) {
  detail::check_conv(input, weights, bias, g);
  using Matrix = typename Tensor<Scalar>::RowMajorMatrix;
  const Index n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index cout = weights.dim(0), kh = weights.dim(2), kw = weights.dim(3);
  const Index oh = conv_output_extent(h, kh, g), ow = conv_output_extent(w, kw, g);
  const Index patch = cin * kh * kw;

  Tensor<Scalar> out({n, cout, oh, ow});
  Matrix cols(patch, oh * ow);
  const auto wm = weights.matrix(cout, patch);
  for (Index s = 0; s < n; ++s) {
    detail::im2col(input.raw() + s * cin * h * w, cin, h, w, kh, kw, g, oh, ow, cols.data());
    Eigen::Map<Matrix> ys(out.raw() + s * cout * oh * ow, cout, oh * ow);
    ys.noalias() = wm * cols;
    if (bias) ys.colwise() += bias->data();
  }
  return out;
}

template <typename Scalar>
struct Conv2dGrads {
  Tensor<Scalar> input;  // empty unless requested
  Tensor<Scalar> weights;
  Tensor<Scalar> bias;   // empty when the forward had no bias
};

template <typename Scalar>
Conv2dGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                                    bool has_bias, const ConvGeometry& g,
                                    const Tensor<Scalar>& grad_out, bool need_input_grad) {
  using Matrix = typename Tensor<Scalar>::RowMajorMatrix;
  const Index n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index cout = weights.dim(0), kh = weights.dim(2), kw = weights.dim(3);
  const Index oh = grad_out.dim(2), ow = grad_out.dim(3);
  const Index patch = cin * kh * kw;

  Conv2dGrads<Scalar> grads;
  grads.weights = Tensor<Scalar>(weights.shape());
  if (need_input_grad) grads.input = Tensor<Scalar>(input.shape());
  auto dw = grads.weights.matrix(cout, patch);
  const auto wm = weights.matrix(cout, patch);

  Matrix cols(patch, oh * ow);
  Matrix dcols(patch, oh * ow);
  for (Index s = 0; s < n; ++s) {
    detail::im2col(input.raw() + s * cin * h * w, cin, h, w, kh, kw, g, oh, ow, cols.data());
    Eigen::Map<const Matrix> dys(grad_out.raw() + s * cout * oh * ow, cout, oh * ow);
    dw.noalias() += dys * cols.transpose();
    if (need_input_grad) {
      dcols.noalias() = wm.transpose() * dys;
      detail::col2im(dcols.data(), cin, h, w, kh, kw, g, oh, ow,
                     grads.input.raw() + s * cin * h * w);
    }
  }
  if (has_bias) {
    grads.bias = Tensor<Scalar>({cout});
    for (Index s = 0; s < n; ++s) {
      Eigen::Map<const Matrix> dys(grad_out.raw() + s * cout * oh * ow, cout, oh * ow);
      grads.bias.data() += dys.rowwise().sum();
    }
  }
  return grads;
}

/// Intermediates of a train-mode batch-norm needed by its backward pass.
template <typename Scalar>
struct BatchNormCache {
  Tensor<Scalar> normalized;  // x-hat, same shape as the input
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> batch_mean;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> batch_var;  // biased
};

namespace detail {

template <typename Scalar>
void check_batchnorm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                     const Tensor<Scalar>& beta, const Tensor<Scalar>& mean,
                     const Tensor<Scalar>& var) {
  x.require_rank(4, "batchnorm input");
  const Index c = x.dim(1);
  check_channel_vector(gamma, c, "batchnorm gamma");
  check_channel_vector(beta, c, "batchnorm beta");
  check_channel_vector(mean, c, "batchnorm running_mean");
  check_channel_vector(var, c, "batchnorm running_var");
  if ((var.data().array() < Scalar(0)).any()) {
    throw std::invalid_argument("batchnorm: running_var must be non-negative");
  }
}

// Infer-mode normalization without the eps > 0 guard.
template <typename Scalar>
Tensor<Scalar> batchnorm_infer_unchecked(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                                         const Tensor<Scalar>& beta, const Tensor<Scalar>& mean,
                                         const Tensor<Scalar>& var, Scalar eps) {
  check_batchnorm(x, gamma, beta, mean, var);
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<Scalar> y(x.shape());
  for (Index ch = 0; ch < c; ++ch) {
    const Scalar inv_std = Scalar(1) / std::sqrt(var[ch] + eps);
    const Scalar scale = gamma[ch] * inv_std;
    for (Index s = 0; s < n; ++s) {
      const Index base = (s * c + ch) * plane;
      for (Index k = 0; k < plane; ++k) {
        y[base + k] = scale * (x[base + k] - mean[ch]) + beta[ch];
      }
    }
  }
  return y;
}

template <typename Scalar>
void require_positive_eps(Scalar eps) {
  if (!(eps > Scalar(0))) throw std::invalid_argument("batchnorm: eps must be positive");
}

}  // namespace detail

/// y = gamma * (x - mean) / sqrt(var + eps) + beta with running statistics.
template <typename Scalar>
Tensor<Scalar> batchnorm_infer(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                               const Tensor<Scalar>& beta, const Tensor<Scalar>& running_mean,
                               const Tensor<Scalar>& running_var, Scalar eps) {
  detail::require_positive_eps(eps);
  return detail::batchnorm_infer_unchecked(x, gamma, beta, running_mean, running_var, eps);
}

/// Batch-statistics normalization. Running statistics move towards the batch
/// statistics as new = (1 - momentum) * old + momentum * batch, using the
/// unbiased batch variance.
template <typename Scalar>
Tensor<Scalar> batchnorm_train(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                               const Tensor<Scalar>& beta, Tensor<Scalar>& running_mean,
                               Tensor<Scalar>& running_var, Scalar eps, Scalar momentum,
                               BatchNormCache<Scalar>* cache = nullptr) {
  detail::require_positive_eps(eps);
  detail::check_batchnorm(x, gamma, beta, running_mean, running_var);
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const Index count = n * plane;
  if (count < 1) throw ShapeError("batchnorm: empty batch in train mode");

  BatchNormCache<Scalar> local;
  BatchNormCache<Scalar>& bc = cache ? *cache : local;
  bc.normalized = Tensor<Scalar>(x.shape());
  bc.inv_std.resize(c);
  bc.batch_mean.resize(c);
  bc.batch_var.resize(c);

  Tensor<Scalar> y(x.shape());
  for (Index ch = 0; ch < c; ++ch) {
    Scalar sum = 0;
    for (Index s = 0; s < n; ++s) {
      const Index base = (s * c + ch) * plane;
      for (Index k = 0; k < plane; ++k) sum += x[base + k];
    }
    const Scalar mean = sum / Scalar(count);
    Scalar sq = 0;
    for (Index s = 0; s < n; ++s) {
      const Index base = (s * c + ch) * plane;
      for (Index k = 0; k < plane; ++k) {
        const Scalar d = x[base + k] - mean;
        sq += d * d;
      }
    }
    const Scalar var = sq / Scalar(count);
    const Scalar inv_std = Scalar(1) / std::sqrt(var + eps);
    bc.batch_mean[ch] = mean;
    bc.batch_var[ch] = var;
    bc.inv_std[ch] = inv_std;
    for (Index s = 0; s < n; ++s) {
      const Index base = (s * c + ch) * plane;
      for (Index k = 0; k < plane; ++k) {
        const Scalar xhat = (x[base + k] - mean) * inv_std;
        bc.normalized[base + k] = xhat;
        y[base + k] = gamma[ch] * xhat + beta[ch];
      }
    }
    const Scalar unbiased = count > 1 ? var * Scalar(count) / Scalar(count - 1) : var;
    running_mean[ch] = (Scalar(1) - momentum) * running_mean[ch] + momentum * mean;
    running_var[ch] = (Scalar(1) - momentum) * running_var[ch] + momentum * unbiased;
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> batchnorm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                         const Tensor<Scalar>& beta, Tensor<Scalar>& running_mean,
                         Tensor<Scalar>& running_var, Scalar eps, Scalar momentum, Mode mode) {
  if (mode == Mode::kInfer) return batchnorm_infer(x, gamma, beta, running_mean, running_var, eps);
  return batchnorm_train(x, gamma, beta, running_mean, running_var, eps, momentum);
}

template <typename Scalar>
struct BatchNormGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
};

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm_train_backward(const BatchNormCache<Scalar>& cache,
                                                const Tensor<Scalar>& gamma,
                                                const Tensor<Scalar>& grad_out) {
  const Index n = grad_out.dim(0), c = grad_out.dim(1), plane = grad_out.dim(2) * grad_out.dim(3);
  const Scalar count = Scalar(n * plane);
  BatchNormGrads<Scalar> g{Tensor<Scalar>(grad_out.shape()), Tensor<Scalar>({c}),
                           Tensor<Scalar>({c})};
  for (Index ch = 0; ch < c; ++ch) {
    Scalar sum_dy = 0, sum_dy_xhat = 0;
    for (Index s = 0; s < n; ++s) {
      const Index base = (s * c + ch) * plane;
      for (Index k = 0; k < plane; ++k) {
        sum_dy += grad_out[base + k];
        sum_dy_xhat += grad_out[base + k] * cache.normalized[base + k];
      }
    }
    g.gamma[ch] = sum_dy_xhat;
    g.beta[ch] = sum_dy;
    const Scalar k_scale = gamma[ch] * cache.inv_std[ch] / count;
    for (Index s = 0; s < n; ++s) {
      const Index base = (s * c + ch) * plane;
      for (Index k = 0; k < plane; ++k) {
        g.input[base + k] = k_scale * (count * grad_out[base + k] - sum_dy -
                                       cache.normalized[base + k] * sum_dy_xhat);
      }
    }
  }
  return g;
}

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm_infer_backward(const Tensor<Scalar>& x,
                                                const Tensor<Scalar>& gamma,
                                                const Tensor<Scalar>& running_mean,
                                                const Tensor<Scalar>& running_var, Scalar eps,
                                                const Tensor<Scalar>& grad_out) {
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  BatchNormGrads<Scalar> g{Tensor<Scalar>(x.shape()), Tensor<Scalar>({c}), Tensor<Scalar>({c})};
  for (Index ch = 0; ch < c; ++ch) {
    const Scalar inv_std = Scalar(1) / std::sqrt(running_var[ch] + eps);
    Scalar sum_dy = 0, sum_dy_xhat = 0;
    for (Index s = 0; s < n; ++s) {
      const Index base = (s * c + ch) * plane;
      for (Index k = 0; k < plane; ++k) {
        const Scalar dy = grad_out[base + k];
        sum_dy += dy;
        sum_dy_xhat += dy * (x[base + k] - running_mean[ch]) * inv_std;
        g.input[base + k] = dy * gamma[ch] * inv_std;
      }
    }
    g.gamma[ch] = sum_dy_xhat;
    g.beta[ch] = sum_dy;
  }
  return g;
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.shape(), x.data().cwiseMax(Scalar(0)));
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& grad_out) {
  return Tensor<Scalar>(
      x.shape(), (x.data().array() > Scalar(0)).select(grad_out.data(), Scalar(0)).matrix());
}

/// 2x2 non-overlapping max pooling. `argmax`, when given, receives the flat
/// input index selected for every output element (first maximum wins).
template <typename Scalar>
Tensor<Scalar> maxpool2(const Tensor<Scalar>& x, std::vector<Index>* argmax = nullptr) {
  x.require_rank(4, "maxpool2 input");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2: spatial dims must be even, got " + shape_string(x.shape()));
  }
  const Index oh = h / 2, ow = w / 2;
  Tensor<Scalar> y({n, c, oh, ow});
  if (argmax) argmax->assign(static_cast<std::size_t>(y.size()), 0);
  Index out = 0;
  for (Index p = 0; p < n * c; ++p) {
    const Index base = p * h * w;
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j, ++out) {
        Index best = base + (2 * i) * w + 2 * j;
        for (Index di = 0; di < 2; ++di) {
          for (Index dj = 0; dj < 2; ++dj) {
            const Index k = base + (2 * i + di) * w + 2 * j + dj;
            if (x[k] > x[best]) best = k;
          }
        }
        y[out] = x[best];
        if (argmax) (*argmax)[static_cast<std::size_t>(out)] = best;
      }
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> maxpool2_backward(const Shape& input_shape, const std::vector<Index>& argmax,
                                 const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> dx(input_shape);
  for (Index k = 0; k < grad_out.size(); ++k) dx[argmax[static_cast<std::size_t>(k)]] += grad_out[k];
  return dx;
}

/// [N,C,H,W] -> [N,C] spatial mean.
template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  x.require_rank(4, "global_avg_pool input");
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<Scalar> y({n, c});
  y.data() = x.matrix(n * c, plane).rowwise().sum() / Scalar(plane);
  return y;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Shape& input_shape, const Tensor<Scalar>& grad_out) {
  const Index plane = input_shape[2] * input_shape[3];
  Tensor<Scalar> dx(input_shape);
  auto m = dx.matrix(grad_out.size(), plane);
  m.colwise() = grad_out.data() / Scalar(plane);
  return dx;
}

/// Affine map y = x W^T + b for x [N,F], W [K,F], b [K].
template <typename Scalar>
Tensor<Scalar> dense(const Tensor<Scalar>& x, const Tensor<Scalar>& weights,
                     const Tensor<Scalar>& bias) {
  x.require_rank(2, "dense input");
  weights.require_rank(2, "dense weights");
  if (x.dim(1) != weights.dim(1)) {
    throw ShapeError("dense: input features " + std::to_string(x.dim(1)) + " vs weights " +
                     shape_string(weights.shape()));
  }
  detail::check_channel_vector(bias, weights.dim(0), "dense bias");
  const Index n = x.dim(0), f = x.dim(1), k = weights.dim(0);
  Tensor<Scalar> y({n, k});
  auto ym = y.matrix(n, k);
  ym.noalias() = x.matrix(n, f) * weights.matrix(k, f).transpose();
  ym.rowwise() += bias.data().transpose();
  return y;
}

template <typename Scalar>
struct DenseGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weights;
  Tensor<Scalar> bias;
};

template <typename Scalar>
DenseGrads<Scalar> dense_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& weights,
                                  const Tensor<Scalar>& grad_out) {
  const Index n = x.dim(0), f = x.dim(1), k = weights.dim(0);
  DenseGrads<Scalar> g{Tensor<Scalar>(x.shape()), Tensor<Scalar>(weights.shape()),
                       Tensor<Scalar>({k})};
  const auto dy = grad_out.matrix(n, k);
  g.input.matrix(n, f).noalias() = dy * weights.matrix(k, f);
  g.weights.matrix(k, f).noalias() = dy.transpose() * x.matrix(n, f);
  g.bias.data() = dy.colwise().sum().transpose();
  return g;
}

namespace detail {

template <typename Scalar>
void check_labels(const Tensor<Scalar>& logits, std::span<const int> labels) {
  logits.require_rank(2, "softmax_cross_entropy logits");
  if (static_cast<Index>(labels.size()) != logits.dim(0)) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(logits.dim(0)) + " rows");
  }
  if (logits.dim(0) == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  for (int y : labels) {
    if (y < 0 || y >= logits.dim(1)) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) +
                              " outside [0, " + std::to_string(logits.dim(1)) + ")");
    }
  }
}

}  // namespace detail

/// Row-wise softmax with max subtraction.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits) {
  const Index n = logits.dim(0), k = logits.dim(1);
  Tensor<Scalar> p(logits.shape());
  for (Index i = 0; i < n; ++i) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < k; ++j) mx = std::max(mx, logits(i, j));
    Scalar z = 0;
    for (Index j = 0; j < k; ++j) {
      p(i, j) = std::exp(logits(i, j) - mx);
      z += p(i, j);
    }
    for (Index j = 0; j < k; ++j) p(i, j) /= z;
  }
  return p;
}

/// Mean over the batch of -log softmax(logits)[label].
template <typename Scalar>
Scalar softmax_cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels) {
  detail::check_labels(logits, labels);
  const Index n = logits.dim(0), k = logits.dim(1);
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < k; ++j) mx = std::max(mx, logits(i, j));
    Scalar z = 0;
    for (Index j = 0; j < k; ++j) z += std::exp(logits(i, j) - mx);
    total += std::log(z) + mx - logits(i, labels[static_cast<std::size_t>(i)]);
  }
  return total / Scalar(n);
}

template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy_backward(const Tensor<Scalar>& logits,
                                              std::span<const int> labels, Scalar grad_loss) {
  Tensor<Scalar> g = softmax(logits);
  const Index n = logits.dim(0);
  for (Index i = 0; i < n; ++i) g(i, labels[static_cast<std::size_t>(i)]) -= Scalar(1);
  g.data() *= grad_loss / Scalar(n);
  return g;
}

}  // namespace ops
}  // namespace bdnp
