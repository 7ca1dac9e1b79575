#pragma once

#include "bdnp/ops.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>

namespace bdnp {

/// Handle to a tensor slot on a Tape.
struct Var {
  std::size_t slot = 0;
};

enum class PrimitiveKind {
  kConv2d,
  kBatchNormTrain,
  kBatchNormInfer,
  kRelu,
  kMaxPool2,
  kGlobalAvgPool,
  kDense,
  kSoftmaxCrossEntropy,
  kSum,
};

/// Linear record of executed primitives for reverse-mode differentiation.
///
/// Slots are appended in execution order, so the record list is already
/// topologically sorted; backward() walks it in reverse. A tape belongs to a
/// single forward pass and must not be shared between threads.
template <typename Scalar>
class Tape {
 public:
  using TensorT = Tensor<Scalar>;

  struct Record {
    PrimitiveKind kind;
    std::vector<std::size_t> inputs;
    std::size_t output;
    std::function<void(Tape&)> backward;
  };

  /// Adds a leaf. Parameters (`requires_grad`) always receive a gradient.
  Var leaf(TensorT value, bool requires_grad = false) {
    slots_.push_back(Slot{std::move(value), TensorT{}, requires_grad});
    return Var{slots_.size() - 1};
  }

  const TensorT& value(Var v) const { return slots_.at(v.slot).value; }

  /// Gradient of the last backward() target with respect to `v`.
  const TensorT& grad(Var v) const {
    if (!backward_done_) throw std::logic_error("tape: gradients requested before backward()");
    return slots_.at(v.slot).grad;
  }

  bool requires_grad(Var v) const { return slots_.at(v.slot).requires_grad; }
  const std::vector<Record>& records() const { return records_; }
  std::size_t slot_count() const { return slots_.size(); }

  Var conv2d(Var x, Var w, std::optional<Var> b, ConvGeometry g) {
    const TensorT* bias = b ? &value(*b) : nullptr;
    TensorT y = ops::conv2d(value(x), value(w), bias, g);
    std::vector<std::size_t> in{x.slot, w.slot};
    if (b) in.push_back(b->slot);
    return record(PrimitiveKind::kConv2d, std::move(in), std::move(y),
                  [x, w, b, g](Tape& t, std::size_t out) {
                    auto grads = ops::conv2d_backward(t.value(x), t.value(w), b.has_value(), g,
                                                      t.slots_[out].grad, t.requires_grad(x));
                    t.accumulate(w, grads.weights);
                    if (b) t.accumulate(*b, grads.bias);
                    if (t.requires_grad(x)) t.accumulate(x, grads.input);
                  });
  }

  /// Train-mode batch-norm; updates the caller's running statistics in place.
  Var batchnorm_train(Var x, Var gamma, Var beta, TensorT& running_mean, TensorT& running_var,
                      Scalar eps, Scalar momentum) {
    auto cache = std::make_shared<ops::BatchNormCache<Scalar>>();
    TensorT y = ops::batchnorm_train(value(x), value(gamma), value(beta), running_mean,
                                     running_var, eps, momentum, cache.get());
    return record(PrimitiveKind::kBatchNormTrain, {x.slot, gamma.slot, beta.slot}, std::move(y),
                  [x, gamma, beta, cache](Tape& t, std::size_t out) {
                    auto g = ops::batchnorm_train_backward(*cache, t.value(gamma),
                                                           t.slots_[out].grad);
                    t.accumulate(gamma, g.gamma);
                    t.accumulate(beta, g.beta);
                    if (t.requires_grad(x)) t.accumulate(x, g.input);
                  });
  }

  Var batchnorm_infer(Var x, Var gamma, Var beta, const TensorT& running_mean,
                      const TensorT& running_var, Scalar eps) {
    TensorT y = ops::batchnorm_infer(value(x), value(gamma), value(beta), running_mean,
                                     running_var, eps);
    return record(PrimitiveKind::kBatchNormInfer, {x.slot, gamma.slot, beta.slot}, std::move(y),
                  [x, gamma, beta, mean = running_mean, var = running_var, eps](
                      Tape& t, std::size_t out) {
                    auto g = ops::batchnorm_infer_backward(t.value(x), t.value(gamma), mean, var,
                                                           eps, t.slots_[out].grad);
                    t.accumulate(gamma, g.gamma);
                    t.accumulate(beta, g.beta);
                    if (t.requires_grad(x)) t.accumulate(x, g.input);
                  });
  }

  Var relu(Var x) {
    return record(PrimitiveKind::kRelu, {x.slot}, ops::relu(value(x)),
                  [x](Tape& t, std::size_t out) {
                    if (t.requires_grad(x)) {
                      t.accumulate(x, ops::relu_backward(t.value(x), t.slots_[out].grad));
                    }
                  });
  }

  Var maxpool2(Var x) {
    auto argmax = std::make_shared<std::vector<Index>>();
    TensorT y = ops::maxpool2(value(x), argmax.get());
    return record(PrimitiveKind::kMaxPool2, {x.slot}, std::move(y),
                  [x, argmax](Tape& t, std::size_t out) {
                    if (t.requires_grad(x)) {
                      t.accumulate(x, ops::maxpool2_backward(t.value(x).shape(), *argmax,
                                                             t.slots_[out].grad));
                    }
                  });
  }

  Var global_avg_pool(Var x) {
    return record(PrimitiveKind::kGlobalAvgPool, {x.slot}, ops::global_avg_pool(value(x)),
                  [x](Tape& t, std::size_t out) {
                    if (t.requires_grad(x)) {
                      t.accumulate(x, ops::global_avg_pool_backward(t.value(x).shape(),
                                                                    t.slots_[out].grad));
                    }
                  });
  }

  Var dense(Var x, Var w, Var b) {
    return record(PrimitiveKind::kDense, {x.slot, w.slot, b.slot},
                  ops::dense(value(x), value(w), value(b)),
                  [x, w, b](Tape& t, std::size_t out) {
                    auto g = ops::dense_backward(t.value(x), t.value(w), t.slots_[out].grad);
                    t.accumulate(w, g.weights);
                    t.accumulate(b, g.bias);
                    if (t.requires_grad(x)) t.accumulate(x, g.input);
                  });
  }

  /// Scalar mean cross-entropy; output is a rank-0-like [1] tensor.
  Var softmax_cross_entropy(Var logits, std::vector<int> labels) {
    const Scalar loss = ops::softmax_cross_entropy(value(logits), std::span<const int>(labels));
    return record(PrimitiveKind::kSoftmaxCrossEntropy, {logits.slot}, TensorT({1}, {loss}),
                  [logits, labels = std::move(labels)](Tape& t, std::size_t out) {
                    if (t.requires_grad(logits)) {
                      t.accumulate(logits, ops::softmax_cross_entropy_backward(
                                               t.value(logits), std::span<const int>(labels),
                                               t.slots_[out].grad[0]));
                    }
                  });
  }

  Var sum(Var x) {
    return record(PrimitiveKind::kSum, {x.slot}, TensorT({1}, {value(x).data().sum()}),
                  [x](Tape& t, std::size_t out) {
                    if (t.requires_grad(x)) {
                      t.accumulate(x, TensorT::constant(t.value(x).shape(), t.slots_[out].grad[0]));
                    }
                  });
  }

  /// Reverse sweep from a scalar slot. Every slot ends with a gradient of the
  /// same shape as its value; slots the loss does not depend on hold zeros.
  void backward(Var loss) {
    if (records_.empty()) throw std::logic_error("tape: backward() called before any forward primitive");
    if (value(loss).size() != 1) {
      throw ShapeError("tape: backward() target must be scalar, got " +
                       shape_string(value(loss).shape()));
    }
    for (auto& s : slots_) s.grad = TensorT(s.value.shape());
    slots_[loss.slot].grad[0] = Scalar(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output > loss.slot) continue;
      it->backward(*this);
    }
    backward_done_ = true;
  }

 private:
  struct Slot {
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
  };

  template <typename Fn>
  Var record(PrimitiveKind kind, std::vector<std::size_t> inputs, TensorT y, Fn&& fn) {
    bool needs = false;
    for (std::size_t i : inputs) needs = needs || slots_[i].requires_grad;
    slots_.push_back(Slot{std::move(y), TensorT{}, needs});
    const std::size_t out = slots_.size() - 1;
    records_.push_back(Record{kind, std::move(inputs), out,
                              [out, fn = std::forward<Fn>(fn)](Tape& t) {
                                if (t.slots_[out].requires_grad) fn(t, out);
                              }});
    backward_done_ = false;
    return Var{out};
  }

  void accumulate(Var v, const TensorT& g) {
    if (!slots_[v.slot].requires_grad) return;
    slots_[v.slot].grad += g;
  }

  std::vector<Slot> slots_;
  std::vector<Record> records_;
  bool backward_done_ = false;
};

/// Heavy-ball SGD: v <- momentum * v + g; w <- w - lr * v.
template <typename Scalar>
void sgd_step(Tensor<Scalar>& param, const Tensor<Scalar>& grad, Tensor<Scalar>& velocity,
              Scalar learning_rate, Scalar momentum) {
  if (!(learning_rate > Scalar(0))) throw std::invalid_argument("sgd_step: learning_rate must be > 0");
  param.require_same_shape(grad, "sgd_step gradient");
  if (velocity.empty() && !param.empty()) velocity = Tensor<Scalar>(param.shape());
  param.require_same_shape(velocity, "sgd_step velocity");
  velocity.data() = momentum * velocity.data() + grad.data();
  param.data() -= learning_rate * velocity.data();
}

}  // namespace bdnp
