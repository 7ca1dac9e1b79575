#include "bdnp/network.hpp"
#include "bdnp/ops.hpp"
#include "bdnp/tape.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <functional>

using namespace bdnp;
using testing::random_tensor;
using T = Tensor<double>;

namespace {

// L = sum(r * y): a scalar whose gradient with respect to y is r.
double project(const T& y, const T& r) { return y.data().dot(r.data()); }

constexpr double kStep = 1e-5;
constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("conv2d gradients") {
  T x = random_tensor({2, 3, 6, 6}, 1), w = random_tensor({4, 3, 3, 3}, 2), b = random_tensor({4}, 3);
  for (auto g : {ConvGeometry{1, 1}, ConvGeometry{2, 0}}) {
    const T y = ops::conv2d(x, w, &b, g);
    const T r = random_tensor(y.shape(), 4);
    const auto grads = ops::conv2d_backward(x, w, true, g, r, true);
    auto f = [&] { return project(ops::conv2d(x, w, &b, g), r); };
    CHECK(testing::fd_error(x, grads.input, f, kStep) < kTol);
    CHECK(testing::fd_error(w, grads.weights, f, kStep) < kTol);
    CHECK(testing::fd_error(b, grads.bias, f, kStep) < kTol);
  }
}

TEST_CASE("batchnorm train gradients") {
  T x = random_tensor({3, 2, 4, 4}, 5, -1.0, 3.0), gamma = random_tensor({2}, 6, 0.5, 2.0),
    beta = random_tensor({2}, 7);
  T rm({2}), rv = T::constant({2}, 1.0);
  ops::BatchNormCache<double> cache;
  const T y = ops::batchnorm_train(x, gamma, beta, rm, rv, 1e-5, 0.1, &cache);
  const T r = random_tensor(y.shape(), 8);
  const auto grads = ops::batchnorm_train_backward(cache, gamma, r);
  auto f = [&] {
    T m({2}), v = T::constant({2}, 1.0);
    return project(ops::batchnorm_train(x, gamma, beta, m, v, 1e-5, 0.1), r);
  };
  CHECK(testing::fd_error(x, grads.input, f, kStep) < kTol);
  CHECK(testing::fd_error(gamma, grads.gamma, f, kStep) < kTol);
  CHECK(testing::fd_error(beta, grads.beta, f, kStep) < kTol);
}

TEST_CASE("batchnorm infer gradients") {
  T x = random_tensor({3, 2, 4, 4}, 9), gamma = random_tensor({2}, 10), beta = random_tensor({2}, 11);
  T rm = random_tensor({2}, 12), rv = random_tensor({2}, 13, 0.5, 2.0);
  const T r = random_tensor(x.shape(), 14);
  const auto grads = ops::batchnorm_infer_backward(x, gamma, rm, rv, 1e-5, r);
  auto f = [&] { return project(ops::batchnorm_infer(x, gamma, beta, rm, rv, 1e-5), r); };
  CHECK(testing::fd_error(x, grads.input, f, kStep) < kTol);
  CHECK(testing::fd_error(gamma, grads.gamma, f, kStep) < kTol);
  CHECK(testing::fd_error(beta, grads.beta, f, kStep) < kTol);
}

TEST_CASE("relu, maxpool and global average pool gradients") {
  T x = random_tensor({2, 3, 4, 6}, 15);
  const T r = random_tensor(x.shape(), 16);
  const T gr = ops::relu_backward(x, r);
  CHECK(testing::fd_error(x, gr, [&] { return project(ops::relu(x), r); }, kStep) < kTol);

  std::vector<Index> argmax;
  const T p = ops::maxpool2(x, &argmax);
  const T rp = random_tensor(p.shape(), 17);
  const T gp = ops::maxpool2_backward(x.shape(), argmax, rp);
  CHECK(testing::fd_error(x, gp, [&] { return project(ops::maxpool2(x), rp); }, kStep) < kTol);

  const T a = ops::global_avg_pool(x);
  const T ra = random_tensor(a.shape(), 18);
  const T ga = ops::global_avg_pool_backward(x.shape(), ra);
  CHECK(testing::fd_error(x, ga, [&] { return project(ops::global_avg_pool(x), ra); }, kStep) < kTol);
}

TEST_CASE("dense and softmax cross-entropy gradients") {
  T x = random_tensor({4, 5}, 19), w = random_tensor({3, 5}, 20), b = random_tensor({3}, 21);
  const T r = random_tensor({4, 3}, 22);
  const auto g = ops::dense_backward(x, w, r);
  auto f = [&] { return project(ops::dense(x, w, b), r); };
  CHECK(testing::fd_error(x, g.input, f, kStep) < kTol);
  CHECK(testing::fd_error(w, g.weights, f, kStep) < kTol);
  CHECK(testing::fd_error(b, g.bias, f, kStep) < kTol);

  T logits = random_tensor({4, 3}, 23, -3.0, 3.0);
  const std::vector<int> labels{2, 0, 1, 1};
  const T gl = ops::softmax_cross_entropy_backward(logits, labels, 1.0);
  CHECK(testing::fd_error(logits, gl, [&] { return ops::softmax_cross_entropy(logits, labels); }, kStep) < kTol);
}

TEST_CASE("tape basics") {
  Tape<double> tape;
  Var p = tape.leaf(random_tensor({2, 3}, 24), true);
  Var q = tape.leaf(random_tensor({2, 3}, 25), true);
  CHECK_THROWS(tape.backward(p));
  CHECK_THROWS_AS(tape.grad(p), std::logic_error);
  Var s = tape.sum(p);
  tape.backward(s);
  CHECK((tape.grad(p).data().array() == 1.0).all());
  CHECK(tape.grad(q).shape() == Shape{2, 3});
  CHECK((tape.grad(q).data().array() == 0.0).all());
}

TEST_CASE("tape rejects a non-scalar loss") {
  Tape<double> tape;
  Var p = tape.leaf(random_tensor({2, 3}, 26), true);
  Var r = tape.relu(p);
  CHECK_THROWS(tape.backward(r));
}

namespace {

NetworkSpec small_spec() {
  NetworkSpec s;
  s.in_channels = 2;
  s.height = 8;
  s.width = 8;
  s.num_classes = 3;
  s.blocks = {ConvBlockSpec{3, 3, 1, 1, true}, ConvBlockSpec{4, 3, 1, 1, false}};
  s.validate();
  return s;
}

// Perturbing params changes the tape leaves, so the loss is recomputed from scratch.
template <typename Scalar>
double network_loss(const NetworkSpec& spec, const NetworkParams<Scalar>& params, const Tensor<Scalar>& batch,
                    const std::vector<int>& labels, Mode mode) {
  NetworkParams<Scalar> copy = params;
  auto fwd = mode == Mode::kTrain ? forward(spec, copy, batch, false, Mode::kTrain) : forward(spec, copy, batch, false);
  return double(ops::softmax_cross_entropy(fwd.logits, labels));
}

template <typename Scalar>
void check_network_gradients(Mode mode, double step, double tol) {
  const NetworkSpec spec = small_spec();
  NetworkParams<Scalar> params = init_params<Scalar>(spec, 27);
  std::mt19937_64 rng(28);
  for (auto& b : params.blocks) {
    b.gamma = Tensor<Scalar>::uniform(b.gamma.shape(), Scalar(0.5), Scalar(1.5), rng);
    b.beta = Tensor<Scalar>::uniform(b.beta.shape(), Scalar(-0.2), Scalar(0.2), rng);
    b.running_mean = Tensor<Scalar>::uniform(b.running_mean.shape(), Scalar(-0.1), Scalar(0.1), rng);
    b.running_var = Tensor<Scalar>::uniform(b.running_var.shape(), Scalar(0.5), Scalar(1.5), rng);
  }
  const Tensor<Scalar> batch = random_tensor<Scalar>({4, 2, 8, 8}, 29, 0.0, 1.0);
  const std::vector<int> labels{0, 2, 1, 2};

  NetworkParams<Scalar> work = params;
  auto fwd = mode == Mode::kTrain ? forward(spec, work, batch, false, Mode::kTrain) : forward(spec, work, batch, false);
  Var loss = fwd.tape.softmax_cross_entropy(fwd.vars.logits, labels);
  fwd.tape.backward(loss);

  auto f = [&] { return network_loss(spec, params, batch, labels, mode); };
  for (std::size_t l = 0; l < spec.blocks.size(); ++l) {
    CAPTURE(l);
    CHECK(testing::fd_error(params.blocks[l].weight, fwd.tape.grad(fwd.vars.blocks[l].weight), f, step) < tol);
    CHECK(testing::fd_error(params.blocks[l].gamma, fwd.tape.grad(fwd.vars.blocks[l].gamma), f, step) < tol);
    CHECK(testing::fd_error(params.blocks[l].beta, fwd.tape.grad(fwd.vars.blocks[l].beta), f, step) < tol);
  }
  CHECK(testing::fd_error(params.fc_weight, fwd.tape.grad(fwd.vars.fc_weight), f, step) < tol);
  CHECK(testing::fd_error(params.fc_bias, fwd.tape.grad(fwd.vars.fc_bias), f, step) < tol);
}

}  // namespace

TEST_CASE("full network gradients at 64-bit") {
  check_network_gradients<double>(Mode::kInfer, 1e-5, 1e-4);
  check_network_gradients<double>(Mode::kTrain, 1e-5, 1e-4);
}

TEST_CASE("full network gradients at 32-bit") {
  check_network_gradients<float>(Mode::kInfer, 1e-3, 1e-2);
  check_network_gradients<float>(Mode::kTrain, 1e-3, 1e-2);
}
