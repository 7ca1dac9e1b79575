// One PASS/FAIL line per acceptance criterion. Exit status is non-zero if any fails.
#include "bdnp/cli.hpp"
#include "bdnp/evaluator.hpp"
#include "bdnp/model_io.hpp"
#include "bdnp/trainer.hpp"
#include "helpers.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>

using namespace bdnp;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

std::string join(const std::vector<Index>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s + "]";
}

// The seeded desk fixture: default config, seed 0, run through the full pipeline.
struct Fixture {
  cli::RunPaths paths{testing::temp_dir("acceptance_a")};
  cli::RunPaths repeat{testing::temp_dir("acceptance_b")};
  double seconds = 0.0;
  nlohmann::json summary;
  NetworkSpec spec;
  NetworkParams<float> params;
  Dataset test, triggered, defense;
  int target = 0;
  ScoreTable table;

  Fixture() {
    cli::RunConfig config;
    const auto t0 = std::chrono::steady_clock::now();
    summary = cli::cmd_pipeline(config, paths);
    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    cli::RunConfig again;
    cli::cmd_pipeline(again, repeat);

    cli::RunConfig resolved = cli::load_config(paths.resolved_config());
    auto model = load_model<float>(paths.backdoored_model());
    spec = model.spec;
    params = std::move(model.params);
    test = load_dataset(paths.test_data());
    defense = load_dataset(paths.defense_data());
    target = resolved.poison.target_label;
    triggered = build_asr_eval_set(test, resolved.poison.trigger, target);
    table = score_network(spec, params, defense);
  }

  EvalSets sets() const { return {test, triggered, target}; }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

Outcome criterion1() {
  const Fixture& f = fixture();
  const double acc0 = f.summary["backdoored"]["acc"], asr0 = f.summary["backdoored"]["asr"];
  bool any = false;
  std::string rows;
  for (int i = 30; i <= 40; ++i) {
    const double mu = i / 10.0;
    const auto out = prune(f.spec, f.params, f.table, PruneConfig{mu});
    const EvalResult e = evaluate(f.spec, out.params, f.sets());
    const bool ok = e.asr <= 20.0 && acc0 - e.acc <= 15.0;
    any = any || ok;
    if (i % 5 == 0) rows += " mu=" + fmt(mu) + ":acc=" + fmt(e.acc) + ",asr=" + fmt(e.asr) + ",pruned=" +
                            std::to_string(out.report.total_pruned());
  }
  const bool base = acc0 >= 80.0 && asr0 >= 90.0;
  const bool fast = f.seconds <= 120.0;
  return {base && any && fast, "backdoored acc=" + fmt(acc0) + " asr=" + fmt(asr0) + ";" + rows +
                                   "; any mu in [3,4] meeting asr<=20 and drop<=15: " + (any ? "yes" : "no") +
                                   "; pipeline " + fmt(f.seconds) + "s"};
}

Outcome criterion2() {
  const Fixture& f = fixture();
  const auto rows = sweep_mu(f.spec, f.params, f.table, default_mu_grid(), f.sets());
  bool monotone = true;
  for (std::size_t i = 1; i < rows.size(); ++i) monotone = monotone && rows[i].pruned_count <= rows[i - 1].pruned_count;
  const EvalResult base = evaluate(f.spec, f.params, f.sets());
  const bool last = rows.back().acc == base.acc && rows.back().asr == base.asr;
  double best_mu = -1.0;
  for (const auto& r : rows)
    if (r.asr <= 20.0 && r.acc >= base.acc - 15.0) {
      best_mu = r.mu;
      break;
    }
  return {monotone && last && best_mu >= 0.0, std::string("monotone=") + (monotone ? "yes" : "no") +
                                                  " last-row-unpruned=" + (last ? "yes" : "no") +
                                                  " first qualifying mu=" + fmt(best_mu)};
}

Outcome criterion3() {
  const Fixture& f = fixture();
  const auto rows = ablate(f.spec, f.params, f.defense, f.sets(), 3.5);
  bool manual = rows.size() == 6;
  for (const auto& row : rows) {
    const auto out = prune(f.spec, f.params, score_network(f.spec, f.params, f.defense, row.variant), PruneConfig{3.5});
    const EvalResult e = evaluate(f.spec, out.params, f.sets());
    manual = manual && e.acc == row.eval.acc && e.asr == row.eval.asr && out.report.total_pruned() == row.pruned_count;
  }

  // With unit spectral norm, correlation and activation the full score is
  // sqrt(saliency) and the no-sqrt score is saliency itself.
  ScoreTable t;
  t.layers.emplace_back();
  const std::vector<double> sal{1, 1, 1, 1, 1, 1, 1, 1, 2, 6};
  for (std::size_t i = 0; i < sal.size(); ++i) {
    FilterScore s;
    s.filter = Index(i);
    s.saliency = sal[i];
    s.spectral_norm = s.correlation_normalized = s.activation_norm = 1.0;
    t.layers[0].push_back(s);
  }
  const auto full = select_filters(apply_variant(t, ScoreVariant::kFull), 0.5).layers[0].pruned;
  const auto nosqrt = select_filters(apply_variant(t, ScoreVariant::kNoSqrt), 0.5).layers[0].pruned;
  const bool differ = full == std::vector<Index>{8, 9} && nosqrt == std::vector<Index>{9};
  return {manual && differ, "rows=" + std::to_string(rows.size()) + " manual-match=" + (manual ? "yes" : "no") +
                                " constructed full=" + join(full) + " no-sqrt=" + join(nosqrt)};
}

Outcome criterion4() {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> rows(1, 64), cols(1, 288);
  double worst = 0.0;
  int converged = 0;
  for (int i = 0; i < 200; ++i) {
    const int r = rows(rng), c = cols(rng);
    const Eigen::MatrixXd m = Tensor<double>::uniform({r, c}, -1.0, 1.0, rng).matrix(r, c);
    const double ref = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()[0];
    const SpectralNormResult p = spectral_norm_power(m);
    worst = std::max(worst, testing::rel_err(p.value, ref));
    converged += p.converged;
  }
  return {worst <= 1e-4 && converged == 200,
          "max relative error " + fmt(worst) + " over 200 matrices, " + std::to_string(converged) + " converged"};
}

using T = Tensor<double>;

double project(const T& y, const T& r) { return y.data().dot(r.data()); }

double primitive_gradients() {
  double worst = 0.0;
  auto note = [&](double e) { worst = std::max(worst, e); };
  const double h = 1e-5;
  T x = testing::random_tensor({2, 3, 6, 6}, 1), w = testing::random_tensor({4, 3, 3, 3}, 2),
    b = testing::random_tensor({4}, 3);
  const ConvGeometry g{1, 1};
  const T rc = testing::random_tensor({2, 4, 6, 6}, 4);
  const auto cg = ops::conv2d_backward(x, w, true, g, rc, true);
  auto conv = [&] { return project(ops::conv2d(x, w, &b, g), rc); };
  note(testing::fd_error(x, cg.input, conv, h));
  note(testing::fd_error(w, cg.weights, conv, h));
  note(testing::fd_error(b, cg.bias, conv, h));

  T bx = testing::random_tensor({3, 2, 4, 4}, 5, -1.0, 3.0), gamma = testing::random_tensor({2}, 6, 0.5, 2.0),
    beta = testing::random_tensor({2}, 7);
  T rm({2}), rv = T::constant({2}, 1.0);
  ops::BatchNormCache<double> cache;
  const T rb = testing::random_tensor(bx.shape(), 8);
  ops::batchnorm_train(bx, gamma, beta, rm, rv, 1e-5, 0.1, &cache);
  const auto bg = ops::batchnorm_train_backward(cache, gamma, rb);
  auto bn = [&] {
    T m({2}), v = T::constant({2}, 1.0);
    return project(ops::batchnorm_train(bx, gamma, beta, m, v, 1e-5, 0.1), rb);
  };
  note(testing::fd_error(bx, bg.input, bn, h));
  note(testing::fd_error(gamma, bg.gamma, bn, h));
  note(testing::fd_error(beta, bg.beta, bn, h));
  T mean = testing::random_tensor({2}, 9), var = testing::random_tensor({2}, 10, 0.5, 2.0);
  const auto ig = ops::batchnorm_infer_backward(bx, gamma, mean, var, 1e-5, rb);
  auto bni = [&] { return project(ops::batchnorm_infer(bx, gamma, beta, mean, var, 1e-5), rb); };
  note(testing::fd_error(bx, ig.input, bni, h));
  note(testing::fd_error(gamma, ig.gamma, bni, h));

  T px = testing::random_tensor({2, 3, 4, 6}, 11);
  const T rr = testing::random_tensor(px.shape(), 12);
  note(testing::fd_error(px, ops::relu_backward(px, rr), [&] { return project(ops::relu(px), rr); }, h));
  std::vector<Index> argmax;
  const T pooled = ops::maxpool2(px, &argmax);
  const T rp = testing::random_tensor(pooled.shape(), 13);
  note(testing::fd_error(px, ops::maxpool2_backward(px.shape(), argmax, rp),
                         [&] { return project(ops::maxpool2(px), rp); }, h));
  const T ra = testing::random_tensor({2, 3}, 14);
  note(testing::fd_error(px, ops::global_avg_pool_backward(px.shape(), ra),
                         [&] { return project(ops::global_avg_pool(px), ra); }, h));

  T dx = testing::random_tensor({4, 5}, 15), dw = testing::random_tensor({3, 5}, 16), db = testing::random_tensor({3}, 17);
  const T rd = testing::random_tensor({4, 3}, 18);
  const auto dg = ops::dense_backward(dx, dw, rd);
  auto dense = [&] { return project(ops::dense(dx, dw, db), rd); };
  note(testing::fd_error(dx, dg.input, dense, h));
  note(testing::fd_error(dw, dg.weights, dense, h));
  note(testing::fd_error(db, dg.bias, dense, h));
  T logits = testing::random_tensor({4, 3}, 19, -3.0, 3.0);
  const std::vector<int> labels{2, 0, 1, 1};
  note(testing::fd_error(logits, ops::softmax_cross_entropy_backward(logits, labels, 1.0),
                         [&] { return ops::softmax_cross_entropy(logits, labels); }, h));
  return worst;
}

template <typename Scalar>
NetworkParams<double> widen(const NetworkParams<Scalar>& p) {
  auto cast = [](const Tensor<Scalar>& t) { return T(t.shape(), t.data().template cast<double>()); };
  NetworkParams<double> out;
  for (const auto& b : p.blocks)
    out.blocks.push_back({cast(b.weight), cast(b.gamma), cast(b.beta), cast(b.running_mean), cast(b.running_var)});
  out.fc_weight = cast(p.fc_weight);
  out.fc_bias = cast(p.fc_bias);
  return out;
}

// Analytic gradients at `Scalar` against central differences of the loss at
// the same parameter point, evaluated at 64-bit.
template <typename Scalar>
double network_gradients(Mode mode) {
  const NetworkSpec spec = NetworkSpec::desk_default(3, 16, 16, 4);
  NetworkParams<Scalar> params = init_params<Scalar>(spec, 20);
  std::mt19937_64 rng(21);
  for (auto& b : params.blocks) {
    b.gamma = Tensor<Scalar>::uniform(b.gamma.shape(), Scalar(0.5), Scalar(1.5), rng);
    b.beta = Tensor<Scalar>::uniform(b.beta.shape(), Scalar(-0.2), Scalar(0.2), rng);
    b.running_mean = Tensor<Scalar>::uniform(b.running_mean.shape(), Scalar(-0.1), Scalar(0.1), rng);
    b.running_var = Tensor<Scalar>::uniform(b.running_var.shape(), Scalar(0.5), Scalar(1.5), rng);
  }
  const Tensor<Scalar> batch = testing::random_tensor<Scalar>({4, 3, 16, 16}, 22, 0.0, 1.0);
  const std::vector<int> labels{0, 3, 1, 2};

  NetworkParams<Scalar> work = params;
  auto fwd = mode == Mode::kTrain ? forward(spec, work, batch, false, Mode::kTrain) : forward(spec, work, batch, false);
  const Var loss = fwd.tape.softmax_cross_entropy(fwd.vars.logits, labels);
  fwd.tape.backward(loss);
  auto grad = [&](Var v) {
    const auto& g = fwd.tape.grad(v);
    return T(g.shape(), g.data().template cast<double>());
  };

  NetworkParams<double> wide = widen(params);
  const T wide_batch(batch.shape(), batch.data().template cast<double>());
  auto f = [&] {
    NetworkParams<double> copy = wide;
    auto r = mode == Mode::kTrain ? forward(spec, copy, wide_batch, false, Mode::kTrain)
                                  : forward(spec, copy, wide_batch, false);
    return ops::softmax_cross_entropy(r.logits, labels);
  };
  double worst = 0.0;
  const double h = 1e-5;
  for (std::size_t l = 0; l < spec.blocks.size(); ++l) {
    worst = std::max(worst, testing::fd_error(wide.blocks[l].weight, grad(fwd.vars.blocks[l].weight), f, h));
    worst = std::max(worst, testing::fd_error(wide.blocks[l].gamma, grad(fwd.vars.blocks[l].gamma), f, h));
    worst = std::max(worst, testing::fd_error(wide.blocks[l].beta, grad(fwd.vars.blocks[l].beta), f, h));
  }
  worst = std::max(worst, testing::fd_error(wide.fc_weight, grad(fwd.vars.fc_weight), f, h));
  worst = std::max(worst, testing::fd_error(wide.fc_bias, grad(fwd.vars.fc_bias), f, h));
  return worst;
}

Outcome criterion5() {
  const double prim = primitive_gradients();
  const double d_infer = network_gradients<double>(Mode::kInfer);
  const double d_train = network_gradients<double>(Mode::kTrain);
  const double f_infer = network_gradients<float>(Mode::kInfer);
  const double f_train = network_gradients<float>(Mode::kTrain);
  const bool ok = prim <= 1e-4 && d_infer <= 1e-4 && d_train <= 1e-4 && f_infer <= 1e-2 && f_train <= 1e-2;
  return {ok, "primitives " + fmt(prim) + "; network f64 infer " + fmt(d_infer) + " train " + fmt(d_train) +
                  "; f32 infer " + fmt(f_infer) + " train " + fmt(f_train)};
}

Outcome criterion6() {
  std::mt19937_64 rng(6);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<Index> cin_d(1, 16), cout_d(1, 32);
    const Index cin = cin_d(rng), cout = cout_d(rng);
    const T x = T::uniform({2, cin, 8, 8}, 0.0, 1.0, rng);
    const T w = T::uniform({cout, cin, 3, 3}, -0.5, 0.5, rng);
    const T gamma = T::uniform({cout}, -2.0, 2.0, rng), beta = T::uniform({cout}, -1.0, 1.0, rng);
    const T mean = T::uniform({cout}, -0.5, 0.5, rng), var = T::uniform({cout}, 0.01, 3.0, rng);
    const T ref = ops::batchnorm_infer(ops::conv2d(x, w, nullptr, {1, 1}), gamma, beta, mean, var, 1e-5);
    const T offset = fused_bn_offset(gamma, beta, mean, var, 1e-5);
    const T fused = ops::conv2d(x, fuse_conv_bn(w, gamma, var, 1e-5), &offset, {1, 1});
    worst = std::max(worst, testing::max_rel_diff(ref, fused, 1.0));
  }
  return {worst <= 1e-5, "max difference " + fmt(worst) + " over 50 layers"};
}

Outcome criterion7() {
  const Fixture& f = fixture();
  bool nested = true;
  std::vector<std::vector<Index>> prev;
  for (double mu : default_mu_grid()) {
    const PruneReport r = select_filters(f.table, mu);
    for (std::size_t l = 0; l < r.layers.size() && !prev.empty(); ++l)
      for (Index c : r.layers[l].pruned)
        nested = nested && std::find(prev[l].begin(), prev[l].end(), c) != prev[l].end();
    prev.clear();
    for (const auto& lr : r.layers) prev.push_back(lr.pruned);
  }

  const auto once = prune(f.spec, f.params, f.table, PruneConfig{1.0});
  const bool idempotent = bitwise_equal(apply_prune(once.params, once.report), once.params);

  ScoreTable flat = f.table;
  for (auto& layer : flat.layers)
    for (auto& s : layer) s.suspiciousness = 0.25;
  const bool noop = select_filters(flat, 0.0).total_pruned() == 0;

  const auto fwd = forward(f.spec, once.params, f.defense.all_images<float>(), true);
  bool silent = once.report.total_pruned() > 0;
  for (const auto& lr : once.report.layers) {
    const auto& act = fwd.trace->layers[static_cast<std::size_t>(lr.layer)];
    const Index plane = act.dim(2) * act.dim(3);
    for (Index c : lr.pruned)
      for (Index n = 0; n < act.dim(0); ++n)
        silent = silent && (act.data().segment((n * act.dim(1) + c) * plane, plane).array() == 0.0f).all();
  }
  return {nested && idempotent && noop && silent, std::string("nested=") + (nested ? "yes" : "no") +
                                                      " idempotent=" + (idempotent ? "yes" : "no") +
                                                      " all-equal-noop=" + (noop ? "yes" : "no") +
                                                      " zero-output=" + (silent ? "yes" : "no")};
}

Outcome criterion8() {
  const std::vector<double> s{1, 1, 1, 1, 10};
  const double t = layer_threshold(s, 1.0);
  ScoreTable table;
  table.layers.emplace_back();
  for (double v : s) {
    FilterScore fs;
    fs.suspiciousness = v;
    table.layers[0].push_back(fs);
  }
  const auto pruned = select_filters(table, 1.0).layers[0].pruned;
  return {std::abs(t - 6.4) < 1e-12 && pruned == std::vector<Index>{4},
          "threshold " + fmt(t) + " pruned " + join(pruned)};
}

Outcome criterion9() {
  std::mt19937_64 rng(9);
  double worst = 0.0;
  for (int n = 1; n <= 12; ++n) {
    for (int trial = 0; trial < 5; ++trial) {
      std::uniform_int_distribution<int> u(-5, 7);
      std::vector<double> a(static_cast<std::size_t>(n)), zero(static_cast<std::size_t>(n), 0.0);
      for (auto& v : a) {
        do v = u(rng);
        while (v == 0.0);
      }
      std::vector<double> ranks(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        double less = 0.0, equal = 0.0;
        for (double w : a) {
          less += std::abs(w) < std::abs(a[i]);
          equal += std::abs(w) == std::abs(a[i]);
        }
        ranks[i] = less + (equal + 1.0) / 2.0;
      }
      double observed = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) observed += a[i] > 0 ? ranks[i] : 0.0;
      double ge = 0.0, le = 0.0;
      const unsigned long patterns = 1UL << n;
      for (unsigned long m = 0; m < patterns; ++m) {
        double w = 0.0;
        for (int i = 0; i < n; ++i)
          if (m >> i & 1UL) w += ranks[static_cast<std::size_t>(i)];
        ge += w >= observed - 1e-9;
        le += w <= observed + 1e-9;
      }
      worst = std::max(worst, std::abs(wilcoxon_signed_rank(a, zero).p_value - ge / double(patterns)));
      const double two = std::min(1.0, 2.0 * std::min(ge, le) / double(patterns));
      worst = std::max(worst, std::abs(wilcoxon_signed_rank(a, zero, Alternative::kTwoSided).p_value - two));
    }
  }
  const std::vector<double> x{2, 3, 4, 5, 6}, y{1, 2, 3, 4, 5};
  const double p = wilcoxon_signed_rank(x, y).p_value;
  return {worst <= 1e-12 && p == 0.03125, "max deviation " + fmt(worst) + "; example p=" + fmt(p)};
}

Outcome criterion10() {
  const Fixture& f = fixture();
  bool same = true;
  std::string differing;
  for (const fs::path& name : {f.paths.backdoored_model(), f.paths.pruned_model(), f.paths.scores(), f.paths.summary()}) {
    const std::string a = testing::slurp(name);
    const std::string b = testing::slurp(f.repeat.dir / name.filename());
    if (a.empty() || a != b) {
      same = false;
      differing += " " + name.filename().string();
    }
  }
  return {same, same ? "models, scores and summary byte-identical" : "differs:" + differing};
}

Outcome criterion11() {
  const Fixture& f = fixture();
  bool same = true;
  for (std::size_t l = 0; l < f.table.layers.size(); ++l) {
    ScoreTable scaled = f.table;
    for (auto& s : scaled.layers[l]) s.saliency *= 7.0;
    scaled = apply_variant(scaled, ScoreVariant::kFull);
    for (double mu : default_mu_grid()) {
      const PruneReport a = select_filters(f.table, mu), b = select_filters(scaled, mu);
      for (std::size_t k = 0; k < a.layers.size(); ++k) same = same && a.layers[k].pruned == b.layers[k].pruned;
    }
  }
  return {same, same ? "pruned sets unchanged for every layer and mu" : "a pruned set changed"};
}

}  // namespace

int main() {
  const std::vector<std::pair<int, Outcome (*)()>> criteria{
      {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4},   {5, criterion5},  {6, criterion6},
      {7, criterion7}, {8, criterion8}, {9, criterion9}, {10, criterion10}, {11, criterion11}};
  int failures = 0;
  for (const auto& [id, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failures)) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failures == 0 ? 0 : 1;
}
