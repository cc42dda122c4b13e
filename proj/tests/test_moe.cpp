#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "kcdp/moe.hpp"
#include "oracles.hpp"

using namespace kcdp;
using kcdp::testing::grad_check;
using kcdp::testing::random_matrix;

namespace {

using testing::route_oracle;

struct Weights {
  Matrix in_w, in_b, router_w, router_b;
  std::vector<std::array<Matrix, 4>> experts;
};

Weights weights_of(MoEPredictor& m) {
  const auto ps = m.parameters();
  Weights w{ps[0]->value, ps[1]->value, ps[2]->value, ps[3]->value, {}};
  for (int e = 0; e < m.config().n_experts; ++e) {
    const auto* base = &ps[4 + 4 * e];
    w.experts.push_back({base[0]->value, base[1]->value, base[2]->value, base[3]->value});
  }
  return w;
}

RowVector predict_oracle(const Weights& w, const RowVector& v, const RowVector& k, int top_k) {
  RowVector x(v.size() + k.size());
  x << v, k;
  const RowVector a = x * w.in_w + w.in_b;
  const RowVector logits = a * w.router_w + w.router_b;
  const auto gate = route_oracle(std::vector<double>(logits.data(), logits.data() + logits.size()), top_k);
  RowVector out = RowVector::Zero(w.experts[0][2].cols());
  for (std::size_t e = 0; e < w.experts.size(); ++e) {
    const auto& ex = w.experts[e];
    const RowVector h = (a * ex[0] + ex[1]).cwiseMax(0.0);
    out += gate[e] * (h * ex[2] + ex[3]);
  }
  return out;
}

RowVector predict_value(MoEPredictor& m, const RowVector& v, const RowVector& k) {
  Tape tape(false);
  return m.predict(tape, tape.constant(v), tape.constant(k)).value();
}

}  // namespace

TEST_SUITE("moe") {

TEST_CASE("route examples") {
  const std::vector<double> zeros{0, 0, 0, 0};
  CHECK(route(zeros, 2) == std::vector<double>{0.5, 0.5, 0.0, 0.0});
  const std::vector<double> ramp{1, 2, 3, 4};
  const auto w = route(ramp, 2);
  CHECK(w[3] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(w[2] == doctest::Approx(0.2689).epsilon(1e-4));
  CHECK(w[0] == 0.0);
  CHECK(w[1] == 0.0);
  const auto all = route(ramp, 4);
  const double z = std::exp(1) + std::exp(2) + std::exp(3) + std::exp(4);
  for (int i = 0; i < 4; ++i) CHECK(all[i] == doctest::Approx(std::exp(i + 1) / z).epsilon(1e-12));
}

TEST_CASE("route matches the exhaustive oracle on 1000 vectors") {
  Rng rng(1);
  int agree = 0;
  for (int n = 0; n < 1000; ++n) {
    std::vector<double> logits(4);
    for (double& x : logits) x = rng.normal() * 3.0;
    const int top_k = 1 + static_cast<int>(rng.below(4));
    const auto got = route(logits, top_k);
    const auto want = route_oracle(logits, top_k);
    bool same = true;
    for (int i = 0; i < 4; ++i) same = same && std::abs(got[i] - want[i]) <= 1e-12;
    agree += same;
  }
  CHECK(agree == 1000);
}

TEST_CASE("routing weights are a sparse convex combination and shift invariant") {
  Rng rng(2);
  for (int n = 0; n < 200; ++n) {
    std::vector<double> logits(6);
    for (double& x : logits) x = rng.normal();
    const int top_k = 1 + static_cast<int>(rng.below(6));
    const auto w = route(logits, top_k);
    CHECK(std::count_if(w.begin(), w.end(), [](double x) { return x > 0.0; }) == top_k);
    CHECK(std::all_of(w.begin(), w.end(), [](double x) { return x >= 0.0; }));
    CHECK(std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0) <= 1e-6);
    std::vector<double> shifted = logits;
    for (double& x : shifted) x += 7.5;
    const auto ws = route(shifted, top_k);
    for (int i = 0; i < 6; ++i) CHECK(ws[i] == doctest::Approx(w[i]).epsilon(1e-12));
  }
}

TEST_CASE("predict matches the all-experts oracle on 100 inputs") {
  MoEConfig cfg;
  MoEPredictor m(cfg, 3);
  const Weights w = weights_of(m);
  Rng rng(3);
  double worst = 0.0;
  for (int n = 0; n < 100; ++n) {
    const RowVector v = random_matrix(1, cfg.visual_dim, rng);
    const RowVector k = random_matrix(1, cfg.knowledge_dim, rng);
    const RowVector got = predict_value(m, v, k);
    CHECK(got.size() == cfg.num_classes);
    worst = std::max(worst, (got - predict_oracle(w, v, k, cfg.top_k)).cwiseAbs().maxCoeff());
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("identical experts make the output independent of routing") {
  MoEConfig cfg;
  MoEPredictor m(cfg, 4);
  auto ps = m.parameters();
  for (int e = 1; e < cfg.n_experts; ++e) {
    for (int j = 0; j < 4; ++j) ps[4 + 4 * e + j]->value = ps[4 + j]->value;
  }
  Rng rng(4);
  for (int n = 0; n < 20; ++n) {
    const RowVector v = random_matrix(1, cfg.visual_dim, rng);
    const RowVector k = random_matrix(1, cfg.knowledge_dim, rng);
    Tape tape(false);
    Var a = m.project(tape, tape.constant(v), tape.constant(k));
    const RowVector single = m.expert(tape, 0, a).value();
    CHECK((predict_value(m, v, k) - single).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("global classifier bypasses routing") {
  MoEConfig cfg;
  cfg.classifier = ClassifierKind::kGlobal;
  MoEPredictor m(cfg, 5);
  const auto ps = m.parameters();
  const Matrix& gw = ps[ps.size() - 2]->value;
  const Matrix& gb = ps[ps.size() - 1]->value;
  Rng rng(5);
  const RowVector v = random_matrix(1, cfg.visual_dim, rng);
  const RowVector k = random_matrix(1, cfg.knowledge_dim, rng);
  RowVector x(v.size() + k.size());
  x << v, k;
  const RowVector want = (x * ps[0]->value + ps[1]->value) * gw + gb;
  CHECK((predict_value(m, v, k) - want).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(m.active_parameters().size() == 4);
}

TEST_CASE("v-only input") {
  MoEConfig cfg;
  cfg.use_knowledge = false;
  MoEPredictor m(cfg, 6);
  Rng rng(6);
  Tape tape(false);
  const Var out = m.predict(tape, tape.constant(random_matrix(1, 128, rng)), Var());
  CHECK(out.cols() == cfg.num_classes);
}

TEST_CASE("dimension errors and config validation") {
  MoEPredictor m(MoEConfig{}, 7);
  Tape tape(false);
  CHECK_THROWS(m.predict(tape, tape.constant(Matrix::Zero(1, 127)), tape.constant(Matrix::Zero(1, 64))));
  CHECK_THROWS(m.predict(tape, tape.constant(Matrix::Zero(1, 128)), tape.constant(Matrix::Zero(1, 63))));
  MoEConfig bad;
  bad.top_k = 5;
  CHECK_THROWS(bad.validate());
  bad.top_k = 0;
  CHECK_THROWS(bad.validate());
  CHECK_THROWS(classifier_from_string("forest"));
  CHECK(classifier_from_string(to_string(ClassifierKind::kGlobal)) == ClassifierKind::kGlobal);
}

TEST_CASE("MoE gradients: finite differences and no flow into dropped experts") {
  MoEConfig cfg;
  MoEPredictor m(cfg, 8);
  Rng rng(8);
  const Matrix v = random_matrix(1, cfg.visual_dim, rng);
  const Matrix k = random_matrix(1, cfg.knowledge_dim, rng);
  const std::vector<int> label{2};
  auto build = [&](Tape& tape) { return cross_entropy(m.predict(tape, tape.constant(v), tape.constant(k)), label); };
  CHECK(grad_check(m.active_parameters(), build, 10, 9).max_rel_error <= 1e-5);

  // The last gradient pass left grads in place; dropped experts must have none.
  Tape tape(false);
  Var a = m.project(tape, tape.constant(v), tape.constant(k));
  const RowVector logits = m.router_logits(tape, a).value();
  const auto gate = route(std::vector<double>(logits.data(), logits.data() + logits.size()), cfg.top_k);
  const auto ps = m.parameters();
  int dropped = 0;
  for (int e = 0; e < cfg.n_experts; ++e) {
    const bool zero = ps[4 + 4 * e]->grad.isZero() && ps[4 + 4 * e + 2]->grad.isZero();
    if (gate[e] == 0.0) {
      CHECK(zero);
      ++dropped;
    } else {
      CHECK_FALSE(zero);
    }
  }
  CHECK(dropped == cfg.n_experts - cfg.top_k);
}

TEST_CASE("router path gradient alone") {
  MoEConfig cfg;
  MoEPredictor m(cfg, 10);
  Rng rng(10);
  const Matrix v = random_matrix(1, cfg.visual_dim, rng);
  const Matrix k = random_matrix(1, cfg.knowledge_dim, rng);
  const auto ps = m.parameters();
  auto build = [&](Tape& tape) {
    Var out = m.predict(tape, tape.constant(v), tape.constant(k));
    return sum_all(hadamard(out, out));
  };
  CHECK(grad_check({ps[2], ps[3]}, build, 10, 11).max_rel_error <= 1e-5);
}

}
