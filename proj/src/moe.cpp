#include "kcdp/moe.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "kcdp/rng.hpp"

namespace kcdp {

namespace {

Matrix init(Eigen::Index in, Eigen::Index out, Rng& rng) {
  Matrix m(in, out);
  const double sd = std::sqrt(1.0 / static_cast<double>(in));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
  return m;
}

}  // namespace

std::string_view to_string(ClassifierKind c) { return c == ClassifierKind::kMoE ? "moe" : "global"; }

ClassifierKind classifier_from_string(std::string_view s) {
  if (s == "moe") return ClassifierKind::kMoE;
  if (s == "global") return ClassifierKind::kGlobal;
  throw std::invalid_argument("unknown classifier '" + std::string(s) + "'");
}

void MoEConfig::validate() const {
  if (n_experts < 1) throw std::invalid_argument("moe: n_experts must be positive");
  if (top_k < 1 || top_k > n_experts) throw std::invalid_argument("moe: top_k must lie in [1, n_experts]");
  if (num_classes < 2) throw std::invalid_argument("moe: need at least two classes");
}

std::vector<double> route(std::span<const double> logits, int top_k) { return topk_softmax(logits, top_k); }

MoEPredictor::MoEPredictor(const MoEConfig& config, std::uint64_t seed)
    : config_(config),
      in_w_("moe.input.w", "moe", Matrix()),
      in_b_("moe.input.b", "moe", Matrix()),
      router_w_("moe.router.w", "moe", Matrix()),
      router_b_("moe.router.b", "moe", Matrix()),
      global_w_("moe.global.w", "moe.global", Matrix()),
      global_b_("moe.global.b", "moe.global", Matrix()) {
  config_.validate();
  Rng rng(hash_combine(seed, 0x30E));
  const int in_dim = config_.visual_dim + (config_.use_knowledge ? config_.knowledge_dim : 0);
  auto set = [](Parameter& p, Matrix m) {
    p.value = std::move(m);
    p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
  };
  set(in_w_, init(in_dim, config_.hidden_dim, rng));
  set(in_b_, Matrix::Zero(1, config_.hidden_dim));
  set(router_w_, init(config_.hidden_dim, config_.n_experts, rng));
  set(router_b_, Matrix::Zero(1, config_.n_experts));
  experts_.reserve(static_cast<std::size_t>(config_.n_experts));
  for (int e = 0; e < config_.n_experts; ++e) {
    const std::string p = "moe.expert" + std::to_string(e);
    experts_.push_back(Expert{
        Parameter(p + ".w1", "moe", init(config_.hidden_dim, config_.expert_hidden, rng)),
        Parameter(p + ".b1", "moe", Matrix::Zero(1, config_.expert_hidden)),
        Parameter(p + ".w2", "moe", init(config_.expert_hidden, config_.num_classes, rng)),
        Parameter(p + ".b2", "moe", Matrix::Zero(1, config_.num_classes)),
    });
  }
  set(global_w_, init(config_.hidden_dim, config_.num_classes, rng));
  set(global_b_, Matrix::Zero(1, config_.num_classes));
}

std::vector<Parameter*> MoEPredictor::parameters() {
  std::vector<Parameter*> out = {&in_w_, &in_b_, &router_w_, &router_b_};
  for (auto& e : experts_) {
    for (Parameter* p : {&e.w1, &e.b1, &e.w2, &e.b2}) out.push_back(p);
  }
  out.push_back(&global_w_);
  out.push_back(&global_b_);
  return out;
}

std::vector<Parameter*> MoEPredictor::active_parameters() {
  std::vector<Parameter*> out = {&in_w_, &in_b_};
  if (config_.classifier == ClassifierKind::kGlobal) {
    out.push_back(&global_w_);
    out.push_back(&global_b_);
    return out;
  }
  out.push_back(&router_w_);
  out.push_back(&router_b_);
  for (auto& e : experts_) {
    for (Parameter* p : {&e.w1, &e.b1, &e.w2, &e.b2}) out.push_back(p);
  }
  return out;
}

Var MoEPredictor::project(Tape& tape, const Var& v, const Var& k_pooled) {
  if (v.rows() != 1 || v.cols() != config_.visual_dim) throw std::invalid_argument("moe: v has the wrong dimension");
  if (!config_.use_knowledge) return affine(v, tape.param(in_w_), tape.param(in_b_));
  if (k_pooled.rows() != 1 || k_pooled.cols() != config_.knowledge_dim) {
    throw std::invalid_argument("moe: k_pooled has the wrong dimension");
  }
  const Var parts[] = {v, k_pooled};
  return affine(concat_cols(parts), tape.param(in_w_), tape.param(in_b_));
}

Var MoEPredictor::router_logits(Tape& tape, const Var& a) {
  return affine(a, tape.param(router_w_), tape.param(router_b_));
}

Var MoEPredictor::expert(Tape& tape, int index, const Var& a) {
  auto& e = experts_.at(static_cast<std::size_t>(index));
  return affine(relu(affine(a, tape.param(e.w1), tape.param(e.b1))), tape.param(e.w2), tape.param(e.b2));
}

Var MoEPredictor::predict(Tape& tape, const Var& v, const Var& k_pooled) {
  Var a = project(tape, v, k_pooled);
  if (config_.classifier == ClassifierKind::kGlobal) return affine(a, tape.param(global_w_), tape.param(global_b_));
  Var gate = topk_gate(router_logits(tape, a), config_.top_k);
  std::vector<int> chosen;
  std::vector<Var> outputs;
  for (int e = 0; e < config_.n_experts; ++e) {
    if (gate.value()(0, e) == 0.0) continue;
    chosen.push_back(e);
    outputs.push_back(expert(tape, e, a));
  }
  return gated_sum(gate, chosen, outputs);
}

}  // namespace kcdp
