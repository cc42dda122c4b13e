#pragma once

// Mixture-of-experts emotion predictor with a global-classifier switch.

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "kcdp/autograd.hpp"

namespace kcdp {

enum class ClassifierKind { kMoE, kGlobal };

std::string_view to_string(ClassifierKind c);
ClassifierKind classifier_from_string(std::string_view s);

struct MoEConfig {
  int n_experts = 4;
  int top_k = 2;
  int num_classes = 6;
  int visual_dim = 128;
  int knowledge_dim = 64;
  int hidden_dim = 128;
  int expert_hidden = 64;
  ClassifierKind classifier = ClassifierKind::kMoE;
  bool use_knowledge = true;  // false: a = Linear(v)

  void validate() const;
};

/// Sparse routing weights: renormalized top-k of softmax(logits).
std::vector<double> route(std::span<const double> logits, int top_k);

class MoEPredictor {
 public:
  MoEPredictor(const MoEConfig& config, std::uint64_t seed);

  const MoEConfig& config() const { return config_; }

  /// a = Linear(v ⊕ k_pooled), 1 × hidden_dim.
  Var project(Tape& tape, const Var& v, const Var& k_pooled);
  Var router_logits(Tape& tape, const Var& a);
  Var expert(Tape& tape, int index, const Var& a);

  /// 1 × K logits.
  Var predict(Tape& tape, const Var& v, const Var& k_pooled);

  /// Every parameter, including the head not selected by `classifier`.
  std::vector<Parameter*> parameters();
  /// Parameters used by the configured classifier.
  std::vector<Parameter*> active_parameters();

 private:
  struct Expert {
    Parameter w1, b1, w2, b2;
  };
  MoEConfig config_;
  Parameter in_w_, in_b_;
  Parameter router_w_, router_b_;
  std::vector<Expert> experts_;
  Parameter global_w_, global_b_;
};

}  // namespace kcdp
