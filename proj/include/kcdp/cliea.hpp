#pragma once

// Language-image emotional alignment: prompt bank, prompt-knowledge
// embedding, visual mapping, alignment scores, TIE, CCL and pseudo-labels.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kcdp/autograd.hpp"
#include "kcdp/textkb.hpp"

namespace kcdp {

inline constexpr int kAlignDim = 64;
inline constexpr int kAlignHeads = 4;

class PromptBank {
 public:
  explicit PromptBank(const std::vector<std::string>& emotion_names);

  /// "a <emotion> photo of"
  static std::string prompt_for(const std::string& emotion);

  std::size_t size() const { return prompts_.size(); }
  const std::string& operator[](std::size_t i) const { return prompts_.at(i); }
  const std::vector<std::string>& prompts() const { return prompts_; }
  /// Index of a prompt string; throws if it is not in the bank.
  int index_of(const std::string& prompt) const;

 private:
  std::vector<std::string> prompts_;
};

struct AlignmentScores {
  std::vector<double> scores;  // one cosine per class
};

struct PseudoLabel {
  int label = 0;
  AlignmentScores scores;
};

class AlignmentHead {
 public:
  /// The head keeps a reference to `encoder`, which must outlive it.
  AlignmentHead(const PromptBank& bank, TextEncoder& encoder, int visual_dim, std::uint64_t seed);

  const PromptBank& bank() const { return bank_; }
  std::size_t num_classes() const { return bank_.size(); }

  /// s = MHA(prompt tokens ++ k) mean-pooled, 1 × 64.
  Var prompt_embed(Tape& tape, int prompt, const Var& k);
  Var prompt_embed(Tape& tape, const std::string& prompt, const Var& k);
  /// v′ = Linear(v), 1 × 64.
  Var map_visual(Tape& tape, const Var& v);
  /// cos(v′, s_p).
  Var alignment_score(Tape& tape, const Var& v, const Var& k, int prompt);
  /// All K scores as a 1 × K row, sharing the projections of k across prompts.
  Var scores(Tape& tape, const Var& v, const Var& k);

  std::vector<Parameter*> parameters();

 private:
  struct Projected {
    Var q, k, v;
  };
  Projected project(Tape& tape, const Var& rows);
  Projected prompt_rows(Tape& tape, int prompt);
  Var pooled_attention(Tape& tape, const Projected& prompt, const Projected& knowledge);

  PromptBank bank_;
  TextEncoder* encoder_;
  std::vector<std::vector<int>> prompt_ids_;
  Parameter wq_, wk_, wv_, wo_, bo_;
  Parameter map_w_, map_b_;
};

/// TIE = Y(p) − Y(p*).
Var tie(Tape& tape, AlignmentHead& head, const Var& v, const Var& k, int factual, int counterfactual);

/// Batch sum of per-sample CCL terms over rows of alignment scores.
Var ccl_loss(std::span<const Var> scores, std::span<const int> labels, double tau, bool include_positive = false);

/// Argmax over scores, lowest index on ties.
int argmax_lowest(std::span<const double> scores);

PseudoLabel pseudo_label(Tape& tape, AlignmentHead& head, const Var& v, const Var& k);

}  // namespace kcdp
