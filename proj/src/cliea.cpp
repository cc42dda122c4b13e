#include "kcdp/cliea.hpp"

#include <cmath>
#include <stdexcept>

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

PromptBank::PromptBank(const std::vector<std::string>& emotion_names) {
  if (emotion_names.size() < 2) throw std::invalid_argument("prompt bank: need at least two emotions");
  for (const auto& e : emotion_names) prompts_.push_back(prompt_for(e));
}

std::string PromptBank::prompt_for(const std::string& emotion) { return "a " + emotion + " photo of"; }

int PromptBank::index_of(const std::string& prompt) const {
  for (std::size_t i = 0; i < prompts_.size(); ++i) {
    if (prompts_[i] == prompt) return static_cast<int>(i);
  }
  throw std::invalid_argument("prompt '" + prompt + "' is not in the bank");
}

AlignmentHead::AlignmentHead(const PromptBank& bank, TextEncoder& encoder, int visual_dim, std::uint64_t seed)
    : bank_(bank),
      encoder_(&encoder),
      wq_("cliea.mha.wq", "cliea", Matrix()),
      wk_("cliea.mha.wk", "cliea", Matrix()),
      wv_("cliea.mha.wv", "cliea", Matrix()),
      wo_("cliea.mha.wo", "cliea", Matrix()),
      bo_("cliea.mha.bo", "cliea", Matrix()),
      map_w_("cliea.map.w", "cliea", Matrix()),
      map_b_("cliea.map.b", "cliea", Matrix()) {
  Rng rng(hash_combine(seed, 0xC11EA));
  for (Parameter* p : {&wq_, &wk_, &wv_, &wo_}) p->value = init(kTextDim, kAlignDim, rng);
  bo_.value = Matrix::Zero(1, kAlignDim);
  map_w_.value = init(visual_dim, kAlignDim, rng);
  map_b_.value = Matrix::Zero(1, kAlignDim);
  for (Parameter* p : parameters()) p->grad = Matrix::Zero(p->value.rows(), p->value.cols());
  for (const auto& p : bank_.prompts()) prompt_ids_.push_back(encoder.ids(p));
}

std::vector<Parameter*> AlignmentHead::parameters() { return {&wq_, &wk_, &wv_, &wo_, &bo_, &map_w_, &map_b_}; }

AlignmentHead::Projected AlignmentHead::project(Tape& tape, const Var& rows) {
  return {matmul(rows, tape.param(wq_)), matmul(rows, tape.param(wk_)), matmul(rows, tape.param(wv_))};
}

AlignmentHead::Projected AlignmentHead::prompt_rows(Tape& tape, int prompt) {
  // Prompt projections are shared by every sample on the tape.
  Var tokens = tape.memo(this, 4 * prompt, [&] {
    return gather_rows(tape.param(encoder_->table()), prompt_ids_.at(static_cast<std::size_t>(prompt)));
  });
  return {tape.memo(this, 4 * prompt + 1, [&] { return matmul(tokens, tape.param(wq_)); }),
          tape.memo(this, 4 * prompt + 2, [&] { return matmul(tokens, tape.param(wk_)); }),
          tape.memo(this, 4 * prompt + 3, [&] { return matmul(tokens, tape.param(wv_)); })};
}

Var AlignmentHead::pooled_attention(Tape& tape, const Projected& p, const Projected& k) {
  const Var q[] = {p.q, k.q};
  const Var kk[] = {p.k, k.k};
  const Var v[] = {p.v, k.v};
  Var out = attention(concat_rows(q), concat_rows(kk), concat_rows(v), kAlignHeads);
  // Mean-pooling before the output projection equals projecting every row first.
  return affine(mean_rows(out), tape.param(wo_), tape.param(bo_));
}

Var AlignmentHead::prompt_embed(Tape& tape, int prompt, const Var& k) {
  if (prompt < 0 || prompt >= static_cast<int>(bank_.size())) throw std::out_of_range("prompt index out of range");
  if (k.cols() != kTextDim) throw std::invalid_argument("prompt_embed: knowledge width mismatch");
  return pooled_attention(tape, prompt_rows(tape, prompt), project(tape, k));
}

Var AlignmentHead::prompt_embed(Tape& tape, const std::string& prompt, const Var& k) {
  return prompt_embed(tape, bank_.index_of(prompt), k);
}

Var AlignmentHead::map_visual(Tape& tape, const Var& v) {
  if (v.rows() != 1 || v.cols() != map_w_.value.rows()) throw std::invalid_argument("map_visual: v has the wrong dimension");
  return affine(v, tape.param(map_w_), tape.param(map_b_));
}

Var AlignmentHead::alignment_score(Tape& tape, const Var& v, const Var& k, int prompt) {
  return cosine(map_visual(tape, v), prompt_embed(tape, prompt, k));
}

Var AlignmentHead::scores(Tape& tape, const Var& v, const Var& k) {
  if (k.cols() != kTextDim) throw std::invalid_argument("scores: knowledge width mismatch");
  Var vp = map_visual(tape, v);
  const Projected kp = project(tape, k);
  std::vector<Var> cols;
  cols.reserve(bank_.size());
  for (int i = 0; i < static_cast<int>(bank_.size()); ++i) {
    cols.push_back(cosine(vp, pooled_attention(tape, prompt_rows(tape, i), kp)));
  }
  return concat_cols(cols);
}

Var tie(Tape& tape, AlignmentHead& head, const Var& v, const Var& k, int factual, int counterfactual) {
  return sub(head.alignment_score(tape, v, k, factual), head.alignment_score(tape, v, k, counterfactual));
}

Var ccl_loss(std::span<const Var> scores, std::span<const int> labels, double tau, bool include_positive) {
  if (!(tau > 0.0)) throw std::invalid_argument("ccl_loss: temperature must be positive");
  if (scores.empty() || scores.size() != labels.size()) throw std::invalid_argument("ccl_loss: batch size mismatch");
  Var total = ccl_term(scores[0], labels[0], tau, include_positive);
  for (std::size_t i = 1; i < scores.size(); ++i) total = add(total, ccl_term(scores[i], labels[i], tau, include_positive));
  return total;
}

int argmax_lowest(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("argmax: empty scores");
  int best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

PseudoLabel pseudo_label(Tape& tape, AlignmentHead& head, const Var& v, const Var& k) {
  const Matrix s = head.scores(tape, v, k).value();
  PseudoLabel out;
  out.scores.scores.assign(s.data(), s.data() + s.size());
  out.label = argmax_lowest(out.scores.scores);
  return out;
}

}  // namespace kcdp
