#pragma once

// Brute-force reference computations written directly against Eigen, used to
// cross-check the library's tape-based implementations.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "kcdp/cliea.hpp"
#include "kcdp/moe.hpp"

namespace kcdp::testing {

/// Softmax over all logits, keep the top_k by (probability desc, index asc), renormalize.
inline std::vector<double> route_oracle(const std::vector<double>& logits, int top_k) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& x : p) x /= z;
  std::vector<int> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });
  std::vector<double> w(p.size(), 0.0);
  double kept = 0.0;
  for (int i = 0; i < top_k; ++i) kept += p[order[i]];
  for (int i = 0; i < top_k; ++i) w[order[i]] = p[order[i]] / kept;
  return w;
}

/// Evaluates every expert, then forms the masked weighted sum.
inline RowVector moe_predict_oracle(MoEPredictor& m, const RowVector& v, const RowVector& k) {
  const auto ps = m.parameters();
  const auto& cfg = m.config();
  RowVector x(v.size() + (cfg.use_knowledge ? k.size() : 0));
  if (cfg.use_knowledge) x << v, k;
  else x = v;
  const RowVector a = x * ps[0]->value + ps[1]->value;
  const RowVector logits = a * ps[2]->value + ps[3]->value;
  const auto gate = route_oracle(std::vector<double>(logits.data(), logits.data() + logits.size()), cfg.top_k);
  RowVector out = RowVector::Zero(cfg.num_classes);
  for (int e = 0; e < cfg.n_experts; ++e) {
    const auto* ex = &ps[4 + 4 * static_cast<std::size_t>(e)];
    const RowVector h = (a * ex[0]->value + ex[1]->value).cwiseMax(0.0);
    out += gate[static_cast<std::size_t>(e)] * (h * ex[2]->value + ex[3]->value);
  }
  return out;
}

/// s = mean over rows of MHA(prompt tokens ++ k), then output projection.
inline RowVector prompt_embed_oracle(AlignmentHead& head, const TextEncoder& enc, int prompt, const Matrix& k) {
  const auto ps = head.parameters();
  const auto ids = enc.ids(head.bank()[static_cast<std::size_t>(prompt)]);
  Matrix rows(static_cast<Eigen::Index>(ids.size()) + k.rows(), kTextDim);
  for (std::size_t i = 0; i < ids.size(); ++i) rows.row(static_cast<Eigen::Index>(i)) = enc.table().value.row(ids[i]);
  rows.bottomRows(k.rows()) = k;
  const Matrix q = rows * ps[0]->value, kk = rows * ps[1]->value, v = rows * ps[2]->value;
  const int dh = kAlignDim / kAlignHeads;
  Matrix out = Matrix::Zero(rows.rows(), kAlignDim);
  for (int h = 0; h < kAlignHeads; ++h) {
    Matrix s = q.middleCols(h * dh, dh) * kk.middleCols(h * dh, dh).transpose() / std::sqrt(static_cast<double>(dh));
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      s.row(r).array() -= s.row(r).maxCoeff();
      s.row(r) = s.row(r).array().exp().matrix();
      s.row(r) /= s.row(r).sum();
    }
    out.middleCols(h * dh, dh) = s * v.middleCols(h * dh, dh);
  }
  const Matrix projected = out * ps[3]->value;
  return RowVector(projected.colwise().mean()) + RowVector(ps[4]->value.row(0));
}

/// cos(Linear(v), s_p).
inline double alignment_score_oracle(AlignmentHead& head, const TextEncoder& enc, const RowVector& v, const Matrix& k,
                                     int prompt) {
  const auto ps = head.parameters();
  const RowVector vp = v * ps[5]->value + ps[6]->value;
  const RowVector s = prompt_embed_oracle(head, enc, prompt, k);
  const double n = vp.norm() * s.norm();
  return n == 0.0 ? 0.0 : vp.dot(s) / n;
}

/// Plain loop argmax over prompts, first index wins ties.
inline int pseudo_label_oracle(AlignmentHead& head, const TextEncoder& enc, const RowVector& v, const Matrix& k) {
  int best = 0;
  double best_score = -2.0;
  for (int p = 0; p < static_cast<int>(head.num_classes()); ++p) {
    const double s = alignment_score_oracle(head, enc, v, k, p);
    if (s > best_score) {
      best_score = s;
      best = p;
    }
  }
  return best;
}

}  // namespace kcdp::testing
