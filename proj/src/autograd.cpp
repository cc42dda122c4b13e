#include "kcdp/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace kcdp {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

// Per-row numerically stable softmax in place.
void softmax_rows_inplace(Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

}  // namespace

// ---- tape -----------------------------------------------------------------

Var Tape::constant(Matrix value) {
  auto& n = nodes_.emplace_back();
  n.own = std::move(value);
  return Var(this, &n);
}

Var Tape::param(Parameter& p) {
  if (auto it = params_.find(&p); it != params_.end()) return Var(this, it->second);
  auto& n = nodes_.emplace_back();
  n.view = &p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_ && p.trainable;
  params_.emplace(&p, &n);
  return Var(this, &n);
}

Var Tape::make(Matrix value, std::span<const Var> parents, std::function<void()> backward) {
  auto& n = nodes_.emplace_back();
  n.own = std::move(value);
  if (grad_enabled_) {
    n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                  [](const Var& p) { return p.requires_grad(); });
    if (n.requires_grad) n.backward = std::move(backward);
  }
  return Var(this, &n);
}

void Tape::backward(const Var& loss) {
  require(loss.rows() == 1 && loss.cols() == 1, "backward: loss must be 1x1");
  if (!loss.requires_grad()) return;
  grad_of(loss)(0, 0) += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->requires_grad && it->backward && it->grad.size() != 0) it->backward();
  }
  for (auto& n : nodes_) {
    if (n.param != nullptr && n.requires_grad && n.grad.size() != 0) n.param->grad += n.grad;
  }
}

void Tape::clear() {
  memo_.clear();
  params_.clear();
  nodes_.clear();
}

// ---- elementary ops -------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  const Var parents[] = {a, b};
  Var out = a.tape().make(a.value() * b.value(), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [a, b, on]() {
      if (a.requires_grad()) grad_of(a).noalias() += on->grad * b.value().transpose();
      if (b.requires_grad()) grad_of(b).noalias() += a.value().transpose() * on->grad;
    };
  }
  return out;
}

Var affine(const Var& x, const Var& w, const Var& b) {
  require(x.cols() == w.rows(), "affine: input dimension mismatch");
  require(b.rows() == 1 && b.cols() == w.cols(), "affine: bias shape mismatch");
  Matrix y = x.value() * w.value();
  y.rowwise() += b.value().row(0);
  const Var parents[] = {x, w, b};
  Var out = x.tape().make(std::move(y), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [x, w, b, on]() {
      if (x.requires_grad()) grad_of(x).noalias() += on->grad * w.value().transpose();
      if (w.requires_grad()) grad_of(w).noalias() += x.value().transpose() * on->grad;
      if (b.requires_grad()) grad_of(b) += on->grad.colwise().sum();
    };
  }
  return out;
}

Var add(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  const Var parents[] = {a, b};
  Var out = a.tape().make(a.value() + b.value(), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [a, b, on]() {
      if (a.requires_grad()) grad_of(a) += on->grad;
      if (b.requires_grad()) grad_of(b) += on->grad;
    };
  }
  return out;
}

Var sub(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  const Var parents[] = {a, b};
  Var out = a.tape().make(a.value() - b.value(), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [a, b, on]() {
      if (a.requires_grad()) grad_of(a) += on->grad;
      if (b.requires_grad()) grad_of(b) -= on->grad;
    };
  }
  return out;
}

Var add_row(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: shape mismatch");
  Matrix y = a.value();
  y.rowwise() += row.value().row(0);
  const Var parents[] = {a, row};
  Var out = a.tape().make(std::move(y), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [a, row, on]() {
      if (a.requires_grad()) grad_of(a) += on->grad;
      if (row.requires_grad()) grad_of(row) += on->grad.colwise().sum();
    };
  }
  return out;
}

Var hadamard(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard: shape mismatch");
  const Var parents[] = {a, b};
  Var out = a.tape().make(a.value().cwiseProduct(b.value()), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [a, b, on]() {
      if (a.requires_grad()) grad_of(a) += on->grad.cwiseProduct(b.value());
      if (b.requires_grad()) grad_of(b) += on->grad.cwiseProduct(a.value());
    };
  }
  return out;
}

Var scale(const Var& a, double s) {
  const Var parents[] = {a};
  Var out = a.tape().make(a.value() * s, parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [a, s, on]() { grad_of(a) += on->grad * s; };
  }
  return out;
}

Var relu(const Var& a) {
  const Var parents[] = {a};
  Var out = a.tape().make(a.value().cwiseMax(0.0), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [a, on]() {
      grad_of(a) += (a.value().array() > 0.0).select(on->grad, 0.0);
    };
  }
  return out;
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix y(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    y.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  Var out = parts[0].tape().make(std::move(y), parts, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [keep = std::move(keep), on]() {
      Eigen::Index r0 = 0;
      for (const auto& p : keep) {
        if (p.requires_grad()) grad_of(p) += on->grad.middleRows(r0, p.rows());
        r0 += p.rows();
      }
    };
  }
  return out;
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix y(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    y.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  Var out = parts[0].tape().make(std::move(y), parts, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [keep = std::move(keep), on]() {
      Eigen::Index c0 = 0;
      for (const auto& p : keep) {
        if (p.requires_grad()) grad_of(p) += on->grad.middleCols(c0, p.cols());
        c0 += p.cols();
      }
    };
  }
  return out;
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  const Var parents[] = {a};
  Var out = a.tape().make(a.value().middleRows(start, count), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [a, start, count, on]() { grad_of(a).middleRows(start, count) += on->grad; };
  }
  return out;
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  const Var parents[] = {a};
  Var out = a.tape().make(a.value().middleCols(start, count), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [a, start, count, on]() { grad_of(a).middleCols(start, count) += on->grad; };
  }
  return out;
}

Var mean_rows(const Var& a) {
  require(a.rows() > 0, "mean_rows: empty input");
  const Var parents[] = {a};
  Var out = a.tape().make(a.value().colwise().mean(), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [a, on]() {
      const double inv = 1.0 / static_cast<double>(a.rows());
      grad_of(a).rowwise() += on->grad.row(0) * inv;
    };
  }
  return out;
}

Var sum_all(const Var& a) {
  const Var parents[] = {a};
  Matrix y(1, 1);
  y(0, 0) = a.value().sum();
  Var out = a.tape().make(std::move(y), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [a, on]() { grad_of(a).array() += on->grad(0, 0); };
  }
  return out;
}

Var gather_rows(const Var& table, std::span<const int> indices) {
  Matrix y = Matrix::Zero(static_cast<Eigen::Index>(indices.size()), table.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    require(idx < table.rows(), "gather_rows: index out of range");
    if (idx >= 0) y.row(static_cast<Eigen::Index>(i)) = table.value().row(idx);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  const Var parents[] = {table};
  Var out = table.tape().make(std::move(y), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [table, idx = std::move(idx), on]() {
      Matrix& g = grad_of(table);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= 0) g.row(idx[i]) += on->grad.row(static_cast<Eigen::Index>(i));
      }
    };
  }
  return out;
}

// ---- spatial ops ----------------------------------------------------------

Var im2col(const Var& a, int height, int width, int kernel, int stride, int pad) {
  require(a.rows() == static_cast<Eigen::Index>(height) * width, "im2col: token count mismatch");
  const int channels = static_cast<int>(a.cols());
  const int out_h = (height + 2 * pad - kernel) / stride + 1;
  const int out_w = (width + 2 * pad - kernel) / stride + 1;
  require(out_h > 0 && out_w > 0, "im2col: kernel larger than input");
  const Matrix& x = a.value();
  Matrix y = Matrix::Zero(out_h * out_w, kernel * kernel * channels);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const int row = oy * out_w + ox;
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= width) continue;
          y.block(row, (ky * kernel + kx) * channels, 1, channels) = x.row(iy * width + ix);
        }
      }
    }
  }
  const Var parents[] = {a};
  Var out = a.tape().make(std::move(y), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [=]() {
      Matrix& g = grad_of(a);
      for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox) {
          const int row = oy * out_w + ox;
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= height) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= width) continue;
              g.row(iy * width + ix) += on->grad.block(row, (ky * kernel + kx) * channels, 1, channels);
            }
          }
        }
      }
    };
  }
  return out;
}

Var upsample_nearest(const Var& a, int height, int width, int factor) {
  require(a.rows() == static_cast<Eigen::Index>(height) * width, "upsample: token count mismatch");
  require(factor >= 1, "upsample: factor must be positive");
  const int out_w = width * factor;
  const int out_h = height * factor;
  Matrix y(out_h * out_w, a.cols());
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      y.row(oy * out_w + ox) = a.value().row((oy / factor) * width + ox / factor);
    }
  }
  const Var parents[] = {a};
  Var out = a.tape().make(std::move(y), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [=]() {
      Matrix& g = grad_of(a);
      for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox) {
          g.row((oy / factor) * width + ox / factor) += on->grad.row(oy * out_w + ox);
        }
      }
    };
  }
  return out;
}

// ---- attention ------------------------------------------------------------

Var attention(const Var& q, const Var& k, const Var& v, int heads) {
  require(heads >= 1, "attention: heads must be positive");
  require(q.cols() == k.cols(), "attention: query/key width mismatch");
  require(k.rows() == v.rows(), "attention: key/value length mismatch");
  require(q.cols() % heads == 0 && v.cols() % heads == 0, "attention: width not divisible by heads");
  const Eigen::Index dk = q.cols() / heads;
  const Eigen::Index dv = v.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const Eigen::Index lq = q.rows();
  const Eigen::Index lk = k.rows();

  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  Matrix y(lq, v.cols());
  Matrix avg = Matrix::Zero(lq, lk);
  for (int h = 0; h < heads; ++h) {
    Matrix s = q.value().middleCols(h * dk, dk) * k.value().middleCols(h * dk, dk).transpose();
    s *= scale;
    softmax_rows_inplace(s);
    y.middleCols(h * dv, dv).noalias() = s * v.value().middleCols(h * dv, dv);
    avg += s;
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  avg /= static_cast<double>(heads);

  const Var parents[] = {q, k, v};
  Var out = q.tape().make(std::move(y), parents, nullptr);
  detail::Node* on = out.node();
  on->aux = std::move(avg);
  if (out.requires_grad()) {
    on->backward = [q, k, v, heads, dk, dv, scale, probs = std::move(probs), on]() {
      for (int h = 0; h < heads; ++h) {
        const Matrix& p = probs[static_cast<std::size_t>(h)];
        const auto go = on->grad.middleCols(h * dv, dv);
        if (v.requires_grad()) grad_of(v).middleCols(h * dv, dv).noalias() += p.transpose() * go;
        if (!q.requires_grad() && !k.requires_grad()) continue;
        Matrix dp = go * v.value().middleCols(h * dv, dv).transpose();
        const Eigen::VectorXd inner = (dp.cwiseProduct(p)).rowwise().sum();
        Matrix ds = p.cwiseProduct(dp.colwise() - inner);
        ds *= scale;
        if (q.requires_grad()) {
          grad_of(q).middleCols(h * dk, dk).noalias() += ds * k.value().middleCols(h * dk, dk);
        }
        if (k.requires_grad()) {
          grad_of(k).middleCols(h * dk, dk).noalias() += ds.transpose() * q.value().middleCols(h * dk, dk);
        }
      }
    };
  }
  return out;
}

// ---- similarity and losses ------------------------------------------------

Var cosine(const Var& a, const Var& b) {
  require(a.rows() == 1 && b.rows() == 1 && a.cols() == b.cols(), "cosine: expects equal row vectors");
  const double na = a.value().norm();
  const double nb = b.value().norm();
  const double dot = a.value().row(0).dot(b.value().row(0));
  const bool degenerate = na == 0.0 || nb == 0.0;
  Matrix y(1, 1);
  y(0, 0) = degenerate ? 0.0 : dot / (na * nb);
  const double c = y(0, 0);
  const Var parents[] = {a, b};
  Var out = a.tape().make(std::move(y), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad() && !degenerate) {
    on->backward = [a, b, na, nb, c, on]() {
      const double g = on->grad(0, 0);
      if (a.requires_grad()) grad_of(a) += g * (b.value() / (na * nb) - c * a.value() / (na * na));
      if (b.requires_grad()) grad_of(b) += g * (a.value() / (na * nb) - c * b.value() / (nb * nb));
    };
  }
  return out;
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  require(static_cast<Eigen::Index>(labels.size()) == logits.rows(), "cross_entropy: label count mismatch");
  require(logits.rows() > 0, "cross_entropy: empty batch");
  const Eigen::Index k = logits.cols();
  Matrix p = logits.value();
  double loss = 0.0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= k) throw std::invalid_argument("cross_entropy: label out of range");
    auto row = p.row(r);
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    loss += lse - row(y);
    row = (row.array() - lse).exp();
  }
  const double n = static_cast<double>(p.rows());
  Matrix out_v(1, 1);
  out_v(0, 0) = loss / n;
  std::vector<int> ys(labels.begin(), labels.end());
  const Var parents[] = {logits};
  Var out = logits.tape().make(std::move(out_v), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [logits, p = std::move(p), ys = std::move(ys), n, on]() {
      Matrix g = p;
      for (std::size_t r = 0; r < ys.size(); ++r) g(static_cast<Eigen::Index>(r), ys[r]) -= 1.0;
      grad_of(logits) += g * (on->grad(0, 0) / n);
    };
  }
  return out;
}

Var ccl_term(const Var& scores, int label, double tau, bool include_positive) {
  require(tau > 0.0, "ccl: temperature must be positive");
  require(scores.rows() == 1 && scores.cols() >= 2, "ccl: need at least two classes");
  const Eigen::Index k = scores.cols();
  require(label >= 0 && label < k, "ccl: label out of range");
  const RowVector s = scores.value().row(0) / tau;
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < k; ++j) {
    if (j != label || include_positive) mx = std::max(mx, s(j));
  }
  RowVector w = RowVector::Zero(k);
  double denom = 0.0;
  for (Eigen::Index j = 0; j < k; ++j) {
    if (j != label || include_positive) {
      w(j) = std::exp(s(j) - mx);
      denom += w(j);
    }
  }
  w /= denom;
  Matrix y(1, 1);
  y(0, 0) = -s(label) + mx + std::log(denom);
  const Var parents[] = {scores};
  Var out = scores.tape().make(std::move(y), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [scores, w, label, tau, on]() {
      RowVector g = w / tau;
      g(label) -= 1.0 / tau;
      grad_of(scores).row(0) += g * on->grad(0, 0);
    };
  }
  return out;
}

// ---- mixture-of-experts gating --------------------------------------------

std::vector<double> topk_softmax(std::span<const double> logits, int top_k) {
  const int n = static_cast<int>(logits.size());
  require(n >= 1, "topk_softmax: no experts");
  require(top_k >= 1 && top_k <= n, "topk_softmax: top_k must be in [1, N]");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    p[static_cast<std::size_t>(i)] = std::exp(logits[static_cast<std::size_t>(i)] - mx);
    z += p[static_cast<std::size_t>(i)];
  }
  for (auto& x : p) x /= z;
  std::vector<int> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  // Stable sort on probability keeps lower indices first among ties.
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)];
  });
  std::vector<double> w(logits.size(), 0.0);
  double kept = 0.0;
  for (int i = 0; i < top_k; ++i) kept += p[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  for (int i = 0; i < top_k; ++i) {
    const auto e = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
    w[e] = p[e] / kept;
  }
  return w;
}

Var topk_gate(const Var& logits, int top_k) {
  require(logits.rows() == 1, "topk_gate: expects a row of logits");
  const auto& row = logits.value();
  std::vector<double> l(row.data(), row.data() + row.size());
  const std::vector<double> w = topk_softmax(l, top_k);
  Matrix y(1, static_cast<Eigen::Index>(w.size()));
  for (std::size_t i = 0; i < w.size(); ++i) y(0, static_cast<Eigen::Index>(i)) = w[i];
  const Var parents[] = {logits};
  Var out = logits.tape().make(y, parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    // Kept weights are a softmax restricted to the kept set.
    on->backward = [logits, y, on]() {
      double inner = 0.0;
      for (Eigen::Index i = 0; i < y.cols(); ++i) inner += y(0, i) * on->grad(0, i);
      Matrix& g = grad_of(logits);
      for (Eigen::Index i = 0; i < y.cols(); ++i) {
        if (y(0, i) != 0.0) g(0, i) += y(0, i) * (on->grad(0, i) - inner);
      }
    };
  }
  return out;
}

Var gated_sum(const Var& weights, std::span<const int> experts, std::span<const Var> outputs) {
  require(experts.size() == outputs.size() && !outputs.empty(), "gated_sum: size mismatch");
  require(weights.rows() == 1, "gated_sum: weights must be a row");
  Matrix y = Matrix::Zero(outputs[0].rows(), outputs[0].cols());
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    require(experts[i] >= 0 && experts[i] < weights.cols(), "gated_sum: expert index out of range");
    y += weights.value()(0, experts[i]) * outputs[i].value();
  }
  std::vector<Var> parents;
  parents.reserve(outputs.size() + 1);
  parents.push_back(weights);
  parents.insert(parents.end(), outputs.begin(), outputs.end());
  std::vector<int> idx(experts.begin(), experts.end());
  Var out = weights.tape().make(std::move(y), parents, nullptr);
  detail::Node* on = out.node();
  if (out.requires_grad()) {
    on->backward = [parents, idx = std::move(idx), on]() {
      const Var& w = parents[0];
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const Var& o = parents[i + 1];
        if (w.requires_grad()) grad_of(w)(0, idx[i]) += on->grad.cwiseProduct(o.value()).sum();
        if (o.requires_grad()) grad_of(o) += on->grad * w.value()(0, idx[i]);
      }
    };
  }
  return out;
}

}  // namespace kcdp
