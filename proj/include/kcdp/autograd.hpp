#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape records one computation (typically one mini-batch);
// nodes are appended in creation order, which is also a valid topological
// order, so backward() is a single reverse sweep.

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace kcdp {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// A named, persistent weight matrix. Gradients accumulate into `grad`
/// across backward() calls until zero_grad().
struct Parameter {
  Parameter(std::string name, std::string group, Matrix init)
      : name(std::move(name)), group(std::move(group)), value(std::move(init)),
        grad(Matrix::Zero(value.rows(), value.cols())) {}

  std::string name;
  std::string group;
  Matrix value;
  Matrix grad;
  bool trainable = false;

  void zero_grad() { grad.setZero(); }
  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
};

class Tape;

namespace detail {
struct Node {
  Matrix own;
  const Matrix* view = nullptr;  // parameter storage, never copied
  Matrix grad;
  Matrix aux;                    // op-specific side output (e.g. attention map)
  bool requires_grad = false;
  Parameter* param = nullptr;
  std::function<void()> backward;

  const Matrix& value() const { return view != nullptr ? *view : own; }

  Matrix& grad_buffer() {
    if (grad.size() == 0) grad = Matrix::Zero(value().rows(), value().cols());
    return grad;
  }
};
}  // namespace detail

/// Handle to a node on a tape. Cheap to copy; valid until the tape is cleared.
class Var {
 public:
  Var() = default;

  const Matrix& value() const { return node_->value(); }
  const Matrix& aux() const { return node_->aux; }
  /// Gradient after backward(); empty if nothing flowed here.
  const Matrix& grad() const { return node_->grad; }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }
  bool valid() const { return node_ != nullptr; }
  Tape& tape() const { return *tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, detail::Node* node) : tape_(tape), node_(node) {}
  Tape* tape_ = nullptr;
  detail::Node* node_ = nullptr;

 public:
  detail::Node* node() const { return node_; }
};

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix value);
  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(Parameter& p);

  /// Creates a node computed by an op. `parents` decides requires_grad;
  /// `backward` is kept only if some parent needs a gradient.
  Var make(Matrix value, std::span<const Var> parents, std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse, then adds
  /// leaf gradients into the bound parameters.
  void backward(const Var& loss);

  void clear();
  std::size_t size() const { return nodes_.size(); }

  /// Memoizes a value shared by many samples within one tape
  /// (effective LoRA weights, prompt projections, time embeddings).
  template <typename F>
  Var memo(const void* owner, int tag, F&& build) {
    const auto key = std::make_pair(owner, tag);
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    Var v = build();
    memo_.emplace(key, v);
    return v;
  }

 private:
  bool grad_enabled_;
  std::deque<detail::Node> nodes_;
  std::unordered_map<const Parameter*, detail::Node*> params_;
  std::map<std::pair<const void*, int>, Var> memo_;
};

/// Accumulates into a parent's gradient buffer (allocating on first use).
inline Matrix& grad_of(const Var& v) { return v.node()->grad_buffer(); }

// ---- ops ------------------------------------------------------------------

Var matmul(const Var& a, const Var& b);
/// x·W + b with b broadcast over rows.
Var affine(const Var& x, const Var& w, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
/// Adds a 1×n row to every row of a.
Var add_row(const Var& a, const Var& row);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
/// 1×n mean over rows.
Var mean_rows(const Var& a);
/// 1×1 sum of all entries.
Var sum_all(const Var& a);
/// Gathers rows of a table; index -1 yields a zero row.
Var gather_rows(const Var& table, std::span<const int> indices);

/// Patch extraction for a k×k convolution on a token-layout feature map
/// (rows = y*W + x, cols = channels). Output row = output position,
/// columns ordered (ky, kx, channel). Zero padding.
Var im2col(const Var& a, int height, int width, int kernel, int stride, int pad);
/// Nearest-neighbour upsampling of a token-layout map by an integer factor.
Var upsample_nearest(const Var& a, int height, int width, int factor);

/// Scaled dot-product attention split across `heads` column blocks.
/// aux() of the result holds the head-averaged softmax map (Lq×Lk); it is
/// not differentiated.
Var attention(const Var& q, const Var& k, const Var& v, int heads);

/// Cosine similarity of two row vectors, 1×1; returns 0 when either norm is 0.
Var cosine(const Var& a, const Var& b);

/// Mean cross-entropy over rows of logits.
Var cross_entropy(const Var& logits, std::span<const int> labels);

/// Counterfactual contrastive term for one sample: scores is 1×K of cosine
/// similarities, `label` the factual class.
Var ccl_term(const Var& scores, int label, double tau, bool include_positive);

/// Softmax over `logits`, keeps the top_k largest (ties to the lower
/// index), zeros the rest and renormalizes the kept weights to sum to 1.
std::vector<double> topk_softmax(std::span<const double> logits, int top_k);

/// Renormalized top-k softmax gate on a 1×N row of router logits.
/// Gradients flow through kept entries only.
Var topk_gate(const Var& logits, int top_k);

/// Σ_i weights(0, idx_i) · outputs_i over the listed experts.
Var gated_sum(const Var& weights, std::span<const int> experts, std::span<const Var> outputs);

}  // namespace kcdp
