#pragma once

// Losses, optimizer, training schedule, evaluation and exports.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kcdp/autograd.hpp"
#include "kcdp/cliea.hpp"
#include "kcdp/model.hpp"

namespace kcdp {

/// Mean cross-entropy over a B × K batch of logits.
Var ce_loss(const Var& logits, std::span<const int> labels);
double ce_loss(const Matrix& logits, std::span<const int> labels);

/// L = λ1·L_s + λ2·L_t + L_ccl.
double total_loss(double l_s, double l_t, double l_ccl, double lambda1, double lambda2);

/// Decoupled weight decay Adam.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);

  void zero_grad();
  void step();
  long steps() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Matrix> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  long t_ = 0;
};

struct Metrics {
  std::size_t n = 0;
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;  // NaN for classes without support
  std::vector<std::size_t> support;
};

Metrics compute_metrics(std::span<const int> predictions, std::span<const int> labels, int num_classes);

struct EpochMetrics {
  int epoch = 0;
  double l_s = 0.0;
  double l_t = 0.0;
  double l_ccl = 0.0;
  double l_total = 0.0;
  double acc_source = 0.0;
  double acc_target = 0.0;
  double pseudo_agreement = 0.0;
};

struct StepRecord {
  int epoch = 0;
  double l_s = 0.0;
  double l_t = 0.0;
  double l_ccl = 0.0;
  double l_total = 0.0;  // value of the differentiated loss
};

struct TrainData {
  const SplitCache* source_train = nullptr;
  const SplitCache* target_train = nullptr;  // unused in the UC setting
  const SplitCache* source_test = nullptr;
  const SplitCache* target_test = nullptr;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::vector<StepRecord> steps;
  std::vector<double> ldm_losses;
};

using EpochHook = std::function<void(const EpochMetrics&, Model&)>;

/// Optional LDM pretraining, warm-up epochs on source (λ1·L_s + L_ccl), then
/// per-epoch pseudo-label refresh and mixed half-source/half-target batches.
TrainResult train(Model& model, const TrainData& data, const EpochHook& on_epoch = {});

/// Denoising pretraining of the U-Net on cached latents; returns per-step losses.
std::vector<double> pretrain_ldm(Model& model, std::span<const SplitCache* const> caches, int steps, int batch_size,
                                 double lr, std::uint64_t seed);

// ---- inference over a split (parallel over samples) ------------------------

std::vector<Matrix> predict_logits(Model& model, const SplitCache& cache, int threads = 1);
std::vector<int> predict(Model& model, const SplitCache& cache, int threads = 1);
std::vector<PseudoLabel> pseudo_labels(Model& model, const SplitCache& cache, int threads = 1);
/// v′ = Linear(v) for every sample.
std::vector<RowVector> visual_embeddings(Model& model, const SplitCache& cache, int threads = 1);
Metrics evaluate(Model& model, const SplitCache& cache, int threads = 1);
/// Share of labeled samples whose factual score exceeds the mean counterfactual score.
double tie_positive_fraction(Model& model, const SplitCache& cache, int threads = 1);

// ---- files ----------------------------------------------------------------

std::string metrics_csv(std::span<const EpochMetrics> history);
void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochMetrics> history);
/// JSON lines: {id, domain, label?, v_prime[64]}.
void export_embeddings(Model& model, const SplitCache& cache, const std::filesystem::path& path, int threads = 1);
/// JSON array: [{id, label, scores[K]}].
void export_pseudo_labels(Model& model, const SplitCache& cache, const std::filesystem::path& path, int threads = 1);

}  // namespace kcdp
