#pragma once

// The full network: frozen image/text encoders, knowledge-conditioned U-Net,
// fusion, MoE predictor and alignment head, plus per-split input caches.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kcdp/cliea.hpp"
#include "kcdp/config.hpp"
#include "kcdp/diffcore.hpp"
#include "kcdp/fusion.hpp"
#include "kcdp/moe.hpp"
#include "kcdp/synthcorpus.hpp"
#include "kcdp/textkb.hpp"

namespace kcdp {

/// Frozen-encoder inputs of one split, computed once.
struct SplitCache {
  std::vector<std::string> ids;
  std::vector<Domain> domains;
  std::vector<Matrix> latents;    // 64 × 8
  std::vector<Matrix> knowledge;  // 17 × 64, condition applied
  std::vector<TokenizedKnowledge> tokens;
  std::vector<int> labels;  // -1 when unlabeled

  std::size_t size() const { return latents.size(); }
  bool labeled() const;
};

struct ForwardResult {
  Var logits;  // 1 × K
  Var v;       // 1 × 128
  Var k;       // 17 × 64
  UNetFeatures features;
};

class Model {
 public:
  Model(const TrainConfig& config, std::vector<std::string> labels);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const TrainConfig& config() const { return config_; }
  const std::vector<std::string>& labels() const { return labels_; }
  int num_classes() const { return static_cast<int>(labels_.size()); }
  std::string hash() const { return config_hash(config_, labels_); }

  ImageEncoder& image_encoder() { return image_encoder_; }
  TextEncoder& text_encoder() { return text_encoder_; }
  UNet& unet() { return unet_; }
  FusionHead& fusion() { return fusion_; }
  MoEPredictor& moe() { return moe_; }
  AlignmentHead& alignment() { return alignment_; }

  /// Every parameter in a fixed order (checkpoint order).
  std::vector<Parameter*> parameters();
  std::vector<Parameter*> trainable_parameters();
  std::size_t trainable_count();

  /// Sets trainable flags from the strategy mask; heads are always trainable.
  void apply_strategy(FinetuneStrategy strategy);
  bool use_lora() const { return config_.finetune_strategy == FinetuneStrategy::kLora; }

  SplitCache build_cache(const Split& split) const;

  /// Knowledge sequence on the tape: a constant unless the text encoder trains.
  Var knowledge(Tape& tape, const SplitCache& cache, std::size_t i);
  ForwardResult forward(Tape& tape, const Matrix& latent, const Var& k, int t = 0);
  ForwardResult forward(Tape& tape, const SplitCache& cache, std::size_t i);

 private:
  TrainConfig config_;
  std::vector<std::string> labels_;
  ImageEncoder image_encoder_;
  TextEncoder text_encoder_;
  UNet unet_;
  FusionHead fusion_;
  MoEPredictor moe_;
  PromptBank bank_;
  AlignmentHead alignment_;
};

/// Parameter groups made trainable by each strategy.
std::vector<std::string> strategy_groups(FinetuneStrategy strategy);

}  // namespace kcdp
