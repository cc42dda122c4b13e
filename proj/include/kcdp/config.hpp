#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kcdp/diffcore.hpp"
#include "kcdp/moe.hpp"
#include "kcdp/textkb.hpp"

namespace kcdp {

enum class Setting { kDA, kUC };

std::string_view to_string(Setting s);
Setting setting_from_string(std::string_view s);

struct TrainConfig {
  double lr = 1e-5;
  int batch_size = 16;
  int epochs = 10;
  double weight_decay = 0.01;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double tau = 0.07;
  FinetuneStrategy finetune_strategy = FinetuneStrategy::kLora;
  ClassifierKind classifier = ClassifierKind::kMoE;
  Condition condition = Condition::kBoth;
  int pretrain_ldm_steps = 0;
  std::uint64_t seed = 0;

  int moe_n_experts = 4;
  int moe_top_k = 2;
  bool moe_use_knowledge = true;
  bool ccl_include_positive = false;
  double ccl_weight = 1.0;
  int warmup_epochs = 1;
  int lora_rank = 4;
  int feature_timestep = 0;  // > 0 enables noisy-t extraction during training
  bool train_text_encoder = false;
  double text_prior = 0.2;  // weight of the shared per-emotion direction in word embeddings
  Setting setting = Setting::kDA;
  int threads = 1;

  void validate() const;
  nlohmann::json to_json() const;
  /// Flat JSON; unknown keys are rejected, missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::string& path);
};

/// FNV-1a over the architecture-defining part of a config and the label list,
/// as 16 hex digits.
std::string config_hash(const TrainConfig& config, const std::vector<std::string>& labels);

}  // namespace kcdp
