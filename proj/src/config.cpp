#include "kcdp/config.hpp"

#include <cstdio>
#include <stdexcept>

#include "kcdp/io_util.hpp"

namespace kcdp {

std::string_view to_string(Setting s) { return s == Setting::kDA ? "da" : "uc"; }

Setting setting_from_string(std::string_view s) {
  if (s == "da") return Setting::kDA;
  if (s == "uc") return Setting::kUC;
  throw std::invalid_argument("unknown setting '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("config: lr must be positive");
  if (batch_size < 2 || batch_size % 2 != 0) throw std::invalid_argument("config: batch_size must be a positive even number");
  if (epochs < 1) throw std::invalid_argument("config: epochs must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("config: weight_decay must be non-negative");
  if (lambda1 < 0.0 || lambda2 < 0.0) throw std::invalid_argument("config: lambda1 and lambda2 must be non-negative");
  if (!(tau > 0.0)) throw std::invalid_argument("config: tau must be positive");
  if (pretrain_ldm_steps < 0) throw std::invalid_argument("config: pretrain_ldm_steps must be non-negative");
  if (ccl_weight < 0.0) throw std::invalid_argument("config: ccl_weight must be non-negative");
  if (warmup_epochs < 0) throw std::invalid_argument("config: warmup_epochs must be non-negative");
  if (lora_rank < 1) throw std::invalid_argument("config: lora_rank must be positive");
  if (feature_timestep < 0 || feature_timestep > 1000) throw std::invalid_argument("config: feature_timestep must lie in [0, 1000]");
  if (text_prior < 0.0) throw std::invalid_argument("config: text_prior must be non-negative");
  if (threads < 1) throw std::invalid_argument("config: threads must be positive");
  MoEConfig m;
  m.n_experts = moe_n_experts;
  m.top_k = moe_top_k;
  m.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {
      {"lr", lr},
      {"batch_size", batch_size},
      {"epochs", epochs},
      {"weight_decay", weight_decay},
      {"lambda1", lambda1},
      {"lambda2", lambda2},
      {"tau", tau},
      {"finetune_strategy", to_string(finetune_strategy)},
      {"classifier", to_string(classifier)},
      {"condition", to_string(condition)},
      {"pretrain_ldm_steps", pretrain_ldm_steps},
      {"seed", seed},
      {"moe.n_experts", moe_n_experts},
      {"moe.top_k", moe_top_k},
      {"moe.input", moe_use_knowledge ? "v_k" : "v"},
      {"ccl.include_positive_in_denominator", ccl_include_positive},
      {"ccl_weight", ccl_weight},
      {"warmup_epochs", warmup_epochs},
      {"lora_rank", lora_rank},
      {"feature_timestep", feature_timestep},
      {"train_text_encoder", train_text_encoder},
      {"text_prior", text_prior},
      {"setting", to_string(setting)},
      {"threads", threads},
  };
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "lr") c.lr = value.get<double>();
    else if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "epochs") c.epochs = value.get<int>();
    else if (key == "weight_decay") c.weight_decay = value.get<double>();
    else if (key == "lambda1") c.lambda1 = value.get<double>();
    else if (key == "lambda2") c.lambda2 = value.get<double>();
    else if (key == "tau") c.tau = value.get<double>();
    else if (key == "finetune_strategy") c.finetune_strategy = strategy_from_string(value.get<std::string>());
    else if (key == "classifier") c.classifier = classifier_from_string(value.get<std::string>());
    else if (key == "condition") c.condition = condition_from_string(value.get<std::string>());
    else if (key == "pretrain_ldm_steps") c.pretrain_ldm_steps = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "moe.n_experts") c.moe_n_experts = value.get<int>();
    else if (key == "moe.top_k") c.moe_top_k = value.get<int>();
    else if (key == "moe.input") {
      const auto s = value.get<std::string>();
      if (s != "v" && s != "v_k") throw std::invalid_argument("config: moe.input must be 'v' or 'v_k'");
      c.moe_use_knowledge = s == "v_k";
    }
    else if (key == "ccl.include_positive_in_denominator") c.ccl_include_positive = value.get<bool>();
    else if (key == "ccl_weight") c.ccl_weight = value.get<double>();
    else if (key == "warmup_epochs") c.warmup_epochs = value.get<int>();
    else if (key == "lora_rank") c.lora_rank = value.get<int>();
    else if (key == "feature_timestep") c.feature_timestep = value.get<int>();
    else if (key == "train_text_encoder") c.train_text_encoder = value.get<bool>();
    else if (key == "text_prior") c.text_prior = value.get<double>();
    else if (key == "setting") c.setting = setting_from_string(value.get<std::string>());
    else if (key == "threads") c.threads = value.get<int>();
    else throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  return from_json(nlohmann::json::parse(io::read_file(path)));
}

std::string config_hash(const TrainConfig& config, const std::vector<std::string>& labels) {
  const nlohmann::json arch = {
      {"labels", labels},
      {"classifier", to_string(config.classifier)},
      {"moe.n_experts", config.moe_n_experts},
      {"moe.top_k", config.moe_top_k},
      {"moe.input", config.moe_use_knowledge ? "v_k" : "v"},
      {"lora_rank", config.lora_rank},
      {"text_prior", config.text_prior},
      {"condition", to_string(config.condition)},
  };
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : arch.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace kcdp
