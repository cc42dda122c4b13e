#include "kcdp/model.hpp"

#include <algorithm>
#include <stdexcept>

namespace kcdp {

namespace {

MoEConfig moe_config(const TrainConfig& c, int num_classes) {
  MoEConfig m;
  m.n_experts = c.moe_n_experts;
  m.top_k = c.moe_top_k;
  m.num_classes = num_classes;
  m.visual_dim = kVisualDim;
  m.knowledge_dim = kTextDim;
  m.classifier = c.classifier;
  m.use_knowledge = c.moe_use_knowledge;
  return m;
}

}  // namespace

bool SplitCache::labeled() const {
  return !labels.empty() && std::all_of(labels.begin(), labels.end(), [](int l) { return l >= 0; });
}

std::vector<std::string> strategy_groups(FinetuneStrategy strategy) {
  switch (strategy) {
    case FinetuneStrategy::kFreeze: return {};
    case FinetuneStrategy::kFinetuneKV: return {"kgca.key", "kgca.value"};
    case FinetuneStrategy::kLora: return {"kgca.lora"};
    case FinetuneStrategy::kFull:
      return {"unet.conv", "unet.time", "kgca.query", "kgca.key", "kgca.value", "kgca.out", "unet.noise_head"};
  }
  return {};
}

Model::Model(const TrainConfig& config, std::vector<std::string> labels)
    : config_(config),
      labels_(std::move(labels)),
      image_encoder_(config.seed),
      text_encoder_(TextEncoder::for_labels(labels_, config.seed, config.text_prior)),
      unet_(config.seed, config.lora_rank),
      fusion_(config.seed),
      moe_(moe_config(config, static_cast<int>(labels_.size())), config.seed),
      bank_(labels_),
      alignment_(bank_, text_encoder_, kVisualDim, config.seed) {
  config_.validate();
  apply_strategy(config_.finetune_strategy);
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  auto append = [&](std::vector<Parameter*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  append(image_encoder_.parameters());
  out.push_back(&text_encoder_.table());
  append(unet_.parameters());
  append(fusion_.parameters());
  append(moe_.parameters());
  append(alignment_.parameters());
  return out;
}

std::vector<Parameter*> Model::trainable_parameters() {
  std::vector<Parameter*> out;
  for (Parameter* p : parameters()) {
    if (p->trainable) out.push_back(p);
  }
  return out;
}

std::size_t Model::trainable_count() {
  std::size_t n = 0;
  for (Parameter* p : trainable_parameters()) n += p->size();
  return n;
}

void Model::apply_strategy(FinetuneStrategy strategy) {
  config_.finetune_strategy = strategy;
  for (Parameter* p : parameters()) p->trainable = false;
  const auto groups = strategy_groups(strategy);
  for (Parameter* p : unet_.parameters()) {
    p->trainable = std::find(groups.begin(), groups.end(), p->group) != groups.end();
  }
  for (Parameter* p : fusion_.parameters()) p->trainable = true;
  for (Parameter* p : moe_.active_parameters()) p->trainable = true;
  for (Parameter* p : alignment_.parameters()) p->trainable = true;
  text_encoder_.table().trainable = config_.train_text_encoder;
}

SplitCache Model::build_cache(const Split& split) const {
  SplitCache c;
  c.ids.reserve(split.size());
  for (const auto& s : split.samples) {
    c.ids.push_back(s.id());
    c.domains.push_back(s.domain());
    c.latents.push_back(image_encoder_.encode(s.pixels()).z);
    const auto triples = parse_triples(s.caption());
    KnowledgeEmbedding k = encode_knowledge(s.caption(), triples, text_encoder_);
    apply_condition(k, config_.condition);
    c.knowledge.push_back(k.sequence());
    c.tokens.push_back(tokenize_knowledge(s.caption(), triples, text_encoder_));
    c.labels.push_back(s.label() ? s.label()->index : -1);
  }
  return c;
}

Var Model::knowledge(Tape& tape, const SplitCache& cache, std::size_t i) {
  // A trainable table makes the cached sequence stale, so rebuild it from token ids.
  if (text_encoder_.table().trainable) {
    return knowledge_on_tape(tape, text_encoder_, cache.tokens.at(i), config_.condition);
  }
  return tape.constant(cache.knowledge.at(i));
}

ForwardResult Model::forward(Tape& tape, const Matrix& latent, const Var& k, int t) {
  ForwardResult r;
  r.k = k;
  r.features = unet_.forward(tape, tape.constant(latent), t, k, use_lora());
  r.v = fusion_.fuse(tape, r.features);
  r.logits = moe_.predict(tape, r.v, mean_rows(k));
  return r;
}

ForwardResult Model::forward(Tape& tape, const SplitCache& cache, std::size_t i) {
  return forward(tape, cache.latents.at(i), knowledge(tape, cache, i));
}

}  // namespace kcdp
