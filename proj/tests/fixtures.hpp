#pragma once

#include "kcdp/model.hpp"
#include "kcdp/synthcorpus.hpp"
#include "kcdp/trainkit.hpp"

namespace kcdp::testing {

inline const Corpus& tiny_corpus() {
  static const Corpus c = [] {
    DatasetSpec s;
    s.n_source = 32;
    s.n_target = 32;
    s.n_test = 24;
    s.seed = 3;
    return generate_dataset(s);
  }();
  return c;
}

inline TrainConfig tiny_config() {
  TrainConfig c;
  c.lr = 1e-3;
  c.batch_size = 8;
  c.epochs = 2;
  c.seed = 42;
  return c;
}

struct Caches {
  SplitCache source_train, target_train, source_test, target_test;

  explicit Caches(const Model& m, const Corpus& c = tiny_corpus())
      : source_train(m.build_cache(c.source_train)),
        target_train(m.build_cache(c.target_train)),
        source_test(m.build_cache(c.source_test)),
        target_test(m.build_cache(c.target_test)) {}

  TrainData data() const { return {&source_train, &target_train, &source_test, &target_test}; }
};

}  // namespace kcdp::testing
