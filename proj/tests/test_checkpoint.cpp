#include <doctest.h>

#include <cstring>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "kcdp/checkpoint.hpp"
#include "kcdp/io_util.hpp"
#include "kcdp/trainkit.hpp"

using namespace kcdp;
using kcdp::testing::Caches;
using kcdp::testing::tiny_config;

namespace {

std::filesystem::path scratch_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "kcdp_test_ckpt";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("config defaults follow the documented hyperparameters") {
  const TrainConfig c;
  CHECK(c.lr == 1e-5);
  CHECK(c.batch_size == 16);
  CHECK(c.epochs == 10);
  CHECK(c.weight_decay == 0.01);
  CHECK(c.lambda1 == 1.0);
  CHECK(c.lambda2 == 1.0);
  CHECK(c.tau == 0.07);
  CHECK(c.finetune_strategy == FinetuneStrategy::kLora);
  CHECK(c.classifier == ClassifierKind::kMoE);
  CHECK(c.condition == Condition::kBoth);
  CHECK(c.moe_n_experts == 4);
  CHECK(c.moe_top_k == 2);
  CHECK_FALSE(c.ccl_include_positive);
  CHECK(c.warmup_epochs == 1);
  const TrainConfig shipped = TrainConfig::load(KCDP_CONFIG_DIR "/default.json");
  CHECK(shipped.to_json() == c.to_json());
}

TEST_CASE("config JSON round-trips and rejects bad input") {
  TrainConfig c;
  c.lr = 3e-4;
  c.classifier = ClassifierKind::kGlobal;
  c.condition = Condition::kTriplesOnly;
  c.moe_use_knowledge = false;
  c.setting = Setting::kUC;
  c.seed = 99;
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS(TrainConfig::from_json({{"learning_rate", 0.1}}));
  CHECK_THROWS(TrainConfig::from_json({{"lr", -1.0}}));
  CHECK_THROWS(TrainConfig::from_json({{"batch_size", 7}}));
  CHECK_THROWS(TrainConfig::from_json({{"lambda2", -0.5}}));
  CHECK_THROWS(TrainConfig::from_json({{"moe.top_k", 9}}));
  CHECK_THROWS(TrainConfig::from_json({{"finetune_strategy", "everything"}}));
  CHECK_THROWS(TrainConfig::from_json(nlohmann::json::array()));
}

TEST_CASE("config hash tracks architecture only") {
  const auto& labels = default_emotion_names();
  TrainConfig a, b;
  b.lr = 0.5;
  b.epochs = 3;
  CHECK(config_hash(a, labels) == config_hash(b, labels));
  b.lora_rank = 8;
  CHECK(config_hash(a, labels) != config_hash(b, labels));
  CHECK(config_hash(a, labels).size() == 16);
}

TEST_CASE("save and load round-trip") {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  Model m(cfg, default_emotion_names());
  const Caches c(m);
  train(m, c.data());
  const auto path = scratch_file("model.ckpt");
  save_checkpoint(m, path);
  auto loaded = load_checkpoint(path);
  CHECK(loaded->hash() == m.hash());
  CHECK(loaded->config().to_json() == m.config().to_json());
  auto a = m.parameters(), b = loaded->parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(b[i]->name == a[i]->name);
    CHECK(b[i]->value == a[i]->value.cast<float>().cast<double>());
  }
  // Reloading the float32 weights is exact, so a second save is byte-identical.
  const auto again = scratch_file("again.ckpt");
  save_checkpoint(*loaded, again);
  CHECK(io::read_file(again) == io::read_file(path));
}

TEST_CASE("byte layout can be read without the library") {
  Model m(tiny_config(), default_emotion_names());
  const auto path = scratch_file("layout.ckpt");
  save_checkpoint(m, path);
  const std::string bytes = io::read_file(path);
  REQUIRE(bytes.size() > 16);
  CHECK(bytes.substr(0, 8) == "KCDPCKP1");
  std::uint64_t len = 0;
  for (int i = 7; i >= 0; --i) len = (len << 8) | static_cast<unsigned char>(bytes[8 + i]);
  const auto header = nlohmann::json::parse(bytes.substr(16, len));
  CHECK(header["format"] == 1);
  CHECK(header["config_hash"] == m.hash());
  const auto params = m.parameters();
  const auto& t = header["tensors"][3];
  CHECK(t["name"] == params[3]->name);
  const std::size_t offset = 16 + len + t["offset"].get<std::size_t>();
  std::uint32_t bits = 0;
  for (int i = 3; i >= 0; --i) bits = (bits << 8) | static_cast<unsigned char>(bytes[offset + i]);
  float first;
  std::memcpy(&first, &bits, 4);
  CHECK(first == static_cast<float>(params[3]->value(0, 0)));
  std::size_t total = 0;
  for (const Parameter* p : params) total += 4 * p->size();
  CHECK(bytes.size() == 16 + len + total);
}

TEST_CASE("config hash mismatch is an error") {
  Model m(tiny_config(), default_emotion_names());
  const auto path = scratch_file("hash.ckpt");
  save_checkpoint(m, path);
  TrainConfig other = tiny_config();
  other.lora_rank = 2;
  Model o(other, default_emotion_names());
  CHECK_THROWS_WITH(load_checkpoint_into(o, path), doctest::Contains("config hash mismatch"));
  TrainConfig same_arch = tiny_config();
  same_arch.lr = 0.3;
  Model s(same_arch, default_emotion_names());
  CHECK_NOTHROW(load_checkpoint_into(s, path));

  std::string bytes = io::read_file(path);
  const auto pos = bytes.find(m.hash());
  REQUIRE(pos != std::string::npos);
  bytes[pos] = bytes[pos] == '0' ? '1' : '0';
  io::atomic_write(path, bytes);
  CHECK_THROWS(load_checkpoint(path));
}

TEST_CASE("corrupt files are rejected") {
  const auto path = scratch_file("junk.ckpt");
  io::atomic_write(path, "not a checkpoint at all");
  CHECK_THROWS(load_checkpoint(path));
  CHECK_THROWS(load_checkpoint(scratch_file("missing.ckpt")));
}

}
