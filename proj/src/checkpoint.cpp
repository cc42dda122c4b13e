#include "kcdp/checkpoint.hpp"

#include <cstring>
#include <sstream>
#include <stdexcept>

#include "kcdp/io_util.hpp"

namespace kcdp {

namespace {

constexpr char kMagic[8] = {'K', 'C', 'D', 'P', 'C', 'K', 'P', '1'};

struct RawCheckpoint {
  nlohmann::json header;
  std::string payload;
};

RawCheckpoint read_raw(const std::filesystem::path& path) {
  const std::string data = io::read_file(path);
  if (data.size() < 16 || std::memcmp(data.data(), kMagic, 8) != 0) {
    throw std::runtime_error("checkpoint: bad magic in '" + path.string() + "'");
  }
  const auto len = io::read_le<std::uint64_t>(data.data() + 8);
  if (16 + len > data.size()) throw std::runtime_error("checkpoint: truncated header");
  RawCheckpoint raw;
  raw.header = nlohmann::json::parse(data.substr(16, len));
  raw.payload = data.substr(16 + len);
  return raw;
}

void load_tensors(Model& model, const RawCheckpoint& raw) {
  const auto& tensors = raw.header.at("tensors");
  auto params = model.parameters();
  if (tensors.size() != params.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = tensors[i];
    Parameter& p = *params[i];
    if (t.at("name").get<std::string>() != p.name) throw std::runtime_error("checkpoint: unexpected tensor " + t.at("name").get<std::string>());
    const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
    if (shape.size() != 2 || shape[0] != p.value.rows() || shape[1] != p.value.cols()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    }
    const auto offset = t.at("offset").get<std::uint64_t>();
    if (offset + 4 * p.size() > raw.payload.size()) throw std::runtime_error("checkpoint: truncated payload");
    for (Eigen::Index j = 0; j < p.value.size(); ++j) {
      p.value.data()[j] = io::read_le<float>(raw.payload.data() + offset + 4 * static_cast<std::uint64_t>(j));
    }
  }
}

}  // namespace

void save_checkpoint(Model& model, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format"] = 1;
  header["config"] = model.config().to_json();
  header["labels"] = model.labels();
  header["config_hash"] = model.hash();
  auto& tensors = header["tensors"] = nlohmann::json::array();
  std::ostringstream payload;
  std::uint64_t offset = 0;
  for (Parameter* p : model.parameters()) {
    tensors.push_back({{"name", p->name}, {"shape", {p->value.rows(), p->value.cols()}}, {"offset", offset}});
    for (Eigen::Index j = 0; j < p->value.size(); ++j) io::write_le(payload, static_cast<float>(p->value.data()[j]));
    offset += 4 * p->size();
  }
  const std::string h = header.dump();
  std::ostringstream out;
  out.write(kMagic, 8);
  io::write_le(out, static_cast<std::uint64_t>(h.size()));
  out << h << payload.str();
  io::atomic_write(path, out.str());
}

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path) {
  const RawCheckpoint raw = read_raw(path);
  const TrainConfig config = TrainConfig::from_json(raw.header.at("config"));
  const auto labels = raw.header.at("labels").get<std::vector<std::string>>();
  auto model = std::make_unique<Model>(config, labels);
  if (raw.header.at("config_hash").get<std::string>() != model->hash()) {
    throw std::runtime_error("checkpoint: config hash does not match the stored config");
  }
  load_tensors(*model, raw);
  return model;
}

void load_checkpoint_into(Model& model, const std::filesystem::path& path) {
  const RawCheckpoint raw = read_raw(path);
  if (raw.header.at("config_hash").get<std::string>() != model.hash()) {
    throw std::runtime_error("checkpoint: config hash mismatch between checkpoint and model");
  }
  load_tensors(model, raw);
}

}  // namespace kcdp
