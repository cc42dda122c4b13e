#pragma once

// Checkpoint byte layout (all integers little-endian):
//   bytes 0..7    magic "KCDPCKP1"
//   bytes 8..15   uint64 header length N
//   next N bytes  UTF-8 JSON header:
//                 {"format": 1, "config": {...}, "labels": [...],
//                  "config_hash": "<16 hex>",
//                  "tensors": [{"name", "shape": [rows, cols], "offset"}]}
//   remainder     tensor payload; each tensor is rows*cols float32 values in
//                 row-major order starting at `offset` bytes into the payload.

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "kcdp/model.hpp"

namespace kcdp {

void save_checkpoint(Model& model, const std::filesystem::path& path);

/// Rebuilds the model from the stored config and labels, then loads tensors.
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path);

/// Loads tensors into an existing model; throws if its config hash differs.
void load_checkpoint_into(Model& model, const std::filesystem::path& path);

}  // namespace kcdp
