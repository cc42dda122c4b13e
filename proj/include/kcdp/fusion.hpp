#pragma once

// Feature-pyramid fusion of the U-Net levels into the visual feature v.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "kcdp/autograd.hpp"
#include "kcdp/diffcore.hpp"

namespace kcdp {

inline constexpr int kFusionChannels = 64;
inline constexpr int kVisualDim = 128;

/// Mean over key tokens of a softmax-normalized attention map, one value per
/// spatial position (token layout, H·W × 1).
Matrix attention_saliency(const Matrix& attention);

class FusionHead {
 public:
  FusionHead(std::uint64_t seed, bool with_bias = true);

  /// v (1 × 128) from the level features F_1..F_4 and their saliency maps.
  Var fuse(Tape& tape, std::span<const Var> features, std::span<const Matrix> saliency);
  Var fuse(Tape& tape, const UNetFeatures& features);

  std::vector<Parameter*> parameters();

 private:
  std::vector<Parameter> lateral_w_, lateral_b_;
  Parameter proj_w_, proj_b_;
};

}  // namespace kcdp
