#include "kcdp/fusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "kcdp/rng.hpp"

namespace kcdp {

Matrix attention_saliency(const Matrix& attention) {
  if (attention.cols() == 0) throw std::invalid_argument("attention_saliency: empty key axis");
  return attention.rowwise().mean();
}

FusionHead::FusionHead(std::uint64_t seed, bool with_bias)
    : proj_w_("fusion.proj.w", "fusion", Matrix()), proj_b_("fusion.proj.b", "fusion", Matrix()) {
  Rng rng(hash_combine(seed, 0xF05E));
  auto init = [&](Eigen::Index in, Eigen::Index out) {
    Matrix m(in, out);
    const double sd = std::sqrt(1.0 / static_cast<double>(in));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
    return m;
  };
  lateral_w_.reserve(kLevels);
  lateral_b_.reserve(kLevels);
  for (int i = 0; i < kLevels; ++i) {
    const int c = unet_levels()[static_cast<std::size_t>(i)].out_channels + 1;
    const std::string p = "fusion.lateral" + std::to_string(i + 1);
    lateral_w_.emplace_back(p + ".w", "fusion", init(c, kFusionChannels));
    lateral_b_.emplace_back(p + ".b", "fusion", Matrix::Zero(1, kFusionChannels));
  }
  proj_w_ = Parameter("fusion.proj.w", "fusion", init(kFusionChannels, kVisualDim));
  proj_b_ = Parameter("fusion.proj.b", "fusion", Matrix::Zero(1, kVisualDim));
  if (!with_bias) {
    // Bias-free heads are used for homogeneity checks; zero biases are equivalent.
    for (auto& b : lateral_b_) b.value.setZero();
    proj_b_.value.setZero();
  }
}

std::vector<Parameter*> FusionHead::parameters() {
  std::vector<Parameter*> out;
  for (int i = 0; i < kLevels; ++i) {
    out.push_back(&lateral_w_[static_cast<std::size_t>(i)]);
    out.push_back(&lateral_b_[static_cast<std::size_t>(i)]);
  }
  out.push_back(&proj_w_);
  out.push_back(&proj_b_);
  return out;
}

Var FusionHead::fuse(Tape& tape, std::span<const Var> features, std::span<const Matrix> saliency) {
  if (features.size() != kLevels || saliency.size() != kLevels) {
    throw std::invalid_argument("fuse: expected features and saliency for all 4 levels");
  }
  std::array<Var, kLevels> lateral;
  for (int i = 0; i < kLevels; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    const auto& lv = unet_levels()[idx];
    const Var& f = features[idx];
    if (!f.valid()) throw std::invalid_argument("fuse: missing level " + std::to_string(i + 1));
    const Eigen::Index tokens = static_cast<Eigen::Index>(lv.out_size) * lv.out_size;
    if (f.rows() != tokens || f.cols() != lv.out_channels || saliency[idx].rows() != tokens ||
        saliency[idx].cols() != 1) {
      throw std::invalid_argument("fuse: level " + std::to_string(i + 1) + " has the wrong shape");
    }
    const Var parts[] = {f, tape.constant(saliency[idx])};
    lateral[idx] = affine(concat_cols(parts), tape.param(lateral_w_[idx]), tape.param(lateral_b_[idx]));
  }
  Var top = lateral[kLevels - 1];
  for (int i = kLevels - 2; i >= 0; --i) {
    const auto& upper = unet_levels()[static_cast<std::size_t>(i + 1)];
    const int factor = unet_levels()[static_cast<std::size_t>(i)].out_size / upper.out_size;
    top = add(lateral[static_cast<std::size_t>(i)], upsample_nearest(top, upper.out_size, upper.out_size, factor));
  }
  return affine(mean_rows(top), tape.param(proj_w_), tape.param(proj_b_));
}

Var FusionHead::fuse(Tape& tape, const UNetFeatures& features) {
  std::array<Matrix, kLevels> sal;
  for (int i = 0; i < kLevels; ++i) {
    sal[static_cast<std::size_t>(i)] = attention_saliency(features.attention[static_cast<std::size_t>(i)]);
  }
  return fuse(tape, features.features, sal);
}

}  // namespace kcdp
