#pragma once

// Latent image encoder, DDPM noise schedule and the four-level denoising
// U-Net whose levels are conditioned on knowledge through cross-attention
// (KGCA) with LoRA-adapted key/value projections.

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kcdp/autograd.hpp"
#include "kcdp/rng.hpp"

namespace kcdp {

inline constexpr int kLatentChannels = 8;
inline constexpr int kLatentSize = 8;
inline constexpr int kLevels = 4;
inline constexpr int kTimeEmbeddingDim = 16;

// ---- schedule -------------------------------------------------------------

struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;       // index t-1 for step t
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  /// ᾱ_t for 1 <= t <= steps.
  double alpha_bar_at(int t) const;
  double alpha_at(int t) const;
};

/// β linearly spaced in [beta_start, beta_end], α = 1 - β, ᾱ = cumulative product.
NoiseSchedule make_schedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

/// z_t = sqrt(ᾱ)·z0 + sqrt(1-ᾱ)·ε.
Matrix add_noise_closed_form(const Matrix& z0, double alpha_bar, const Matrix& eps);
Matrix add_noise(const Matrix& z0, int t, const Matrix& eps, const NoiseSchedule& schedule);

// ---- latent encoder -------------------------------------------------------

/// Latent in token layout: (8·8) rows × 8 channels; row = y·8 + x.
struct Latent {
  Matrix z;
};

/// Frozen two-layer strided convolutional encoder, 3×32×32 -> 8×8×8.
class ImageEncoder {
 public:
  explicit ImageEncoder(std::uint64_t seed);

  /// Expects channel-major (C, H, W) pixels.
  Latent encode(std::span<const float> pixels) const;

  std::vector<Parameter*> parameters();

 private:
  Parameter w1_, b1_, w2_, b2_;
};

// ---- KGCA -----------------------------------------------------------------

enum class FinetuneStrategy { kFreeze, kFinetuneKV, kLora, kFull };

std::string_view to_string(FinetuneStrategy s);
FinetuneStrategy strategy_from_string(std::string_view s);

/// Cross-attention from level features (queries) to the knowledge sequence
/// (keys/values). Output projection and residual: Φ* = Φ + Attn·W_O + b_O.
class KgcaLayer {
 public:
  KgcaLayer(const std::string& prefix, int feature_dim, int context_dim, int heads, int rank, Rng& rng);

  struct Output {
    Var features;      // Φ*
    Matrix attention;  // head-averaged softmax map, tokens × context rows
  };

  Output forward(Tape& tape, const Var& phi, const Var& context, bool use_lora);

  /// Effective key/value projections W + B·D (memoized per tape when LoRA is on).
  Var key_weight(Tape& tape, bool use_lora);
  Var value_weight(Tape& tape, bool use_lora);

  int heads() const { return heads_; }
  int rank() const { return rank_; }
  int feature_dim() const { return feature_dim_; }

  Parameter wq, wk, wv, wo, bo;
  Parameter lora_bk, lora_dk, lora_bv, lora_dv;

  std::vector<Parameter*> parameters();

 private:
  int feature_dim_;
  int heads_;
  int rank_;
};

// ---- U-Net ----------------------------------------------------------------

struct LevelShape {
  int in_channels;
  int out_channels;
  int stride;
  int in_size;
  int out_size;
};

const std::array<LevelShape, kLevels>& unet_levels();

/// Per-level features F_i (token layout, H_i·W_i × C_i) and attention maps A_i.
struct UNetFeatures {
  std::array<Var, kLevels> features;
  std::array<Matrix, kLevels> attention;
};

RowVector timestep_embedding(int t);

class UNet {
 public:
  UNet(std::uint64_t seed, int lora_rank);

  UNetFeatures forward(Tape& tape, const Var& latent, int t, const Var& knowledge, bool use_lora);
  /// ε prediction: 1×1 convolution from level-1 features to latent channels.
  Var predict_noise(Tape& tape, const UNetFeatures& features);

  std::vector<KgcaLayer>& kgca() { return kgca_; }
  std::vector<Parameter*> parameters();

 private:
  struct Block {
    Parameter conv_w, conv_b, time_w, time_b;
  };
  std::vector<Block> blocks_;
  std::vector<KgcaLayer> kgca_;
  Parameter noise_w_, noise_b_;
};

/// Noise predictor used by ldm_loss: (tape, sample index, z_t, t, k) -> ε̂.
using NoisePredictor = std::function<Var(Tape&, std::size_t, const Matrix&, int, const Matrix&)>;

/// Mean over samples and elements of (ε - ε̂(z_t, t, k))², with t uniform in
/// [1, T] and ε standard normal drawn from `rng`.
Var ldm_loss(Tape& tape, std::span<const Matrix> z0, std::span<const Matrix> k, const NoiseSchedule& schedule,
             Rng& rng, const NoisePredictor& predictor);

}  // namespace kcdp
