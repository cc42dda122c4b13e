#include "kcdp/diffcore.hpp"

#include <cmath>
#include <stdexcept>

namespace kcdp {

namespace {

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

Matrix he_normal(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  return normal_matrix(fan_in, fan_out, std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

Matrix lecun_normal(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  return normal_matrix(fan_in, fan_out, std::sqrt(1.0 / static_cast<double>(fan_in)), rng);
}

}  // namespace

// ---- schedule -------------------------------------------------------------

double NoiseSchedule::alpha_bar_at(int t) const {
  if (t < 1 || t > steps) throw std::out_of_range("timestep out of range");
  return alpha_bar[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_at(int t) const {
  if (t < 1 || t > steps) throw std::out_of_range("timestep out of range");
  return alpha[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("make_schedule: steps must be positive");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("make_schedule: require 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(static_cast<std::size_t>(steps));
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    const auto idx = static_cast<std::size_t>(i);
    s.beta[idx] = beta_start + frac * (beta_end - beta_start);
    s.alpha[idx] = 1.0 - s.beta[idx];
    prod *= s.alpha[idx];
    s.alpha_bar[idx] = prod;
  }
  return s;
}

Matrix add_noise_closed_form(const Matrix& z0, double alpha_bar, const Matrix& eps) {
  if (z0.rows() != eps.rows() || z0.cols() != eps.cols()) throw std::invalid_argument("add_noise: shape mismatch");
  return std::sqrt(alpha_bar) * z0 + std::sqrt(1.0 - alpha_bar) * eps;
}

Matrix add_noise(const Matrix& z0, int t, const Matrix& eps, const NoiseSchedule& schedule) {
  return add_noise_closed_form(z0, schedule.alpha_bar_at(t), eps);
}

// ---- image encoder --------------------------------------------------------

ImageEncoder::ImageEncoder(std::uint64_t seed)
    : w1_("image_encoder.conv1.w", "image_encoder", Matrix()),
      b1_("image_encoder.conv1.b", "image_encoder", Matrix()),
      w2_("image_encoder.conv2.w", "image_encoder", Matrix()),
      b2_("image_encoder.conv2.b", "image_encoder", Matrix()) {
  Rng rng(hash_combine(seed, 0x1E));
  w1_.value = he_normal(9 * 3, kLatentChannels, rng);
  b1_.value = normal_matrix(1, kLatentChannels, 0.1, rng);
  w2_.value = he_normal(9 * kLatentChannels, kLatentChannels, rng);
  b2_.value = normal_matrix(1, kLatentChannels, 0.1, rng);
  for (Parameter* p : parameters()) p->grad = Matrix::Zero(p->value.rows(), p->value.cols());
}

std::vector<Parameter*> ImageEncoder::parameters() { return {&w1_, &b1_, &w2_, &b2_}; }

Latent ImageEncoder::encode(std::span<const float> pixels) const {
  constexpr int size = 32;
  if (pixels.size() != static_cast<std::size_t>(3 * size * size)) {
    throw std::invalid_argument("encode_image: expected a 3x32x32 tensor");
  }
  Matrix x(size * size, 3);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < size * size; ++i) x(i, c) = pixels[static_cast<std::size_t>(c * size * size + i)];
  }
  Tape tape(false);
  auto& self = const_cast<ImageEncoder&>(*this);
  Var h = relu(affine(im2col(tape.constant(std::move(x)), size, size, 3, 2, 1), tape.param(self.w1_), tape.param(self.b1_)));
  Var z = affine(im2col(h, size / 2, size / 2, 3, 2, 1), tape.param(self.w2_), tape.param(self.b2_));
  return Latent{z.value()};
}

// ---- KGCA -----------------------------------------------------------------

std::string_view to_string(FinetuneStrategy s) {
  switch (s) {
    case FinetuneStrategy::kFreeze: return "freeze";
    case FinetuneStrategy::kFinetuneKV: return "finetune_kv";
    case FinetuneStrategy::kLora: return "lora";
    case FinetuneStrategy::kFull: return "full";
  }
  return "lora";
}

FinetuneStrategy strategy_from_string(std::string_view s) {
  if (s == "freeze") return FinetuneStrategy::kFreeze;
  if (s == "finetune_kv") return FinetuneStrategy::kFinetuneKV;
  if (s == "lora") return FinetuneStrategy::kLora;
  if (s == "full") return FinetuneStrategy::kFull;
  throw std::invalid_argument("unknown finetune strategy '" + std::string(s) + "'");
}

KgcaLayer::KgcaLayer(const std::string& prefix, int feature_dim, int context_dim, int heads, int rank, Rng& rng)
    : wq(prefix + ".wq", "kgca.query", lecun_normal(feature_dim, feature_dim, rng)),
      wk(prefix + ".wk", "kgca.key", lecun_normal(context_dim, feature_dim, rng)),
      wv(prefix + ".wv", "kgca.value", lecun_normal(context_dim, feature_dim, rng)),
      wo(prefix + ".wo", "kgca.out", lecun_normal(feature_dim, feature_dim, rng)),
      bo(prefix + ".bo", "kgca.out", Matrix::Zero(1, feature_dim)),
      lora_bk(prefix + ".lora_bk", "kgca.lora", lecun_normal(context_dim, rank, rng)),
      lora_dk(prefix + ".lora_dk", "kgca.lora", Matrix::Zero(rank, feature_dim)),
      lora_bv(prefix + ".lora_bv", "kgca.lora", lecun_normal(context_dim, rank, rng)),
      lora_dv(prefix + ".lora_dv", "kgca.lora", Matrix::Zero(rank, feature_dim)),
      feature_dim_(feature_dim),
      heads_(heads),
      rank_(rank) {
  if (heads < 1 || feature_dim % heads != 0) throw std::invalid_argument("KgcaLayer: feature_dim must divide by heads");
  if (rank < 1) throw std::invalid_argument("KgcaLayer: LoRA rank must be positive");
}

std::vector<Parameter*> KgcaLayer::parameters() {
  return {&wq, &wk, &wv, &wo, &bo, &lora_bk, &lora_dk, &lora_bv, &lora_dv};
}

Var KgcaLayer::key_weight(Tape& tape, bool use_lora) {
  if (!use_lora) return tape.param(wk);
  return tape.memo(this, 0, [&] { return add(tape.param(wk), matmul(tape.param(lora_bk), tape.param(lora_dk))); });
}

Var KgcaLayer::value_weight(Tape& tape, bool use_lora) {
  if (!use_lora) return tape.param(wv);
  return tape.memo(this, 1, [&] { return add(tape.param(wv), matmul(tape.param(lora_bv), tape.param(lora_dv))); });
}

KgcaLayer::Output KgcaLayer::forward(Tape& tape, const Var& phi, const Var& context, bool use_lora) {
  if (phi.cols() != feature_dim_) throw std::invalid_argument("kgca: feature width mismatch");
  if (context.cols() != wk.value.rows()) throw std::invalid_argument("kgca: context width mismatch");
  Var q = matmul(phi, tape.param(wq));
  Var k = matmul(context, key_weight(tape, use_lora));
  Var v = matmul(context, value_weight(tape, use_lora));
  Var attn = attention(q, k, v, heads_);
  Var out = add(phi, affine(attn, tape.param(wo), tape.param(bo)));
  return {out, attn.aux()};
}

// ---- U-Net ----------------------------------------------------------------

const std::array<LevelShape, kLevels>& unet_levels() {
  static const std::array<LevelShape, kLevels> levels = {{
      {kLatentChannels, 16, 1, 8, 8},
      {16, 32, 2, 8, 4},
      {32, 64, 2, 4, 2},
      {64, 64, 2, 2, 1},
  }};
  return levels;
}

RowVector timestep_embedding(int t) {
  RowVector e(kTimeEmbeddingDim);
  const int half = kTimeEmbeddingDim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e(i) = std::sin(t * freq);
    e(half + i) = std::cos(t * freq);
  }
  return e;
}

UNet::UNet(std::uint64_t seed, int lora_rank)
    : noise_w_("unet.noise_head.w", "unet.noise_head", Matrix()),
      noise_b_("unet.noise_head.b", "unet.noise_head", Matrix()) {
  Rng rng(hash_combine(seed, 0x0E7));
  blocks_.reserve(kLevels);
  kgca_.reserve(kLevels);
  for (int i = 0; i < kLevels; ++i) {
    const auto& lv = unet_levels()[static_cast<std::size_t>(i)];
    const std::string p = "unet.level" + std::to_string(i + 1);
    blocks_.push_back(Block{
        Parameter(p + ".conv.w", "unet.conv", he_normal(9 * lv.in_channels, lv.out_channels, rng)),
        Parameter(p + ".conv.b", "unet.conv", Matrix::Zero(1, lv.out_channels)),
        Parameter(p + ".time.w", "unet.time", lecun_normal(kTimeEmbeddingDim, lv.in_channels, rng)),
        Parameter(p + ".time.b", "unet.time", Matrix::Zero(1, lv.in_channels)),
    });
    kgca_.emplace_back("kgca.level" + std::to_string(i + 1), lv.out_channels, 64, 2, lora_rank, rng);
  }
  noise_w_.value = lecun_normal(16, kLatentChannels, rng);
  noise_b_.value = Matrix::Zero(1, kLatentChannels);
  for (Parameter* p : parameters()) p->grad = Matrix::Zero(p->value.rows(), p->value.cols());
}

std::vector<Parameter*> UNet::parameters() {
  std::vector<Parameter*> out;
  for (int i = 0; i < kLevels; ++i) {
    auto& b = blocks_[static_cast<std::size_t>(i)];
    for (Parameter* p : {&b.conv_w, &b.conv_b, &b.time_w, &b.time_b}) out.push_back(p);
    for (Parameter* p : kgca_[static_cast<std::size_t>(i)].parameters()) out.push_back(p);
  }
  out.push_back(&noise_w_);
  out.push_back(&noise_b_);
  return out;
}

UNetFeatures UNet::forward(Tape& tape, const Var& latent, int t, const Var& knowledge, bool use_lora) {
  if (latent.rows() != kLatentSize * kLatentSize || latent.cols() != kLatentChannels) {
    throw std::invalid_argument("unet: latent must be 8x8x8");
  }
  UNetFeatures out;
  Var x = latent;
  // Time embeddings are shared by every sample on the tape with the same t.
  const Var temb_raw = tape.memo(this, t, [&] { return tape.constant(timestep_embedding(t)); });
  for (int i = 0; i < kLevels; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    const auto& lv = unet_levels()[idx];
    auto& b = blocks_[idx];
    Var temb = tape.memo(&b, t, [&] { return affine(temb_raw, tape.param(b.time_w), tape.param(b.time_b)); });
    Var cols = im2col(add_row(x, temb), lv.in_size, lv.in_size, 3, lv.stride, 1);
    Var h = relu(affine(cols, tape.param(b.conv_w), tape.param(b.conv_b)));
    auto res = kgca_[idx].forward(tape, h, knowledge, use_lora);
    out.features[idx] = res.features;
    out.attention[idx] = std::move(res.attention);
    x = res.features;
  }
  return out;
}

Var UNet::predict_noise(Tape& tape, const UNetFeatures& features) {
  return affine(features.features[0], tape.param(noise_w_), tape.param(noise_b_));
}

Var ldm_loss(Tape& tape, std::span<const Matrix> z0, std::span<const Matrix> k, const NoiseSchedule& schedule,
             Rng& rng, const NoisePredictor& predictor) {
  if (z0.empty() || z0.size() != k.size()) throw std::invalid_argument("ldm_loss: batch size mismatch");
  Var total = tape.constant(Matrix::Zero(1, 1));
  double elements = 0.0;
  for (std::size_t i = 0; i < z0.size(); ++i) {
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.steps)));
    Matrix eps(z0[i].rows(), z0[i].cols());
    for (Eigen::Index j = 0; j < eps.size(); ++j) eps.data()[j] = rng.normal();
    const Matrix zt = add_noise(z0[i], t, eps, schedule);
    Var pred = predictor(tape, i, zt, t, k[i]);
    Var diff = sub(tape.constant(eps), pred);
    total = add(total, sum_all(hadamard(diff, diff)));
    elements += static_cast<double>(eps.size());
  }
  return scale(total, 1.0 / elements);
}

}  // namespace kcdp
