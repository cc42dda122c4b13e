#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "gradcheck.hpp"
#include "kcdp/diffcore.hpp"
#include "kcdp/io_util.hpp"
#include "kcdp/synthcorpus.hpp"
#include "kcdp/textkb.hpp"
#include "kcdp/trainkit.hpp"

using namespace kcdp;
using kcdp::testing::grad_check;
using kcdp::testing::random_matrix;

namespace {

void perturb_lora(UNet& unet, Rng& rng) {
  for (auto& layer : unet.kgca()) {
    layer.lora_dk.value = random_matrix(layer.lora_dk.value.rows(), layer.lora_dk.value.cols(), rng, 0.3);
    layer.lora_dv.value = random_matrix(layer.lora_dv.value.rows(), layer.lora_dv.value.cols(), rng, 0.3);
  }
}

}  // namespace

TEST_SUITE("diffcore") {

TEST_CASE("schedule examples") {
  const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  CHECK(s.alpha_at(1) == doctest::Approx(0.9999).epsilon(1e-12));
  CHECK(s.alpha_at(1000) == doctest::Approx(0.98).epsilon(1e-12));
  CHECK(s.alpha_bar_at(1000) < s.alpha_bar_at(1));
  for (int t = 2; t <= 1000; ++t) {
    CHECK(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
    CHECK(s.alpha_at(t) > 0.0);
    CHECK(s.alpha_at(t) < 1.0);
  }
  const NoiseSchedule one = make_schedule(1, 0.3, 0.3);
  CHECK(one.alpha_bar_at(1) == one.alpha_at(1));
}

TEST_CASE("schedule errors") {
  CHECK_THROWS(make_schedule(10, 0.0, 0.02));
  CHECK_THROWS(make_schedule(10, 0.03, 0.02));
  CHECK_THROWS(make_schedule(10, 1e-4, 1.0));
  CHECK_THROWS(make_schedule(0));
  const NoiseSchedule s = make_schedule(10);
  const Matrix z = Matrix::Zero(1, 1);
  CHECK_THROWS_AS(add_noise(z, 0, z, s), std::out_of_range);
  CHECK_THROWS_AS(add_noise(z, 11, z, s), std::out_of_range);
  CHECK_THROWS(add_noise(z, 1, Matrix::Zero(1, 2), s));
}

TEST_CASE("add_noise closed form") {
  const Matrix z0 = Matrix::Constant(1, 1, 2.0);
  const Matrix eps = Matrix::Constant(1, 1, 1.0);
  CHECK(add_noise_closed_form(z0, 0.25, eps)(0, 0) == doctest::Approx(0.5 * 2.0 + std::sqrt(0.75)).epsilon(1e-12));
  CHECK(add_noise_closed_form(z0, 1.0, eps) == z0);
}

TEST_CASE("add_noise marginal std over draws") {
  const NoiseSchedule s = make_schedule();
  Rng rng(17);
  const int n = 10000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const Matrix eps = Matrix::Constant(1, 1, rng.normal());
    const double z = add_noise(Matrix::Zero(1, 1), 300, eps, s)(0, 0);
    sum += z;
    sq += z * z;
  }
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);
  CHECK(std::abs(sd / std::sqrt(1.0 - s.alpha_bar_at(300)) - 1.0) < 0.02);
}

TEST_CASE("image encoder shape, determinism and golden zero image") {
  const ImageEncoder enc(0);
  const ImageTensor zero(kImageElements, 0.0F);
  const Latent a = enc.encode(zero);
  CHECK(a.z.rows() == kLatentSize * kLatentSize);
  CHECK(a.z.cols() == kLatentChannels);
  CHECK(enc.encode(zero).z == a.z);
  const ImageTensor img = render_image(EmotionLabel::from_index(3), Domain::kTarget, 0.8, 5);
  CHECK(enc.encode(img).z == enc.encode(img).z);
  CHECK_THROWS(enc.encode(ImageTensor(10, 0.0F)));

  const std::filesystem::path golden = KCDP_GOLDEN_DIR "/zero_image_latent.json";
  if (!std::filesystem::exists(golden)) {
    nlohmann::json j = nlohmann::json::array();
    for (Eigen::Index r = 0; r < a.z.rows(); ++r) {
      std::vector<double> row(a.z.row(r).data(), a.z.row(r).data() + a.z.cols());
      j.push_back(row);
    }
    io::atomic_write(golden, j.dump() + "\n");
    MESSAGE("recorded " << golden.string());
  }
  const auto j = nlohmann::json::parse(io::read_file(golden));
  REQUIRE(j.size() == static_cast<std::size_t>(a.z.rows()));
  for (Eigen::Index r = 0; r < a.z.rows(); ++r) {
    for (Eigen::Index c = 0; c < a.z.cols(); ++c) CHECK(j[r][c].get<double>() == a.z(r, c));
  }
}

TEST_CASE("kgca hand example") {
  Rng rng(0);
  KgcaLayer layer("t", 2, 2, 1, 1, rng);
  for (Parameter* p : {&layer.wq, &layer.wk, &layer.wv, &layer.wo}) p->value = Matrix::Identity(2, 2);
  layer.bo.value.setZero();
  Tape tape(false);
  Matrix phi(1, 2), ctx(1, 2);
  phi << 1, 0;
  ctx << 0, 1;
  const auto out = layer.forward(tape, tape.constant(phi), tape.constant(ctx), false);
  CHECK(out.features.value()(0, 0) == 1.0);
  CHECK(out.features.value()(0, 1) == 1.0);
  CHECK(out.attention(0, 0) == 1.0);
}

TEST_CASE("kgca against a brute-force attention oracle") {
  Rng rng(2);
  KgcaLayer layer("t", 4, 3, 2, 2, rng);
  layer.lora_dk.value = random_matrix(2, 4, rng);
  layer.lora_dv.value = random_matrix(2, 4, rng);
  layer.bo.value = random_matrix(1, 4, rng);
  const Matrix phi = random_matrix(5, 4, rng);
  const Matrix ctx = random_matrix(6, 3, rng);
  Tape tape(false);
  const auto out = layer.forward(tape, tape.constant(phi), tape.constant(ctx), true);

  const Matrix q = phi * layer.wq.value;
  const Matrix k = ctx * (layer.wk.value + layer.lora_bk.value * layer.lora_dk.value);
  const Matrix v = ctx * (layer.wv.value + layer.lora_bv.value * layer.lora_dv.value);
  Matrix attn = Matrix::Zero(5, 4);
  Matrix avg = Matrix::Zero(5, 6);
  for (int h = 0; h < 2; ++h) {
    for (int i = 0; i < 5; ++i) {
      std::vector<double> s(6);
      double mx = -1e300, z = 0.0;
      for (int j = 0; j < 6; ++j) {
        s[j] = (q.block(i, 2 * h, 1, 2) * k.block(j, 2 * h, 1, 2).transpose())(0, 0) / std::sqrt(2.0);
        mx = std::max(mx, s[j]);
      }
      for (double& x : s) z += (x = std::exp(x - mx));
      for (int j = 0; j < 6; ++j) {
        attn.block(i, 2 * h, 1, 2) += (s[j] / z) * v.block(j, 2 * h, 1, 2);
        avg(i, j) += 0.5 * s[j] / z;
      }
    }
  }
  Matrix expect = phi + attn * layer.wo.value;
  expect.rowwise() += RowVector(layer.bo.value.row(0));
  CHECK((out.features.value() - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((out.attention - avg).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("kgca at D = 0 equals the unadapted layer bit for bit") {
  Rng rng(4);
  KgcaLayer layer("t", 16, 64, 2, 4, rng);
  const Matrix phi = random_matrix(64, 16, rng);
  const Matrix ctx = random_matrix(17, 64, rng);
  Tape t1(false), t2(false);
  const auto a = layer.forward(t1, t1.constant(phi), t1.constant(ctx), true);
  const auto b = layer.forward(t2, t2.constant(phi), t2.constant(ctx), false);
  CHECK(a.features.value() == b.features.value());
  CHECK(a.attention == b.attention);
}

TEST_CASE("zero value path leaves phi unchanged") {
  Rng rng(5);
  KgcaLayer layer("t", 8, 4, 2, 2, rng);
  layer.wv.value.setZero();
  const Matrix phi = random_matrix(3, 8, rng);
  Tape tape(false);
  const auto out = layer.forward(tape, tape.constant(phi), tape.constant(random_matrix(5, 4, rng)), true);
  CHECK(out.features.value() == phi);
}

TEST_CASE("kgca shape errors") {
  Rng rng(6);
  KgcaLayer layer("t", 8, 4, 2, 2, rng);
  Tape tape(false);
  CHECK_THROWS(layer.forward(tape, tape.constant(Matrix::Zero(3, 7)), tape.constant(Matrix::Zero(5, 4)), true));
  CHECK_THROWS(layer.forward(tape, tape.constant(Matrix::Zero(3, 8)), tape.constant(Matrix::Zero(5, 5)), true));
  CHECK_THROWS(KgcaLayer("t", 7, 4, 2, 2, rng));
}

TEST_CASE("unet feature and attention shapes") {
  UNet unet(0, 4);
  Rng rng(1);
  Tape tape(false);
  const auto f = unet.forward(tape, tape.constant(random_matrix(64, 8, rng)), 0,
                              tape.constant(random_matrix(kKnowledgeRows, kTextDim, rng)), true);
  const int tokens[] = {64, 16, 4, 1};
  const int channels[] = {16, 32, 64, 64};
  for (int i = 0; i < kLevels; ++i) {
    CHECK(f.features[i].rows() == tokens[i]);
    CHECK(f.features[i].cols() == channels[i]);
    CHECK(f.attention[i].rows() == tokens[i]);
    CHECK(f.attention[i].cols() == kKnowledgeRows);
    for (Eigen::Index r = 0; r < f.attention[i].rows(); ++r) {
      CHECK(std::abs(f.attention[i].row(r).sum() - 1.0) <= 1e-6);
    }
  }
  CHECK_THROWS(unet.forward(tape, tape.constant(Matrix::Zero(16, 8)), 0, tape.constant(Matrix::Zero(17, 64)), true));
}

TEST_CASE("timestep changes the features") {
  UNet unet(0, 4);
  Rng rng(1);
  const Matrix z = random_matrix(64, 8, rng);
  const Matrix k = random_matrix(kKnowledgeRows, kTextDim, rng);
  Tape tape(false);
  const Matrix a = unet.forward(tape, tape.constant(z), 0, tape.constant(k), true).features[3].value();
  const Matrix b = unet.forward(tape, tape.constant(z), 500, tape.constant(k), true).features[3].value();
  CHECK(a != b);
  CHECK(timestep_embedding(0)(0) == 0.0);
  CHECK(timestep_embedding(0)(kTimeEmbeddingDim / 2) == 1.0);
}

TEST_CASE("gradient check through the KGCA / LoRA path") {
  UNet unet(3, 4);
  Rng rng(8);
  perturb_lora(unet, rng);
  const Matrix z = random_matrix(64, 8, rng);
  const Matrix k = random_matrix(kKnowledgeRows, kTextDim, rng);
  const Matrix w = random_matrix(1, 64, rng);
  std::vector<Parameter*> lora;
  for (auto& layer : unet.kgca()) {
    for (Parameter* p : {&layer.lora_bk, &layer.lora_dk, &layer.lora_bv, &layer.lora_dv}) lora.push_back(p);
  }
  auto build = [&](Tape& tape) {
    const auto f = unet.forward(tape, tape.constant(z), 0, tape.constant(k), true);
    return sum_all(hadamard(f.features[3], tape.constant(w)));
  };
  CHECK(grad_check(lora, build, 10, 21).max_rel_error <= 1e-5);
}

TEST_CASE("ldm_loss oracles") {
  const NoiseSchedule s = make_schedule();
  const std::vector<Matrix> z0(200, Matrix::Zero(64, 8));
  const std::vector<Matrix> k(200, Matrix::Zero(kKnowledgeRows, kTextDim));
  SUBCASE("perfect prediction gives zero loss") {
    Rng rng(1);
    Tape tape(false);
    // With z0 = 0 the noise is recoverable from z_t.
    auto oracle = [&](Tape& t, std::size_t, const Matrix& zt, int step, const Matrix&) {
      return t.constant(zt / std::sqrt(1.0 - s.alpha_bar_at(step)));
    };
    CHECK(ldm_loss(tape, z0, k, s, rng, oracle).scalar() < 1e-20);
  }
  SUBCASE("zero prediction estimates E[eps^2] = 1") {
    Rng rng(2);
    Tape tape(false);
    auto zero = [](Tape& t, std::size_t, const Matrix& zt, int, const Matrix&) {
      return t.constant(Matrix::Zero(zt.rows(), zt.cols()));
    };
    const double loss = ldm_loss(tape, z0, k, s, rng, zero).scalar();
    CHECK(std::abs(loss - 1.0) < 0.05);
  }
  SUBCASE("loss is non-negative for the real predictor") {
    UNet unet(0, 4);
    Rng rng(3);
    Tape tape(false);
    auto pred = [&](Tape& t, std::size_t, const Matrix& zt, int step, const Matrix& kk) {
      return unet.predict_noise(t, unet.forward(t, t.constant(zt), step, t.constant(kk), false));
    };
    const std::span<const Matrix> zs(z0.data(), 4), ks(k.data(), 4);
    CHECK(ldm_loss(tape, zs, ks, s, rng, pred).scalar() >= 0.0);
  }
  SUBCASE("empty batch is an error") {
    Rng rng(4);
    Tape tape(false);
    CHECK_THROWS(ldm_loss(tape, {}, {}, s, rng, {}));
  }
}

TEST_CASE("LoRA update rank stays at most r during training") {
  Rng rng(9);
  KgcaLayer layer("t", 16, 64, 2, 4, rng);
  for (Parameter* p : {&layer.lora_bk, &layer.lora_dk, &layer.lora_bv, &layer.lora_dv}) p->trainable = true;
  AdamW opt({&layer.lora_bk, &layer.lora_dk, &layer.lora_bv, &layer.lora_dv}, 1e-2, 0.01);
  const Matrix phi = random_matrix(64, 16, rng);
  const Matrix ctx = random_matrix(17, 64, rng);
  const Matrix target = random_matrix(64, 16, rng);
  for (int step = 0; step < 20; ++step) {
    opt.zero_grad();
    Tape tape;
    Var d = sub(layer.forward(tape, tape.constant(phi), tape.constant(ctx), true).features, tape.constant(target));
    tape.backward(sum_all(hadamard(d, d)));
    opt.step();
    for (auto [b, dd] : {std::pair{&layer.lora_bk, &layer.lora_dk}, std::pair{&layer.lora_bv, &layer.lora_dv}}) {
      const Matrix delta = b->value * dd->value;
      Eigen::JacobiSVD<Matrix> svd(delta);
      const auto sv = svd.singularValues();
      CHECK((sv.array() > 1e-8).count() <= 4);
    }
  }
  CHECK_FALSE((layer.lora_dk.value.isZero()));
}

TEST_CASE("strategy strings round-trip") {
  for (auto s : {FinetuneStrategy::kFreeze, FinetuneStrategy::kFinetuneKV, FinetuneStrategy::kLora, FinetuneStrategy::kFull}) {
    CHECK(strategy_from_string(to_string(s)) == s);
  }
  CHECK_THROWS(strategy_from_string("partial"));
}

}
