#include "kcdp/trainkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "kcdp/io_util.hpp"
#include "kcdp/rng.hpp"

namespace kcdp {

namespace {

// Runs fn(i, tape) for i in [0, n); each worker owns a no-grad tape that is
// cleared between samples.
template <typename F>
void parallel_samples(std::size_t n, int threads, F&& fn) {
  auto work = [&](std::size_t begin, std::size_t end) {
    Tape tape(false);
    for (std::size_t i = begin; i < end; ++i) {
      fn(i, tape);
      tape.clear();
    }
  };
  const auto t = static_cast<std::size_t>(std::max(1, threads));
  if (t == 1 || n < 2 * t) {
    work(0, n);
    return;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (n + t - 1) / t;
  for (std::size_t b = 0; b < n; b += chunk) pool.emplace_back(work, b, std::min(n, b + chunk));
}

int argmax_row(const Matrix& row) {
  return argmax_lowest(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
}

const NoiseSchedule& default_schedule() {
  static const NoiseSchedule s = make_schedule();
  return s;
}

// Latent fed to the U-Net. With feature_timestep > 0 training draws noise
// from `rng`; inference (rng == nullptr) uses ε = 0.
Matrix feature_latent(const Model& model, const Matrix& z0, Rng* rng) {
  const int t = model.config().feature_timestep;
  if (t == 0) return z0;
  Matrix eps = Matrix::Zero(z0.rows(), z0.cols());
  if (rng != nullptr) {
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng->normal();
  }
  return add_noise(z0, t, eps, default_schedule());
}

ForwardResult run(Model& model, Tape& tape, const SplitCache& cache, std::size_t i, Rng* rng) {
  return model.forward(tape, feature_latent(model, cache.latents[i], rng), model.knowledge(tape, cache, i),
                       model.config().feature_timestep);
}

std::string fixed(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.8f", x);
  return buf;
}

}  // namespace

// ---- losses ---------------------------------------------------------------

Var ce_loss(const Var& logits, std::span<const int> labels) { return cross_entropy(logits, labels); }

double ce_loss(const Matrix& logits, std::span<const int> labels) {
  Tape tape(false);
  return cross_entropy(tape.constant(logits), labels).scalar();
}

double total_loss(double l_s, double l_t, double l_ccl, double lambda1, double lambda2) {
  return lambda1 * l_s + lambda2 * l_t + l_ccl;
}

// ---- optimizer ------------------------------------------------------------

AdamW::AdamW(std::vector<Parameter*> params, double lr, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  for (Parameter* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamW::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * p.grad;
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * p.grad.cwiseAbs2();
    p.value *= 1.0 - lr_ * wd_;
    p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

// ---- metrics --------------------------------------------------------------

Metrics compute_metrics(std::span<const int> predictions, std::span<const int> labels, int num_classes) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("metrics: size mismatch");
  if (labels.empty()) throw std::invalid_argument("metrics: empty split");
  Metrics m;
  m.n = labels.size();
  m.support.assign(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::size_t> hits(static_cast<std::size_t>(num_classes), 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes) throw std::invalid_argument("metrics: label out of range");
    ++m.support[static_cast<std::size_t>(y)];
    if (predictions[i] == y) {
      ++hits[static_cast<std::size_t>(y)];
      ++correct;
    }
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.n);
  for (int c = 0; c < num_classes; ++c) {
    const auto s = m.support[static_cast<std::size_t>(c)];
    m.per_class_accuracy.push_back(s == 0 ? std::numeric_limits<double>::quiet_NaN()
                                          : static_cast<double>(hits[static_cast<std::size_t>(c)]) / static_cast<double>(s));
  }
  return m;
}

// ---- inference ------------------------------------------------------------

std::vector<Matrix> predict_logits(Model& model, const SplitCache& cache, int threads) {
  std::vector<Matrix> out(cache.size());
  parallel_samples(cache.size(), threads, [&](std::size_t i, Tape& tape) {
    out[i] = run(model, tape, cache, i, nullptr).logits.value();
  });
  return out;
}

std::vector<int> predict(Model& model, const SplitCache& cache, int threads) {
  std::vector<int> out;
  for (const auto& l : predict_logits(model, cache, threads)) out.push_back(argmax_row(l));
  return out;
}

std::vector<PseudoLabel> pseudo_labels(Model& model, const SplitCache& cache, int threads) {
  std::vector<PseudoLabel> out(cache.size());
  parallel_samples(cache.size(), threads, [&](std::size_t i, Tape& tape) {
    const ForwardResult r = run(model, tape, cache, i, nullptr);
    out[i] = pseudo_label(tape, model.alignment(), r.v, r.k);
  });
  return out;
}

std::vector<RowVector> visual_embeddings(Model& model, const SplitCache& cache, int threads) {
  std::vector<RowVector> out(cache.size());
  parallel_samples(cache.size(), threads, [&](std::size_t i, Tape& tape) {
    const ForwardResult r = run(model, tape, cache, i, nullptr);
    out[i] = model.alignment().map_visual(tape, r.v).value().row(0);
  });
  return out;
}

Metrics evaluate(Model& model, const SplitCache& cache, int threads) {
  if (!cache.labeled()) throw std::invalid_argument("evaluate: split is unlabeled");
  const auto preds = predict(model, cache, threads);
  return compute_metrics(preds, cache.labels, model.num_classes());
}

double tie_positive_fraction(Model& model, const SplitCache& cache, int threads) {
  if (!cache.labeled()) throw std::invalid_argument("tie: split is unlabeled");
  const auto pl = pseudo_labels(model, cache, threads);
  std::size_t positive = 0;
  for (std::size_t i = 0; i < pl.size(); ++i) {
    const auto& s = pl[i].scores.scores;
    const auto y = static_cast<std::size_t>(cache.labels[i]);
    double others = 0.0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (j != y) others += s[j];
    }
    others /= static_cast<double>(s.size() - 1);
    if (s[y] - others > 0.0) ++positive;
  }
  return static_cast<double>(positive) / static_cast<double>(pl.size());
}

// ---- pretraining ----------------------------------------------------------

std::vector<double> pretrain_ldm(Model& model, std::span<const SplitCache* const> caches, int steps, int batch_size,
                                 double lr, std::uint64_t seed) {
  if (steps <= 0) return {};
  std::vector<std::pair<const SplitCache*, std::size_t>> pool;
  for (const SplitCache* c : caches) {
    if (c == nullptr) continue;
    for (std::size_t i = 0; i < c->size(); ++i) pool.emplace_back(c, i);
  }
  if (pool.empty()) throw std::invalid_argument("pretrain_ldm: no latents");
  std::vector<std::pair<Parameter*, bool>> saved;
  for (Parameter* p : model.parameters()) saved.emplace_back(p, p->trainable);
  for (Parameter* p : model.parameters()) p->trainable = false;
  std::vector<Parameter*> unet;
  for (Parameter* p : model.unet().parameters()) {
    if (p->group == "kgca.lora") continue;
    p->trainable = true;
    unet.push_back(p);
  }
  AdamW opt(unet, lr, 0.0);
  Rng rng(hash_combine(seed, 0x1D3));
  const NoiseSchedule& schedule = default_schedule();
  std::vector<double> losses;
  for (int s = 0; s < steps; ++s) {
    std::vector<Matrix> z0, k;
    for (int b = 0; b < batch_size; ++b) {
      const auto& [c, i] = pool[rng.below(pool.size())];
      z0.push_back(c->latents[i]);
      k.push_back(c->knowledge[i]);
    }
    Tape tape;
    Var loss = ldm_loss(tape, z0, k, schedule, rng,
                        [&](Tape& tp, std::size_t, const Matrix& zt, int t, const Matrix& kk) {
                          auto f = model.unet().forward(tp, tp.constant(zt), t, tp.constant(kk), model.use_lora());
                          return model.unet().predict_noise(tp, f);
                        });
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
    losses.push_back(loss.scalar());
  }
  for (auto& [p, t] : saved) p->trainable = t;
  for (Parameter* p : model.parameters()) p->zero_grad();
  return losses;
}

// ---- training -------------------------------------------------------------

TrainResult train(Model& model, const TrainData& data, const EpochHook& on_epoch) {
  const TrainConfig& cfg = model.config();
  const bool da = cfg.setting == Setting::kDA;
  if (data.source_train == nullptr || data.source_train->size() == 0) throw std::invalid_argument("train: empty source split");
  if (!data.source_train->labeled()) throw std::invalid_argument("train: source split must be labeled");
  if (da && (data.target_train == nullptr || data.target_train->size() == 0)) {
    throw std::invalid_argument("train: empty target split");
  }
  if (data.source_test == nullptr || data.target_test == nullptr || data.source_test->size() == 0 ||
      data.target_test->size() == 0) {
    throw std::invalid_argument("train: empty test split");
  }

  TrainResult result;
  if (cfg.pretrain_ldm_steps > 0) {
    const SplitCache* caches[] = {data.source_train, da ? data.target_train : nullptr};
    result.ldm_losses = pretrain_ldm(model, caches, cfg.pretrain_ldm_steps, cfg.batch_size, cfg.lr, cfg.seed);
  }

  AdamW opt(model.trainable_parameters(), cfg.lr, cfg.weight_decay);
  // Separate streams keep source ordering independent of target-side work.
  Rng src_rng(hash_combine(cfg.seed, 0x5C));
  Rng tgt_rng(hash_combine(cfg.seed, 0x7A));
  Rng noise_rng(hash_combine(cfg.seed, 0x9E));

  const SplitCache& src = *data.source_train;
  std::vector<std::size_t> src_order(src.size());
  std::iota(src_order.begin(), src_order.end(), 0);
  std::vector<std::size_t> tgt_order;
  std::size_t tgt_pos = 0;
  if (da) {
    tgt_order.resize(data.target_train->size());
    std::iota(tgt_order.begin(), tgt_order.end(), 0);
    tgt_pos = tgt_order.size();
  }
  std::vector<int> pseudo;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const bool warm = epoch <= cfg.warmup_epochs;
    const bool use_target = da && !warm && cfg.lambda2 > 0.0;
    if (use_target) {
      pseudo.clear();
      for (const auto& p : pseudo_labels(model, *data.target_train, cfg.threads)) pseudo.push_back(p.label);
    }
    src_rng.shuffle(src_order.begin(), src_order.end());
    const std::size_t per = static_cast<std::size_t>(warm ? cfg.batch_size : cfg.batch_size / 2);

    EpochMetrics em;
    em.epoch = epoch;
    std::size_t nsteps = 0;
    for (std::size_t start = 0; start < src.size(); start += per) {
      const std::size_t end = std::min(src.size(), start + per);
      Tape tape;
      std::vector<Var> logits, scores;
      std::vector<int> ys;
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = src_order[b];
        const ForwardResult r = run(model, tape, src, i, &noise_rng);
        logits.push_back(r.logits);
        ys.push_back(src.labels[i]);
        if (cfg.ccl_weight > 0.0) scores.push_back(model.alignment().scores(tape, r.v, r.k));
      }
      Var ls = ce_loss(concat_rows(logits), ys);
      Var loss = scale(ls, cfg.lambda1);
      StepRecord rec;
      rec.epoch = epoch;
      rec.l_s = ls.scalar();
      if (use_target) {
        std::vector<Var> tlogits;
        std::vector<int> tys;
        for (std::size_t b = 0; b < per; ++b) {
          if (tgt_pos == tgt_order.size()) {
            tgt_rng.shuffle(tgt_order.begin(), tgt_order.end());
            tgt_pos = 0;
          }
          const std::size_t j = tgt_order[tgt_pos++];
          tlogits.push_back(run(model, tape, *data.target_train, j, &noise_rng).logits);
          tys.push_back(pseudo[j]);
        }
        Var lt = ce_loss(concat_rows(tlogits), tys);
        rec.l_t = lt.scalar();
        loss = add(loss, scale(lt, cfg.lambda2));
      }
      if (cfg.ccl_weight > 0.0) {
        Var lc = ccl_loss(scores, ys, cfg.tau, cfg.ccl_include_positive);
        rec.l_ccl = lc.scalar();
        loss = add(loss, scale(lc, cfg.ccl_weight));
      }
      rec.l_total = loss.scalar();
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      result.steps.push_back(rec);
      em.l_s += rec.l_s;
      em.l_t += rec.l_t;
      em.l_ccl += rec.l_ccl;
      em.l_total += rec.l_total;
      ++nsteps;
    }
    const double n = static_cast<double>(nsteps);
    em.l_s /= n;
    em.l_t /= n;
    em.l_ccl /= n;
    em.l_total /= n;
    em.acc_source = evaluate(model, *data.source_test, cfg.threads).accuracy;
    em.acc_target = evaluate(model, *data.target_test, cfg.threads).accuracy;
    std::vector<int> pl;
    for (const auto& p : pseudo_labels(model, *data.target_test, cfg.threads)) pl.push_back(p.label);
    em.pseudo_agreement = compute_metrics(pl, data.target_test->labels, model.num_classes()).accuracy;
    result.history.push_back(em);
    if (on_epoch) on_epoch(em, model);
  }
  return result;
}

// ---- files ----------------------------------------------------------------

std::string metrics_csv(std::span<const EpochMetrics> history) {
  std::ostringstream out;
  out << "epoch,L_s,L_t,L_ccl,L_total,acc_source,acc_target,pseudo_agreement\n";
  for (const auto& m : history) {
    out << m.epoch << ',' << fixed(m.l_s) << ',' << fixed(m.l_t) << ',' << fixed(m.l_ccl) << ',' << fixed(m.l_total)
        << ',' << fixed(m.acc_source) << ',' << fixed(m.acc_target) << ',' << fixed(m.pseudo_agreement) << '\n';
  }
  return out.str();
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochMetrics> history) {
  io::atomic_write(path, metrics_csv(history));
}

void export_embeddings(Model& model, const SplitCache& cache, const std::filesystem::path& path, int threads) {
  const auto emb = visual_embeddings(model, cache, threads);
  std::ostringstream out;
  for (std::size_t i = 0; i < cache.size(); ++i) {
    nlohmann::json rec = {{"id", cache.ids[i]}, {"domain", to_string(cache.domains[i])}};
    if (cache.labels[i] >= 0) rec["label"] = cache.labels[i];
    rec["v_prime"] = std::vector<double>(emb[i].data(), emb[i].data() + emb[i].size());
    out << rec.dump() << '\n';
  }
  io::atomic_write(path, out.str());
}

void export_pseudo_labels(Model& model, const SplitCache& cache, const std::filesystem::path& path, int threads) {
  const auto pl = pseudo_labels(model, cache, threads);
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t i = 0; i < cache.size(); ++i) {
    arr.push_back({{"id", cache.ids[i]}, {"label", pl[i].label}, {"scores", pl[i].scores.scores}});
  }
  io::atomic_write(path, arr.dump(1));
}

}  // namespace kcdp
