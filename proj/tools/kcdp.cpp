#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kcdp/checkpoint.hpp"
#include "kcdp/io_util.hpp"
#include "kcdp/model.hpp"
#include "kcdp/synthcorpus.hpp"
#include "kcdp/textkb.hpp"
#include "kcdp/trainkit.hpp"

using namespace kcdp;

namespace {

void print_metrics(const Metrics& m, const std::vector<std::string>& labels) {
  nlohmann::json j;
  j["n"] = m.n;
  j["accuracy"] = m.accuracy;
  for (std::size_t c = 0; c < labels.size(); ++c) {
    const double a = m.per_class_accuracy[c];
    j["per_class"][labels[c]] = {{"support", m.support[c]}, {"accuracy", std::isnan(a) ? nlohmann::json() : nlohmann::json(a)}};
  }
  std::cout << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-conditioned diffusion perception for cross-domain emotion recognition"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "Generate the synthetic two-domain corpus");
  DatasetSpec spec;
  std::string gen_out, spec_file;
  int gen_threads = 1;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--spec", spec_file, "DatasetSpec JSON file");
  gen->add_option("--n-source", spec.n_source);
  gen->add_option("--n-target", spec.n_target);
  gen->add_option("--n-test", spec.n_test);
  gen->add_option("--classes", spec.num_classes);
  gen->add_option("--style-shift", spec.style_shift);
  gen->add_option("--prior-shift", spec.prior_shift);
  gen->add_option("--vocab-shift", spec.vocab_shift);
  gen->add_option("--seed", spec.seed);
  gen->add_option("--threads", gen_threads);

  // parse-captions
  auto* parse = app.add_subcommand("parse-captions", "Extract knowledge triples from captions");
  std::string parse_in, parse_out;
  std::vector<std::string> parse_caps;
  parse->add_option("--in", parse_in, "Corpus manifest (or its directory)");
  parse->add_option("--out", parse_out, "Output JSON file")->needs("--in");
  parse->add_option("--caption", parse_caps, "Parse this caption and print the result (repeatable)");

  // train
  auto* tr = app.add_subcommand("train", "Train a model");
  std::string tr_config, tr_data, tr_out, tr_init;
  tr->add_option("--config", tr_config, "Flat JSON TrainConfig")->required();
  tr->add_option("--init", tr_init, "Start from this checkpoint (e.g. written by pretrain-ldm)");
  tr->add_option("--data", tr_data, "Corpus directory")->required();
  tr->add_option("--out", tr_out, "Output directory")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint on a split");
  std::string ev_ckpt, ev_data, ev_split = "target_test";
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--split", ev_split, "source_test | target_test | source_train");

  // pretrain-ldm
  auto* pre = app.add_subcommand("pretrain-ldm", "Denoising pretraining of the U-Net backbone");
  int pre_steps = 100;
  std::string pre_config, pre_data, pre_out;
  pre->add_option("--steps", pre_steps)->required();
  pre->add_option("--data", pre_data)->required();
  pre->add_option("--out", pre_out, "Checkpoint path")->required();
  pre->add_option("--config", pre_config);

  // export-embeddings
  auto* ex = app.add_subcommand("export-embeddings", "Write v' embeddings as JSON lines");
  std::string ex_ckpt, ex_data, ex_split = "target_test", ex_out;
  ex->add_option("--ckpt", ex_ckpt)->required();
  ex->add_option("--data", ex_data)->required();
  ex->add_option("--split", ex_split);
  ex->add_option("--out", ex_out)->required();

  // pseudo-label
  auto* ps = app.add_subcommand("pseudo-label", "Assign alignment pseudo-labels");
  std::string ps_ckpt, ps_data, ps_split = "target_train", ps_out;
  ps->add_option("--ckpt", ps_ckpt)->required();
  ps->add_option("--data", ps_data)->required();
  ps->add_option("--split", ps_split);
  ps->add_option("--out", ps_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      if (!spec_file.empty()) spec = DatasetSpec::from_json(nlohmann::json::parse(io::read_file(spec_file)));
      const Corpus c = generate_dataset(spec, gen_threads);
      save_corpus(c, gen_out);
      std::cout << "wrote " << c.source_train.size() + c.target_train.size() + c.source_test.size() + c.target_test.size()
                << " samples to " << gen_out << '\n';
    } else if (*parse) {
      auto triples_json = [](const std::string& caption) {
        nlohmann::json triples = nlohmann::json::array();
        for (const auto& t : parse_triples(caption)) triples.push_back({t.subject, t.predicate, t.object});
        return triples;
      };
      if (parse_in.empty() && parse_caps.empty()) throw std::runtime_error("parse-captions needs --in or --caption");
      if (!parse_in.empty()) {
        std::filesystem::path in = parse_in;
        if (std::filesystem::is_directory(in)) in /= "manifest.json";
        const auto manifest = nlohmann::json::parse(io::read_file(in));
        nlohmann::json out = nlohmann::json::array();
        for (const auto& s : manifest.at("samples")) {
          out.push_back({{"id", s.at("id")}, {"triples", triples_json(s.at("caption").get<std::string>())}});
        }
        if (parse_out.empty()) {
          std::cout << out.dump(1) << '\n';
        } else {
          io::atomic_write(parse_out, out.dump(1));
          std::cout << "wrote triples for " << out.size() << " captions to " << parse_out << '\n';
        }
      }
      for (const auto& cap : parse_caps) {
        std::cout << nlohmann::json{{"caption", cap}, {"triples", triples_json(cap)}}.dump() << '\n';
      }
    } else if (*tr) {
      const TrainConfig config = TrainConfig::load(tr_config);
      const Corpus corpus = load_corpus(tr_data);
      Model model(config, corpus.label_names);
      if (!tr_init.empty()) load_checkpoint_into(model, tr_init);
      const SplitCache s_train = model.build_cache(corpus.source_train);
      const SplitCache t_train = model.build_cache(corpus.target_train);
      const SplitCache s_test = model.build_cache(corpus.source_test);
      const SplitCache t_test = model.build_cache(corpus.target_test);
      const auto start = std::chrono::steady_clock::now();
      const TrainResult r = train(model, {&s_train, &t_train, &s_test, &t_test}, [](const EpochMetrics& m, Model&) {
        std::fprintf(stderr, "epoch %d  L_total %.4f  acc_source %.4f  acc_target %.4f  pseudo %.4f\n", m.epoch,
                     m.l_total, m.acc_source, m.acc_target, m.pseudo_agreement);
      });
      const std::filesystem::path out = tr_out;
      std::filesystem::create_directories(out);
      write_metrics_csv(out / "metrics.csv", r.history);
      save_checkpoint(model, out / "model.ckpt");
      io::atomic_write(out / "config.json", config.to_json().dump(2));
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::cout << "trained " << r.history.size() << " epochs in " << secs << " s; trainable parameters "
                << model.trainable_count() << '\n';
    } else if (*ev) {
      auto model = load_checkpoint(ev_ckpt);
      const Corpus corpus = load_corpus(ev_data);
      const SplitCache cache = model->build_cache(corpus.split(ev_split));
      print_metrics(evaluate(*model, cache, model->config().threads), model->labels());
    } else if (*pre) {
      const TrainConfig config = pre_config.empty() ? TrainConfig{} : TrainConfig::load(pre_config);
      const Corpus corpus = load_corpus(pre_data);
      Model model(config, corpus.label_names);
      const SplitCache a = model.build_cache(corpus.source_train);
      const SplitCache b = model.build_cache(corpus.target_train);
      const SplitCache* caches[] = {&a, &b};
      const auto losses = pretrain_ldm(model, caches, pre_steps, config.batch_size, config.lr, config.seed);
      save_checkpoint(model, pre_out);
      if (!losses.empty()) std::cout << "final ldm loss " << losses.back() << '\n';
    } else if (*ex) {
      auto model = load_checkpoint(ex_ckpt);
      const Corpus corpus = load_corpus(ex_data);
      export_embeddings(*model, model->build_cache(corpus.split(ex_split)), ex_out, model->config().threads);
    } else if (*ps) {
      auto model = load_checkpoint(ps_ckpt);
      const Corpus corpus = load_corpus(ps_data);
      export_pseudo_labels(*model, model->build_cache(corpus.split(ps_split)), ps_out, model->config().threads);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
