#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "kcdp/checkpoint.hpp"
#include "kcdp/config.hpp"
#include "kcdp/diffcore.hpp"
#include "kcdp/model.hpp"
#include "kcdp/moe.hpp"
#include "kcdp/synthcorpus.hpp"
#include "kcdp/textkb.hpp"
#include "kcdp/trainkit.hpp"

namespace py = pybind11;
using namespace kcdp;

namespace {

// Configs cross the boundary as JSON text so Python sees plain dicts.
TrainConfig config_from(const std::string& json) { return TrainConfig::from_json(nlohmann::json::parse(json)); }

py::dict epoch_dict(const EpochMetrics& m) {
  py::dict d;
  d["epoch"] = m.epoch;
  d["l_s"] = m.l_s;
  d["l_t"] = m.l_t;
  d["l_ccl"] = m.l_ccl;
  d["l_total"] = m.l_total;
  d["acc_source"] = m.acc_source;
  d["acc_target"] = m.acc_target;
  d["pseudo_agreement"] = m.pseudo_agreement;
  return d;
}

}  // namespace

PYBIND11_MODULE(_kcdp, m) {
  m.doc() = "Knowledge-conditioned diffusion perception, C++ core";

  m.def("default_config_json", [] { return TrainConfig{}.to_json().dump(); });
  m.def("normalize_config_json", [](const std::string& j) { return config_from(j).to_json().dump(); });
  m.def("config_hash", [](const std::string& j, const std::vector<std::string>& labels) {
    return config_hash(config_from(j), labels);
  });
  m.def("emotion_names", &default_emotion_names);

  m.def(
      "generate_data",
      [](const std::string& spec_json, const std::filesystem::path& out, int threads) {
        const Corpus c = generate_dataset(DatasetSpec::from_json(nlohmann::json::parse(spec_json)), threads);
        save_corpus(c, out);
        return c.source_train.size() + c.target_train.size() + c.source_test.size() + c.target_test.size();
      },
      py::arg("spec_json"), py::arg("out"), py::arg("threads") = 1, py::call_guard<py::gil_scoped_release>());

  m.def("parse_triples", [](const std::string& caption) {
    std::vector<std::tuple<std::string, std::string, std::string>> out;
    for (const auto& t : parse_triples(caption)) out.emplace_back(t.subject, t.predicate, t.object);
    return out;
  });
  m.def("tokenize", &tokenize);

  m.def("route", [](const std::vector<double>& logits, int top_k) { return route(logits, top_k); }, py::arg("logits"),
        py::arg("top_k"));

  m.def(
      "alpha_bar", [](int steps) { return make_schedule(steps).alpha_bar; }, py::arg("steps") = 1000);
  m.def(
      "add_noise",
      [](const Matrix& z0, int t, const Matrix& eps, int steps) { return add_noise(z0, t, eps, make_schedule(steps)); },
      py::arg("z0"), py::arg("t"), py::arg("eps"), py::arg("steps") = 1000);

  m.def(
      "train",
      [](const std::string& config_json, const std::filesystem::path& data, const std::filesystem::path& out,
         const std::function<void(py::dict)>& on_epoch) {
        const TrainConfig config = config_from(config_json);
        const Corpus corpus = load_corpus(data);
        Model model(config, corpus.label_names);
        TrainResult r;
        {
          py::gil_scoped_release release;
          const SplitCache a = model.build_cache(corpus.source_train), b = model.build_cache(corpus.target_train);
          const SplitCache c = model.build_cache(corpus.source_test), d = model.build_cache(corpus.target_test);
          r = train(model, {&a, &b, &c, &d}, [&](const EpochMetrics& em, Model&) {
            if (!on_epoch) return;
            py::gil_scoped_acquire acquire;
            on_epoch(epoch_dict(em));
          });
        }
        std::filesystem::create_directories(out);
        write_metrics_csv(out / "metrics.csv", r.history);
        save_checkpoint(model, out / "model.ckpt");
        py::list history;
        for (const auto& em : r.history) history.append(epoch_dict(em));
        return history;
      },
      py::arg("config_json"), py::arg("data"), py::arg("out"), py::arg("on_epoch") = nullptr);

  m.def(
      "evaluate",
      [](const std::filesystem::path& ckpt, const std::filesystem::path& data, const std::string& split) {
        auto model = load_checkpoint(ckpt);
        const Corpus corpus = load_corpus(data);
        Metrics r;
        {
          py::gil_scoped_release release;
          r = evaluate(*model, model->build_cache(corpus.split(split)), model->config().threads);
        }
        py::dict d;
        d["n"] = r.n;
        d["accuracy"] = r.accuracy;
        d["per_class_accuracy"] = r.per_class_accuracy;
        d["support"] = r.support;
        return d;
      },
      py::arg("ckpt"), py::arg("data"), py::arg("split") = "target_test");

  m.def(
      "pseudo_labels",
      [](const std::filesystem::path& ckpt, const std::filesystem::path& data, const std::string& split) {
        auto model = load_checkpoint(ckpt);
        const Corpus corpus = load_corpus(data);
        py::gil_scoped_release release;
        std::vector<std::pair<int, std::vector<double>>> out;
        for (auto& p : pseudo_labels(*model, model->build_cache(corpus.split(split)), model->config().threads)) {
          out.emplace_back(p.label, p.scores.scores);
        }
        return out;
      },
      py::arg("ckpt"), py::arg("data"), py::arg("split") = "target_train");
}
