// Python bindings for the carma library.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "carma/carma_loss.hpp"
#include "carma/errors.hpp"
#include "carma/eval.hpp"
#include "carma/interventions.hpp"
#include "carma/lab.hpp"
#include "carma/log.hpp"
#include "carma/metrics.hpp"
#include "carma/trainer.hpp"

namespace py = pybind11;
using namespace carma;

namespace {

using Array = py::array_t<Scalar, py::array::c_style | py::array::forcecast>;

Array to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(std::move(shape), std::vector<Scalar>(a.data(), a.data() + a.size()));
}

std::vector<std::pair<std::size_t, std::size_t>> spans_out(const std::vector<WordSpan>& spans) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& s : spans) out.emplace_back(s.begin, s.end);
  return out;
}

std::vector<WordSpan> spans_in(const std::vector<std::pair<std::size_t, std::size_t>>& spans) {
  std::vector<WordSpan> out;
  for (const auto& [b, e] : spans) out.push_back({b, e});
  return out;
}

LayerTrace trace_from(const std::vector<Array>& hidden,
                      const std::vector<std::pair<std::size_t, std::size_t>>& spans) {
  LayerTrace t;
  for (const auto& h : hidden) t.hidden.push_back(from_numpy(h));
  t.word_spans = spans_in(spans);
  return t;
}

void forward_warnings_to_python() {
  set_warning_sink([](std::string_view message) {
    py::gil_scoped_acquire gil;
    const std::string text(message);
    if (PyErr_WarnEx(PyExc_RuntimeWarning, text.c_str(), 1) != 0) PyErr_Clear();
  });
}

py::dict forward_dict(const Transformer& model, const TokenSequence& seq, const PatchMap& patches) {
  ForwardResult out;
  {
    NoGradGuard no_grad;
    out = model.forward(seq, patches);
  }
  py::list hidden;
  for (const auto& h : out.trace.hidden) hidden.append(to_numpy(h));
  py::dict d;
  d["logits"] = to_numpy(out.logits);
  d["hidden"] = hidden;
  d["word_spans"] = spans_out(out.trace.word_spans);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Layer-wise MI and stability regularization for small transformers";
  forward_warnings_to_python();

  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<EncodingError>(m, "EncodingError", PyExc_ValueError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<GenerationError>(m, "GenerationError", PyExc_RuntimeError);

  py::enum_<Task>(m, "Task").value("IDM", Task::IDM).value("SC", Task::SC);
  py::enum_<Variant>(m, "Variant")
      .value("ORIGINAL", Variant::Original)
      .value("FT", Variant::FT)
      .value("CARMA", Variant::CARMA);
  py::enum_<PoolMode>(m, "PoolMode")
      .value("MEAN", PoolMode::Mean)
      .value("MAX", PoolMode::Max)
      .value("SUM", PoolMode::Sum);

  // ---- data ----
  py::class_<Tokenizer>(m, "Tokenizer")
      .def(py::init<const std::vector<std::string>&, const std::vector<std::string>&>(),
           py::arg("lexicon"), py::arg("atomic") = std::vector<std::string>{})
      .def_static("standard", &Tokenizer::standard, py::return_value_policy::reference)
      .def(
          "encode",
          [](const Tokenizer& t, std::string_view text) {
            auto s = t.encode(text);
            return py::make_tuple(s.ids, spans_out(s.word_spans));
          },
          "Token ids and one (begin, end) span per word.")
      .def("encode_prompt",
           [](const Tokenizer& t, std::string_view text) {
             auto s = t.encode_prompt(text);
             return py::make_tuple(s.ids, spans_out(s.word_spans));
           })
      .def("decode", &Tokenizer::decode)
      .def("token_id", &Tokenizer::token_id)
      .def_property_readonly("vocab_size", &Tokenizer::vocab_size);

  py::class_<Example>(m, "Example")
      .def_readonly("prompt", &Example::prompt)
      .def_readonly("target", &Example::target)
      .def_readonly("task", &Example::task)
      .def_readonly("synonym_slots", &Example::synonym_slots)
      .def_property_readonly("word_spans", [](const Example& e) { return spans_out(e.word_spans); })
      .def_readonly("composition", &Example::composition)
      .def("__repr__", [](const Example& e) {
        return "Example(" + py::repr(py::str(e.prompt)).cast<std::string>() + " -> " + e.target +
               ")";
      });
  m.def(
      "make_example",
      [](Task task, std::string prompt, std::string target, std::vector<std::size_t> slots) {
        return make_example(task, std::move(prompt), std::move(target), std::move(slots));
      },
      py::arg("task"), py::arg("prompt"), py::arg("target"),
      py::arg("synonym_slots") = std::vector<std::size_t>{});

  py::class_<DatasetSplit>(m, "DatasetSplit")
      .def_readonly("task", &DatasetSplit::task)
      .def_readonly("generator_seed", &DatasetSplit::generator_seed)
      .def_readonly("train", &DatasetSplit::train)
      .def_readonly("validation", &DatasetSplit::validation)
      .def_readonly("test", &DatasetSplit::test)
      .def("to_tsv", &dataset_to_tsv);
  m.def("gen_idm", &gen_idm, py::arg("seed"), py::arg("n_items"));
  m.def("gen_sc", &gen_sc, py::arg("seed"), py::arg("n_items"));
  m.def("generate", &generate, py::arg("task"), py::arg("seed"), py::arg("n_items"));
  m.def("dataset_from_tsv", &dataset_from_tsv);
  m.def("load_dataset", &load_dataset);
  m.def("answer_vocabulary", &answer_vocabulary, py::return_value_policy::copy);
  m.def("synonym_classes", &synonym_classes, py::return_value_policy::copy);

  // ---- model ----
  py::class_<TransformerConfig>(m, "TransformerConfig")
      .def(py::init([](std::size_t n_layers, std::size_t d_model, std::size_t n_heads,
                       std::size_t d_mlp, std::size_t vocab_size, std::size_t max_seq,
                       double init_std) {
             TransformerConfig c;
             c.n_layers = n_layers;
             c.d_model = d_model;
             c.n_heads = n_heads;
             c.d_mlp = d_mlp;
             c.vocab_size = vocab_size ? vocab_size : Tokenizer::standard().vocab_size();
             c.max_seq = max_seq;
             c.init_std = init_std;
             c.validate();
             return c;
           }),
           py::arg("n_layers") = 4, py::arg("d_model") = 32, py::arg("n_heads") = 4,
           py::arg("d_mlp") = 128, py::arg("vocab_size") = 0, py::arg("max_seq") = 32,
           py::arg("init_std") = 0.02)
      .def_readonly("n_layers", &TransformerConfig::n_layers)
      .def_readonly("d_model", &TransformerConfig::d_model)
      .def_readonly("n_heads", &TransformerConfig::n_heads)
      .def_readonly("d_mlp", &TransformerConfig::d_mlp)
      .def_readonly("vocab_size", &TransformerConfig::vocab_size)
      .def_readonly("max_seq", &TransformerConfig::max_seq);

  py::class_<Transformer>(m, "Transformer")
      .def(py::init<const TransformerConfig&, std::uint64_t>(), py::arg("config"),
           py::arg("seed") = 0)
      .def_property_readonly("config", &Transformer::config)
      .def_property_readonly("parameter_count", &Transformer::parameter_count)
      .def("parameter_names", &Transformer::parameter_names)
      .def("parameter",
           [](const Transformer& t, const std::string& name) {
             const auto& names = t.parameter_names();
             const auto it = std::find(names.begin(), names.end(), name);
             if (it == names.end()) throw py::key_error(name);
             return to_numpy(t.parameters()[static_cast<std::size_t>(it - names.begin())]);
           })
      .def(
          "forward",
          [](const Transformer& t, const std::vector<int>& ids,
             const std::vector<std::pair<std::size_t, std::size_t>>& spans,
             const std::map<std::size_t, Array>& patches) {
            PatchMap p;
            for (const auto& [k, v] : patches) p.emplace(k, from_numpy(v));
            return forward_dict(t, TokenSequence{ids, spans_in(spans)}, p);
          },
          py::arg("ids"), py::arg("word_spans") = std::vector<std::pair<std::size_t, std::size_t>>{},
          py::arg("patches") = std::map<std::size_t, Array>{},
          "Returns {'logits', 'hidden', 'word_spans'}; hidden[k] is the output of block k.")
      .def("generate_next",
           [](const Transformer& t, const std::vector<int>& ids) {
             return t.generate_next(TokenSequence{ids, {}});
           })
      .def("predict", &predict)
      .def("accuracy", [](const Transformer& t, const std::vector<Example>& xs) {
        return evaluate_accuracy(t, xs);
      })
      .def("clone", &Transformer::clone)
      .def("save", &Transformer::save)
      .def_static("load", &Transformer::load);

  // ---- losses ----
  py::class_<CarmaConfig>(m, "CarmaConfig")
      .def(py::init<>())
      .def_readwrite("lambda_", &CarmaConfig::lambda)
      .def_readwrite("gamma", &CarmaConfig::gamma)
      .def_readwrite("eta", &CarmaConfig::eta)
      .def_readwrite("tau", &CarmaConfig::tau)
      .def_readwrite("epsilon", &CarmaConfig::epsilon)
      .def_readwrite("layer_start", &CarmaConfig::layer_start)
      .def_readwrite("layer_end", &CarmaConfig::layer_end)
      .def_readwrite("max_negatives", &CarmaConfig::max_negatives)
      .def_readwrite("seed", &CarmaConfig::seed)
      .def_readwrite("average_over_anchors", &CarmaConfig::average_over_anchors);
  m.def("default_layer_range", &default_layer_range, py::arg("n_layers"));
  m.def(
      "mi_loss",
      [](const std::vector<Array>& hidden,
         const std::vector<std::pair<std::size_t, std::size_t>>& spans, const CarmaConfig& cfg,
         std::uint64_t seed) {
        const LayerTrace t = trace_from(hidden, spans);
        std::mt19937_64 rng(seed);
        const auto groups =
            build_groups(t.word_spans, t.hidden.at(0).rows(), cfg.max_negatives, rng);
        return mi_loss(t, groups, cfg).value.item();
      },
      py::arg("hidden"), py::arg("word_spans"), py::arg("config"), py::arg("seed") = 0,
      "InfoNCE alignment loss over hidden[layer_start..layer_end].");
  m.def(
      "stability_loss",
      [](const std::vector<Array>& hidden, const CarmaConfig& cfg) {
        return stability_loss(trace_from(hidden, {}), cfg).item();
      },
      py::arg("hidden"), py::arg("config"));
  m.def(
      "similarity",
      [](const std::vector<Scalar>& a, const std::vector<Scalar>& b, Scalar eps) {
        return similarity(a, b, eps);
      },
      py::arg("a"), py::arg("b"), py::arg("eps") = 1e-8);

  // ---- training ----
  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("warmup_steps", &TrainConfig::warmup_steps)
      .def_readwrite("clip_norm", &TrainConfig::clip_norm)
      .def_readwrite("pretrain_epochs", &TrainConfig::pretrain_epochs)
      .def_readwrite("carma", &TrainConfig::carma)
      .def_readwrite("variant", &TrainConfig::variant)
      .def_readwrite("seed", &TrainConfig::seed);
  py::class_<TrainLog>(m, "TrainLog")
      .def_readonly("variant", &TrainLog::variant)
      .def_readonly("best_epoch", &TrainLog::best_epoch)
      .def_readonly("best_validation_accuracy", &TrainLog::best_validation_accuracy)
      .def_property_readonly("total_wall_ms", &TrainLog::total_wall_ms)
      .def_property_readonly("task_losses",
                             [](const TrainLog& l) {
                               std::vector<double> out;
                               for (const auto& s : l.steps) out.push_back(s.task);
                               return out;
                             })
      .def_property_readonly("validation_accuracy",
                             [](const TrainLog& l) {
                               std::vector<double> out;
                               for (const auto& e : l.epochs) out.push_back(e.validation_accuracy);
                               return out;
                             })
      .def("to_jsonl", &TrainLog::to_jsonl);
  m.def("train", &train, py::arg("model"), py::arg("data"), py::arg("config"),
        py::call_guard<py::gil_scoped_release>());
  m.def("pretrain", &pretrain, py::arg("model"), py::arg("data"), py::arg("config"),
        py::call_guard<py::gil_scoped_release>());
  m.def("overhead_report", &overhead_report);

  // ---- interventions ----
  m.def(
      "cap_pool",
      [](const Array& hidden, const std::vector<std::pair<std::size_t, std::size_t>>& spans,
         PoolMode mode) {
        const auto p = cap_pool(from_numpy(hidden), spans_in(spans), mode);
        return py::make_tuple(to_numpy(p.hidden), spans_out(p.spans));
      },
      py::arg("hidden"), py::arg("word_spans"), py::arg("mode"));
  py::class_<CapResult>(m, "CapResult")
      .def_readonly("accuracy", &CapResult::accuracy)
      .def_readonly("layer", &CapResult::layer)
      .def_readonly("normalized_layer", &CapResult::normalized_layer)
      .def_readonly("mode", &CapResult::mode)
      .def_readonly("n_examples", &CapResult::n_examples);
  m.def(
      "run_cap_eval",
      [](const Transformer& t, const std::vector<Example>& xs, std::size_t layer, PoolMode mode) {
        return run_cap_eval(t, xs, layer, mode);
      },
      py::arg("model"), py::arg("examples"), py::arg("layer"), py::arg("mode"),
      py::call_guard<py::gil_scoped_release>());

  py::class_<SynonymLexicon>(m, "SynonymLexicon")
      .def_static("for_task", &SynonymLexicon::for_task, py::arg("task"), py::arg("seed") = 0)
      .def_static("identity", &SynonymLexicon::identity)
      .def("covers", &SynonymLexicon::covers)
      .def("substitutes", &SynonymLexicon::substitutes, py::return_value_policy::copy)
      .def("__len__", &SynonymLexicon::size);
  py::class_<Replacement>(m, "Replacement")
      .def_readonly("example", &Replacement::example)
      .def_readonly("replaced", &Replacement::replaced)
      .def_readonly("no_eligible", &Replacement::no_eligible);
  m.def("replace_synonyms", &replace_synonyms, py::arg("example"), py::arg("rate"),
        py::arg("seed"), py::arg("lexicon"));
  m.def(
      "run_synonym_eval",
      [](const Transformer& t, const std::vector<Example>& xs, double rate,
         const std::vector<std::uint64_t>& seeds, const SynonymLexicon& lex) {
        const SynonymEval e = run_synonym_eval(t, xs, rate, seeds, lex);
        std::vector<std::optional<double>> out;
        for (const auto& s : e.per_seed) out.push_back(s.consist_syn);
        return out;
      },
      py::arg("model"), py::arg("examples"), py::arg("rate"), py::arg("seeds"), py::arg("lexicon"),
      py::call_guard<py::gil_scoped_release>(), "Per-seed ConsistSyn (None when undefined).");

  // ---- metrics ----
  m.def("accuracy", [](const std::vector<int>& p, const std::vector<int>& t) {
    return accuracy(p, t);
  });
  m.def("consist_syn", &consist_syn);
  m.def(
      "cv", [](const std::vector<double>& v, bool sample) { return cv(v, sample); },
      py::arg("values"), py::arg("sample") = false);
  m.def("ni", &ni);

  // ---- lab commands ----
  auto lab_m = m.def_submodule("lab", "Experiment commands writing files under a root directory");
  lab_m.def(
      "gen",
      [](Task task, std::uint64_t seed, std::size_t n, const lab::fs::path& out) {
        const auto o = lab::cmd_gen(task, seed, n, out);
        return py::make_tuple(o.tsv, o.manifest);
      },
      py::arg("task"), py::arg("seed"), py::arg("n_items"), py::arg("out_dir"));
  lab_m.def(
      "train",
      [](const std::string& config_json, const std::vector<std::string>& overrides,
         Variant variant, const std::vector<std::uint64_t>& seeds, const lab::fs::path& root,
         std::size_t jobs) {
        const auto cfg =
            lab::parse_config(nlohmann::json::parse(config_json.empty() ? "{}" : config_json),
                              overrides);
        py::gil_scoped_release release;
        return lab::cmd_train(cfg, variant, seeds, root, jobs);
      },
      py::arg("config_json"), py::arg("overrides"), py::arg("variant"), py::arg("seeds"),
      py::arg("root"), py::arg("jobs") = 1);
  lab_m.def("cap", &lab::cmd_cap, py::arg("root"), py::arg("layers") = "all",
            py::arg("modes") = "all", py::arg("jobs") = 1,
            py::call_guard<py::gil_scoped_release>());
  lab_m.def("synonyms", &lab::cmd_synonyms, py::arg("root"), py::arg("rates"), py::arg("seeds"),
            py::arg("jobs") = 1, py::call_guard<py::gil_scoped_release>());
  lab_m.def("report", &lab::cmd_report, py::arg("root"), py::arg("svg") = false);
}
