// Python module _cag: numpy in, numpy out. Images are float64 [N,C,H,W].

#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cag/commands.hpp"
#include "cag/zoo.hpp"

namespace py = pybind11;
using namespace cag;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    Array a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.data(), t.data() + t.size(), a.mutable_data());
    return a;
}

int run_command(const std::string& name, const std::map<std::string, std::string>& settings, bool resume) {
    ExperimentConfig c;
    for (const auto& [k, v] : settings) c.set(k, v);
    std::ostringstream log;
    int code = 1;
    if (name == "zoo-train") code = cmd_zoo_train(c, log);
    else if (name == "stats") code = cmd_stats(c, log);
    else if (name == "generate") code = cmd_generate(c, log, resume);
    else if (name == "t2i") code = cmd_t2i(c, log);
    else if (name == "evaluate") code = cmd_evaluate(c, log);
    else if (name == "ablate") code = cmd_ablate(c, log);
    else throw ConfigError("unknown command '" + name + "'");
    py::print(log.str(), py::arg("end") = "");
    return code;
}

}  // namespace

PYBIND11_MODULE(_cag, m) {
    m.doc() = "Generate images by optimizing classifier inputs through a masked reconstruction module";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<NonFiniteError>(m, "NonFiniteError", PyExc_ArithmeticError);

    py::class_<GeneralizedClassifier, std::shared_ptr<GeneralizedClassifier>>(m, "Classifier")
        .def_property_readonly("num_classes", &GeneralizedClassifier::num_classes)
        .def_property_readonly("feature_dim", &GeneralizedClassifier::feature_dim)
        .def_property_readonly("input_resolution", &GeneralizedClassifier::input_resolution)
        .def_property_readonly("identifier", &GeneralizedClassifier::identifier)
        .def("logits", [](const GeneralizedClassifier& c, const Array& x) { return RowMatrix(predict_logits(c, to_tensor(x))); })
        .def("features",
             [](const GeneralizedClassifier& c, const Array& x) { return RowMatrix(extract_features(c, to_tensor(x))); })
        .def("predict", [](const GeneralizedClassifier& c, const Array& x) { return predict_labels(c, to_tensor(x)); });

    py::class_<ReconstructionModule, std::shared_ptr<ReconstructionModule>>(m, "ReconstructionModule")
        .def_property_readonly("patch_size", &ReconstructionModule::patch_size)
        .def_property_readonly("input_resolution", &ReconstructionModule::input_resolution)
        .def("reconstruct",
             [](const ReconstructionModule& g, const Array& x, double ratio, std::uint64_t seed) {
                 const Tensor t = to_tensor(x);
                 return to_array(masked_reconstruct(g, t, probe_masks(g, t.dim(0), ratio, seed)));
             },
             py::arg("images"), py::arg("mask_ratio") = 0.75, py::arg("seed") = 0);

    m.def("load_classifier", [](const std::filesystem::path& p) -> ClassifierPtr { return load_classifier(p); });
    m.def("load_autoencoder", [](const std::filesystem::path& p) -> std::shared_ptr<ReconstructionModule> {
        return load_autoencoder(p);
    });
    m.def("ensemble", [](const std::vector<ClassifierPtr>& members, const std::vector<double>& weights) {
        return make_ensemble({members, weights});
    });
    m.def("text_classifier",
          [](const std::filesystem::path& dual, const std::vector<std::string>& prompts, double temperature) {
              const DualEncoder d = load_dual_encoder(dual);
              return text_to_classifier(d.image, d.text, prompts, temperature);
          },
          py::arg("dual_encoder"), py::arg("prompts"), py::arg("temperature") = 100.0);

    m.def("sample_mask",
          [](int grid, double ratio, std::uint64_t seed) {
              Rng rng(seed);
              return sample_mask(grid, grid, ratio, rng).masked;
          },
          py::arg("grid"), py::arg("ratio"), py::arg("seed"));

    m.def("classification_loss", [](const std::vector<double>& logits, int target) {
        return classification_loss(logits, target);
    });
    m.def("distance_metric_loss",
          [](const RowMatrix& f, bool cosine) {
              return distance_metric_loss(f, cosine ? DiversityMode::cosine : DiversityMode::raw);
          },
          py::arg("features"), py::arg("cosine") = false);
    m.def("batch_statistics", [](const RowMatrix& f) {
        const FeatureMoments s = batch_statistics(f);
        return py::make_tuple(s.mean, s.var);
    });
    m.def("distribution_loss",
          [](const Eigen::VectorXd& gm, const Eigen::VectorXd& gv, const Eigen::VectorXd& mu, const Eigen::VectorXd& var) {
              return distribution_loss(gm, gv, ClassStatistics{0, mu, var, 0});
          });

    m.def("frechet_distance", [](const RowMatrix& a, const RowMatrix& b) {
        return frechet_distance(gaussian_summary(a), gaussian_summary(b));
    });
    m.def("inception_score",
          [](const RowMatrix& p, int splits) {
              const InceptionScore s = inception_score(p, splits);
              return py::make_tuple(s.mean, s.std);
          },
          py::arg("probabilities"), py::arg("splits") = 10);
    m.def("diversity_score", [](const RowMatrix& f) { return diversity_score(f); });

    m.def("generate",
          [](const ClassifierPtr& classifier, const std::shared_ptr<ReconstructionModule>& recon,
             const std::map<std::string, std::string>& settings, std::uint64_t seed, int target) {
              ExperimentConfig c;
              c.seed = seed;
              for (const auto& [k, v] : settings) c.set(k, v);
              if (c.w_dist > 0.0) throw ConfigError("generate() has no class statistics; set w_dist = 0");
              const SamplerConfig sc = c.sampler_config(target);
              GenerationResult r;
              {
                  py::gil_scoped_release release;
                  r = progressive_generate(sc, {classifier, recon, nullptr});
              }
              py::list losses;
              for (const LogEntry& e : r.record.log) losses.append(e.loss.total);
              return py::make_tuple(to_array(r.images.data), losses, r.record.aborted);
          },
          py::arg("classifier"), py::arg("reconstruction"), py::arg("settings") = std::map<std::string, std::string>{},
          py::arg("seed") = 0, py::arg("target") = 0);

    m.def("run_command", &run_command, py::arg("name"), py::arg("settings"), py::arg("resume") = false,
          "Runs one CLI command with key = value settings; returns its exit status.");
    m.def("config_keys", &config_keys);
}
