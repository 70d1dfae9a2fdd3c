#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "xray/evaluation.hpp"
#include "xray/gradcheck.hpp"
#include "xray/image.hpp"
#include "xray/model.hpp"
#include "xray/pipeline.hpp"
#include "xray/service.hpp"
#include "xray/synthetic.hpp"
#include "xray/training.hpp"

namespace py = pybind11;
using namespace xray;

namespace {

// JSON crosses the boundary as text; the package decodes it with the json module.
std::string dump(const nlohmann::json& j) { return j.dump(); }

ImageBuffer image_from_array(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
  const auto info = a.request();
  if (info.ndim != 2 && info.ndim != 3) throw std::invalid_argument("image must be HxW or HxWxC uint8");
  const auto h = static_cast<std::size_t>(info.shape[0]), w = static_cast<std::size_t>(info.shape[1]);
  const std::size_t c = info.ndim == 3 ? static_cast<std::size_t>(info.shape[2]) : 1;
  if (c != 1 && c != 3) throw std::invalid_argument("image must have 1 or 3 channels");
  const auto* p = static_cast<const std::uint8_t*>(info.ptr);
  return ImageBuffer(h, w, c, std::vector<std::uint8_t>(p, p + h * w * c));
}

py::array_t<std::uint8_t> image_to_array(const ImageBuffer& img) {
  std::vector<py::ssize_t> shape{static_cast<py::ssize_t>(img.height), static_cast<py::ssize_t>(img.width)};
  if (img.channels != 1) shape.push_back(static_cast<py::ssize_t>(img.channels));
  py::array_t<std::uint8_t> out(shape);
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

py::array_t<float> tensor_to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<std::vector<double>> rows_of(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  const auto info = a.request();
  if (info.ndim != 2) throw std::invalid_argument("expected a 2-D array");
  const auto n = static_cast<std::size_t>(info.shape[0]), f = static_cast<std::size_t>(info.shape[1]);
  const auto* p = static_cast<const double*>(info.ptr);
  std::vector<std::vector<double>> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i].assign(p + i * f, p + (i + 1) * f);
  return rows;
}

py::dict predict(const Model& m, const ImageBuffer& img) {
  const Tensor x = preprocess(img, m.input_shape);
  const auto out = m.forward(x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}));
  py::dict scores;
  for (std::size_t c = 0; c < m.num_classes(); ++c) scores[py::str(m.class_names[c])] = out.probabilities[c];
  py::dict r;
  r["scores"] = scores;
  r["features"] = tensor_to_array(out.final_features.reshaped(
      {out.final_features.dim(1), out.final_features.dim(2), out.final_features.dim(3)}));
  return r;
}

WeightMode weight_mode_of(const std::string& s) {
  if (auto m = parse_weight_mode(s)) return *m;
  throw std::invalid_argument("unknown weight mode '" + s + "'");
}

SplitStrategy strategy_of(const std::string& s) {
  if (s == "by_patient") return SplitStrategy::by_patient;
  if (s == "random") return SplitStrategy::random;
  if (s == "predefined") return SplitStrategy::predefined;
  throw std::invalid_argument("unknown split strategy '" + s + "'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Chest X-ray triage core";

  py::register_exception<NotAnImage>(m, "NotAnImage", PyExc_ValueError);
  py::register_exception<ServiceStartupError>(m, "ServiceStartupError", PyExc_RuntimeError);
  py::register_exception<ManifestError>(m, "ManifestError", PyExc_ValueError);

  // imaging
  m.def("decode_image", [](py::bytes b) { return image_to_array(decode_image(std::string(b))); },
        py::arg("data"));
  m.def("encode_png", [](const py::array_t<std::uint8_t>& a) { return py::bytes(encode_png(image_from_array(a))); },
        py::arg("image"));
  m.def("resize_bilinear",
        [](const py::array_t<std::uint8_t>& a, std::size_t h, std::size_t w) {
          return image_to_array(resize_bilinear(image_from_array(a), h, w));
        },
        py::arg("image"), py::arg("height"), py::arg("width"));
  m.def("rotate_quarter",
        [](const py::array_t<std::uint8_t>& a, int k) { return image_to_array(rotate_quarter(image_from_array(a), k)); },
        py::arg("image"), py::arg("k"));
  m.def("synth_upright",
        [](std::size_t size, std::uint64_t seed) {
          Rng rng(seed);
          return image_to_array(synth_upright(size, rng));
        },
        py::arg("size"), py::arg("seed"));

  // models
  py::class_<Model>(m, "Model")
      .def_property_readonly("class_names", [](const Model& x) { return x.class_names; })
      .def_property_readonly("input_shape", [](const Model& x) { return x.input_shape; })
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def_property_readonly("head_weights", [](const Model& x) { return tensor_to_array(x.head_weights()); })
      .def("predict", [](const Model& x, const py::array_t<std::uint8_t>& a) { return predict(x, image_from_array(a)); },
           py::arg("image"))
      .def("save", [](const Model& x, const std::filesystem::path& dir) { save_model(dir, x); }, py::arg("dir"));
  m.def("build_filter_net",
        [](std::size_t input_size, std::uint64_t seed) {
          FilterNetConfig c;
          c.input_size = input_size;
          return build_filter_net(c, seed);
        },
        py::arg("input_size") = 224, py::arg("seed") = 0);
  m.def("build_covid_net",
        [](std::size_t input_size, std::size_t num_classes, std::uint64_t seed) {
          CovidNetConfig c;
          c.input_size = input_size;
          c.num_classes = num_classes;
          return build_covid_net(c, seed);
        },
        py::arg("input_size") = 224, py::arg("num_classes") = 3, py::arg("seed") = 0);
  m.def("load_model", &load_model, py::arg("dir"));
  m.def("compute_cam",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& features,
           const py::array_t<float, py::array::c_style | py::array::forcecast>& weights, std::size_t cls,
           std::size_t h, std::size_t w) {
          auto to_tensor = [](const auto& a) {
            const auto info = a.request();
            Shape s(info.shape.begin(), info.shape.end());
            const auto* p = static_cast<const float*>(info.ptr);
            Tensor t(s);
            std::copy(p, p + t.size(), t.raw());
            return t;
          };
          return tensor_to_array(compute_cam(to_tensor(features), to_tensor(weights), cls, h, w));
        },
        py::arg("features"), py::arg("head_weights"), py::arg("class_index"), py::arg("height"), py::arg("width"));
  m.def("gradcheck",
        [](const Model& model, std::size_t samples, std::uint64_t seed) {
          Rng rng(seed);
          const Shape& s = model.input_shape;
          Tensor x({1, s[0], s[1], s[2]});
          for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-1, 1));
          Tensor target({1, model.num_classes()});
          for (auto& v : target.data()) v = static_cast<float>(rng.uniform(-1, 1));
          GradCheckOptions o;
          o.samples_per_param = samples;
          o.seed = seed;
          const auto r = finite_difference_check(model, squared_error_loss(target), x, o);
          py::dict d;
          d["max_relative_error"] = r.max_relative_error;
          d["checked"] = r.checked;
          d["ok"] = r.ok;
          d["worst_coordinate"] = r.worst_coordinate;
          return d;
        },
        py::arg("model"), py::arg("samples_per_param") = 8, py::arg("seed") = 0);

  // training math
  m.def("class_weights",
        [](const std::vector<std::size_t>& counts, const std::string& mode) {
          return class_weights(counts, weight_mode_of(mode)).weights;
        },
        py::arg("counts"), py::arg("mode") = "inverse");
  m.def("weighted_smoothed_ce",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& probs,
           const std::vector<std::size_t>& labels, double alpha, const std::vector<double>& weights) {
          const auto rows = rows_of(probs);
          const std::size_t n = rows.size(), c = n ? rows[0].size() : 0;
          Tensor64 p({n, c});
          for (std::size_t i = 0; i < n; ++i) std::copy(rows[i].begin(), rows[i].end(), p.raw() + i * c);
          ClassWeights w;
          w.weights = weights;
          const auto r = weighted_smoothed_ce(p, smooth_targets(one_hot<double>(labels, c), alpha), w);
          py::array_t<double> g({static_cast<py::ssize_t>(n), static_cast<py::ssize_t>(c)});
          std::copy(r.dlogits.data().begin(), r.dlogits.data().end(), g.mutable_data());
          return py::make_tuple(r.loss, g);
        },
        py::arg("probabilities"), py::arg("labels"), py::arg("alpha"), py::arg("weights"));
  m.def("step_decay_lr",
        [](double lr0, double factor, std::size_t every, std::size_t epoch) {
          return step_decay_lr(lr0, StepDecay{factor, every}, epoch);
        },
        py::arg("lr0"), py::arg("factor"), py::arg("every_n_epochs"), py::arg("epoch"));
  m.def("plateau_lrs",
        [](double lr0, double factor, std::size_t patience, const std::vector<double>& losses) {
          LrScheduler s(lr0, Plateau{factor, patience});
          std::vector<double> out{s.lr()};
          for (std::size_t e = 0; e < losses.size(); ++e) out.push_back(s.next(e, losses[e]));
          return out;
        },
        py::arg("lr0"), py::arg("factor"), py::arg("patience"), py::arg("losses"));

  // datasets
  m.def("load_manifest_json",
        [](const std::filesystem::path& p) {
          const Manifest man = load_manifest(p);
          nlohmann::json j = {{"task", to_string(man.task)}, {"records", man.records.size()},
                              {"class_counts", man.class_counts()}};
          return dump(j);
        },
        py::arg("path"));
  m.def("split_manifest",
        [](const std::filesystem::path& p, const std::string& strategy, std::uint64_t seed) {
          const Manifest man = load_manifest(p);
          const auto s = split(man, strategy_of(strategy), {}, seed);
          std::vector<std::string> out;
          for (auto v : s.assignment) out.push_back(to_string(v));
          return out;
        },
        py::arg("path"), py::arg("strategy") = "by_patient", py::arg("seed") = 0);
  m.def("write_synthetic_corpus",
        [](const std::filesystem::path& dir, const std::string& task, const std::vector<std::size_t>& counts,
           std::size_t size, std::uint64_t seed, std::size_t per_patient) {
          const Task t = task == "filter" ? Task::filter : Task::classifier;
          write_synthetic_corpus(dir, t, counts, size, seed, per_patient);
          return dir / "manifest.csv";
        },
        py::arg("dir"), py::arg("task"), py::arg("counts"), py::arg("size") = 64, py::arg("seed") = 0,
        py::arg("images_per_patient") = 1);

  // evaluation
  m.def("sensitivity_specificity",
        [](const std::vector<std::vector<std::uint64_t>>& rows) {
          const auto met = sensitivity_specificity(ConfusionMatrix(rows));
          return py::make_tuple(met.sensitivity, met.specificity);
        },
        py::arg("matrix"));
  m.def("confusion_matrix",
        [](const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& actual, std::size_t c) {
          const auto cm = confusion_matrix(predicted, actual, c);
          std::vector<std::vector<std::uint64_t>> rows(c, std::vector<std::uint64_t>(c));
          for (std::size_t a = 0; a < c; ++a)
            for (std::size_t p = 0; p < c; ++p) rows[a][p] = cm.at(a, p);
          return rows;
        },
        py::arg("predicted"), py::arg("actual"), py::arg("num_classes"));
  m.def("aggregate_runs_json",
        [](const std::vector<std::vector<std::vector<std::uint64_t>>>& runs, bool sample_std) {
          std::vector<ConfusionMatrix> ms;
          for (const auto& r : runs) ms.emplace_back(r);
          return dump(to_json(aggregate_runs(ms, sample_std ? StdMode::sample : StdMode::population)));
        },
        py::arg("matrices"), py::arg("sample_std") = false);
  m.def("pca_project",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, std::size_t k) {
          const auto r = pca_project(rows_of(x), k);
          py::dict d;
          d["coordinates"] = r.coordinates;
          d["axes"] = r.axes;
          d["eigenvalues"] = r.eigenvalues;
          d["explained_variance_ratio"] = r.explained_variance_ratio;
          d["rank_deficient"] = r.rank_deficient;
          return d;
        },
        py::arg("x"), py::arg("k") = 3);

  // service
  py::class_<TriageService>(m, "TriageService")
      .def(py::init([](const std::filesystem::path& model_dir, const std::filesystem::path& store_dir,
                       std::size_t max_upload_bytes) {
             ServiceConfig c;
             c.model_dir = model_dir;
             c.store_dir = store_dir;
             c.max_upload_bytes = max_upload_bytes;
             return std::make_unique<TriageService>(c);
           }),
           py::arg("model_dir"), py::arg("store_dir"), py::arg("max_upload_bytes") = kDefaultMaxUploadBytes)
      .def(py::init([](const Model& filter, const Model& classifier, const std::filesystem::path& store_dir) {
             ServiceConfig c;
             c.store_dir = store_dir;
             return std::make_unique<TriageService>(filter, classifier, c);
           }),
           py::arg("filter"), py::arg("classifier"), py::arg("store_dir"))
      .def("analyze_json",
           [](TriageService& s, py::bytes data, const std::string& filename) {
             const std::string bytes(data);
             py::gil_scoped_release release;
             try {
               return dump(to_api_json(s.analyze(bytes, filename)));
             } catch (const ServiceError& e) {
               return dump({{"code", e.code()}, {"message", e.what()}, {"status", e.status()}});
             }
           },
           py::arg("data"), py::arg("filename"))
      .def("result_json",
           [](const TriageService& s, const std::string& id) -> std::optional<std::string> {
             if (auto r = s.get_result(id)) return dump(to_api_json(*r));
             return std::nullopt;
           },
           py::arg("request_id"))
      .def("history_json",
           [](const TriageService& s, std::size_t limit) {
             nlohmann::json arr = nlohmann::json::array();
             for (const auto& r : s.history(limit)) arr.push_back(to_api_json(r));
             return dump(arr);
           },
           py::arg("limit") = 20)
      .def("health_json", [](const TriageService& s) { return dump(s.health().second); });
}
