#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "cre/app.hpp"
#include "cre/config.hpp"
#include "cre/errors.hpp"
#include "cre/eval.hpp"
#include "cre/gradcheck.hpp"
#include "cre/masking.hpp"
#include "cre/objectives.hpp"
#include "cre/synthetic.hpp"
#include "cre/tokenizer.hpp"
#include "cre/trainer.hpp"

namespace py = pybind11;
using namespace cre;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using IndexArray = py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>;

Image image_from(const FloatArray& a) {
  if (a.ndim() != 3) throw DimensionError("expected an H x W x C image array");
  Image img = Image::zeros(a.shape(0), a.shape(1), a.shape(2));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

std::vector<Image> images_from(const FloatArray& a) {
  if (a.ndim() != 4) throw DimensionError("expected an N x H x W x C image array");
  std::vector<Image> out;
  const auto per = static_cast<std::size_t>(a.shape(1) * a.shape(2) * a.shape(3));
  for (py::ssize_t n = 0; n < a.shape(0); ++n) {
    Image img = Image::zeros(a.shape(1), a.shape(2), a.shape(3));
    std::copy(a.data() + n * per, a.data() + (n + 1) * per, img.pixels.begin());
    out.push_back(std::move(img));
  }
  return out;
}

FloatArray images_to(const std::vector<Image>& images) {
  if (images.empty()) return FloatArray(std::vector<py::ssize_t>{0, 0, 0, 0});
  const auto& f = images.front();
  FloatArray out({images.size(), f.height, f.width, f.channels});
  auto* dst = out.mutable_data();
  for (const auto& img : images) dst = std::copy(img.pixels.begin(), img.pixels.end(), dst);
  return out;
}

std::vector<std::size_t> labels_from(const IndexArray& a) {
  std::vector<std::size_t> out(a.size());
  for (py::ssize_t i = 0; i < a.size(); ++i) {
    if (a.data()[i] < 0) throw IndexError("negative label");
    out[i] = static_cast<std::size_t>(a.data()[i]);
  }
  return out;
}

Tensor<float> matrix_from(const FloatArray& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array");
  return Tensor<float>({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))},
                       std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray matrix_to(const Tensor<float>& t) {
  FloatArray out({t.dim(0), t.dim(1)});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// Weights plus the configuration they were built for.
struct Model {
  RunConfig config;
  ModelParameters<float> params;
  OptimizerState state;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Contrastive reconstruction pre-training on tokenized images";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<IndexError>(m, "IndexError", PyExc_IndexError);
  py::register_exception<InsufficientDataError>(m, "InsufficientDataError", base.ptr());

  m.def(
      "make_synthetic",
      [](std::size_t images, std::size_t size, double noise, std::uint64_t seed, bool separable) {
        SyntheticOptions o;
        o.images = images;
        o.size = size;
        o.noise = noise;
        o.seed = seed;
        o.colour_by_class = separable;
        const auto corpus = make_synthetic_corpus(o);
        IndexArray labels(static_cast<py::ssize_t>(corpus.labels.size()));
        std::copy(corpus.labels.begin(), corpus.labels.end(), labels.mutable_data());
        return py::make_tuple(images_to(corpus.images), labels);
      },
      py::arg("images") = 512, py::arg("size") = 32, py::arg("noise") = 0.02, py::arg("seed") = 0,
      py::arg("separable") = false,
      "Procedural texture corpus as (N x H x W x 3 float32 images, int64 labels).");
  m.attr("synthetic_class_names") = synthetic_class_names();

  py::class_<Codebook>(m, "Codebook")
      .def_static(
          "fit",
          [](const FloatArray& images, std::size_t size, std::size_t patch,
             std::size_t patches_per_image, std::uint64_t seed) {
            TokenizerSettings s;
            s.codebook_size = size;
            s.patch = patch;
            s.patches_per_image = patches_per_image;
            const auto imgs = images_from(images);
            return fit_tokenizer(imgs, s, seed);
          },
          py::arg("images"), py::arg("size") = 64, py::arg("patch") = 4,
          py::arg("patches_per_image") = 16, py::arg("seed") = 0)
      .def_static("load", [](const std::string& path) { return load_codebook(path); })
      .def("save", [](const Codebook& c, const std::string& path) { save_codebook(path, c); })
      .def_property_readonly("size", &Codebook::size)
      .def_property_readonly("centroids",
                             [](const Codebook& c) {
                               FloatArray out({c.size(), c.dim()});
                               std::copy(c.centroids().begin(), c.centroids().end(),
                                         out.mutable_data());
                               return out;
                             })
      .def(
          "tokenize",
          [](const Codebook& c, const FloatArray& image) {
            const auto t = c.tokenize(image_from(image));
            py::array_t<int> out({t.grid_h, t.grid_w});
            std::copy(t.ids.begin(), t.ids.end(), out.mutable_data());
            return out;
          },
          "Token ids of one H x W x 3 image as a grid.");

  m.def("masked_count", &masked_count, py::arg("length"), py::arg("ratio"));
  m.def(
      "sample_mask",
      [](std::size_t length, double ratio, std::uint64_t seed) {
        const auto mask = sample_mask(length, ratio, seed);
        py::array_t<bool> out(static_cast<py::ssize_t>(length));
        std::copy(mask.flags.begin(), mask.flags.end(), out.mutable_data());
        return out;
      },
      py::arg("length"), py::arg("ratio") = kDefaultMaskRatio, py::arg("seed") = 0);

  m.def(
      "reconstruction_loss",
      [](const FloatArray& logits, const IndexArray& targets, const IndexArray& masked_rows) {
        Tape<float> tape(false);
        std::vector<int> t(targets.data(), targets.data() + targets.size());
        const auto rows = labels_from(masked_rows);
        return static_cast<double>(
            reconstruction_loss(tape, matrix_from(logits), std::span<const int>(t),
                                std::span<const std::size_t>(rows))
                .item());
      },
      py::arg("logits"), py::arg("targets"), py::arg("masked_rows"),
      "Mean cross-entropy over the listed rows of an L x K logit matrix.");
  m.def(
      "infonce_loss",
      [](const FloatArray& z, double temperature) {
        Tape<float> tape(false);
        return static_cast<double>(infonce_loss(tape, matrix_from(z), temperature).item());
      },
      py::arg("z"), py::arg("temperature") = 0.2,
      "NT-Xent over 2B unit rows; rows 2i and 2i+1 are positives.");

  m.def(
      "compute_metrics",
      [](const IndexArray& predictions, const IndexArray& labels, std::size_t num_classes) {
        const auto p = labels_from(predictions), l = labels_from(labels);
        return compute_metrics(p, l, num_classes).to_json();
      },
      py::arg("predictions"), py::arg("labels"), py::arg("num_classes"));

  m.def("default_config", [] {
    RunConfig c;
    c.validate();
    return c.to_json();
  });
  m.def(
      "resolve_config",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        auto c = parse_run_config(text);
        apply_overrides(c, overrides);
        return c.to_json();
      },
      py::arg("text"), py::arg("overrides") = std::vector<std::string>{},
      "Validated configuration document with overrides applied.");

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& config_json) {
             auto config = parse_run_config(config_json);
             auto params = init_parameters<float>(config.model, config.seed);
             auto state = OptimizerState::for_parameters(params);
             return Model{config, std::move(params), std::move(state)};
           }),
           py::arg("config_json"))
      .def_property_readonly("parameter_count",
                             [](const Model& mdl) { return mdl.params.scalar_count(); })
      .def_property_readonly("step", [](const Model& mdl) { return mdl.state.step; })
      .def(
          "pretrain",
          [](Model& mdl, const FloatArray& images, const Codebook& codebook) {
            const auto imgs = images_from(images);
            std::vector<py::dict> log;
            PretrainHooks hooks;
            hooks.on_step = [&](const StepRecord& r) {
              py::dict d;
              d["epoch"] = r.epoch;
              d["step"] = r.step;
              d["reconstruction"] = r.reconstruction;
              d["contrastive"] = r.contrastive;
              d["combined"] = r.combined;
              d["lr"] = r.lr;
              log.push_back(std::move(d));
            };
            pretrain(imgs, mdl.params, mdl.state, mdl.config.model, codebook, mdl.config.train,
                     mdl.config.augment, hooks);
            return log;
          },
          py::arg("images"), py::arg("codebook"),
          "Continues pre-training per the model's config; returns the step log.")
      .def(
          "features",
          [](const Model& mdl, const FloatArray& images, const Codebook& codebook) {
            const auto imgs = images_from(images);
            return matrix_to(extract_features(imgs, mdl.params, mdl.config.model, codebook));
          },
          py::arg("images"), py::arg("codebook"), "Pooled encoder features, N x embed_dim.")
      .def("save",
           [](const Model& mdl, const std::string& path) {
             save_checkpoint(path, mdl.params, mdl.state, mdl.config.to_json());
           })
      .def("load", [](Model& mdl, const std::string& path) {
        load_checkpoint(path, mdl.params, &mdl.state);
      });

  m.def(
      "linear_probe",
      [](const FloatArray& train_features, const IndexArray& train_labels,
         const FloatArray& test_features, const IndexArray& test_labels, std::size_t num_classes,
         std::size_t epochs, double lr, std::uint64_t seed) {
        ProbeConfig pc;
        pc.epochs = epochs;
        pc.lr = lr;
        pc.seed = seed;
        const auto tr = labels_from(train_labels), te = labels_from(test_labels);
        const auto r = linear_probe(matrix_from(train_features), tr, matrix_from(test_features),
                                    te, num_classes, pc);
        return py::make_tuple(r.test.to_json(), r.train.to_json());
      },
      py::arg("train_features"), py::arg("train_labels"), py::arg("test_features"),
      py::arg("test_labels"), py::arg("num_classes"), py::arg("epochs") = 50, py::arg("lr") = 1e-3,
      py::arg("seed") = 0, "Returns (test metrics JSON, train metrics JSON).");

  m.def(
      "gradcheck",
      [](std::size_t seeds, std::uint64_t seed) {
        GradCheckSuiteOptions o;
        o.seeds = seeds;
        o.base_seed = seed;
        std::vector<py::tuple> out;
        for (const auto& e : run_gradcheck_suite(o)) {
          out.push_back(py::make_tuple(e.name, e.max_rel_error, e.tolerance, e.passed));
        }
        return out;
      },
      py::arg("seeds") = 3, py::arg("seed") = 0,
      "(name, max relative error, tolerance, passed) per check.");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool in-process: (exit code, stdout, stderr).");
}
