#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "nt/checkpoint.hpp"
#include "nt/cli.hpp"
#include "nt/experiments.hpp"
#include "nt/fusion.hpp"
#include "nt/pruning.hpp"
#include "nt/report.hpp"
#include "nt/training.hpp"

namespace py = pybind11;
using namespace nt;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<int, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::span<const float>(a.data(), static_cast<std::size_t>(a.size())));
}

py::array_t<float> to_numpy(const Tensor& t) {
  py::array_t<float> out(t.shape());
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

Dataset to_dataset(const FloatArray& x, const IntArray& y, std::size_t classes) {
  Dataset ds;
  ds.features = to_tensor(x);
  ds.labels.assign(y.data(), y.data() + y.size());
  ds.num_classes = classes;
  if (ds.num_classes == 0) {
    for (int v : ds.labels) ds.num_classes = std::max<std::size_t>(ds.num_classes, static_cast<std::size_t>(v) + 1);
  }
  ds.validate();
  return ds;
}

std::vector<Network> as_members(const py::sequence& seq) {
  std::vector<Network> out;
  for (const auto& item : seq) out.push_back(item.cast<Network>());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Ensemble fusion by neuron transplantation";

  static py::exception<Error> error(m, "NtError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, e.what());
    }
  });

  py::class_<Network>(m, "Network")
      .def_static(
          "mlp",
          [](std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t classes, std::uint64_t seed) {
            std::vector<LayerSpec> specs;
            std::size_t cur = input_dim;
            for (std::size_t w : hidden) {
              specs.push_back(LayerSpec::linear(cur, w));
              specs.push_back(LayerSpec::relu());
              cur = w;
            }
            specs.push_back(LayerSpec::linear(cur, classes));
            RngStream rng(seed, "init");
            return Network::initialized({input_dim}, specs, rng);
          },
          py::arg("input_dim"), py::arg("hidden"), py::arg("classes"), py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& p) { return load_checkpoint(p); })
      .def("save", [](const Network& n, const std::filesystem::path& p) { save_checkpoint(n, p); })
      .def("predict", [](const Network& n, const FloatArray& x) { return to_numpy(n.predict(to_tensor(x))); })
      .def_property_readonly("arch_id", &Network::arch_id)
      .def_property_readonly("input_shape", &Network::input_shape)
      .def_property_readonly("num_classes", &Network::num_classes)
      .def_property_readonly("parameter_count", &Network::parameter_count)
      .def_property_readonly("layers",
                             [](const Network& n) {
                               std::vector<std::string> out;
                               for (const auto& s : n.specs()) out.push_back(s.describe());
                               return out;
                             })
      .def("weight", [](const Network& n, std::size_t i) { return to_numpy(n.layer(i).weight); })
      .def("bias", [](const Network& n, std::size_t i) { return to_numpy(n.layer(i).bias); })
      .def("identical", &Network::identical)
      .def("__repr__", [](const Network& n) {
        std::ostringstream os;
        os << "Network(";
        const auto specs = n.specs();
        for (std::size_t i = 0; i < specs.size(); ++i) os << (i ? ", " : "") << specs[i].describe();
        os << ")";
        return os.str();
      });

  m.def("concat_fuse", [](const py::sequence& members) { return concat_fuse(as_members(members)); });
  m.def("vanilla_average", [](const py::sequence& members) { return vanilla_average(as_members(members)); });
  m.def("align_average", &align_average);
  m.def(
      "fuse",
      [](const py::sequence& members, const std::string& method, std::optional<double> sparsity) {
        FusionPlan plan;
        plan.method = fusion_method_from_string(method);
        plan.sparsity = sparsity;
        return fuse(as_members(members), plan);
      },
      py::arg("members"), py::arg("method") = "nt", py::arg("sparsity") = py::none());
  m.def("transplant_fraction", &transplant_fraction, py::arg("recipient"), py::arg("donor"), py::arg("p"),
        py::arg("donor_head") = false);
  m.def(
      "magnitude_prune",
      [](const Network& net, std::optional<double> sparsity, std::optional<std::vector<std::size_t>> keep_counts) {
        if (keep_counts) return magnitude_prune(net, KeepPolicy::with_keep_counts(*keep_counts));
        if (!sparsity) throw Error(ErrorKind::InvalidArg, "give sparsity or keep_counts");
        return magnitude_prune(net, KeepPolicy::with_sparsity(*sparsity));
      },
      py::arg("net"), py::arg("sparsity") = py::none(), py::arg("keep_counts") = py::none());

  m.def(
      "synth_blobs",
      [](std::size_t n, std::size_t classes, std::size_t dim, float spread, std::uint64_t seed,
         std::size_t centers_per_class) {
        const Dataset ds = synth_blobs(n, classes, dim, spread, seed, centers_per_class);
        py::array_t<int> y(static_cast<py::ssize_t>(ds.size()));
        std::copy(ds.labels.begin(), ds.labels.end(), y.mutable_data());
        return py::make_tuple(to_numpy(ds.features), y);
      },
      py::arg("n"), py::arg("classes"), py::arg("dim"), py::arg("spread") = 1.0f, py::arg("seed") = 0,
      py::arg("centers_per_class") = 1);

  m.def(
      "train",
      [](const Network& net, const FloatArray& x, const IntArray& y, const FloatArray& x_test, const IntArray& y_test,
         std::size_t epochs, float lr, float momentum, std::size_t batch_size, std::uint64_t seed) {
        const std::size_t classes = net.num_classes();
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.lr = lr;
        cfg.momentum = momentum;
        cfg.batch.batch_size = batch_size;
        cfg.batch.shuffle_seed = seed;
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(net, to_dataset(x, y, classes), to_dataset(x_test, y_test, classes), cfg);
        }
        py::list history;
        for (const auto& e : r.history.records) {
          history.append(py::dict(py::arg("epoch") = e.epoch, py::arg("train_loss") = e.train_loss,
                                  py::arg("test_loss") = e.test_loss, py::arg("test_accuracy") = e.test_accuracy));
        }
        return py::make_tuple(r.net, history);
      },
      py::arg("net"), py::arg("x"), py::arg("y"), py::arg("x_test"), py::arg("y_test"), py::arg("epochs") = 10,
      py::arg("lr") = 0.01f, py::arg("momentum") = 0.9f, py::arg("batch_size") = 32, py::arg("seed") = 0);

  m.def("evaluate", [](const Network& net, const FloatArray& x, const IntArray& y) {
    const Evaluation e = evaluate(net, to_dataset(x, y, net.num_classes()));
    return py::dict(py::arg("accuracy") = e.accuracy, py::arg("loss") = e.mean_loss);
  });

  m.def(
      "run_experiment",
      [](const std::string& spec_json, std::optional<std::string> out_dir) {
        const ExperimentSpec spec = ExperimentSpec::from_json(nlohmann::json::parse(spec_json));
        std::vector<RunReport> reports;
        {
          py::gil_scoped_release release;
          reports = run_experiment(spec);
        }
        if (out_dir) emit_report(reports, *out_dir);
        return render(reports, ReportFormat::Csv);
      },
      py::arg("spec_json"), py::arg("out_dir") = py::none(), "Runs an experiment and returns its CSV report.");

  m.def("cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli_dispatch(args, out, err);
    return py::make_tuple(code, out.str(), err.str());
  });
}
