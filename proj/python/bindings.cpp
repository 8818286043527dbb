#include "stiffnet/crossformer.hpp"
#include "stiffnet/dataset.hpp"
#include "stiffnet/kan.hpp"
#include "stiffnet/signal.hpp"
#include "stiffnet/train.hpp"

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>

namespace py = pybind11;
using namespace stiffnet;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

ad::Tensor to_tensor(const Array& a) {
  ad::Shape shape(a.shape(), a.shape() + a.ndim());
  return ad::Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const ad::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<double> out(shape);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

py::array_t<double> to_array(const std::vector<double>& v) {
  py::array_t<double> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

// Model plus the log of the run that produced it.
struct PyModel {
  std::shared_ptr<model::CrossformerModel> model;
  train::RunLog log;

  py::array_t<double> predict(const Array& x) const {
    ad::Tensor t = to_tensor(x);
    const bool single = t.ndim() == 2;
    if (single) t.shape.insert(t.shape.begin(), 1);
    ad::Tensor y = model->predict(t);
    if (single) y.shape.erase(y.shape.begin());
    return to_array(y);
  }
};

py::list run_log_rows(const train::RunLog& log) {
  py::list rows;
  for (const auto& e : log.epochs) {
    py::dict d;
    d["epoch"] = e.epoch;
    d["train_loss"] = e.train_loss;
    d["val_loss"] = e.val_loss;
    d["clamp_rate"] = e.clamp_rate;
    d["wall_ms"] = e.wall_ms;
    rows.append(d);
  }
  return rows;
}

py::dict report_dict(const train::EvalReport& r) {
  py::dict d;
  d["mean_nrmse"] = r.mean_nrmse;
  d["record_indices"] = r.record_indices;
  d["nrmse"] = r.nrmse;
  d["loss"] = r.loss;
  return d;
}

}  // namespace

PYBIND11_MODULE(_stiffnet, m) {
  m.doc() = "Synthetic comparator-ADC data and a Crossformer with a KAN output head";

  py::register_exception<ad::ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<data::DatasetFormatError>(m, "DatasetFormatError", PyExc_IOError);
  py::register_exception<model::CheckpointError>(m, "CheckpointError", PyExc_IOError);
  py::register_exception<train::TrainingError>(m, "TrainingError", PyExc_RuntimeError);

  // ---- signals
  m.def(
      "prbs",
      [](int order, std::uint64_t seed, std::size_t n_bits) {
        const auto bits = signal::gen_prbs({order, seed, n_bits});
        py::array_t<std::uint8_t> out(static_cast<py::ssize_t>(bits.size()));
        std::copy(bits.begin(), bits.end(), out.mutable_data());
        return out;
      },
      py::arg("order") = 7, py::arg("seed") = 1, py::arg("n_bits") = 127);
  m.def(
      "channel_filter",
      [](const Array& x, double dt, double f_cut) {
        return to_array(signal::channel_filter(std::span<const double>(x.data(), x.size()), dt, f_cut));
      },
      py::arg("samples"), py::arg("dt"), py::arg("f_cut"));
  m.def("channel_step_response", &signal::channel_step_response, py::arg("t"), py::arg("f_cut"));
  m.def(
      "bspline_basis",
      [](double x, std::size_t n_intervals, std::size_t order, double lo, double hi) {
        return to_array(kan::bspline_basis(x, kan::BSplineGrid{lo, hi, n_intervals, order}));
      },
      py::arg("x"), py::arg("n_intervals") = 5, py::arg("order") = 3, py::arg("lo") = -1.0, py::arg("hi") = 1.0);

  // ---- dataset
  py::class_<data::Dataset>(m, "Dataset")
      .def_property_readonly("size", &data::Dataset::size)
      .def("__len__", &data::Dataset::size)
      .def_readonly("n_samples", &data::Dataset::n_samples)
      .def_readonly("master_seed", &data::Dataset::master_seed)
      .def_readonly("split_seed", &data::Dataset::split_seed)
      .def(
          "values",
          [](const data::Dataset& d, std::size_t i) {
            const auto& r = d.records.at(i);
            return to_array(ad::Tensor({data::kRows, r.n_samples}, r.values));
          },
          py::arg("index"), "Physical values [5, T]: vin_p, vin_m, clk, out1, out0.")
      .def(
          "inputs", [](const data::Dataset& d, std::size_t i) { return to_array(data::normalized_inputs(d.records.at(i))); },
          py::arg("index"))
      .def(
          "targets",
          [](const data::Dataset& d, std::size_t i) { return to_array(data::normalized_targets(d.records.at(i))); },
          py::arg("index"))
      .def(
          "indices", [](const data::Dataset& d, const std::string& s) { return d.indices(data::parse_split(s)); },
          py::arg("split"))
      .def("split",
           [](data::Dataset& d, std::array<double, 3> fractions, std::uint64_t seed) {
             data::split_dataset(d, fractions, seed);
           },
           py::arg("fractions") = std::array<double, 3>{0.70, 0.15, 0.15}, py::arg("seed") = 0)
      .def("save", [](const data::Dataset& d, const std::filesystem::path& p) { data::save(d, p); })
      .def("to_bytes", [](const data::Dataset& d) {
        const auto b = data::serialize(d);
        return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
      });
  m.def(
      "build_dataset",
      [](std::size_t n, std::uint64_t seed, std::uint64_t split_seed, unsigned threads) {
        py::gil_scoped_release release;
        data::Dataset d = data::build_dataset(n, seed, {}, threads);
        data::split_dataset(d, {0.70, 0.15, 0.15}, split_seed);
        return d;
      },
      py::arg("n_records"), py::arg("seed") = 1, py::arg("split_seed") = 0, py::arg("threads") = 1);
  m.def("load_dataset", [](const std::filesystem::path& p) { return data::load(p); }, py::arg("path"));

  // ---- loss and metric
  m.def(
      "loss", [](const Array& y, const Array& yh) { return train::mse_loss(to_tensor(y), to_tensor(yh)); },
      py::arg("y"), py::arg("y_hat"));
  m.def(
      "nrmse_percent",
      [](const Array& y, const Array& yh) { return train::nrmse_percent(to_tensor(y), to_tensor(yh)); },
      py::arg("y"), py::arg("y_hat"));

  // ---- training
  py::class_<train::TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("lr", &train::TrainConfig::lr)
      .def_property(
          "optimizer", [](const train::TrainConfig& c) { return std::string(train::to_string(c.optimizer)); },
          [](train::TrainConfig& c, const std::string& s) { c.optimizer = train::parse_optimizer(s); })
      .def_property(
          "head", [](const train::TrainConfig& c) { return std::string(kan::to_string(c.head)); },
          [](train::TrainConfig& c, const std::string& s) { c.head = kan::parse_head(s); })
      .def_readwrite("d_model", &train::TrainConfig::d_model)
      .def_readwrite("kan_neurons", &train::TrainConfig::kan_neurons)
      .def_readwrite("kan_grid", &train::TrainConfig::kan_grid)
      .def_readwrite("batch_size", &train::TrainConfig::batch_size)
      .def_readwrite("max_epochs", &train::TrainConfig::max_epochs)
      .def_readwrite("patience", &train::TrainConfig::patience)
      .def_readwrite("seed", &train::TrainConfig::seed)
      .def_readwrite("clip_norm", &train::TrainConfig::clip_norm)
      .def_readwrite("seg_len", &train::TrainConfig::seg_len)
      .def_readwrite("e_levels", &train::TrainConfig::e_levels)
      .def_readwrite("n_heads", &train::TrainConfig::n_heads)
      .def_readwrite("n_routers", &train::TrainConfig::n_routers)
      .def_readwrite("d_ff", &train::TrainConfig::d_ff)
      .def("validate", &train::TrainConfig::validate);

  py::class_<PyModel>(m, "Model")
      .def_property_readonly("parameter_count", [](const PyModel& p) { return p.model->parameter_count(); })
      .def_property_readonly("head", [](const PyModel& p) { return std::string(kan::to_string(p.model->config().head)); })
      .def_property_readonly("best_epoch", [](const PyModel& p) { return p.log.best_epoch; })
      .def_property_readonly("early_stopped", [](const PyModel& p) { return p.log.early_stopped; })
      .def_property_readonly("history", [](const PyModel& p) { return run_log_rows(p.log); })
      .def("predict", &PyModel::predict, py::arg("x"), "Normalized inputs [3, T] or [B, 3, T] to outputs [.., 2, T].")
      .def(
          "evaluate",
          [](const PyModel& p, const data::Dataset& d, const std::string& split) {
            return report_dict(train::evaluate(*p.model, d, data::parse_split(split)));
          },
          py::arg("dataset"), py::arg("split") = "test")
      .def("save", [](const PyModel& p, const std::filesystem::path& path) { model::save_checkpoint(*p.model, path); });

  m.def(
      "build_model",
      [](const train::TrainConfig& c, std::size_t seq_len) {
        c.validate();
        return PyModel{std::make_shared<model::CrossformerModel>(c.model_config(seq_len)), {}};
      },
      py::arg("config"), py::arg("seq_len") = 500);
  m.def(
      "load_model",
      [](const std::filesystem::path& p) { return PyModel{std::shared_ptr<model::CrossformerModel>(model::load_checkpoint(p)), {}}; },
      py::arg("path"));
  m.def(
      "train",
      [](const data::Dataset& d, const train::TrainConfig& c) {
        py::gil_scoped_release release;
        auto t = train::train(d, c);
        return PyModel{std::shared_ptr<model::CrossformerModel>(std::move(t.model)), std::move(t.log)};
      },
      py::arg("dataset"), py::arg("config"));
}
