// Python bindings. Arrays cross the boundary as numpy float64 (losses) or
// float32 (images, masks); tensors never leak out.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "seqmask/cli.hpp"
#include "seqmask/errors.hpp"
#include "seqmask/eval.hpp"
#include "seqmask/losses.hpp"
#include "seqmask/training.hpp"

namespace py = pybind11;
using namespace seqmask;

namespace {

template <typename T>
torch::Tensor to_tensor(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  auto dtype = std::is_same_v<T, double> ? torch::kFloat64 : torch::kFloat32;
  return torch::from_blob(const_cast<T*>(a.data()), shape, dtype).clone();
}

template <typename T>
py::array_t<T> to_array(const torch::Tensor& t) {
  auto dtype = std::is_same_v<T, double> ? torch::kFloat64 : torch::kFloat32;
  auto c = t.detach().to(dtype).contiguous();
  std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
  py::array_t<T> out(shape);
  std::memcpy(out.mutable_data(), c.template data_ptr<T>(), sizeof(T) * c.numel());
  return out;
}

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::dict breakdown_dict(const losses::LossBreakdown& b) {
  py::dict d;
  d["contrastive"] = b.contrastive;
  d["budget"] = b.budget;
  d["overlap"] = b.overlap;
  d["consistency"] = b.consistency;
  d["adversary_objective"] = b.adversary_objective;
  d["encoder_objective"] = b.encoder_objective;
  return d;
}

py::dict record_dict(const training::StepRecord& r) {
  py::dict d = breakdown_dict(r.breakdown);
  d["step"] = r.step;
  d["mask_mean"] = r.mask_mean;
  d["mask_pairwise_overlap"] = r.mask_pairwise_overlap;
  d["lr_encoder"] = r.lr_encoder;
  d["lr_masker"] = r.lr_masker;
  d["slot_means"] = r.slot_means;
  return d;
}

py::list dataset_list(const data::Dataset& ds) {
  py::list out;
  for (const auto& item : ds) {
    py::list gt;
    for (const auto& m : item.gt_masks) gt.append(to_array<float>(m.to(torch::kFloat32)));
    out.append(py::make_tuple(to_array<float>(item.pixels), item.label, gt));
  }
  return out;
}

struct Trained {
  TrainConfig config;
  models::EncoderState encoder;
  models::MaskerState masker;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Sequential adversarial masking for contrastive pretraining";

  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("build_id", [] { return std::string(cli::build_id()); });

  m.def("nt_xent", [](const F64& za, const F64& zb, double tau) {
    return losses::nt_xent_masked(to_tensor(za), to_tensor(zb), tau).item<double>();
  }, py::arg("za"), py::arg("zb"), py::arg("tau"));
  m.def("budget_penalty", [](const F64& mask, double b) {
    return losses::budget_penalty(to_tensor(mask), b).item<double>();
  }, py::arg("mask"), py::arg("b"));
  m.def("overlap_penalty", [](const F64& mask, const std::vector<F64>& prior) {
    std::vector<torch::Tensor> p;
    for (const auto& a : prior) p.push_back(to_tensor(a));
    return losses::overlap_penalty(to_tensor(mask), p).item<double>();
  }, py::arg("mask"), py::arg("prior"));
  m.def("consistency_penalty", [](const F64& mask) {
    return losses::consistency_penalty(to_tensor(mask)).item<double>();
  }, py::arg("mask"));
  m.def("adversary_objective",
        [](const std::vector<std::tuple<double, double, double, double>>& per_mask, double budget_weight,
           double overlap_weight, double consistency_weight) {
          std::vector<losses::PenaltyTerms> terms;
          for (auto [c, b, o, s] : per_mask) terms.push_back({c, b, o, s});
          losses::PenaltyWeights w;
          w.budget_weight = budget_weight;
          w.overlap_weight = overlap_weight;
          w.consistency_weight = consistency_weight;
          return breakdown_dict(losses::adversary_objective(terms, w));
        },
        py::arg("per_mask"), py::arg("budget_weight") = 1.0, py::arg("overlap_weight") = 1e-4,
        py::arg("consistency_weight") = 1e-4);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_static("parse", &TrainConfig::parse)
      .def_static("load", [](const std::string& path) { return TrainConfig::load(path); })
      .def("set", [](TrainConfig& c, const std::string& key, py::object value) {
        set_config_value(c, key, py::str(value).cast<std::string>());
        c.sync();
        c.validate();
      })
      .def("to_text", &TrainConfig::to_text)
      .def("hash", &TrainConfig::hash)
      .def_readonly("seed", &TrainConfig::seed)
      .def_readonly("n_masks", &TrainConfig::n_masks)
      .def_readonly("epochs", &TrainConfig::epochs)
      .def_readonly("batch_size", &TrainConfig::batch_size);

  m.def("synthetic_shapes", [](uint64_t seed, int64_t count, int64_t size, int64_t classes) {
    return dataset_list(data::synthetic_shapes(seed, count, size, classes));
  }, py::arg("seed"), py::arg("count"), py::arg("size") = 64, py::arg("classes") = 4);

  py::class_<Trained>(m, "Model")
      .def_readonly("config", &Trained::config)
      .def("masks", [](Trained& t, const F32& images) {
        torch::NoGradGuard guard;
        t.masker.net->eval();
        auto masks = models::generate_mask_sequence(t.masker, to_tensor(images));
        py::list out;
        for (const auto& mk : masks) out.append(to_array<float>(mk));
        return out;
      }, py::arg("images"))
      .def("encode", [](Trained& t, const F32& images) {
        return to_array<float>(models::encode(t.encoder, to_tensor(images)));
      }, py::arg("images"))
      .def("save", [](const Trained& t, const std::string& path) {
        training::save_checkpoint(path, t.encoder, t.masker, t.config, 0);
      })
      .def("linear_probe", [](Trained& t) {
        auto train = training::make_train_dataset(t.config);
        auto test = training::make_test_dataset(t.config);
        auto pc = eval::ProbeConfig::linear_default();
        pc.seed = t.config.seed;
        pc.lr = t.config.probe.lr;
        pc.batch_size = t.config.probe.batch_size;
        pc.epochs = t.config.probe.epochs;
        pc.weight_decay = t.config.probe.weight_decay;
        pc.momentum = t.config.probe.momentum;
        return eval::linear_probe(t.encoder, train, test, pc);
      });

  m.def("load_checkpoint", [](const std::string& path) {
    auto ck = training::load_checkpoint(path);
    return Trained{ck.config, ck.encoder, ck.masker};
  }, py::arg("path"));

  m.def("pretrain", [](const TrainConfig& cfg) {
    auto train = training::make_train_dataset(cfg);
    auto r = [&] {
      py::gil_scoped_release release;
      return training::pretrain(cfg, train);
    }();
    py::list records;
    for (const auto& rec : r.records) records.append(record_dict(rec));
    return py::make_tuple(Trained{cfg, r.encoder, r.masker}, records);
  }, py::arg("config"));

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release release;
      code = cli::run(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"));
}
