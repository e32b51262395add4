#include <pybind11/complex.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mldip/baselines.hpp"
#include "mldip/eval.hpp"
#include "mldip/gating.hpp"
#include "mldip/harness.hpp"
#include "mldip/io.hpp"
#include "mldip/mldip.hpp"
#include "mldip/phantom.hpp"

namespace py = pybind11;
using namespace mldip;

namespace {

py::array_t<cfloat> series_to_numpy(const ImageSeries &s) {
  py::array_t<cfloat> a({s.frames, s.grid.n1, s.grid.n2, s.grid.n3});
  std::copy(s.data.begin(), s.data.end(), a.mutable_data());
  return a;
}

py::array_t<std::int32_t> labels_to_numpy(const LabelSeries &s) {
  py::array_t<std::int32_t> a({s.frames, s.grid.n1, s.grid.n2, s.grid.n3});
  std::copy(s.data.begin(), s.data.end(), a.mutable_data());
  return a;
}

ImageSeries series_from_numpy(py::array_t<cfloat, py::array::c_style | py::array::forcecast> a) {
  if (a.ndim() != 4) throw ContractError("expected a (T, n1, n2, n3) complex array");
  ImageSeries s(Grid{int(a.shape(1)), int(a.shape(2)), int(a.shape(3))}, int(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), s.data.begin());
  return s;
}

LabelSeries labels_from_numpy(
    py::array_t<std::int32_t, py::array::c_style | py::array::forcecast> a) {
  if (a.ndim() != 4) throw ContractError("expected a (T, n1, n2, n3) int32 array");
  LabelSeries s(Grid{int(a.shape(1)), int(a.shape(2)), int(a.shape(3))}, int(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), s.data.begin());
  return s;
}

py::dict run_result_to_dict(const harness::RunResult &r) {
  py::dict d;
  d["ok"] = r.ok;
  d["output_dir"] = r.output_dir;
  d["failed_stage"] = r.failed_stage;
  d["error"] = r.error;
  py::dict m;
  for (const auto &[k, v] : r.metrics) m[py::str(k)] = v;
  d["metrics"] = m;
  return d;
}

}  // namespace

PYBIND11_MODULE(_mldip, m) {
  m.doc() = "Simulation and ML-DIP reconstruction of real-time volumetric cardiac MRI";

  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<InsufficientDataError>(m, "InsufficientDataError", PyExc_RuntimeError);
  py::register_exception<model::DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);

  py::class_<Grid>(m, "Grid")
      .def(py::init<int, int, int>(), py::arg("n1"), py::arg("n2"), py::arg("n3"))
      .def_readwrite("n1", &Grid::n1)
      .def_readwrite("n2", &Grid::n2)
      .def_readwrite("n3", &Grid::n3)
      .def("voxels", &Grid::voxels)
      .def("__repr__", [](const Grid &g) {
        return "Grid(" + std::to_string(g.n1) + ", " + std::to_string(g.n2) + ", " +
               std::to_string(g.n3) + ")";
      });

  py::class_<phantom::PhantomConfig>(m, "PhantomConfig")
      .def(py::init<>())
      .def_readwrite("grid", &phantom::PhantomConfig::grid)
      .def_readwrite("voxel_size_mm", &phantom::PhantomConfig::voxel_size_mm)
      .def_readwrite("frames_per_base_cycle", &phantom::PhantomConfig::frames_per_base_cycle)
      .def_readwrite("n_resp_cycles", &phantom::PhantomConfig::n_resp_cycles)
      .def_readwrite("n_cardiac_beats", &phantom::PhantomConfig::n_cardiac_beats)
      .def_readwrite("pvc_per_resp_cycle", &phantom::PhantomConfig::pvc_per_resp_cycle)
      .def_readwrite("repeat_factor", &phantom::PhantomConfig::repeat_factor)
      .def_readwrite("contrast_drift_amplitude",
                     &phantom::PhantomConfig::contrast_drift_amplitude)
      .def_readwrite("seed", &phantom::PhantomConfig::seed)
      .def("total_frames", &phantom::PhantomConfig::total_frames);

  py::enum_<model::TrainMode>(m, "TrainMode")
      .value("FULL", model::TrainMode::Full)
      .value("FIXED_TEMPLATE", model::TrainMode::FixedTemplate)
      .value("MANIFOLD_ONLY", model::TrainMode::ManifoldOnly);

  py::class_<model::ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("L1", &model::ModelConfig::L1)
      .def_readwrite("L2", &model::ModelConfig::L2)
      .def_readwrite("K", &model::ModelConfig::K)
      .def_readwrite("conv_decoder_channels", &model::ModelConfig::conv_decoder_channels)
      .def_readwrite("unet_channels", &model::ModelConfig::unet_channels)
      .def_readwrite("mlp_flow_widths", &model::ModelConfig::mlp_flow_widths)
      .def_readwrite("mlp_image_widths", &model::ModelConfig::mlp_image_widths)
      .def_readwrite("lambda_smooth", &model::ModelConfig::lambda_smooth)
      .def_readwrite("iterations", &model::ModelConfig::iterations)
      .def_readwrite("batch_frames", &model::ModelConfig::batch_frames)
      .def_readwrite("lr_initial", &model::ModelConfig::lr_initial)
      .def_readwrite("lr_final", &model::ModelConfig::lr_final)
      .def_readwrite("seed", &model::ModelConfig::seed)
      .def_readwrite("mode", &model::ModelConfig::mode)
      .def("validate", &model::ModelConfig::validate)
      .def_static("desk_default", &model::ModelConfig::desk_default)
      .def_static("paper_scale", &model::ModelConfig::paper_scale);

  py::class_<harness::AcquisitionConfig>(m, "AcquisitionConfig")
      .def(py::init<>())
      .def_readwrite("n_coils", &harness::AcquisitionConfig::n_coils)
      .def_readwrite("n_readouts", &harness::AcquisitionConfig::n_readouts)
      .def_readwrite("noise_sigma", &harness::AcquisitionConfig::noise_sigma);

  py::class_<harness::GatingConfig>(m, "GatingConfig")
      .def(py::init<>())
      .def_readwrite("frame_ms", &harness::GatingConfig::frame_ms);

  py::class_<harness::PreprocessConfig>(m, "PreprocessConfig")
      .def(py::init<>())
      .def_readwrite("virtual_coils", &harness::PreprocessConfig::virtual_coils);

  py::class_<harness::BaselinesConfig>(m, "BaselinesConfig")
      .def(py::init<>())
      .def_readwrite("zero_filled", &harness::BaselinesConfig::zero_filled)
      .def_readwrite("fixed_template", &harness::BaselinesConfig::fixed_template)
      .def_readwrite("binned", &harness::BaselinesConfig::binned)
      .def_readwrite("n_card", &harness::BaselinesConfig::n_card)
      .def_readwrite("n_resp", &harness::BaselinesConfig::n_resp)
      .def_readwrite("reject_threshold", &harness::BaselinesConfig::reject_threshold)
      .def_readwrite("lambda_t", &harness::BaselinesConfig::lambda_t)
      .def_readwrite("lambda_s", &harness::BaselinesConfig::lambda_s)
      .def_readwrite("cs_iterations", &harness::BaselinesConfig::cs_iterations);

  py::class_<harness::EvalConfig>(m, "EvalConfig")
      .def(py::init<>())
      .def_readwrite("window_start", &harness::EvalConfig::window_start)
      .def_readwrite("window_frames", &harness::EvalConfig::window_frames);

  py::class_<harness::ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init<>())
      .def_readwrite("phantom", &harness::ExperimentConfig::phantom)
      .def_readwrite("acquisition", &harness::ExperimentConfig::acquisition)
      .def_readwrite("gating", &harness::ExperimentConfig::gating)
      .def_readwrite("preprocess", &harness::ExperimentConfig::preprocess)
      .def_readwrite("model", &harness::ExperimentConfig::model)
      .def_readwrite("baselines", &harness::ExperimentConfig::baselines)
      .def_readwrite("eval", &harness::ExperimentConfig::eval)
      .def_readwrite("output_dir", &harness::ExperimentConfig::output_dir)
      .def_readwrite("seed", &harness::ExperimentConfig::seed)
      .def("validate", &harness::ExperimentConfig::validate)
      .def_static("desk_default", &harness::ExperimentConfig::desk_default)
      .def_static("paper_scale", &harness::ExperimentConfig::paper_scale);

  m.def("parse_config", &harness::parse_config, py::arg("text"));
  m.def("load_config", &harness::load_config, py::arg("path"));
  m.def("config_echo", &harness::config_echo, py::arg("cfg"));

  m.def(
      "generate_phantom",
      [](const phantom::PhantomConfig &cfg) {
        auto s = phantom::generate_phantom_series(cfg);
        py::dict sched;
        sched["cardiac_phase"] = s.schedule.cardiac_phase;
        sched["resp_phase"] = s.schedule.resp_phase;
        sched["beat_index"] = s.schedule.beat_index;
        sched["is_pvc"] = std::vector<int>(s.schedule.is_pvc.begin(), s.schedule.is_pvc.end());
        sched["beat_boundaries"] = s.schedule.beat_boundaries();
        return py::make_tuple(series_to_numpy(s.images), labels_to_numpy(s.labels), sched);
      },
      py::arg("cfg"),
      "Returns (images[T,n1,n2,n3] complex64, labels[T,n1,n2,n3] int32, schedule dict)");

  m.def(
      "psnr",
      [](py::array_t<cfloat, py::array::c_style | py::array::forcecast> ref,
         py::array_t<cfloat, py::array::c_style | py::array::forcecast> test) {
        return eval::psnr(series_from_numpy(ref), series_from_numpy(test));
      },
      py::arg("ref"), py::arg("test"));

  m.def(
      "ssim",
      [](py::array_t<cfloat, py::array::c_style | py::array::forcecast> ref,
         py::array_t<cfloat, py::array::c_style | py::array::forcecast> test) {
        return eval::ssim(series_from_numpy(ref), series_from_numpy(test));
      },
      py::arg("ref"), py::arg("test"));

  m.def(
      "volume_curve",
      [](py::array_t<cfloat, py::array::c_style | py::array::forcecast> series,
         py::array_t<std::int32_t, py::array::c_style | py::array::forcecast> labels,
         float voxel_size_mm) {
        return eval::volume_curve(series_from_numpy(series), labels_from_numpy(labels),
                                  voxel_size_mm);
      },
      py::arg("series"), py::arg("labels"), py::arg("voxel_size_mm") = 2.0f);

  m.def(
      "xt_profile",
      [](py::array_t<cfloat, py::array::c_style | py::array::forcecast> series, int axis,
         int fixed_a, int fixed_b) {
        auto p = eval::xt_profile(series_from_numpy(series), eval::LineSpec{axis, fixed_a, fixed_b});
        py::array_t<float> a({p.length, p.frames});
        std::copy(p.values.begin(), p.values.end(), a.mutable_data());
        return a;
      },
      py::arg("series"), py::arg("axis"), py::arg("fixed_a"), py::arg("fixed_b"));

  m.def("run_experiment",
        [](const harness::ExperimentConfig &cfg) { return run_result_to_dict(harness::run_experiment(cfg)); },
        py::arg("cfg"));

  m.def(
      "sweep_scan_time",
      [](const harness::ExperimentConfig &cfg, const std::vector<int> &t_list) {
        py::list out;
        for (const auto &r : harness::sweep_scan_time(cfg, t_list)) {
          py::dict d;
          d["frames"] = r.frames;
          d["ok"] = r.ok;
          d["psnr"] = r.psnr;
          d["ssim"] = r.ssim;
          d["error"] = r.error;
          out.append(d);
        }
        return out;
      },
      py::arg("cfg"), py::arg("t_list"));

  m.def(
      "train",
      [](const std::string &ks_path, const std::string &maps_path, const std::string &latent_path,
         const model::ModelConfig &cfg, const std::string &out_path) {
        auto ks = io::read_kss(ks_path);
        auto maps = io::read_coil_maps(maps_path);
        auto latent = gating::read_latent(latent_path);
        auto trained = model::train(ks, maps, latent, cfg);
        model::save_model(trained, out_path);
        py::dict d;
        d["final_loss"] = trained.loss_trace.back();
        d["final_dc"] = trained.dc_trace.back();
        d["parameter_count"] = trained.parameter_count();
        return d;
      },
      py::arg("kspace_path"), py::arg("maps_path"), py::arg("latent_path"), py::arg("cfg"),
      py::arg("out_path"), "File-based scan-specific training; writes an MDL1 checkpoint");

  m.def(
      "infer",
      [](const std::string &model_path, int tau1, int tau2) {
        auto trained = model::load_model(model_path);
        if (tau2 <= 0) tau2 = trained.frames;
        return series_to_numpy(model::infer(trained, tau1, tau2));
      },
      py::arg("model_path"), py::arg("tau1") = 1, py::arg("tau2") = 0);

  m.def(
      "zero_filled",
      [](const std::string &ks_path, const std::string &maps_path) {
        return series_to_numpy(
            baselines::zero_filled_recon(io::read_kss(ks_path), io::read_coil_maps(maps_path)));
      },
      py::arg("kspace_path"), py::arg("maps_path"));

  m.def("read_dvs",
        [](const std::string &path) { return series_to_numpy(io::read_dvs_complex(path)); },
        py::arg("path"));
  m.def("read_dvs_labels",
        [](const std::string &path) { return labels_to_numpy(io::read_dvs_labels(path)); },
        py::arg("path"));
  m.def(
      "write_dvs",
      [](const std::string &path,
         py::array_t<cfloat, py::array::c_style | py::array::forcecast> a) {
        io::write_dvs(series_from_numpy(a), path);
      },
      py::arg("path"), py::arg("series"));
  m.def("sha256_file", &io::sha256_file, py::arg("path"));
}
