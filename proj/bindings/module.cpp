#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ddaunet/inference.hpp"
#include "ddaunet/metrics.hpp"
#include "ddaunet/phantom.hpp"
#include "ddaunet/report.hpp"
#include "ddaunet/sampler.hpp"
#include "ddaunet/trainer.hpp"

namespace py = pybind11;
using namespace ddaunet;

namespace {

// Volumes cross the boundary as (nz, ny, nx) arrays, matching the x-fastest
// storage order.
py::array_t<float> volume_to_numpy(const VolumeGrid& g) {
  py::array_t<float> out({g.dims.nz, g.dims.ny, g.dims.nx});
  std::copy(g.voxels.begin(), g.voxels.end(), out.mutable_data());
  return out;
}

py::array_t<uint8_t> mask_to_numpy(const BinaryMask& m) {
  py::array_t<uint8_t> out({m.dims.nz, m.dims.ny, m.dims.nx});
  std::copy(m.voxels.begin(), m.voxels.end(), out.mutable_data());
  return out;
}

VolumeGrid volume_from_numpy(py::array_t<float, py::array::c_style | py::array::forcecast> a,
                             const std::array<double, 3>& spacing,
                             const std::array<double, 3>& origin) {
  if (a.ndim() != 3) throw ShapeError("expected a 3D array (z, y, x)");
  VolumeGrid g = make_volume({a.shape(2), a.shape(1), a.shape(0)},
                             {spacing[0], spacing[1], spacing[2]},
                             {origin[0], origin[1], origin[2]});
  std::copy(a.data(), a.data() + a.size(), g.voxels.begin());
  return g;
}

BinaryMask mask_from_numpy(py::array_t<uint8_t, py::array::c_style | py::array::forcecast> a,
                           const std::array<double, 3>& spacing,
                           const std::array<double, 3>& origin) {
  if (a.ndim() != 3) throw ShapeError("expected a 3D array (z, y, x)");
  BinaryMask m = make_mask({a.shape(2), a.shape(1), a.shape(0)},
                           {spacing[0], spacing[1], spacing[2]},
                           {origin[0], origin[1], origin[2]});
  std::copy(a.data(), a.data() + a.size(), m.voxels.begin());
  m.validate();
  return m;
}

py::dict metrics_to_dict(const SegmentationMetrics& m) {
  py::dict d;
  d["dsc"] = m.dsc;
  d["msd_mm"] = m.msd;
  d["hd95_mm"] = m.hd95;
  d["crd_mm"] = m.crd;
  d["cad_mm"] = m.cad;
  d["distance_degenerate"] = m.distance_degenerate;
  d["both_empty"] = m.both_empty;
  return d;
}

Vec3 to_vec3(const std::array<double, 3>& a) { return {a[0], a[1], a[2]}; }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "3D esophageal GTV segmentation laboratory (DDAUnet family)";

  py::register_exception<Error>(m, "DdaunetError");

  py::class_<VolumeGrid>(m, "VolumeGrid")
      .def_property_readonly("shape",
                             [](const VolumeGrid& g) {
                               return py::make_tuple(g.dims.nz, g.dims.ny, g.dims.nx);
                             })
      .def_property_readonly("spacing",
                             [](const VolumeGrid& g) {
                               return py::make_tuple(g.spacing.x, g.spacing.y, g.spacing.z);
                             })
      .def_property_readonly("origin",
                             [](const VolumeGrid& g) {
                               return py::make_tuple(g.origin.x, g.origin.y, g.origin.z);
                             })
      .def("to_numpy", &volume_to_numpy);

  py::class_<BinaryMask>(m, "BinaryMask")
      .def_property_readonly("shape",
                             [](const BinaryMask& g) {
                               return py::make_tuple(g.dims.nz, g.dims.ny, g.dims.nx);
                             })
      .def_property_readonly("spacing",
                             [](const BinaryMask& g) {
                               return py::make_tuple(g.spacing.x, g.spacing.y, g.spacing.z);
                             })
      .def("foreground_count", &BinaryMask::foreground_count)
      .def("to_numpy", &mask_to_numpy);

  m.def("volume_from_numpy", &volume_from_numpy, py::arg("array"),
        py::arg("spacing") = std::array<double, 3>{1, 1, 1},
        py::arg("origin") = std::array<double, 3>{0, 0, 0});
  m.def("mask_from_numpy", &mask_from_numpy, py::arg("array"),
        py::arg("spacing") = std::array<double, 3>{1, 1, 1},
        py::arg("origin") = std::array<double, 3>{0, 0, 0});

  m.def("load_volume", &load_volume, py::arg("path"));
  m.def("load_mask", &load_mask, py::arg("path"));
  m.def("save_volume", &save_volume, py::arg("volume"), py::arg("path"));
  m.def("save_mask", &save_mask, py::arg("mask"), py::arg("path"));
  m.def(
      "resample_volume",
      [](const VolumeGrid& g, const std::array<double, 3>& spacing) {
        return resample_volume(g, to_vec3(spacing));
      },
      py::arg("volume"), py::arg("target_spacing"));
  m.def(
      "resample_mask",
      [](const BinaryMask& g, const std::array<double, 3>& spacing) {
        return resample_mask(g, to_vec3(spacing));
      },
      py::arg("mask"), py::arg("target_spacing"));
  m.def("normalize_hu_window", &normalize_hu_window, py::arg("volume"));

  // phantoms
  py::class_<PhantomSpec>(m, "PhantomSpec")
      .def(py::init<>())
      .def_readwrite("tumor_center_z", &PhantomSpec::tumor_center_z)
      .def_readwrite("tumor_length_mm", &PhantomSpec::tumor_length_mm)
      .def_readwrite("tumor_radius_mm", &PhantomSpec::tumor_radius_mm)
      .def_readwrite("esophagus_radius_mm", &PhantomSpec::esophagus_radius_mm)
      .def_readwrite("curvature_amplitude_mm", &PhantomSpec::curvature_amplitude_mm)
      .def_readwrite("has_air_pocket", &PhantomSpec::has_air_pocket)
      .def_readwrite("has_feeding_tube", &PhantomSpec::has_feeding_tube)
      .def_readwrite("tags", &PhantomSpec::tags)
      .def_readwrite("noise_hu", &PhantomSpec::noise_hu)
      .def_readwrite("seed", &PhantomSpec::seed)
      .def(
          "set_dims",
          [](PhantomSpec& s, int64_t nx, int64_t ny, int64_t nz) {
            s.dims = {nx, ny, nz};
          },
          py::arg("nx"), py::arg("ny"), py::arg("nz"))
      .def("set_spacing", [](PhantomSpec& s, double x, double y, double z) {
        s.spacing = {x, y, z};
      });

  py::class_<PhantomCase>(m, "PhantomCase")
      .def_readonly("volume", &PhantomCase::volume)
      .def_readonly("gtv", &PhantomCase::gtv);
  m.def("generate_phantom", &generate_phantom, py::arg("spec"));

  py::class_<CorpusConfig>(m, "CorpusConfig")
      .def(py::init<>())
      .def_readwrite("n", &CorpusConfig::n)
      .def_readwrite("seed", &CorpusConfig::seed)
      .def_readwrite("train_fraction", &CorpusConfig::train_fraction)
      .def_readwrite("val_fraction", &CorpusConfig::val_fraction)
      .def_readwrite("test_fraction", &CorpusConfig::test_fraction)
      .def_readwrite("air_pocket_prob", &CorpusConfig::air_pocket_prob)
      .def_readwrite("feeding_tube_prob", &CorpusConfig::feeding_tube_prob)
      .def("set_dims", [](CorpusConfig& s, int64_t nx, int64_t ny, int64_t nz) {
        s.dims = {nx, ny, nz};
      });
  m.def(
      "generate_corpus",
      [](const CorpusConfig& cfg, const std::filesystem::path& out) {
        Manifest man = generate_corpus(cfg, out);
        py::list cases;
        for (const ManifestCase& c : man.cases) {
          py::dict d;
          d["id"] = c.id;
          d["volume"] = c.volume_path;
          d["gtv"] = c.gtv_path;
          d["split"] = c.split;
          d["tags"] = c.tags;
          d["seed"] = c.seed;
          cases.append(d);
        }
        return cases;
      },
      py::arg("config"), py::arg("out_dir"));

  // level set + losses
  m.def(
      "signed_distance_map",
      [](const BinaryMask& mask) {
        SignedDistanceField sdf = signed_distance_map(mask);
        py::array_t<double> out({sdf.dims.nz, sdf.dims.ny, sdf.dims.nx});
        std::copy(sdf.phi.begin(), sdf.phi.end(), out.mutable_data());
        return out;
      },
      py::arg("mask"));

  py::class_<LossConfig>(m, "LossConfig")
      .def(py::init<>())
      .def_readwrite("w_dice", &LossConfig::w_dice)
      .def_readwrite("w_boundary", &LossConfig::w_boundary)
      .def_readwrite("w_distmap", &LossConfig::w_distmap)
      .def_readwrite("w_focal", &LossConfig::w_focal)
      .def_readwrite("boundary_alpha", &LossConfig::boundary_alpha)
      .def_readwrite("focal_beta", &LossConfig::focal_beta)
      .def_readwrite("dice_smooth", &LossConfig::dice_smooth);

  auto as_spans = [](py::array_t<double, py::array::c_style | py::array::forcecast>& probs,
                     py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& gt) {
    if (probs.size() != gt.size()) throw ShapeError("probs/gt size mismatch");
    return probs.size();
  };
  m.def(
      "soft_dice",
      [as_spans](py::array_t<double, py::array::c_style | py::array::forcecast> probs,
                 py::array_t<uint8_t, py::array::c_style | py::array::forcecast> gt,
                 double eps) {
        auto n = as_spans(probs, gt);
        return soft_dice(probs.data(), gt.data(), n, eps);
      },
      py::arg("probs"), py::arg("gt"), py::arg("eps") = 1e-5);
  m.def(
      "boundary_loss",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> probs,
         py::array_t<double, py::array::c_style | py::array::forcecast> phi,
         double voxel_volume) {
        if (probs.size() != phi.size()) throw ShapeError("probs/phi size mismatch");
        return boundary_loss(probs.data(), phi.data(), probs.size(), voxel_volume);
      },
      py::arg("probs"), py::arg("phi"), py::arg("voxel_volume") = 1.0);
  m.def(
      "combined_loss",
      [as_spans](const LossConfig& cfg,
                 py::array_t<double, py::array::c_style | py::array::forcecast> probs,
                 py::array_t<uint8_t, py::array::c_style | py::array::forcecast> gt,
                 py::array_t<double, py::array::c_style | py::array::forcecast> phi,
                 double voxel_volume) {
        auto n = as_spans(probs, gt);
        if (phi.size() != n) throw ShapeError("phi size mismatch");
        return combined_loss(cfg, probs.data(), gt.data(), phi.data(), n, voxel_volume);
      },
      py::arg("config"), py::arg("probs"), py::arg("gt"), py::arg("phi"),
      py::arg("voxel_volume") = 1.0);

  // networks
  py::class_<NetworkConfig>(m, "NetworkConfig")
      .def(py::init<>())
      .def_static("from_variant", &NetworkConfig::from_variant, py::arg("name"))
      .def_static("variant_names", &NetworkConfig::variant_names)
      .def_readwrite("variant", &NetworkConfig::variant)
      .def_readwrite("stem_channels", &NetworkConfig::stem_channels)
      .def_readwrite("sub_ddbs", &NetworkConfig::sub_ddbs)
      .def_readwrite("growth", &NetworkConfig::growth)
      .def_readwrite("bottleneck", &NetworkConfig::bottleneck)
      .def_readwrite("theta", &NetworkConfig::theta)
      .def("to_json", &NetworkConfig::to_json)
      .def("validate", &NetworkConfig::validate);
  m.def("receptive_field", &receptive_field, py::arg("config"));

  py::class_<Network>(m, "Network")
      .def(py::init([](const NetworkConfig& cfg, uint64_t seed) {
             return std::make_unique<Network>(cfg, seed);
           }),
           py::arg("config"), py::arg("seed") = 0)
      .def("parameter_count", &Network::parameter_count)
      .def_property_readonly("config", &Network::config)
      .def(
          "forward",
          [](Network& net, py::array_t<float, py::array::c_style | py::array::forcecast> x) {
            if (x.ndim() != 3) throw ShapeError("expected a 3D array (z, y, x)");
            Tensor t(1, 1, x.shape(0), x.shape(1), x.shape(2));
            std::copy(x.data(), x.data() + x.size(), t.v.begin());
            const Tensor& p = net.forward(t);
            py::array_t<float> out({static_cast<py::ssize_t>(2), x.shape(0), x.shape(1),
                                    x.shape(2)});
            std::copy(p.v.begin(), p.v.end(), out.mutable_data());
            return out;
          },
          py::arg("volume"), "Run inference on one (z,y,x) patch; returns (2,z,y,x) probabilities");

  m.def("save_checkpoint", &save_checkpoint, py::arg("network"), py::arg("path"));
  m.def("load_checkpoint",
        py::overload_cast<const std::filesystem::path&>(&load_checkpoint), py::arg("path"));

  // inference + post-processing
  m.def(
      "infer_volume",
      [](Network& net, const VolumeGrid& vol) { return infer_volume(net, vol); },
      py::arg("network"), py::arg("normalized_volume"));
  m.def("binarize", &binarize, py::arg("prob"), py::arg("tau") = 0.5);
  m.def("largest_component", &largest_component, py::arg("mask"));

  // metrics
  m.def("dice_coefficient", &dice_coefficient, py::arg("pred"), py::arg("gt"));
  m.def("mean_surface_distance", &mean_surface_distance, py::arg("pred"), py::arg("gt"));
  m.def("hausdorff95", &hausdorff95, py::arg("pred"), py::arg("gt"));
  m.def("cranial_caudal_errors", &cranial_caudal_errors, py::arg("pred"), py::arg("gt"));
  m.def(
      "evaluate_scan",
      [](const BinaryMask& pred, const BinaryMask& gt) {
        return metrics_to_dict(evaluate_scan(pred, gt));
      },
      py::arg("pred"), py::arg("gt"));
  m.def(
      "precision_recall_auc",
      [](const std::vector<VolumeGrid>& probs, const std::vector<BinaryMask>& gts,
         const std::vector<double>& thresholds) {
        std::vector<const VolumeGrid*> pp;
        std::vector<const BinaryMask*> pg;
        for (const auto& p : probs) pp.push_back(&p);
        for (const auto& g : gts) pg.push_back(&g);
        PrCurve c = precision_recall_auc(pp, pg, thresholds);
        py::list points;
        for (const PrPoint& pt : c.points)
          points.append(py::make_tuple(pt.threshold, pt.precision, pt.recall));
        py::dict d;
        d["auc"] = c.auc;
        d["points"] = points;
        return d;
      },
      py::arg("probs"), py::arg("gts"), py::arg("thresholds"));
  m.def("default_pr_thresholds", &default_pr_thresholds, py::arg("n") = 101);

  // training
  m.def(
      "train",
      [](const std::string& config_json, const std::filesystem::path& manifest_path,
         const std::filesystem::path& out_dir) {
        TrainConfig cfg = TrainConfig::from_json(config_json);
        Manifest manifest = Manifest::load(manifest_path);
        TrainResult r = train(cfg, manifest, manifest_path.parent_path(), out_dir);
        py::dict d;
        d["best_checkpoint"] = r.best_checkpoint.string();
        d["final_checkpoint"] = r.final_checkpoint.string();
        d["best_val_dsc"] = r.best_val_dsc;
        d["steps_run"] = r.steps_run;
        return d;
      },
      py::arg("config_json"), py::arg("manifest_path"), py::arg("out_dir"));

  m.def("set_compute_threads", &set_compute_threads, py::arg("n"));
}
