#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "nexvitad/commands.hpp"
#include "nexvitad/image.hpp"
#include "nexvitad/tensor_io.hpp"

namespace py = pybind11;
using namespace nexvitad;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
    const py::buffer_info info = arr.request();
    if (info.ndim < 1 || info.ndim > 4) throw Error(ErrorKind::Shape, "arrays of rank 1..4 supported");
    std::vector<int> dims;
    for (auto e : info.shape) dims.push_back(static_cast<int>(e));
    Tensor t(dims);
    const double* src = static_cast<const double*>(info.ptr);
    std::copy(src, src + t.size(), t.data.begin());
    return t;
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.dims.begin(), t.dims.end());
    py::array_t<double> arr(shape);
    std::copy(t.data.begin(), t.data.end(), static_cast<double*>(arr.request().ptr));
    return arr;
}

} // namespace

PYBIND11_MODULE(_nexvitad, m) {
    m.doc() = "Cross-domain anomaly detection pipeline: adapter-fused encoding, "
              "Sinkhorn K-means memory banks, and pixel metrics";

    py::register_exception<Error>(m, "NexvitadError");

    m.def(
        "save_tensor",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& arr, const std::string& path) {
            save_tensor(tensor_from_array(arr), path);
        },
        py::arg("array"), py::arg("path"), "Write an array as an NXT1 tensor file (float32 on disk).");
    m.def(
        "load_tensor", [](const std::string& path) { return array_from_tensor(load_tensor(path)); },
        py::arg("path"), "Read an NXT1 tensor file.");

    m.def(
        "sinkhorn_assign",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& z,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& p, double eps, int max_iter,
           double tol) {
            TransportPlan plan = sinkhorn_assign(tensor_from_array(z), tensor_from_array(p), eps, max_iter, tol);
            py::dict out;
            out["plan"] = array_from_tensor(plan.t);
            out["iterations"] = plan.iterations;
            out["converged"] = plan.converged;
            out["max_violation"] = plan.max_violation;
            return out;
        },
        py::arg("points"), py::arg("prototypes"), py::arg("eps"), py::arg("max_iter") = 500,
        py::arg("tol") = 1e-7,
        "Balanced entropic OT plan between points and prototypes (log-domain Sinkhorn).");

    m.def(
        "sinkhorn_kmeans",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& z, int k, double eps_scale,
           int outer_iters, std::uint64_t seed) {
            return array_from_tensor(sinkhorn_kmeans(tensor_from_array(z), k, eps_scale, outer_iters, seed));
        },
        py::arg("points"), py::arg("k"), py::arg("eps_scale") = 0.05, py::arg("outer_iters") = 50,
        py::arg("seed") = 0, "Cluster rows into k prototypes with balanced Sinkhorn assignments.");

    m.def(
        "auc",
        [](const std::vector<double>& scores, const std::vector<int>& labels) { return auc(scores, labels); },
        py::arg("scores"), py::arg("labels"), "Area under the ROC curve (tied scores grouped).");
    m.def(
        "average_precision",
        [](const std::vector<double>& scores, const std::vector<int>& labels) {
            return average_precision(scores, labels);
        },
        py::arg("scores"), py::arg("labels"));
    m.def(
        "pro_mean_iou",
        [](const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& maps,
           const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& masks,
           const std::string& mode, double tau) {
            std::vector<Tensor> ms, gs;
            for (const auto& a : maps) ms.push_back(tensor_from_array(a));
            for (const auto& a : masks) gs.push_back(tensor_from_array(a));
            ProResult r = pro_mean_iou(ms, gs, mode == "fixed" ? ProMode::Fixed : ProMode::BestSweep, tau);
            py::dict out;
            out["value"] = r.value;
            out["tau"] = r.tau;
            out["per_image"] = r.per_image;
            return out;
        },
        py::arg("score_maps"), py::arg("gt_masks"), py::arg("mode") = "best_sweep", py::arg("tau") = 0.5);

    m.def(
        "gaussian_blur",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, double sigma) {
            return array_from_tensor(gaussian_blur(tensor_from_array(x), sigma));
        },
        py::arg("map"), py::arg("sigma"));
    m.def(
        "bilinear_resize",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, int h, int w) {
            return array_from_tensor(bilinear_resize(tensor_from_array(x), h, w));
        },
        py::arg("map"), py::arg("out_h"), py::arg("out_w"));

    m.def(
        "synth_class",
        [](int class_id, std::uint64_t seed, int n_train, int n_test, int size) {
            auto samples = synth_class(class_id, seed, n_train, n_test, size);
            py::list out;
            for (const auto& s : samples) {
                py::dict d;
                d["image"] = array_from_tensor(s.image);
                d["mask"] = array_from_tensor(s.mask);
                d["class_id"] = s.class_id;
                d["split"] = s.split == Split::Train ? "train" : "test";
                d["is_defective"] = s.is_defective;
                out.append(d);
            }
            return out;
        },
        py::arg("class_id"), py::arg("seed"), py::arg("n_train"), py::arg("n_test"), py::arg("size") = 64,
        "Generate one procedural texture class with defect masks.");

    m.def(
        "score_image",
        [](const std::string& checkpoint_dir, const std::string& bank_dir,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& image, int k_unused) {
            Model model = load_checkpoint(checkpoint_dir, nullptr);
            MemoryBank bank = load_memory_bank(bank_dir);
            Tensor img = tensor_from_array(image);
            if (img.rank() != 3) throw Error(ErrorKind::Shape, "image must be (h,w,3)");
            Tensor batch({1, img.dim(0), img.dim(1), img.dim(2)});
            std::copy(img.data.begin(), img.data.end(), batch.data.begin());
            InferenceConfig icfg;
            icfg.k = bank.k;
            icfg.m_images = bank.m_images;
            icfg.fused_features = bank.fused_features;
            auto maps = anomaly_score_maps(model.encoder, model.fusion, bank, batch, icfg);
            (void)k_unused;
            return array_from_tensor(maps[0].smoothed);
        },
        py::arg("checkpoint_dir"), py::arg("bank_dir"), py::arg("image"), py::arg("k") = 0,
        "Score one (h,w,3) image in [0,1] against a trained checkpoint and memory bank.");

    m.def("grad_check", [](double tol) {
        GradCheckOutcome outcome = cmd_grad_check(tol);
        py::dict out;
        out["passed"] = outcome.passed;
        out["max_rel_err"] = outcome.report.max_rel_err;
        out["params_checked"] = outcome.report.params_checked;
        out["seconds"] = outcome.seconds;
        return out;
    }, py::arg("tol") = 1e-4, "Finite-difference validation of every trainable parameter.");

    m.attr("__version__") = "1.0.0";
}
