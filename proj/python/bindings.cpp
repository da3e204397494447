#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <torch/torch.h>

#include "anglekit/common.hpp"
#include "anglekit/evaluation.hpp"
#include "anglekit/geometry.hpp"
#include "anglekit/losses.hpp"
#include "anglekit/synthetic.hpp"
#include "anglekit/training.hpp"

namespace py = pybind11;
using namespace anglekit;

namespace {

torch::Tensor to_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    std::vector<std::int64_t> shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = a.shape(i);
    return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kFloat64).clone();
}

py::array_t<float> mat_to_array(const cv::Mat& m) {
    py::array_t<float> out({m.rows, m.cols});
    std::memcpy(out.mutable_data(), m.ptr<float>(), sizeof(float) * m.total());
    return out;
}

using DArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<eval::ScoredSample> make_samples(const std::vector<double>& scores,
                                             const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ValidationError("scores and labels differ in length");
    std::vector<eval::ScoredSample> samples;
    samples.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i)
        samples.push_back({"", data::Side::left, scores[i], labels[i]});
    return samples;
}

}  // namespace

PYBIND11_MODULE(_anglekit, m) {
    m.doc() = "core operations of the angle-closure screening toolkit";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);

    // Losses -----------------------------------------------------------
    m.def(
        "focal_loss",
        [](const DArray& pred, const DArray& target, double alpha, double gamma) {
            losses::FocalParams p;
            p.alpha = alpha;
            p.gamma = gamma;
            return losses::focal_loss(to_tensor(pred), to_tensor(target), p).item<double>();
        },
        py::arg("pred"), py::arg("target"), py::arg("alpha") = 2.0, py::arg("gamma") = 2.0,
        "mean focal loss over probabilities vs {0,1} targets");

    m.def(
        "fbeta_loss",
        [](const DArray& pred, const DArray& target, double beta, bool conventional) {
            losses::FBetaParams p;
            p.beta = beta;
            p.conventional = conventional;
            return losses::fbeta_loss(to_tensor(pred), to_tensor(target), p).item<double>();
        },
        py::arg("pred"), py::arg("target"), py::arg("beta") = 2.0,
        py::arg("conventional") = false, "soft F-beta loss over global counts");

    m.def(
        "hybrid_loss",
        [](const DArray& pred, const DArray& target, double rho1, double rho2) {
            losses::HybridParams hp;
            hp.rho1 = rho1;
            hp.rho2 = rho2;
            return losses::hybrid_loss(to_tensor(pred), to_tensor(target), hp).item<double>();
        },
        py::arg("pred"), py::arg("target"), py::arg("rho1") = 0.5, py::arg("rho2") = 0.5,
        "rho1 * focal + rho2 * fbeta");

    m.def(
        "kr_loss",
        [](const DArray& pred, const DArray& target, double rho3, double rho4) {
            losses::KRParams p;
            p.rho3 = rho3;
            p.rho4 = rho4;
            return losses::kr_loss(to_tensor(pred), to_tensor(target), p).item<double>();
        },
        py::arg("pred"), py::arg("target"), py::arg("rho3") = 100.0, py::arg("rho4") = 0.2,
        "keypoint heatmap loss: weighted MSE plus soft-overlap term");

    // Heatmap codec ------------------------------------------------------
    m.def(
        "encode_heatmap",
        [](double cx, double cy, int height, int width, double sigma) {
            auto hm = geometry::encode_heatmap({cx, cy}, height, width, {sigma});
            return mat_to_array(hm.values);
        },
        py::arg("cx"), py::arg("cy"), py::arg("height"), py::arg("width"),
        py::arg("sigma") = 4.0, "Gaussian response map centered at (cx, cy), grid coordinates");

    m.def(
        "decode_heatmap",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& values,
           int stride) -> py::object {
            if (values.ndim() != 2) throw ValidationError("heatmap must be 2D");
            cv::Mat mat(static_cast<int>(values.shape(0)), static_cast<int>(values.shape(1)),
                        CV_32F);
            std::memcpy(mat.data, values.data(), sizeof(float) * mat.total());
            auto dr = geometry::decode_heatmap({mat, stride});
            if (!dr) return py::none();
            py::dict d;
            d["x"] = dr->point.x;
            d["y"] = dr->point.y;
            d["peak"] = dr->peak;
            d["peak_cell"] = py::make_tuple(dr->peak_cell.x, dr->peak_cell.y);
            return d;
        },
        py::arg("values"), py::arg("stride") = 1,
        "sub-pixel argmax of a response map; None when the map has no response");

    // Metrics -------------------------------------------------------------
    m.def(
        "roc_auc",
        [](const std::vector<double>& scores, const std::vector<int>& labels) {
            return eval::roc_auc(make_samples(scores, labels));
        },
        py::arg("scores"), py::arg("labels"), "rank-based AUC with ties credited 0.5");

    m.def(
        "threshold_metrics",
        [](const std::vector<double>& scores, const std::vector<int>& labels, double threshold) {
            auto t = eval::threshold_metrics(make_samples(scores, labels), threshold);
            py::dict d;
            d["sen"] = t.sen;
            d["spe"] = t.spe;
            d["acc"] = t.acc;
            return d;
        },
        py::arg("scores"), py::arg("labels"), py::arg("threshold") = 0.5,
        "sensitivity / specificity / accuracy at a threshold (>= counts positive)");

    m.def("format_metric", &eval::format_metric, py::arg("value"),
          "two-decimal report rounding (half-to-even)");

    // Schedule -------------------------------------------------------------
    m.def("cosine_lr", &train::cosine_lr, py::arg("t"), py::arg("total"), py::arg("lr0"),
          "0.5 * lr0 * (1 + cos(pi * t / total))");

    // Synthetic data --------------------------------------------------------
    m.def(
        "synth_generate",
        [](const std::filesystem::path& out_dir, int count, std::uint64_t seed, int height,
           int width, double closed_prior) {
            synth::SynthConfig cfg;
            cfg.count = count;
            cfg.seed = seed;
            cfg.height = height;
            cfg.width = width;
            cfg.closed_prior = closed_prior;
            auto m = synth::synth_generate(cfg, out_dir);
            py::list rows;
            for (const auto& r : m.records) {
                py::dict d;
                d["image_id"] = r.image_id;
                d["label"] = r.label;
                d["left"] = py::make_tuple(r.ss_left.x, r.ss_left.y);
                d["right"] = py::make_tuple(r.ss_right.x, r.ss_right.y);
                rows.append(d);
            }
            return rows;
        },
        py::arg("out_dir"), py::arg("count") = 32, py::arg("seed") = 0, py::arg("height") = 128,
        py::arg("width") = 128, py::arg("closed_prior") = 0.5,
        "write a synthetic wedge dataset and return its manifest rows");
}
