// Python bindings for the core operations: network construction and
// forward passes, weight serialization, evaluation metrics and the
// synthetic-corpus generator. Tensors cross the boundary as numpy arrays.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ksdd/eval.hpp"

namespace py = pybind11;
using namespace ksdd;

namespace {

using NpArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const NpArray& a) {
    if (a.ndim() != 3) throw std::invalid_argument("expected a C x H x W array");
    Tensor t({int(a.shape(0)), int(a.shape(1)), int(a.shape(2))});
    std::copy(a.data(), a.data() + t.size(), t.data.begin());
    return t;
}

py::array from_tensor(const Tensor& t) {
    if (t.rank() != 3) throw std::logic_error("only rank-3 tensors cross the boundary");
    py::array_t<double> a({t.dim(0), t.dim(1), t.dim(2)});
    std::copy(t.data.begin(), t.data.end(), a.mutable_data());
    return a;
}

std::vector<Scored> to_scored(const std::vector<double>& scores,
                              const std::vector<bool>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("scores and labels differ in length");
    std::vector<Scored> s(scores.size());
    for (std::size_t i = 0; i < s.size(); ++i)
        s[i] = {std::to_string(i), scores[i], static_cast<bool>(labels[i])};
    return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Two-stage surface-defect detection core";

    py::class_<SegmentationNet>(m, "SegmentationNet")
        .def_readwrite("frozen", &SegmentationNet::frozen)
        .def("parameter_count",
             [](const SegmentationNet& n) { return count_parameters(n); })
        .def("parameter_hash", &parameter_hash)
        .def("receptive_field",
             [](const SegmentationNet& n) { return receptive_field(n); });

    py::class_<DecisionNet>(m, "DecisionNet")
        .def("parameter_count",
             [](const DecisionNet& n) { return count_parameters(n); });

    m.def("build_segmentation_net", &build_segmentation_net, py::arg("seed"));
    m.def("build_decision_net", &build_decision_net, py::arg("seed"));
    m.def("count_parameters",
          py::overload_cast<const SegmentationNet&, const DecisionNet&>(&count_parameters),
          py::arg("seg"), py::arg("dec"));
    m.def("mac_count", &mac_count, py::arg("height"), py::arg("width"));
    m.def("set_fast_gemm", &set_fast_gemm, py::arg("enabled"));

    m.def(
        "seg_forward",
        [](SegmentationNet& net, const NpArray& image, bool train) {
            SegOutput out = seg_forward(net, to_tensor(image),
                                        train ? Mode::train : Mode::infer);
            return py::make_tuple(from_tensor(out.features), from_tensor(out.logits));
        },
        py::arg("net"), py::arg("image"), py::arg("train") = false,
        "Returns (features, logit_map) at 1/8 input resolution.");

    m.def(
        "dec_forward",
        [](DecisionNet& net, const NpArray& features, const NpArray& logits,
           bool train) {
            return dec_forward(net, to_tensor(features), to_tensor(logits),
                               train ? Mode::train : Mode::infer);
        },
        py::arg("net"), py::arg("features"), py::arg("logits"),
        py::arg("train") = false, "Returns the image-level defect score in (0, 1).");

    m.def(
        "score_image",
        [](SegmentationNet& seg, DecisionNet& dec, const NpArray& image) {
            SegOutput out = seg_forward(seg, to_tensor(image), Mode::infer);
            return dec_forward(dec, out.features, out.logits, Mode::infer);
        },
        py::arg("seg"), py::arg("dec"), py::arg("image"));

    m.def("save_weights", &save_weights, py::arg("path"), py::arg("seg"),
          py::arg("dec"));
    m.def("load_weights", &load_weights, py::arg("path"), py::arg("seg"),
          py::arg("dec"));

    m.def(
        "average_precision",
        [](const std::vector<double>& scores, const std::vector<bool>& labels) {
            return average_precision(to_scored(scores, labels));
        },
        py::arg("scores"), py::arg("labels"));
    m.def(
        "best_f_threshold",
        [](const std::vector<double>& scores, const std::vector<bool>& labels) {
            BestF b = best_f_threshold(to_scored(scores, labels));
            return py::make_tuple(b.threshold, b.fp, b.fn, b.f1);
        },
        py::arg("scores"), py::arg("labels"),
        "Returns (threshold, fp, fn, f1) maximizing F1.");
    m.def(
        "fp_at_full_recall",
        [](const std::vector<double>& scores, const std::vector<bool>& labels) {
            return fp_at_full_recall(to_scored(scores, labels));
        },
        py::arg("scores"), py::arg("labels"));

    m.def("synth_generate", &synth_generate, py::arg("n_pos"), py::arg("n_neg"),
          py::arg("size"), py::arg("seed"), py::arg("out_dir"));
    m.def(
        "load_dataset",
        [](const std::string& root) {
            py::list out;
            for (const Sample& s : load_dataset(root)) {
                py::array_t<std::uint8_t> mask({s.mask.h, s.mask.w});
                std::copy(s.mask.v.begin(), s.mask.v.end(), mask.mutable_data());
                py::dict d;
                d["image"] = from_tensor(s.image);
                d["mask"] = mask;
                d["defective"] = s.defective;
                d["product_id"] = s.product_id;
                d["image_id"] = s.image_id;
                out.append(d);
            }
            return out;
        },
        py::arg("root"));

    py::register_exception<DataError>(m, "DataError");
    py::register_exception<WeightFileError>(m, "WeightFileError");
}
