#include "cli.hpp"

#include "dvne/checks.hpp"
#include "dvne/config.hpp"
#include "dvne/errors.hpp"
#include "dvne/geometry.hpp"
#include "dvne/losses.hpp"
#include "dvne/model.hpp"
#include "dvne/rendering.hpp"
#include "dvne/scene_synth.hpp"
#include "dvne/training.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace dvne;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// H x W x C array from an image stored one pixel per row.
py::array_t<double> to_array(const Image& img) {
    py::array_t<double> out({img.height, img.width, img.channels()});
    std::copy(img.pixels.data(), img.pixels.data() + img.pixels.size(), out.mutable_data());
    return out;
}

py::dict volume_render_py(const RowMatrix& colors, const Eigen::VectorXd& densities, const Eigen::VectorXd& t,
                          const Eigen::VectorXd& deltas, const Vec3& background) {
    const Eigen::Index n = densities.size();
    if (colors.rows() != n || colors.cols() != 3 || t.size() != n || deltas.size() != n) {
        throw InvalidArgument("volume_render: expected colors (n, 3) and densities, t, deltas of length n");
    }
    std::vector<SamplePoint> samples(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        samples[i].t = t[i];
        samples[i].color = colors.row(i).transpose();
        samples[i].density = densities[i];
    }
    const RenderOutput r =
        volume_render(samples, std::span<const double>(deltas.data(), static_cast<std::size_t>(n)), background);
    py::dict d;
    d["color"] = r.color;
    d["depth"] = r.depth;
    d["accumulation"] = r.accumulation;
    d["weights"] = r.weights;
    d["transmittance"] = r.transmittance;
    return d;
}

py::array_t<double> render_frame(const std::filesystem::path& checkpoint, const std::filesystem::path& data, int frame,
                                 const std::string& config_text) {
    const SceneModel model = load_checkpoint(checkpoint);
    const Dataset ds = read_dataset(data);
    if (frame < 0 || static_cast<std::size_t>(frame) >= ds.size()) {
        throw InvalidArgument("render_frame: frame " + std::to_string(frame) + " out of range");
    }
    const RunConfig cfg = parse_config(config_text);
    py::gil_scoped_release release;
    const RenderedImage r = render_image(model, ds.cameras[frame], ds.poses[frame], render_options(cfg));
    py::gil_scoped_acquire acquire;
    return to_array(r.color);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Scene editing with a deformable human field: native core";

    static const py::handle error = py::exception<Error>(m, "Error", PyExc_RuntimeError).release();
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            PyErr_SetString(error.ptr(), (e.category() + ": " + e.what()).c_str());
        }
    });

    m.def("contract", &contract, py::arg("x"));
    m.def("contract_jacobian", &contract_jacobian, py::arg("x"));
    m.def(
        "positional_encoding",
        [](const Vec3& x, int levels) {
            Eigen::VectorXd out(6 * levels);
            positional_encoding(x, levels, std::span<double>(out.data(), static_cast<std::size_t>(out.size())));
            return out;
        },
        py::arg("x"), py::arg("levels"));
    m.def("volume_render", &volume_render_py, py::arg("colors"), py::arg("densities"), py::arg("t"), py::arg("deltas"),
          py::arg("background") = Vec3::Zero().eval());

    m.def(
        "nnfm_loss", [](const RowMatrix& rendered, const RowMatrix& style, double lambda) {
            return nnfm_loss(rendered, style, lambda);
        },
        py::arg("rendered"), py::arg("style"), py::arg("weight") = 1.0);
    m.def(
        "feature_l2_loss", [](const RowMatrix& rendered, const RowMatrix& source) {
            return feature_l2_loss(rendered, source);
        },
        py::arg("rendered"), py::arg("source"));
    m.def(
        "photometric_loss", [](const RowMatrix& render, const RowMatrix& target) {
            return photometric_loss(render, target);
        },
        py::arg("render"), py::arg("target"));

    m.def("default_config", [] { return serialize_config(RunConfig{}); });
    m.def(
        "normalize_config", [](const std::string& text) { return serialize_config(parse_config(text)); },
        py::arg("text"));
    m.def("config_keys", &config_keys);

    m.def(
        "synthesize",
        [](const std::filesystem::path& out, const std::string& preset, std::uint64_t seed, int width, int height) {
            SceneSpec spec = scene_preset(preset);
            if (width > 0) spec.width = width;
            if (height > 0) spec.height = height;
            py::gil_scoped_release release;
            generate(spec, seed, out);
        },
        py::arg("out"), py::arg("preset") = "short", py::arg("seed") = 0, py::arg("width") = 0, py::arg("height") = 0);
    m.def(
        "read_frame",
        [](const std::filesystem::path& data, int frame) {
            return to_array(read_png(data / "frames" / (frame_name(frame) + ".png")));
        },
        py::arg("data"), py::arg("frame"));
    m.def("render_frame", &render_frame, py::arg("checkpoint"), py::arg("data"), py::arg("frame"),
          py::arg("config") = "");

    m.def("run_checks", [] {
        std::vector<py::dict> out;
        for (const CheckResult& r : run_invariant_checks()) {
            py::dict d;
            d["name"] = r.name;
            d["passed"] = r.passed;
            d["detail"] = r.detail;
            d["seconds"] = r.seconds;
            out.push_back(d);
        }
        return out;
    });
    m.def(
        "run_cli",
        [](std::vector<std::string> args) {
            args.insert(args.begin(), "dvne");
            std::ostringstream out, err;
            int code = 0;
            {
                py::gil_scoped_release release;
                code = cli::dispatch(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"));
}
