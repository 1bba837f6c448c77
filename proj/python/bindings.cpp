#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "bitmar/checkpoint.hpp"
#include "bitmar/cli.hpp"
#include "bitmar/trainer.hpp"

namespace py = pybind11;
using namespace bitmar;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
    if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
    const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
    return Tensor::from({rows, cols}, std::vector<float>(a.data(), a.data() + rows * cols));
}

py::array_t<float> to_array(const Tensor& t) {
    py::array_t<float> out({t.rows(), t.cols()});
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

std::vector<float> flat(const FloatArray& a) { return {a.data(), a.data() + a.size()}; }

/// Model plus the run configuration it was built from.
struct PyModel {
    RunConfig config;
    std::unique_ptr<BitMarModel> model;
};

PyModel model_from_preset(const std::string& name, std::uint64_t seed) {
    PyModel m;
    m.config = preset(name);
    m.config.seed = seed;
    m.model = std::make_unique<BitMarModel>(m.config.model, seed);
    return m;
}

PyModel model_from_file(const std::filesystem::path& path) {
    const auto ckpt = load_checkpoint(path);
    return PyModel{ckpt.config, model_from_checkpoint(ckpt)};
}

}  // namespace

PYBIND11_MODULE(_bitmar, m) {
    m.doc() = "Ternary multimodal encoder-decoder with episodic memory";

    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

    m.def("quantize_weights", [](const FloatArray& latent) {
        const auto q = quantize_weights(flat(latent));
        py::array_t<std::int8_t> codes(latent.request().shape);
        std::copy(q.codes.begin(), q.codes.end(), codes.mutable_data());
        return py::make_tuple(codes, q.gamma);
    }, py::arg("latent"), "Ternary codes and the absmean threshold.");

    m.def("quantize_activations", [](const FloatArray& x) {
        const auto q = quantize_activations(to_tensor(x));
        py::array_t<std::int8_t> codes({q.rows, q.cols});
        std::copy(q.codes.begin(), q.codes.end(), codes.mutable_data());
        return py::make_tuple(codes, q.scales);
    }, py::arg("x"), "Per-row int8 codes and scales.");

    m.def("quantization_effectiveness", [](const FloatArray& latent) {
        const auto q = quantize_weights(flat(latent));
        std::size_t zeros = 0;
        for (auto c : q.codes) zeros += c == 0;
        return q.codes.empty() ? 0.0 : static_cast<double>(zeros) / static_cast<double>(q.codes.size());
    }, py::arg("latent"));

    m.def("total_loss", [](double lm, double cm, double mem, double cm_weight, double mem_weight) {
        return total_loss(lm, cm, mem, LossWeights{cm_weight, mem_weight});
    }, py::arg("lm"), py::arg("cm"), py::arg("mem"), py::arg("cm_weight") = 1.5, py::arg("mem_weight") = 0.1);

    m.def("infonce", [](const FloatArray& z, const FloatArray& v, float tau) {
        NoGradGuard guard;
        return infonce(to_tensor(z), to_tensor(v), tau).item();
    }, py::arg("z"), py::arg("v"), py::arg("tau") = 0.07f);

    m.def("cache_arrivals", [](std::uint64_t length, std::size_t sinks, std::size_t window) {
        StreamingKVCache cache(sinks, window, 1);
        for (std::uint64_t t = 0; t < length; ++t) {
            const float kv[1] = {0.0f};
            cache.append(kv, kv, t);
        }
        return cache.arrivals();
    }, py::arg("length"), py::arg("sinks"), py::arg("window"),
       "Arrival indices held by a sink-plus-window cache after `length` tokens.");

    m.def("encode", [](const std::string& text, std::size_t max_len) { return Tokenizer().encode(text, max_len); },
          py::arg("text"), py::arg("max_len") = kMaxTokens);
    m.def("decode", [](const std::vector<std::uint32_t>& ids) { return py::bytes(Tokenizer().decode(ids)); }, py::arg("ids"));

    m.def("write_token_file", &write_token_file, py::arg("path"), py::arg("vocab_size"), py::arg("sequences"));
    m.def("read_token_file", [](const std::filesystem::path& p) {
        auto c = read_token_file(p);
        return py::make_tuple(c.vocab_size, c.sequences);
    }, py::arg("path"));
    m.def("write_feature_file", [](const std::filesystem::path& p, const FloatArray& features) {
        if (features.ndim() != 4 || features.shape(1) != features.shape(2)) {
            throw std::invalid_argument("expected features shaped [items, grid, grid, dim]");
        }
        write_feature_file(p, static_cast<std::size_t>(features.shape(1)), static_cast<std::size_t>(features.shape(3)),
                           flat(features));
    }, py::arg("path"), py::arg("features"));
    m.def("read_feature_item", [](const std::filesystem::path& p, std::uint64_t i) {
        FeatureFile f(p);
        const auto v = f.item(i);
        py::array_t<float> out({f.grid(), f.grid(), f.dim()});
        std::copy(v.begin(), v.end(), out.mutable_data());
        return out;
    }, py::arg("path"), py::arg("index"));

    m.def("config_text", [](const std::string& preset_name) { return config_text(preset(preset_name)); },
          py::arg("preset") = "desk");

    m.def("cli", [](const std::vector<std::string>& args) {
        std::vector<std::string> full{"bitmar"};
        full.insert(full.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : full) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
            py::gil_scoped_release release;
            code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
    }, py::arg("args"), "Runs the command-line tool in-process; returns (exit_code, stdout, stderr).");

    py::class_<PyModel>(m, "Model")
        .def(py::init(&model_from_preset), py::arg("preset") = "desk", py::arg("seed") = 0)
        .def_static("load", &model_from_file, py::arg("path"))
        .def("save", [](PyModel& self, const std::filesystem::path& p) { save_checkpoint(p, *self.model, self.config); },
             py::arg("path"))
        .def("generate",
             [](PyModel& self, const std::string& prompt, std::optional<FloatArray> features, int max_new,
                bool use_memory, std::uint64_t seed) {
                 const Tokenizer tok(static_cast<std::uint32_t>(self.config.model.vocab_size));
                 std::vector<float> f;
                 std::size_t grid = 0;
                 if (features) {
                     if (features->ndim() != 3 || features->shape(0) != features->shape(1)) {
                         throw std::invalid_argument("expected features shaped [grid, grid, dim]");
                     }
                     grid = static_cast<std::size_t>(features->shape(0));
                     f = flat(*features);
                 }
                 self.model->set_training(false);
                 Rng rng(seed);
                 const auto ids = self.model->generate(prompt.empty() ? std::vector<std::uint32_t>{} : tok.encode(prompt),
                                                       f, grid, max_new, Sampler{}, rng, use_memory);
                 return py::bytes(tok.decode(ids));
             },
             py::arg("prompt") = "", py::arg("features") = py::none(), py::arg("max_new") = 64,
             py::arg("use_memory") = true, py::arg("seed") = 0)
        .def("quantization_effectiveness", [](PyModel& self) { return self.model->quantization_effectiveness(); })
        .def("memory", [](PyModel& self) { return to_array(self.model->memory().matrix()); })
        .def_property_readonly("config", [](PyModel& self) { return config_text(self.config); });
}
