#include "bitmar/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>
#include <vector>

namespace bitmar {

namespace {

struct Field {
    const char* section;
    const char* key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

[[noreturn]] void bad(const std::string& section, const std::string& key, const std::string& expected,
                      const std::string& value) {
    throw ConfigError("config error: [" + section + "] " + key + ": expected " + expected + ", got '" + value + "'");
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_float(float v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
    return buf;
}

template <typename T>
Field uint_field(const char* s, const char* k, T& ref) {
    return {s, k, [&ref] { return std::to_string(ref); },
            [&ref, s, k](const std::string& v) {
                std::uint64_t x = 0;
                auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
                if (ec != std::errc{} || p != v.data() + v.size()) bad(s, k, "a non-negative integer", v);
                ref = static_cast<T>(x);
            }};
}

double parse_real(const char* s, const char* k, const std::string& v) {
    std::size_t used = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        bad(s, k, "a number", v);
    }
    if (used != v.size()) bad(s, k, "a number", v);
    return x;
}

Field double_field(const char* s, const char* k, double& ref) {
    return {s, k, [&ref] { return fmt_double(ref); },
            [&ref, s, k](const std::string& v) { ref = parse_real(s, k, v); }};
}

Field float_field(const char* s, const char* k, float& ref) {
    return {s, k, [&ref] { return fmt_float(ref); },
            [&ref, s, k](const std::string& v) { ref = static_cast<float>(parse_real(s, k, v)); }};
}

Field bool_field(const char* s, const char* k, bool& ref) {
    return {s, k, [&ref] { return std::string(ref ? "true" : "false"); },
            [&ref, s, k](const std::string& v) {
                if (v == "true" || v == "1") {
                    ref = true;
                } else if (v == "false" || v == "0") {
                    ref = false;
                } else {
                    bad(s, k, "true or false", v);
                }
            }};
}

Field string_field(const char* s, const char* k, std::string& ref) {
    return {s, k, [&ref] { return ref; }, [&ref](const std::string& v) { ref = v; }};
}

std::vector<Field> fields(RunConfig& c) {
    auto& m = c.model;
    auto& mem = c.model.memory;
    std::vector<Field> f;
    f.push_back(uint_field("model", "vocab_size", m.vocab_size));
    f.push_back(uint_field("model", "d_model", m.d_model));
    f.push_back(uint_field("model", "heads", m.heads));
    f.push_back(uint_field("model", "encoder_layers", m.encoder_layers));
    f.push_back(uint_field("model", "decoder_layers", m.decoder_layers));
    f.push_back(uint_field("model", "ffn_mult", m.ffn_mult));
    f.push_back(uint_field("model", "max_len", m.max_len));
    f.push_back(uint_field("model", "feature_dim", m.feature_dim));
    f.push_back(uint_field("model", "vision_hidden", m.vision_hidden));
    f.push_back(float_field("model", "vision_dropout", m.vision_dropout));
    f.push_back(bool_field("model", "text_causal", m.text_causal));
    f.push_back({"model", "injection", [&m] { return std::string(m.injection == Injection::residual ? "residual" : "concat"); },
                 [&m](const std::string& v) {
                     if (v == "residual") {
                         m.injection = Injection::residual;
                     } else if (v == "concat") {
                         m.injection = Injection::concat;
                     } else {
                         bad("model", "injection", "residual or concat", v);
                     }
                 }});
    f.push_back({"model", "pooling", [&m] { return std::string(m.pooling == Pooling::mean ? "mean" : "learned"); },
                 [&m](const std::string& v) {
                     if (v == "mean") {
                         m.pooling = Pooling::mean;
                     } else if (v == "learned") {
                         m.pooling = Pooling::learned;
                     } else {
                         bad("model", "pooling", "mean or learned", v);
                     }
                 }});
    f.push_back(bool_field("model", "quantize", m.quantize));
    f.push_back(float_field("model", "ln_eps", m.ln_eps));

    f.push_back(uint_field("memory", "slots", mem.slots));
    f.push_back(float_field("memory", "alpha", mem.alpha));
    f.push_back(float_field("memory", "usage_decay", mem.usage_decay));
    f.push_back(float_field("memory", "usage_floor", mem.usage_floor));
    f.push_back(float_field("memory", "forget_rate", mem.forget_rate));
    f.push_back(uint_field("memory", "forget_every", mem.forget_every));
    f.push_back(float_field("memory", "init_std", mem.init_std));
    f.push_back(bool_field("memory", "enabled", mem.enabled));

    f.push_back(uint_field("streaming", "sinks", m.sinks));
    f.push_back(uint_field("streaming", "window", m.window));

    f.push_back(double_field("loss", "cm_weight", c.loss.cm));
    f.push_back(double_field("loss", "mem_weight", c.loss.mem));
    f.push_back(float_field("loss", "tau", m.tau));

    f.push_back(bool_field("controller", "enabled", c.controller_enabled));
    f.push_back(uint_field("controller", "ema_window", c.controller.ema_window));
    f.push_back(double_field("controller", "drop_threshold", c.controller.drop_threshold));
    f.push_back(uint_field("controller", "cooldown", c.controller.cooldown));
    f.push_back(uint_field("controller", "duration", c.controller.duration));
    f.push_back(float_field("controller", "cm_upweight", c.controller.cm_upweight));

    f.push_back(double_field("optim", "lr", c.optim.lr));
    f.push_back(float_field("optim", "beta1", c.optim.adamw.beta1));
    f.push_back(float_field("optim", "beta2", c.optim.adamw.beta2));
    f.push_back(float_field("optim", "eps", c.optim.adamw.eps));
    f.push_back(float_field("optim", "weight_decay", c.optim.adamw.weight_decay));
    f.push_back(uint_field("optim", "t0", c.optim.t0));
    f.push_back(uint_field("optim", "t_mult", c.optim.t_mult));
    f.push_back(double_field("optim", "eta_min_ratio", c.optim.eta_min_ratio));
    f.push_back(uint_field("optim", "batch_size", c.optim.batch_size));
    f.push_back(uint_field("optim", "grad_accum", c.optim.grad_accum));

    f.push_back(uint_field("train", "steps", c.train.steps));
    f.push_back(uint_field("train", "log_interval", c.train.log_interval));
    f.push_back(uint_field("train", "checkpoint_interval", c.train.checkpoint_interval));
    f.push_back(double_field("train", "mix_ratio", c.train.mix_ratio));
    f.push_back(string_field("train", "out_dir", c.train.out_dir));
    f.push_back(uint_field("train", "seed", c.seed));

    f.push_back(string_field("data", "tokens", c.data.tokens));
    f.push_back(string_field("data", "features", c.data.features));
    f.push_back(string_field("data", "vocab_file", c.data.vocab_file));
    f.push_back(bool_field("data", "synthetic", c.data.synthetic));
    f.push_back(uint_field("data", "synthetic_items", c.data.synthetic_items));
    f.push_back(uint_field("data", "synthetic_grid", c.data.synthetic_grid));
    f.push_back(uint_field("data", "synthetic_seed", c.data.synthetic_seed));
    return f;
}

}  // namespace

void RunConfig::validate() const {
    try {
        model.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config error: ") + e.what());
    }
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError("config error: " + msg);
    };
    need(optim.lr > 0.0, "[optim] lr must be positive");
    need(optim.t0 > 0 && optim.t_mult > 0, "[optim] t0 and t_mult must be positive");
    need(optim.eta_min_ratio >= 0.0 && optim.eta_min_ratio <= 1.0, "[optim] eta_min_ratio must lie in [0, 1]");
    need(optim.batch_size > 0, "[optim] batch_size must be positive");
    need(optim.grad_accum > 0, "[optim] grad_accum must be positive");
    need(train.log_interval > 0, "[train] log_interval must be positive");
    need(train.mix_ratio >= 0.0 && train.mix_ratio <= 1.0, "[train] mix_ratio must lie in [0, 1]");
    need(loss.cm >= 0.0 && loss.mem >= 0.0, "[loss] weights must be non-negative");
    need(controller.ema_window > 0, "[controller] ema_window must be positive");
    need(data.synthetic_items > 0 && data.synthetic_items <= 80, "[data] synthetic_items must lie in [1, 80]");
    need(data.synthetic_grid >= 2, "[data] synthetic_grid must be at least 2");
}

RunConfig preset(const std::string& name) {
    RunConfig c;
    if (name == "paper") {
        c.model.vocab_size = 50257;
        return c;
    }
    if (name == "desk") {
        c.model.d_model = 64;
        c.model.memory.width = 64;
        c.model.memory.slots = 32;
        c.model.window = 60;
        c.optim.lr = 2e-3;
        c.optim.batch_size = 8;
        c.optim.grad_accum = 1;
        c.train.steps = 2000;
        c.train.log_interval = 100;
        c.train.checkpoint_interval = 500;
        c.train.out_dir = "runs/desk";
        c.data.synthetic = true;
        return c;
    }
    throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

RunConfig parse_config(const std::string& text, RunConfig base) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError("config error: line " + std::to_string(e.line()) + ": " + e.message());
    }
    auto table = fields(base);
    for (const auto& [section, keys] : tree) {
        if (keys.empty() && !keys.data().empty()) {
            throw ConfigError("config error: key '" + section + "' appears outside any section");
        }
        bool known_section = false;
        for (const auto& f : table) known_section = known_section || section == f.section;
        if (!known_section) throw ConfigError("config error: unknown section [" + section + "]");
        for (const auto& [key, value] : keys) {
            auto it = std::find_if(table.begin(), table.end(),
                                   [&](const Field& f) { return section == f.section && key == f.key; });
            if (it == table.end()) throw ConfigError("config error: unknown key [" + section + "] " + key);
            it->set(value.data());
        }
    }
    base.model.memory.width = base.model.d_model;
    base.validate();
    return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config error: cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

std::string config_text(const RunConfig& config) {
    RunConfig copy = config;
    std::string out, current;
    for (const auto& f : fields(copy)) {
        if (current != f.section) {
            if (!current.empty()) out += "\n";
            current = f.section;
            out += "[" + current + "]\n";
        }
        out += std::string(f.key) + " = " + f.get() + "\n";
    }
    return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t config_digest(const RunConfig& config) { return fnv1a64(config_text(config)); }

}  // namespace bitmar
