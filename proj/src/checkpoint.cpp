#include "bitmar/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include "binio.hpp"
#include "bitmar/trainer.hpp"

namespace bitmar {

std::vector<float> CheckpointEntry::floats() const {
    if (dtype != DType::f32 || bytes.size() % 4 != 0) throw std::runtime_error("checkpoint entry " + name + " is not f32");
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
        out[i] = std::bit_cast<float>(u);
    }
    return out;
}

std::string CheckpointEntry::text() const {
    if (dtype != DType::i8) throw std::runtime_error("checkpoint entry " + name + " is not i8");
    return std::string(bytes.begin(), bytes.end());
}

const CheckpointEntry* CheckpointFile::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

const CheckpointEntry& CheckpointFile::at(const std::string& name) const {
    if (const auto* e = find(name)) return *e;
    throw std::runtime_error("checkpoint is missing entry '" + name + "'");
}

void CheckpointFile::add_floats(const std::string& name, std::vector<std::uint64_t> dims, std::span<const float> values) {
    CheckpointEntry e{name, DType::f32, std::move(dims), {}};
    e.bytes.resize(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto u = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) e.bytes[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xFFu);
    }
    entries.push_back(std::move(e));
}

void CheckpointFile::add_text(const std::string& name, const std::string& text) {
    entries.push_back({name, DType::i8, {text.size()}, std::vector<char>(text.begin(), text.end())});
}

void CheckpointFile::add_codes(const std::string& name, std::uint64_t rows, std::uint64_t cols,
                               std::span<const std::int8_t> codes) {
    CheckpointEntry e{name, DType::i8, {rows, cols}, std::vector<char>(codes.size())};
    std::memcpy(e.bytes.data(), codes.data(), codes.size());
    entries.push_back(std::move(e));
}

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write("BMCK", 4);
        binio::put<std::uint32_t>(out, kCheckpointVersion);
        binio::put<std::uint64_t>(out, file.digest);
        binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(file.entries.size()));
        for (const auto& e : file.entries) {
            binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
            out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
            binio::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
            binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.dims.size()));
            for (auto d : e.dims) binio::put<std::uint64_t>(out, d);
            binio::put<std::uint64_t>(out, e.bytes.size());
            out.write(e.bytes.data(), static_cast<std::streamsize>(e.bytes.size()));
        }
        out.flush();
        if (!out) {
            out.close();
            std::filesystem::remove(tmp);
            throw std::runtime_error("write failed for " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    binio::Reader r(in, path.string());
    r.magic("BMCK");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
    CheckpointFile file;
    file.digest = r.get<std::uint64_t>("config digest");
    const auto n = r.get<std::uint32_t>("entry count");
    for (std::uint32_t i = 0; i < n; ++i) {
        CheckpointEntry e;
        const auto name_len = r.get<std::uint32_t>("name length");
        if (name_len > 4096) r.fail("implausible entry name length " + std::to_string(name_len));
        e.name.resize(name_len);
        r.bytes(e.name.data(), name_len, "entry name");
        const auto dtype_at = r.offset();
        const auto dtype = r.get<std::uint8_t>("dtype");
        if (dtype > 1) throw FormatError("unknown dtype " + std::to_string(dtype) + " for " + e.name, dtype_at);
        e.dtype = static_cast<DType>(dtype);
        const auto ndim = r.get<std::uint32_t>("ndim");
        if (ndim > 8) r.fail("implausible ndim " + std::to_string(ndim));
        std::uint64_t count = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            e.dims.push_back(r.get<std::uint64_t>("dim"));
            count *= e.dims.back();
        }
        const auto len_at = r.offset();
        const auto len = r.get<std::uint64_t>("byte length");
        if (len != count * (e.dtype == DType::f32 ? 4 : 1)) {
            throw FormatError("byte length of " + e.name + " does not match its shape", len_at);
        }
        e.bytes.resize(len);
        r.bytes(e.bytes.data(), len, "entry payload");
        file.entries.push_back(std::move(e));
    }
    if (in.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes after the last entry");
    return file;
}

namespace {

std::string hex_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}

std::string controller_text(const ControllerState& s) {
    std::ostringstream os;
    os << s.step << ' ' << s.has_ema << ' ' << hex_double(s.ema) << ' ' << hex_double(s.ema_max) << ' '
       << (s.last_trigger ? static_cast<long long>(*s.last_trigger) : -1LL) << ' ' << static_cast<int>(s.active) << ' '
       << s.active_until;
    return os.str();
}

ControllerState parse_controller(const std::string& text) {
    std::istringstream is(text);
    ControllerState s;
    std::string ema, ema_max;
    long long last = -1;
    int active = 0;
    is >> s.step >> s.has_ema >> ema >> ema_max >> last >> active >> s.active_until;
    if (is.fail() || active < 0 || active > 3) throw std::runtime_error("malformed controller state in checkpoint");
    s.ema = std::strtod(ema.c_str(), nullptr);
    s.ema_max = std::strtod(ema_max.c_str(), nullptr);
    if (last >= 0) s.last_trigger = static_cast<std::uint64_t>(last);
    s.active = static_cast<Intervention>(active);
    return s;
}

std::vector<std::uint64_t> dims_of(const Tensor& t) { return {t.shape().begin(), t.shape().end()}; }

void copy_into(Tensor& t, const CheckpointEntry& e) {
    if (e.dims != dims_of(t)) {
        throw std::runtime_error("checkpoint entry " + e.name + " has the wrong shape for this model (expected " +
                                 shape_str(t.shape()) + ")");
    }
    const auto values = e.floats();
    std::copy(values.begin(), values.end(), t.data().begin());
}

}  // namespace

CheckpointFile snapshot(BitMarModel& model, const RunConfig& config, Trainer* trainer) {
    CheckpointFile f;
    const auto text = config_text(config);
    f.digest = fnv1a64(text);
    f.add_text("config", text);
    auto& reg = model.registry();
    for (const auto& p : reg.params) f.add_floats("param/" + p.name, dims_of(p.tensor), p.tensor.data());
    for (const auto& [name, layer] : reg.linears) {
        // codes as finalize() would derive them from the current latent weights
        const auto q = quantize_weights(layer->latent().data());
        f.add_codes("codes/" + name, layer->out_features(), layer->in_features(), q.codes);
        const float g[1] = {q.gamma};
        f.add_floats("gamma/" + name, {1}, g);
    }
    auto& mem = model.memory();
    f.add_floats("memory/usage", {mem.usage().size()}, mem.usage());
    f.add_floats("memory/previous", dims_of(mem.matrix()), mem.previous());
    f.add_text("memory/state", std::to_string(mem.has_previous()) + " " + std::to_string(mem.write_count()));
    if (trainer) {
        auto& opt = trainer->optimizer();
        for (std::size_t i = 0; i < reg.params.size(); ++i) {
            f.add_floats("adam/m/" + reg.params[i].name, dims_of(reg.params[i].tensor), opt.first_moments()[i]);
            f.add_floats("adam/v/" + reg.params[i].name, dims_of(reg.params[i].tensor), opt.second_moments()[i]);
        }
        f.add_text("state/trainer", std::to_string(trainer->step()) + " " + std::to_string(opt.step_count()));
        f.add_text("state/controller", controller_text(trainer->controller().state()));
        f.add_text("rng/controller", rng_state(trainer->controller().rng()));
        f.add_text("rng/dropout", rng_state(trainer->dropout_rng()));
        if (trainer->has_sampler()) f.add_text("state/sampler", trainer->sampler().state());
    }
    return f;
}

void save_checkpoint(const std::filesystem::path& path, BitMarModel& model, const RunConfig& config, Trainer* trainer) {
    write_checkpoint_file(path, snapshot(model, config, trainer));
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    LoadedCheckpoint c;
    c.file = read_checkpoint_file(path);
    const auto text = c.file.at("config").text();
    if (fnv1a64(text) != c.file.digest) {
        std::cerr << "warning: checkpoint config digest does not match its embedded config\n";
    }
    c.config = parse_config(text, RunConfig{});
    return c;
}

void restore_model(BitMarModel& model, const CheckpointFile& file) {
    auto& reg = model.registry();
    for (auto& p : reg.params) copy_into(p.tensor, file.at("param/" + p.name));
    for (auto& [name, layer] : reg.linears) {
        const auto& e = file.at("codes/" + name);
        if (e.dims != std::vector<std::uint64_t>{layer->out_features(), layer->in_features()}) {
            throw std::runtime_error("checkpoint codes for " + name + " have the wrong shape");
        }
        std::vector<std::int8_t> codes(e.bytes.size());
        std::memcpy(codes.data(), e.bytes.data(), codes.size());
        layer->set_codes(std::move(codes), file.at("gamma/" + name).floats().at(0));
    }
    auto& mem = model.memory();
    const auto usage = file.at("memory/usage").floats();
    const auto previous = file.at("memory/previous").floats();
    if (usage.size() != mem.usage().size() || previous.size() != mem.previous().size()) {
        throw std::runtime_error("checkpoint memory state does not match the model's slot count");
    }
    mem.usage() = usage;
    mem.previous() = previous;
    std::istringstream is(file.at("memory/state").text());
    bool has_prev = false;
    std::uint64_t writes = 0;
    is >> has_prev >> writes;
    if (is.fail()) throw std::runtime_error("malformed memory state in checkpoint");
    mem.set_has_previous(has_prev);
    mem.set_write_count(writes);
}

void restore_trainer(Trainer& trainer, const CheckpointFile& file) {
    auto& opt = trainer.optimizer();
    const auto& params = opt.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto m = file.at("adam/m/" + params[i].name).floats();
        auto v = file.at("adam/v/" + params[i].name).floats();
        if (m.size() != opt.first_moments()[i].size() || v.size() != m.size()) {
            throw std::runtime_error("optimizer moments for " + params[i].name + " have the wrong size");
        }
        opt.first_moments()[i] = std::move(m);
        opt.second_moments()[i] = std::move(v);
    }
    std::istringstream is(file.at("state/trainer").text());
    std::uint64_t step = 0, adam_t = 0;
    is >> step >> adam_t;
    if (is.fail()) throw std::runtime_error("malformed trainer state in checkpoint");
    trainer.set_step(step);
    opt.set_step_count(adam_t);
    trainer.controller().state() = parse_controller(file.at("state/controller").text());
    set_rng_state(trainer.controller().rng(), file.at("rng/controller").text());
    set_rng_state(trainer.dropout_rng(), file.at("rng/dropout").text());
    if (const auto* s = file.find("state/sampler")) {
        BatchSampler sampler;
        sampler.set_state(s->text());
        trainer.set_sampler(std::move(sampler));
    }
}

std::unique_ptr<BitMarModel> model_from_checkpoint(const LoadedCheckpoint& ckpt, const std::optional<RunConfig>& expected) {
    if (expected) {
        if (expected->model.vocab_size != ckpt.config.model.vocab_size) {
            throw std::invalid_argument("checkpoint vocab_size " + std::to_string(ckpt.config.model.vocab_size) +
                                        " does not match the configured vocab_size " +
                                        std::to_string(expected->model.vocab_size));
        }
        if (config_digest(*expected) != ckpt.file.digest) {
            std::cerr << "warning: checkpoint was written with a different configuration (digest mismatch)\n";
        }
    }
    auto model = std::make_unique<BitMarModel>(ckpt.config.model, ckpt.config.seed);
    restore_model(*model, ckpt.file);
    return model;
}

}  // namespace bitmar
