#include "bitmar/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "bitmar/checkpoint.hpp"
#include "bitmar/trainer.hpp"

namespace bitmar {

Tokenizer make_tokenizer(const RunConfig& config) {
    const auto vocab = static_cast<std::uint32_t>(config.model.vocab_size);
    if (!config.data.vocab_file.empty()) return Tokenizer::from_vocab_file(config.data.vocab_file, vocab);
    if (vocab < 257) throw UsageError("config error: [model] vocab_size must be at least 257 for the byte tokenizer");
    return Tokenizer(vocab);
}

Dataset load_training_data(const RunConfig& config, const Tokenizer& tokenizer) {
    if (config.data.synthetic) {
        return make_synthetic(config.data.synthetic_items, config.data.synthetic_grid, config.model.feature_dim, tokenizer,
                              config.data.synthetic_seed)
            .dataset;
    }
    if (config.data.tokens.empty()) throw UsageError("data error: [data] tokens is not set and synthetic is false");
    if (!std::filesystem::exists(config.data.tokens)) {
        throw UsageError("data error: token file '" + config.data.tokens + "' does not exist");
    }
    if (!config.data.features.empty() && !std::filesystem::exists(config.data.features)) {
        throw UsageError("data error: feature file '" + config.data.features + "' does not exist");
    }
    auto ds = load_dataset(config.data.tokens, config.data.features);
    for (const auto& cap : ds.captions)
        for (auto id : cap)
            if (id >= config.model.vocab_size) {
                throw UsageError("data error: token id " + std::to_string(id) + " exceeds [model] vocab_size");
            }
    if (ds.has_features() && ds.feature_dim != config.model.feature_dim) {
        throw UsageError("data error: feature dim does not match [model] feature_dim");
    }
    return ds;
}

double BenchSetting::mean_tokens_per_second() const {
    double s = 0.0;
    for (const auto& r : runs) s += r.tokens_per_second;
    return runs.empty() ? 0.0 : s / static_cast<double>(runs.size());
}

double BenchSetting::mean_latency_ms() const {
    double s = 0.0;
    for (const auto& r : runs) s += r.latency_ms;
    return runs.empty() ? 0.0 : s / static_cast<double>(runs.size());
}

double BenchSetting::latency_variation() const {
    if (runs.size() < 2) return 0.0;
    const double mu = mean_latency_ms();
    double var = 0.0;
    for (const auto& r : runs) var += (r.latency_ms - mu) * (r.latency_ms - mu);
    var /= static_cast<double>(runs.size());
    return mu > 0.0 ? std::sqrt(var) / mu : 0.0;
}

double BenchReport::ratio() const {
    const double off = memory_off.mean_tokens_per_second();
    return off > 0.0 ? memory_on.mean_tokens_per_second() / off : 0.0;
}

BenchReport run_bench(BitMarModel& model, int length, int runs) {
    if (length <= 0) throw std::domain_error("bench: length must be positive");
    if (runs <= 0) throw std::domain_error("bench: runs must be positive");
    model.set_training(false);
    BenchReport report;
    report.length = length;
    const std::uint32_t bos = model.config().end_token();
    auto measure = [&](bool use_memory) {
        using clock = std::chrono::steady_clock;
        const auto start = clock::now();
        const auto c = model.condition({}, {}, 0, use_memory);
        auto stream = model.decoder().start_stream(c.fused, c.memory_read);
        std::uint32_t token = bos;
        for (int i = 0; i < length; ++i) {
            const auto logits = model.decoder().decode_step(token, stream);
            const auto v = logits.data();
            token = static_cast<std::uint32_t>(std::max_element(v.begin(), v.end()) - v.begin());
        }
        const double secs = std::chrono::duration<double>(clock::now() - start).count();
        if (report.kv_cache_bytes == 0) {
            for (const auto& cache : stream.caches) report.kv_cache_bytes += cache.capacity_bytes();
        }
        return BenchRun{length / secs, 1e3 * secs / length};
    };
    measure(true);  // warm-up
    for (bool on : {true, false}) {
        auto& setting = on ? report.memory_on : report.memory_off;
        setting.memory = on;
        for (int r = 0; r < runs; ++r) setting.runs.push_back(measure(on));
    }
    return report;
}

namespace {

struct Options {
    std::string config_path;
    std::string preset_name;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool no_memory = false;
    bool write_memory = false;
    std::string out;
    std::string checkpoint;
    std::string resume;
    std::uint64_t steps = 0;
    std::string prompt;
    long long item = -1;
    int max_new = 64;
    std::string sampler = "greedy";
    float temperature = 1.0f;
    std::size_t top_k = 0;
    std::string what;
    int length = 256;
    int runs = 3;
    std::size_t synth_items = 20;
    std::size_t synth_grid = 4;
};

RunConfig resolve_config(const Options& o) {
    RunConfig c = preset(o.preset_name.empty() ? "desk" : o.preset_name);
    if (!o.config_path.empty()) c = load_config(o.config_path, c);
    if (o.seed_set) c.seed = o.seed;
    if (o.no_memory) c.model.memory.enabled = false;
    c.validate();
    return c;
}

void print_report(const BenchReport& r, std::ostream& out) {
    char buf[256];
    for (const auto* s : {&r.memory_on, &r.memory_off}) {
        std::snprintf(buf, sizeof buf, "memory=%s tokens_per_s=%.1f latency_ms=%.4f latency_cv=%.4f runs=%zu",
                      s->memory ? "on" : "off", s->mean_tokens_per_second(), s->mean_latency_ms(),
                      s->latency_variation(), s->runs.size());
        out << buf << "\n";
    }
    std::snprintf(buf, sizeof buf, "ratio_on_over_off=%.4f", r.ratio());
    out << buf << "\n";
    out << "kv_cache_bytes=" << r.kv_cache_bytes << "\n";
    out << "length=" << r.length << "\n";
}

int cmd_train(const Options& o, std::ostream& out) {
    RunConfig cfg;
    std::optional<LoadedCheckpoint> resumed;
    if (!o.resume.empty()) {
        resumed = load_checkpoint(o.resume);
        cfg = o.config_path.empty() ? resumed->config : resolve_config(o);
    } else {
        cfg = resolve_config(o);
    }
    if (!o.out.empty()) cfg.train.out_dir = o.out;
    if (o.steps > 0) cfg.train.steps = o.steps;
    if (o.seed_set) cfg.seed = o.seed;
    if (o.no_memory) cfg.model.memory.enabled = false;

    const auto tokenizer = make_tokenizer(cfg);
    const auto dataset = load_training_data(cfg, tokenizer);

    std::unique_ptr<BitMarModel> model;
    if (resumed) {
        model = model_from_checkpoint(*resumed, cfg);
    } else {
        model = std::make_unique<BitMarModel>(cfg.model, cfg.seed);
    }
    Trainer trainer(*model, cfg);
    if (resumed) restore_trainer(trainer, resumed->file);
    LoopOptions loop{cfg.train.steps, cfg.train.out_dir, nullptr, &out};
    train_loop(trainer, dataset, loop);
    out << "checkpoint=" << (std::filesystem::path(cfg.train.out_dir) / "checkpoint.bmck").string() << "\n";
    return 0;
}

int cmd_generate(const Options& o, std::ostream& out) {
    const auto ckpt = load_checkpoint(o.checkpoint);
    auto model = model_from_checkpoint(ckpt);
    model->set_training(false);
    RunConfig cfg = ckpt.config;
    if (!o.config_path.empty()) cfg = load_config(o.config_path, cfg);
    const auto tokenizer = make_tokenizer(cfg);

    std::vector<float> features;
    std::size_t grid = 0;
    if (o.item >= 0) {
        const auto dataset = load_training_data(cfg, tokenizer);
        if (static_cast<std::size_t>(o.item) >= dataset.size()) {
            throw UsageError("generate: --item " + std::to_string(o.item) + " is outside the dataset of " +
                             std::to_string(dataset.size()));
        }
        if (dataset.has_features()) {
            features = dataset.features[static_cast<std::size_t>(o.item)];
            grid = dataset.grid;
        }
    }
    Sampler sampler;
    if (o.sampler == "greedy") {
        sampler.kind = SamplerKind::greedy;
    } else if (o.sampler == "temperature") {
        sampler.kind = SamplerKind::temperature;
    } else if (o.sampler == "top-k") {
        sampler.kind = SamplerKind::top_k;
    } else {
        throw UsageError("generate: unknown sampler '" + o.sampler + "'");
    }
    sampler.temperature = o.temperature;
    sampler.top_k = o.top_k;
    Rng rng(derive_seed(o.seed_set ? o.seed : cfg.seed, 4));
    std::vector<std::uint32_t> prompt;
    if (!o.prompt.empty()) prompt = tokenizer.encode(o.prompt);
    const auto ids = model->generate(prompt, features, grid, o.max_new, sampler, rng, !o.no_memory, o.write_memory);
    out << o.prompt << tokenizer.decode(ids) << "\n";
    return 0;
}

int cmd_inspect(const Options& o, std::ostream& out) {
    const auto ckpt = load_checkpoint(o.checkpoint);
    if (o.what == "config") {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(ckpt.file.digest));
        out << "digest=" << buf << "\n" << ckpt.file.at("config").text();
        return 0;
    }
    auto model = model_from_checkpoint(ckpt);
    model->set_training(false);
    if (o.what == "eq") {
        char buf[256];
        for (const auto& [name, eq] : model->quantization_per_layer()) {
            std::snprintf(buf, sizeof buf, "%s %.6f", name.c_str(), eq);
            out << buf << "\n";
        }
        std::snprintf(buf, sizeof buf, "overall %.6f", model->quantization_effectiveness());
        out << buf << "\n";
        return 0;
    }
    // memory-heatmap
    const auto tokenizer = make_tokenizer(ckpt.config);
    Dataset dataset;
    try {
        dataset = load_training_data(ckpt.config, tokenizer);
    } catch (const UsageError&) {
        dataset.captions.push_back({});  // no data reachable: a single prompt-only query
    }
    const auto column = model->slot_activation(dataset);
    const std::filesystem::path path = o.out.empty() ? "heatmap.txt" : o.out;
    write_heatmap(path, {column});
    out << "heatmap=" << path.string() << " slots=" << column.size() << "\n";
    return 0;
}

int cmd_bench(const Options& o, std::ostream& out) {
    if (o.length <= 0) throw UsageError("bench: --length must be positive");
    const auto ckpt = load_checkpoint(o.checkpoint);
    auto model = model_from_checkpoint(ckpt);
    const auto report = run_bench(*model, o.length, o.runs);
    print_report(report, out);
    return 0;
}

int cmd_synth(const Options& o, std::ostream& out) {
    const std::filesystem::path dir = o.out.empty() ? "synthetic" : o.out;
    std::filesystem::create_directories(dir);
    const Tokenizer tokenizer;
    const auto set = make_synthetic(o.synth_items, o.synth_grid, 768, tokenizer, o.seed_set ? o.seed : 1);
    write_token_file(dir / "tokens.bmtk", tokenizer.vocab_size(), set.dataset.captions);
    std::vector<float> flat;
    for (const auto& f : set.dataset.features) flat.insert(flat.end(), f.begin(), f.end());
    write_feature_file(dir / "features.bmvf", o.synth_grid, 768, flat);
    std::ofstream captions(dir / "captions.txt");
    for (const auto& c : set.captions) captions << c << "\n";
    out << "wrote " << set.captions.size() << " items to " << dir.string() << "\n";
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"BitMar: ternary multimodal encoder-decoder with episodic memory"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* cmd) {
        cmd->add_option("--config", o.config_path, "INI config file");
        cmd->add_option("--preset", o.preset_name, "desk or paper");
        cmd->add_option("--seed", o.seed, "run seed")->each([&](const std::string&) { o.seed_set = true; });
        cmd->add_flag("--no-memory", o.no_memory, "disable the episodic memory pathway");
        cmd->add_option("--out", o.out, "output directory or file");
    };

    auto* train = app.add_subcommand("train", "train a model");
    common(train);
    train->add_option("--resume", o.resume, "checkpoint to continue from");
    train->add_option("--steps", o.steps, "total steps (overrides the config)");

    auto* generate = app.add_subcommand("generate", "generate text from a checkpoint");
    common(generate);
    generate->add_option("--checkpoint", o.checkpoint, "checkpoint to load")->required();
    generate->add_option("--prompt", o.prompt, "text to continue");
    generate->add_option("--item", o.item, "dataset item whose features condition generation");
    generate->add_option("--max-new", o.max_new, "most tokens to generate");
    generate->add_option("--sampler", o.sampler, "greedy, temperature or top-k");
    generate->add_option("--temperature", o.temperature, "softmax temperature for sampling");
    generate->add_option("--top-k", o.top_k, "candidates kept by top-k");
    generate->add_flag("--write-memory", o.write_memory, "write the prompt's query into memory before decoding");

    auto* inspect = app.add_subcommand("inspect", "report on a checkpoint");
    common(inspect);
    inspect->add_option("what", o.what, "memory-heatmap, eq or config")
        ->required()
        ->check(CLI::IsMember({"memory-heatmap", "eq", "config"}));
    inspect->add_option("--checkpoint", o.checkpoint, "checkpoint to load")->required();

    auto* bench = app.add_subcommand("bench", "streaming throughput with memory on and off");
    common(bench);
    bench->add_option("--checkpoint", o.checkpoint, "checkpoint to load")->required();
    bench->add_option("--length", o.length, "tokens streamed per run");
    bench->add_option("--runs", o.runs, "timed runs per setting");

    auto* synth = app.add_subcommand("synth", "write the synthetic set as token/feature files");
    common(synth);
    synth->add_option("--items", o.synth_items, "items to write");
    synth->add_option("--grid", o.synth_grid, "patch grid side");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 2;
    }

    try {
        if (*train) return cmd_train(o, out);
        if (*generate) return cmd_generate(o, out);
        if (*inspect) return cmd_inspect(o, out);
        if (*bench) return cmd_bench(o, out);
        if (*synth) return cmd_synth(o, out);
    } catch (const UsageError& e) {
        err << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        err << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        err << "format error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace bitmar
