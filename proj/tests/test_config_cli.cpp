#include <fstream>
#include <regex>
#include <sstream>

#include "bitmar/checkpoint.hpp"
#include "bitmar/cli.hpp"
#include "bitmar/config.hpp"
#include "bitmar/trainer.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace bitmar;

namespace {

struct CliResult {
    int code;
    std::string out;
    std::string err;
};

CliResult cli(std::vector<std::string> args) {
    args.insert(args.begin(), "bitmar");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::filesystem::path write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream(p) << text;
    return p;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// A tiny trained run shared by the CLI tests.
const std::filesystem::path& trained_run() {
    static const std::filesystem::path dir = [] {
        const auto d = test::scratch_dir("cli_run");
        auto cfg = test::tiny_config();
        cfg.train.steps = 10;
        write_text(d / "tiny.ini", config_text(cfg));
        const auto r = cli({"train", "--config", (d / "tiny.ini").string(), "--out", (d / "run").string()});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        return d;
    }();
    return dir;
}

std::string checkpoint() { return (trained_run() / "run" / "checkpoint.bmck").string(); }

}  // namespace

TEST_CASE("config text round-trips through the parser") {
    const auto cfg = test::tiny_config();
    const auto back = parse_config(config_text(cfg), RunConfig{});
    CHECK(config_text(back) == config_text(cfg));
    CHECK(config_digest(back) == config_digest(cfg));
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
}

TEST_CASE("unknown sections and keys are rejected by name") {
    try {
        parse_config("[model]\nd_modle = 32\n", RunConfig{});
        FAIL("accepted an unknown key");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("d_modle") != std::string::npos);
    }
    try {
        parse_config("[modle]\nd_model = 32\n", RunConfig{});
        FAIL("accepted an unknown section");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("modle") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config("[model]\nd_model = lots\n", RunConfig{}), ConfigError);
    CHECK_THROWS_AS(parse_config("[model]\nheads = 3\n", RunConfig{}), ConfigError);
    CHECK_THROWS_AS(parse_config("[optim]\nlr = -1\n", RunConfig{}), ConfigError);
    CHECK_THROWS_AS(preset("laptop"), ConfigError);
}

TEST_CASE("overrides land in the right fields") {
    const auto c = parse_config("[loss]\ncm_weight = 0.5\nmem_weight = 0.2\n[streaming]\nsinks = 2\nwindow = 10\n"
                                "[model]\nd_model = 32\n",
                                preset("desk"));
    CHECK(c.loss.cm == 0.5);
    CHECK(c.loss.mem == 0.2);
    CHECK(c.model.sinks == 2);
    CHECK(c.model.window == 10);
    CHECK(c.model.memory.width == 32);
    CHECK(c.optim.lr == 2e-3);
}

TEST_CASE("presets") {
    const auto paper = preset("paper");
    CHECK(paper.model.vocab_size == 50257);
    CHECK(paper.model.d_model == 128);
    CHECK(paper.model.heads == 4);
    CHECK(paper.model.encoder_layers == 4);
    CHECK(paper.model.decoder_layers == 4);
    CHECK(paper.model.sinks == 4);
    CHECK(paper.model.window == 1020);
    CHECK(paper.model.memory.slots == 512);
    CHECK(paper.model.memory.width == 128);
    CHECK(paper.optim.lr == 2e-4);
    CHECK(paper.optim.batch_size == 64);
    CHECK(paper.optim.grad_accum == 2);
    CHECK(paper.loss.cm == 1.5);
    CHECK(paper.loss.mem == 0.1);
    CHECK(paper.model.tau == doctest::Approx(0.07));
    CHECK(paper.model.memory.alpha == doctest::Approx(0.2));
    CHECK(paper.controller.ema_window == 200);
    CHECK(paper.controller.drop_threshold == 0.12);
    CHECK(paper.controller.cooldown == 800);
    CHECK(paper.controller.duration == 1500);
    CHECK(paper.optim.t0 == 1000);
    CHECK(paper.optim.t_mult == 2);
    CHECK(paper.optim.eta_min_ratio == 0.1);
    CHECK(paper.model.vision_dropout == doctest::Approx(0.1));
    CHECK(paper.optim.adamw.weight_decay == doctest::Approx(0.01));

    const auto desk = preset("desk");
    CHECK(desk.model.d_model == 64);
    CHECK(desk.model.memory.slots == 32);
    CHECK(desk.model.window == 60);
    CHECK(desk.train.steps == 2000);
    CHECK(desk.data.synthetic);
    CHECK_NOTHROW(desk.validate());
}

TEST_CASE("exit codes") {
    CHECK(cli({}).code == 2);
    CHECK(cli({"fly"}).code == 2);
    CHECK(cli({"train", "--bogus"}).code == 2);

    const auto dir = test::scratch_dir("cli_codes");
    const auto bad = write_text(dir / "bad.ini", "[model]\nwidth = 3\n");
    auto r = cli({"train", "--config", bad.string(), "--out", (dir / "x").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("width") != std::string::npos);

    CHECK(cli({"train", "--config", (dir / "absent.ini").string()}).code == 2);

    const auto nodata = write_text(dir / "nodata.ini", "[data]\nsynthetic = false\ntokens = " +
                                                           (dir / "missing.bmtk").string() + "\n");
    r = cli({"train", "--config", nodata.string(), "--out", (dir / "y").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("missing.bmtk") != std::string::npos);

    const auto garbage = write_text(dir / "garbage.bmck", "not a checkpoint");
    CHECK(cli({"inspect", "eq", "--checkpoint", garbage.string()}).code == 1);
    CHECK(cli({"generate", "--checkpoint", (dir / "none.bmck").string()}).code == 1);
}

TEST_CASE("train writes a checkpoint, metrics and heatmap") {
    const auto run = trained_run() / "run";
    CHECK(std::filesystem::exists(run / "checkpoint.bmck"));
    const auto log = slurp(run / "metrics.log");
    const std::regex line(
        R"(step=\d+ L_lm=[0-9.]+ L_cm=[0-9.]+ L_mem=\S+ total=[0-9.]+ alignment=(na|-?[0-9.]+) E_q=[0-9.]+ )"
        R"(mem_entropy=[0-9.]+ lr=\S+ intervention=\w+)");
    std::istringstream lines(log);
    std::string l;
    int n = 0;
    while (std::getline(lines, l)) {
        CHECK_MESSAGE(std::regex_match(l, line), l);
        ++n;
    }
    CHECK(n == 2);
    const auto heat = read_heatmap(run / "heatmap.txt");
    CHECK(heat.size() == 2);
    CHECK(heat[0].size() == 8);
}

TEST_CASE("the same seed gives the same run") {
    const auto dir = test::scratch_dir("cli_seed");
    auto cfg = test::tiny_config();
    cfg.train.steps = 5;
    const auto ini = write_text(dir / "c.ini", config_text(cfg));
    for (const char* sub : {"a", "b"}) {
        CHECK(cli({"train", "--config", ini.string(), "--seed", "11", "--out", (dir / sub).string()}).code == 0);
    }
    CHECK(cli({"train", "--config", ini.string(), "--seed", "12", "--out", (dir / "c").string()}).code == 0);
    CHECK(slurp(dir / "a" / "metrics.log") == slurp(dir / "b" / "metrics.log"));
    CHECK(slurp(dir / "a" / "metrics.log") != slurp(dir / "c" / "metrics.log"));
    // the embedded config differs only in out_dir, so compare the tensors
    const auto ca = read_checkpoint_file(dir / "a" / "checkpoint.bmck");
    const auto cb = read_checkpoint_file(dir / "b" / "checkpoint.bmck");
    REQUIRE(ca.entries.size() == cb.entries.size());
    for (std::size_t i = 0; i < ca.entries.size(); ++i) {
        CHECK(ca.entries[i].name == cb.entries[i].name);
        if (ca.entries[i].name != "config") CHECK(ca.entries[i].bytes == cb.entries[i].bytes);
    }
}

TEST_CASE("generate is deterministic and honours --no-memory") {
    const auto ck = checkpoint();
    const auto a = cli({"generate", "--checkpoint", ck, "--item", "0", "--max-new", "20"});
    const auto b = cli({"generate", "--checkpoint", ck, "--item", "0", "--max-new", "20"});
    REQUIRE_MESSAGE(a.code == 0, a.err);
    CHECK(a.out == b.out);
    const auto off = cli({"generate", "--checkpoint", ck, "--item", "0", "--max-new", "20", "--no-memory"});
    CHECK(off.code == 0);
    const auto t1 = cli({"generate", "--checkpoint", ck, "--prompt", "a ", "--sampler", "temperature",
                         "--temperature", "1.5", "--seed", "3"});
    const auto t2 = cli({"generate", "--checkpoint", ck, "--prompt", "a ", "--sampler", "temperature",
                         "--temperature", "1.5", "--seed", "3"});
    CHECK(t1.code == 0);
    CHECK(t1.out == t2.out);
    CHECK(t1.out.rfind("a ", 0) == 0);
    CHECK(cli({"generate", "--checkpoint", ck, "--sampler", "beam"}).code == 2);
    CHECK(cli({"generate", "--checkpoint", ck, "--item", "999"}).code == 2);
}

TEST_CASE("inspect reports effectiveness, config and a heatmap") {
    const auto ck = checkpoint();
    auto r = cli({"inspect", "eq", "--checkpoint", ck});
    REQUIRE(r.code == 0);
    std::istringstream lines(r.out);
    std::string name;
    double eq = -1.0;
    int n = 0;
    while (lines >> name >> eq) {
        CHECK(eq >= 0.0);
        CHECK(eq <= 1.0);
        ++n;
    }
    CHECK(name == "overall");
    CHECK(n > 10);

    r = cli({"inspect", "config", "--checkpoint", ck});
    CHECK(r.code == 0);
    CHECK(r.out.find("[model]") != std::string::npos);
    CHECK(r.out.rfind("digest=", 0) == 0);

    const auto heat = trained_run() / "inspect_heat.txt";
    r = cli({"inspect", "memory-heatmap", "--checkpoint", ck, "--out", heat.string()});
    CHECK(r.code == 0);
    const auto cols = read_heatmap(heat);
    REQUIRE(cols.size() == 1);
    CHECK(cols[0].size() == 8);
    double total = 0.0;
    for (float v : cols[0]) total += v;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(cli({"inspect", "weights", "--checkpoint", ck}).code == 2);
}

TEST_CASE("bench reports both memory settings") {
    const auto r = cli({"bench", "--checkpoint", checkpoint(), "--length", "100", "--runs", "2"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.find("memory=on") != std::string::npos);
    CHECK(r.out.find("memory=off") != std::string::npos);
    CHECK(r.out.find("ratio_on_over_off=") != std::string::npos);
    // One layer, S + W = 32 entries, keys and values of width 16 in f32.
    CHECK(r.out.find("kv_cache_bytes=4096") != std::string::npos);
    CHECK(cli({"bench", "--checkpoint", checkpoint(), "--length", "0"}).code == 2);
}

TEST_CASE("bench cache footprint is independent of the stream length") {
    auto cfg = test::tiny_config();
    BitMarModel model(cfg.model, cfg.seed);
    const auto short_run = run_bench(model, 10, 1);
    const auto long_run = run_bench(model, 300, 1);
    const std::size_t expected = cfg.model.decoder_layers * (cfg.model.sinks + cfg.model.window) * 2 *
                                 cfg.model.d_model * sizeof(float);
    CHECK(short_run.kv_cache_bytes == expected);
    CHECK(long_run.kv_cache_bytes == expected);
    CHECK(long_run.ratio() > 0.0);
}
