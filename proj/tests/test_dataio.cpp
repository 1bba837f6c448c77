#include <algorithm>
#include <fstream>
#include <iterator>
#include <set>

#include "bitmar/dataio.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace bitmar;

namespace {

std::vector<unsigned char> file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void put_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::uint64_t format_offset(const std::filesystem::path& p, bool tokens) {
    try {
        if (tokens) {
            read_token_file(p);
        } else {
            FeatureFile f(p);
        }
    } catch (const FormatError& e) {
        return e.offset();
    }
    FAIL("expected a format error");
    return 0;
}

}  // namespace

TEST_CASE("byte tokenizer") {
    const Tokenizer tok;
    CHECK(tok.encode("ab") == std::vector<std::uint32_t>{97, 98});
    CHECK(tok.encode(std::string(300, 'x')).size() == 256);
    CHECK(tok.encode("") == std::vector<std::uint32_t>{256});
    CHECK(tok.end_token() == 256);
    const std::string text = "a red circle at top left.";
    CHECK(tok.decode(tok.encode(text)) == text);
    for (int c = 0; c < 128; ++c) {
        const std::string s(1, static_cast<char>(c));
        CHECK(tok.decode(tok.encode(s)) == s);
    }
    CHECK(tokenize("hi", tok, 1) == std::vector<std::uint32_t>{'h'});
    CHECK_THROWS_AS(Tokenizer(100), std::invalid_argument);
}

TEST_CASE("vocabulary file tokenizer uses greedy longest match") {
    const auto dir = test::scratch_dir("vocab");
    {
        std::ofstream out(dir / "vocab.txt");
        out << "a\nab\nabc\nb\nc\n \n";
    }
    const auto tok = Tokenizer::from_vocab_file(dir / "vocab.txt");
    CHECK(tok.vocab_size() == 7);
    CHECK(tok.end_token() == 6);
    CHECK(tok.encode("abcab c") == std::vector<std::uint32_t>{2, 1, 5, 4});
    CHECK(tok.decode(tok.encode("abcab c")) == "abcab c");
    CHECK_THROWS_AS(tok.encode("z"), std::invalid_argument);
    CHECK_THROWS_AS(Tokenizer::from_vocab_file(dir / "vocab.txt", 5), std::invalid_argument);
}

TEST_CASE("token file round-trip and exact layout") {
    const auto dir = test::scratch_dir("tokens");
    const std::vector<std::vector<std::uint32_t>> seqs{{1, 2, 3}, {}, {256}};
    write_token_file(dir / "t.bmtk", 257, seqs);
    const auto back = read_token_file(dir / "t.bmtk");
    CHECK(back.vocab_size == 257);
    CHECK(back.sequences == seqs);

    const auto bytes = file_bytes(dir / "t.bmtk");
    REQUIRE(bytes.size() == 4 + 4 + 4 + 8 + (4 + 12) + 4 + (4 + 4));
    const std::vector<unsigned char> header{'B', 'M', 'T', 'K', 1, 0, 0, 0, 1, 1, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0};
    CHECK(std::vector<unsigned char>(bytes.begin(), bytes.begin() + 20) == header);
    CHECK(bytes[20] == 3);
    CHECK(bytes[24] == 1);
    CHECK(bytes.back() == 0);
    CHECK(bytes[bytes.size() - 4] == 0);
    CHECK(bytes[bytes.size() - 3] == 1);

    CHECK_THROWS_AS(write_token_file(dir / "bad.bmtk", 10, {{10}}), std::out_of_range);
}

TEST_CASE("token file errors carry byte offsets") {
    const auto dir = test::scratch_dir("tokerr");
    write_token_file(dir / "t.bmtk", 257, {{1, 2, 3}});
    const auto good = file_bytes(dir / "t.bmtk");
    const auto p = dir / "x.bmtk";

    auto bad = good;
    bad[0] = 'X';
    put_bytes(p, bad);
    CHECK(format_offset(p, true) == 0);

    bad = good;
    bad[4] = 9;
    put_bytes(p, bad);
    CHECK(format_offset(p, true) == 8);

    bad.assign(good.begin(), good.begin() + 26);
    put_bytes(p, bad);
    CHECK(format_offset(p, true) == 26);

    bad = good;
    bad[28] = 0xff;
    bad[29] = 0xff;
    put_bytes(p, bad);
    CHECK(format_offset(p, true) == 28);

    bad = good;
    bad.push_back(0);
    put_bytes(p, bad);
    CHECK(format_offset(p, true) == good.size());
}

TEST_CASE("feature file round-trip, random access and errors") {
    const auto dir = test::scratch_dir("features");
    const std::size_t grid = 2, dim = 768, per = grid * grid * dim;
    std::vector<float> flat(3 * per);
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = static_cast<float>(i) * 0.25f - 7.0f;
    write_feature_file(dir / "f.bmvf", grid, dim, flat);

    const auto bytes = file_bytes(dir / "f.bmvf");
    CHECK(bytes.size() == kFeatureHeaderBytes + flat.size() * 4);
    const std::vector<unsigned char> header{'B', 'M', 'V', 'F', 1, 0, 0, 0, 3, 0, 0, 0,
                                            0,   0,   0,   0,   2, 0, 0, 0, 0, 3, 0, 0};
    CHECK(std::vector<unsigned char>(bytes.begin(), bytes.begin() + 24) == header);

    FeatureFile f(dir / "f.bmvf");
    CHECK(f.size() == 3);
    CHECK(f.grid() == grid);
    CHECK(f.dim() == dim);
    CHECK(f.offset_of(2) == 24 + 2 * per * 4);
    for (std::uint64_t i : {2u, 0u, 1u}) {
        const auto item = f.item(i);
        CHECK(std::equal(item.begin(), item.end(), flat.begin() + static_cast<std::ptrdiff_t>(i * per)));
    }
    CHECK_THROWS_AS(f.item(3), std::out_of_range);

    const auto p = dir / "x.bmvf";
    auto bad = bytes;
    bad[2] = 'X';
    put_bytes(p, bad);
    CHECK(format_offset(p, false) == 0);

    bad.assign(bytes.begin(), bytes.end() - 5);
    put_bytes(p, bad);
    CHECK(format_offset(p, false) == bad.size());

    write_feature_file(p, 1, 4, std::vector<float>(8, 1.0f));
    CHECK(format_offset(p, false) == 20);
    CHECK_THROWS_AS(write_feature_file(p, 2, 4, std::vector<float>(5)), std::invalid_argument);
}

TEST_CASE("dataset loading pairs tokens with features") {
    const auto dir = test::scratch_dir("dataset");
    write_token_file(dir / "t.bmtk", 257, {{1}, {2, 3}});
    write_feature_file(dir / "f.bmvf", 2, 768, std::vector<float>(2 * 4 * 768, 0.5f));
    const auto ds = load_dataset(dir / "t.bmtk", dir / "f.bmvf");
    CHECK(ds.size() == 2);
    CHECK(ds.has_features());
    CHECK(ds.grid == 2);
    CHECK(ds.features[1].size() == 4 * 768);
    write_feature_file(dir / "g.bmvf", 2, 768, std::vector<float>(4 * 768, 0.5f));
    CHECK_THROWS_AS(load_dataset(dir / "t.bmtk", dir / "g.bmvf"), std::invalid_argument);
    CHECK_FALSE(load_dataset(dir / "t.bmtk", {}).has_features());
}

TEST_CASE("batches pad with the end token and mask real tokens") {
    Dataset ds;
    ds.captions = {{1, 2, 3}, {4}};
    ds.features = {std::vector<float>(4, 1.0f), std::vector<float>(4, 2.0f)};
    ds.grid = 1;
    ds.feature_dim = 4;
    const std::vector<std::size_t> items{0, 1};
    const std::vector<std::uint8_t> mm{1, 0};
    const auto b = make_batch(ds, items, mm, 9);
    CHECK(b.size == 2);
    CHECK(b.length == 3);
    CHECK(b.ids == std::vector<std::uint32_t>{1, 2, 3, 4, 9, 9});
    CHECK(b.mask == std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0});
    CHECK(b.row_length(1) == 1);
    CHECK(b.multimodal(0));
    CHECK_FALSE(b.multimodal(1));
    const std::vector<std::size_t> out_of_range{2};
    const std::vector<std::uint8_t> one{0};
    CHECK_THROWS_AS(make_batch(ds, out_of_range, one, 9), std::out_of_range);
}

TEST_CASE("modality mixing follows the ratio") {
    const auto cfg = test::tiny_config();
    const auto ds = test::tiny_dataset(cfg);
    const auto pad = cfg.model.end_token();
    BatchSampler s(ds.size(), 11);
    for (int i = 0; i < 20; ++i) {
        const auto all = assemble_batch(ds, 8, 1.0, s, pad);
        const auto none = assemble_batch(ds, 8, 0.0, s, pad);
        for (std::size_t r = 0; r < 8; ++r) {
            CHECK(all.multimodal(r));
            CHECK_FALSE(none.multimodal(r));
        }
    }
    std::size_t mm = 0, total = 0;
    for (int i = 0; i < 1250; ++i) {
        const auto b = assemble_batch(ds, 8, 0.5, s, pad);
        for (std::size_t r = 0; r < b.size; ++r) mm += b.multimodal(r);
        total += b.size;
    }
    REQUIRE(total == 10000);
    const double frac = static_cast<double>(mm) / static_cast<double>(total);
    CHECK(frac >= 0.47);
    CHECK(frac <= 0.53);

    Dataset empty;
    CHECK_THROWS_AS(assemble_batch(empty, 4, 0.5, s, pad), std::domain_error);
    BatchSampler none_left(0, 1);
    CHECK_THROWS_AS(none_left.next_items(1), std::domain_error);
    CHECK_THROWS_AS(assemble_batch(ds, 4, 1.5, s, pad), std::domain_error);
}

TEST_CASE("the sampler visits each item once per epoch and restores its state") {
    BatchSampler s(10, 3);
    auto items = s.next_items(10);
    std::sort(items.begin(), items.end());
    for (std::size_t i = 0; i < 10; ++i) CHECK(items[i] == i);
    s.next_items(3);
    const auto saved = s.state();
    const auto ahead = s.next_items(12);
    BatchSampler t(10, 99);
    t.set_state(saved);
    CHECK(t.next_items(12) == ahead);
}

TEST_CASE("synthetic captions are deterministic and described by their features") {
    const Tokenizer tok;
    const auto a = make_synthetic(20, 4, 768, tok, 1);
    const auto b = make_synthetic(20, 4, 768, tok, 1);
    CHECK(a.captions == b.captions);
    CHECK(a.dataset.features == b.dataset.features);
    CHECK(a.dataset.size() == 20);
    std::set<std::string> distinct(a.captions.begin(), a.captions.end());
    CHECK(distinct.size() == 20);
    for (std::size_t i = 0; i < a.captions.size(); ++i) CHECK(tok.decode(a.dataset.captions[i]) == a.captions[i]);
    CHECK_THROWS_AS(make_synthetic(81, 4, 768, tok, 1), std::invalid_argument);
}
