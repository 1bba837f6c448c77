#include "bitmar/dataio.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "binio.hpp"

namespace bitmar {

Tokenizer::Tokenizer(std::uint32_t vocab_size) : vocab_size_(vocab_size) {
    if (vocab_size < 257) throw std::invalid_argument("byte tokenizer needs vocab_size >= 257");
}

Tokenizer Tokenizer::from_vocab_file(const std::filesystem::path& path, std::uint32_t vocab_size) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocab file " + path.string());
    Tokenizer t(257);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto id = static_cast<std::uint32_t>(t.pieces_.size());
        if (line == "<unk>") t.unknown_ = id;
        t.lookup_.emplace(line, id);
        t.longest_ = std::max(t.longest_, line.size());
        t.pieces_.push_back(line);
    }
    if (t.pieces_.empty()) throw std::runtime_error("vocab file " + path.string() + " has no tokens");
    const auto needed = static_cast<std::uint32_t>(t.pieces_.size() + 1);
    if (vocab_size != 0 && vocab_size < needed) {
        throw std::invalid_argument("vocab file has " + std::to_string(t.pieces_.size()) +
                                    " tokens; vocab_size must be at least " + std::to_string(needed));
    }
    t.vocab_size_ = vocab_size == 0 ? needed : vocab_size;
    return t;
}

std::vector<std::uint32_t> Tokenizer::encode(std::string_view text, std::size_t max_len) const {
    std::vector<std::uint32_t> ids;
    if (pieces_.empty()) {
        for (unsigned char c : text) {
            if (ids.size() == max_len) break;
            ids.push_back(c);
        }
    } else {
        std::size_t i = 0;
        while (i < text.size() && ids.size() < max_len) {
            std::size_t len = std::min(longest_, text.size() - i);
            for (; len > 0; --len) {
                auto it = lookup_.find(std::string(text.substr(i, len)));
                if (it != lookup_.end()) {
                    ids.push_back(it->second);
                    break;
                }
            }
            if (len == 0) {
                if (!unknown_) throw std::invalid_argument("tokenizer: no vocabulary entry covers byte " + std::to_string(i));
                ids.push_back(*unknown_);
                len = 1;
            }
            i += len;
        }
    }
    if (ids.empty()) ids.push_back(end_token());
    return ids;
}

std::string Tokenizer::decode(std::span<const std::uint32_t> ids) const {
    std::string out;
    for (auto id : ids) {
        if (id == end_token()) continue;
        if (pieces_.empty()) {
            if (id < 256) out.push_back(static_cast<char>(id));
        } else if (id < pieces_.size()) {
            out += pieces_[id];
        }
    }
    return out;
}

std::vector<std::uint32_t> tokenize(std::string_view text, const Tokenizer& tokenizer, std::size_t max_len) {
    return tokenizer.encode(text, max_len);
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return in;
}

}  // namespace

void write_token_file(const std::filesystem::path& path, std::uint32_t vocab_size,
                      const std::vector<std::vector<std::uint32_t>>& sequences) {
    auto out = open_out(path);
    out.write("BMTK", 4);
    binio::put<std::uint32_t>(out, kTokenFileVersion);
    binio::put<std::uint32_t>(out, vocab_size);
    binio::put<std::uint64_t>(out, sequences.size());
    for (const auto& seq : sequences) {
        binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(seq.size()));
        for (auto id : seq) {
            if (id >= vocab_size) throw std::out_of_range("write_token_file: id " + std::to_string(id) + " >= vocab");
            binio::put<std::uint32_t>(out, id);
        }
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

TokenFileContents read_token_file(const std::filesystem::path& path) {
    auto in = open_in(path);
    binio::Reader r(in, path.string());
    r.magic("BMTK");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kTokenFileVersion) r.fail("unsupported token file version " + std::to_string(version));
    TokenFileContents c;
    c.vocab_size = r.get<std::uint32_t>("vocab_size");
    const auto count = r.get<std::uint64_t>("count");
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = r.get<std::uint32_t>("record length");
        std::vector<std::uint32_t> seq(len);
        for (auto& id : seq) {
            const auto at = r.offset();
            id = r.get<std::uint32_t>("token id");
            if (id >= c.vocab_size) throw FormatError("token id " + std::to_string(id) + " >= vocab_size", at);
        }
        c.sequences.push_back(std::move(seq));
    }
    if (in.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes after the declared records");
    return c;
}

void write_feature_file(const std::filesystem::path& path, std::size_t grid, std::size_t dim,
                        std::span<const float> features) {
    const std::size_t per = grid * grid * dim;
    if (per == 0 || features.size() % per != 0) {
        throw std::invalid_argument("write_feature_file: payload is not a whole number of grids");
    }
    auto out = open_out(path);
    out.write("BMVF", 4);
    binio::put<std::uint32_t>(out, kFeatureFileVersion);
    binio::put<std::uint64_t>(out, features.size() / per);
    binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(grid));
    binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(dim));
    for (float f : features) binio::put_f32(out, f);
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

FeatureFile::FeatureFile(const std::filesystem::path& path) : in_(open_in(path)) {
    binio::Reader r(in_, path.string());
    r.magic("BMVF");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kFeatureFileVersion) r.fail("unsupported feature file version " + std::to_string(version));
    n_items_ = r.get<std::uint64_t>("n_items");
    grid_ = r.get<std::uint32_t>("grid");
    const auto dim_at = r.offset();
    dim_ = r.get<std::uint32_t>("dim");
    if (dim_ != 768) throw FormatError("feature dim must be 768, got " + std::to_string(dim_), dim_at);
    const auto actual = std::filesystem::file_size(path);
    const auto expected = kFeatureHeaderBytes + n_items_ * item_bytes();
    if (actual != expected) {
        throw FormatError(path.string() + ": payload size mismatch, expected " + std::to_string(expected) +
                              " bytes in total",
                          std::min<std::uint64_t>(actual, expected));
    }
}

std::vector<float> FeatureFile::item(std::uint64_t index) {
    if (index >= n_items_) {
        throw std::out_of_range("feature item " + std::to_string(index) + " of " + std::to_string(n_items_));
    }
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(offset_of(index)));
    binio::Reader r(in_, "feature item");
    std::vector<float> out(grid_ * grid_ * dim_);
    for (auto& f : out) f = r.get_f32("feature value");
    return out;
}

Dataset load_dataset(const std::filesystem::path& tokens, const std::filesystem::path& features) {
    Dataset ds;
    ds.captions = read_token_file(tokens).sequences;
    if (!features.empty()) {
        FeatureFile ff(features);
        if (ff.size() != ds.size()) {
            throw std::invalid_argument("feature file has " + std::to_string(ff.size()) + " items but token file has " +
                                        std::to_string(ds.size()));
        }
        ds.grid = ff.grid();
        ds.feature_dim = ff.dim();
        for (std::uint64_t i = 0; i < ff.size(); ++i) ds.features.push_back(ff.item(i));
    }
    return ds;
}

std::size_t Batch::row_length(std::size_t row) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < length; ++t) n += mask[row * length + t];
    return n;
}

std::span<const std::uint32_t> Batch::row(std::size_t r) const {
    return std::span<const std::uint32_t>(ids).subspan(r * length, row_length(r));
}

Batch make_batch(const Dataset& dataset, std::span<const std::size_t> items, std::span<const std::uint8_t> multimodal,
                 std::uint32_t pad_token) {
    if (items.size() != multimodal.size()) throw std::invalid_argument("make_batch: items/modality flags differ in length");
    Batch b;
    b.size = items.size();
    b.grid = dataset.grid;
    b.items.assign(items.begin(), items.end());
    for (auto i : items) {
        if (i >= dataset.size()) throw std::out_of_range("make_batch: item " + std::to_string(i));
        b.length = std::max(b.length, std::min(dataset.captions[i].size(), kMaxTokens));
    }
    b.ids.assign(b.size * b.length, pad_token);
    b.mask.assign(b.size * b.length, 0);
    for (std::size_t r = 0; r < b.size; ++r) {
        const auto& cap = dataset.captions[items[r]];
        const std::size_t n = std::min(cap.size(), kMaxTokens);
        std::copy_n(cap.begin(), n, b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.length));
        std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(r * b.length), n, std::uint8_t{1});
        if (multimodal[r] && dataset.has_features()) {
            b.features.push_back(dataset.features[items[r]]);
        } else {
            b.features.emplace_back();
        }
    }
    return b;
}

BatchSampler::BatchSampler(std::size_t dataset_size, std::uint64_t seed) : n_(dataset_size), rng_(seed) {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
}

void BatchSampler::reshuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[uniform_index(rng_, i)]);
    cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next_items(std::size_t count) {
    if (n_ == 0) throw std::domain_error("batch sampler: empty dataset");
    std::vector<std::size_t> out;
    out.reserve(count);
    while (out.size() < count) {
        if (cursor_ == order_.size()) {
            ++epoch_;
            reshuffle();
        }
        out.push_back(order_[cursor_++]);
    }
    return out;
}

std::string BatchSampler::state() const {
    std::ostringstream os;
    os << n_ << ' ' << cursor_ << ' ' << epoch_;
    for (auto i : order_) os << ' ' << i;
    os << '\n' << rng_state(rng_);
    return os.str();
}

void BatchSampler::set_state(const std::string& s) {
    std::istringstream is(s);
    std::size_t n = 0;
    is >> n >> cursor_ >> epoch_;
    order_.assign(n, 0);
    for (auto& i : order_) is >> i;
    if (is.fail() || cursor_ > n) throw std::runtime_error("malformed sampler state");
    n_ = n;
    std::string rest((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    set_rng_state(rng_, rest);
}

Batch assemble_batch(const Dataset& dataset, std::size_t size, double mix_ratio, BatchSampler& sampler,
                     std::uint32_t pad_token) {
    if (dataset.size() == 0) throw std::domain_error("assemble_batch: empty dataset");
    if (!(mix_ratio >= 0.0 && mix_ratio <= 1.0)) throw std::domain_error("assemble_batch: mix_ratio outside [0, 1]");
    const auto items = sampler.next_items(size);
    std::vector<std::uint8_t> mm(size);
    for (auto& f : mm) f = uniform01(sampler.rng()) < mix_ratio ? 1 : 0;
    return make_batch(dataset, items, mm, pad_token);
}

SyntheticSet make_synthetic(std::size_t items, std::size_t grid, std::size_t dim, const Tokenizer& tokenizer,
                            std::uint64_t seed) {
    static const char* colors[] = {"red", "green", "blue", "yellow", "purple"};
    static const char* shapes[] = {"circle", "square", "triangle", "star"};
    static const char* rows[] = {"top", "bottom"};
    static const char* cols[] = {"left", "right"};
    constexpr std::size_t n_colors = 5, n_shapes = 4, n_quadrants = 4;
    if (items > n_colors * n_shapes * n_quadrants) throw std::invalid_argument("make_synthetic: at most 80 items");
    if (grid < 2) throw std::invalid_argument("make_synthetic: grid must be at least 2");

    Rng rng(seed);
    auto codes = [&](std::size_t n) {
        std::vector<std::vector<float>> out(n, std::vector<float>(dim));
        for (auto& v : out)
            for (auto& x : v) x = static_cast<float>(normal01(rng));
        return out;
    };
    const auto color_codes = codes(n_colors);
    const auto shape_codes = codes(n_shapes);
    const auto position_codes = codes(grid * grid);

    std::vector<std::size_t> combos(n_colors * n_shapes * n_quadrants);
    std::iota(combos.begin(), combos.end(), std::size_t{0});
    for (std::size_t i = combos.size(); i > 1; --i) std::swap(combos[i - 1], combos[uniform_index(rng, i)]);

    SyntheticSet set;
    set.dataset.grid = grid;
    set.dataset.feature_dim = dim;
    const std::size_t half = (grid + 1) / 2;
    for (std::size_t it = 0; it < items; ++it) {
        const std::size_t c = combos[it] / (n_shapes * n_quadrants);
        const std::size_t s = (combos[it] / n_quadrants) % n_shapes;
        const std::size_t q = combos[it] % n_quadrants;
        const bool bottom = q / 2 == 1, right = q % 2 == 1;
        std::string caption = std::string("a ") + colors[c] + " " + shapes[s] + " at " + rows[q / 2] + " " + cols[q % 2];

        std::vector<float> feat(grid * grid * dim);
        for (std::size_t r = 0; r < grid; ++r) {
            for (std::size_t col = 0; col < grid; ++col) {
                const std::size_t p = r * grid + col;
                const bool inside = ((r >= half) == bottom) && ((col >= half) == right);
                for (std::size_t k = 0; k < dim; ++k) {
                    float v = 0.5f * position_codes[p][k] + 0.1f * static_cast<float>(normal01(rng));
                    if (inside) v += color_codes[c][k] + shape_codes[s][k];
                    feat[p * dim + k] = v;
                }
            }
        }
        set.dataset.captions.push_back(tokenizer.encode(caption));
        set.dataset.features.push_back(std::move(feat));
        set.captions.push_back(std::move(caption));
    }
    return set;
}

}  // namespace bitmar
