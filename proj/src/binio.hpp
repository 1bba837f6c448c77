#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "bitmar/dataio.hpp"

namespace bitmar::binio {

template <typename T>
void put(std::ostream& out, T value) {
    static_assert(std::is_integral_v<T>);
    unsigned char bytes[sizeof(T)];
    auto u = static_cast<std::make_unsigned_t<T>>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xFFu);
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

inline void put_f32(std::ostream& out, float v) { put(out, std::bit_cast<std::uint32_t>(v)); }

/// Reader that tracks its byte offset so format errors can point at it.
class Reader {
public:
    Reader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}

    template <typename T>
    T get(const char* field) {
        unsigned char bytes[sizeof(T)];
        bytes_(bytes, sizeof(T), field);
        std::make_unsigned_t<T> u = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(bytes[i]) << (8 * i);
        return static_cast<T>(u);
    }

    float get_f32(const char* field) { return std::bit_cast<float>(get<std::uint32_t>(field)); }

    void bytes(void* dst, std::size_t n, const char* field) { bytes_(static_cast<unsigned char*>(dst), n, field); }

    void magic(const char (&expected)[5]) {
        char m[4];
        bytes_(reinterpret_cast<unsigned char*>(m), 4, "magic");
        if (std::memcmp(m, expected, 4) != 0) {
            offset_ -= 4;
            fail(std::string("bad magic, expected ") + expected);
        }
    }

    [[noreturn]] void fail(const std::string& msg) const { throw FormatError(what_ + ": " + msg, offset_); }
    std::uint64_t offset() const { return offset_; }

private:
    void bytes_(unsigned char* dst, std::size_t n, const char* field) {
        in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            offset_ += static_cast<std::uint64_t>(in_.gcount());
            fail(std::string("truncated while reading ") + field);
        }
        offset_ += n;
    }

    std::istream& in_;
    std::string what_;
    std::uint64_t offset_ = 0;
};

}  // namespace bitmar::binio
