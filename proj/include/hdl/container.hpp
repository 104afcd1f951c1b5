#pragma once

// Binary tensor container shared by weight files ("HDLW") and tensor caches
// ("HDLT"). Little-endian throughout:
//
//   magic[4] | version u32 | entry count u32 |
//   per entry: name length u32 | UTF-8 name | rank u32 | dims u32 x rank | f32 x prod(dims)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hdl/tensor.hpp"

namespace hdl {

inline constexpr std::string_view kWeightsMagic = "HDLW";
inline constexpr std::string_view kTensorCacheMagic = "HDLT";
inline constexpr std::uint32_t kContainerVersion = 1;

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& out, float f) {
    put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw FormatError("container truncated at byte " + std::to_string(pos_));
    }
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(std::string_view magic, const std::vector<NamedArray>& entries) {
    if (magic.size() != 4) throw FormatError("container magic must be 4 bytes");
    std::string out(magic);
    detail::put_u32(out, kContainerVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        if (numel_of(e.shape) != e.values.size()) throw FormatError("entry '" + e.name + "' shape/value mismatch");
        detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out += e.name;
        detail::put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (float v : e.values) detail::put_f32(out, v);
    }
    return out;
}

inline std::vector<NamedArray> decode_container(std::string_view magic, std::string_view bytes) {
    detail::Reader r(bytes);
    auto got = r.take(4);
    if (got != magic) throw FormatError("bad magic: expected " + std::string(magic) + ", found " + std::string(got));
    if (auto version = r.u32(); version != kContainerVersion) {
        throw FormatError("unsupported container version " + std::to_string(version));
    }
    const std::uint32_t count = r.u32();
    std::vector<NamedArray> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray e;
        e.name = std::string(r.take(r.u32()));
        const std::uint32_t rank = r.u32();
        for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(r.u32());
        const std::size_t n = numel_of(e.shape);
        if (n > bytes.size()) throw FormatError("entry '" + e.name + "' larger than file");
        e.values.resize(n);
        for (auto& v : e.values) v = r.f32();
        out.push_back(std::move(e));
    }
    if (!r.done()) throw FormatError("trailing bytes after container entries");
    return out;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

// FNV-1a 64-bit over the raw bytes, as 16 hex digits.
inline std::string fingerprint(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = hex[h & 0xF];
    return out;
}

inline std::map<std::string, std::pair<Shape, std::vector<float>>> to_map(const std::vector<NamedArray>& entries) {
    std::map<std::string, std::pair<Shape, std::vector<float>>> out;
    for (const auto& e : entries) out[e.name] = {e.shape, e.values};
    return out;
}

}  // namespace hdl
