#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace duvsynth {

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw DataError("checkpoint: truncated while reading u32");
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 | static_cast<uint32_t>(b[2]) << 16 |
           static_cast<uint32_t>(b[3]) << 24;
}

inline void put_f64(std::ostream& os, double v) {
    uint64_t u;
    std::memcpy(&u, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw DataError("checkpoint: truncated while reading f64");
    uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

}  // namespace detail

// Flat binary parameter container shared by every stage. Layout:
// 8-byte magic "DUVSYNTH", version u32, then per record:
// name length u32, UTF-8 name, rank u32, dims u32 x rank, f64 payload
// (little-endian throughout).
class Checkpoint {
  public:
    static constexpr uint32_t kVersion = 1;
    static constexpr char kMagic[9] = "DUVSYNTH";

    void add(const std::string& name, const Tensor& t) { entries_.emplace_back(name, t); }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : entries_)
            if (n == name) return &t;
        return nullptr;
    }

    Tensor get(const std::string& name) const {
        const Tensor* t = find(name);
        if (!t) throw StateError("checkpoint: missing record '" + name + "'");
        return *t;
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError("checkpoint: cannot open for writing: " + path);
        os.write(kMagic, 8);
        detail::put_u32(os, kVersion);
        for (const auto& [name, t] : entries_) {
            detail::put_u32(os, static_cast<uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::put_u32(os, static_cast<uint32_t>(t.rank()));
            for (int i = 0; i < t.rank(); ++i) detail::put_u32(os, static_cast<uint32_t>(t.dim(i)));
            for (int64_t i = 0; i < t.numel(); ++i) detail::put_f64(os, t.data()[i]);
        }
        if (!os) throw DataError("checkpoint: write failed: " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw StateError("checkpoint: cannot open: " + path);
        char magic[8];
        is.read(magic, 8);
        if (!is || std::memcmp(magic, kMagic, 8) != 0)
            throw DataError("checkpoint: bad magic in " + path);
        uint32_t version = detail::get_u32(is);
        if (version != kVersion)
            throw DataError("checkpoint: unsupported version " + std::to_string(version) + " in " + path);
        Checkpoint ck;
        while (true) {
            is.peek();
            if (is.eof()) break;
            uint32_t name_len = detail::get_u32(is);
            std::string name(name_len, '\0');
            is.read(name.data(), name_len);
            if (!is) throw DataError("checkpoint: truncated name in " + path);
            uint32_t rank = detail::get_u32(is);
            Shape shape;
            int64_t numel = 1;
            for (uint32_t i = 0; i < rank; ++i) {
                uint32_t d = detail::get_u32(is);
                shape.push_back(static_cast<int64_t>(d));
                numel *= d;
            }
            std::vector<double> data(static_cast<size_t>(numel));
            for (int64_t i = 0; i < numel; ++i) data[static_cast<size_t>(i)] = detail::get_f64(is);
            ck.add(name, Tensor(shape, std::move(data)));
        }
        return ck;
    }

  private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

}  // namespace duvsynth
