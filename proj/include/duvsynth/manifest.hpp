#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "csv.hpp"
#include "errors.hpp"

namespace duvsynth {

// FNV-1a 64-bit over a file's bytes.
inline uint64_t hash_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("hash_file: cannot open " + path);
    uint64_t h = 0xCBF29CE484222325ULL;
    char buf[1 << 15];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        std::streamsize got = is.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001B3ULL;
        }
        if (got < static_cast<std::streamsize>(sizeof(buf))) break;
    }
    return h;
}

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// Records every file a run reads or writes, with a content hash. Thread-safe
// so parallel folds can share one recorder.
class ManifestRecorder {
  public:
    void note_read(const std::string& path) { note(path, "read"); }
    void note_write(const std::string& path) { note(path, "write"); }

    void save(const std::string& path) {
        std::lock_guard<std::mutex> lock(mu_);
        CsvWriter w(path, {"path", "mode", "content_hash"});
        for (const auto& [p, entry] : entries_) w.row({p, entry.first, hash_hex(entry.second)});
    }

    std::map<std::string, std::pair<std::string, uint64_t>> snapshot() const {
        std::lock_guard<std::mutex> lock(mu_);
        return entries_;
    }

  private:
    void note(const std::string& path, const char* mode) {
        uint64_t h = hash_file(path);
        std::lock_guard<std::mutex> lock(mu_);
        auto it = entries_.find(path);
        if (it == entries_.end())
            entries_[path] = {mode, h};
        else {
            // a file both read and written counts as written; refresh hash
            if (it->second.first == "read" && std::string(mode) == "write") it->second.first = "write";
            it->second.second = h;
        }
    }

    mutable std::mutex mu_;
    std::map<std::string, std::pair<std::string, uint64_t>> entries_;
};

}  // namespace duvsynth
