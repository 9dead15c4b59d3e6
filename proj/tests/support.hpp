#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <unistd.h>

#include "ctok/rng.hpp"
#include "ctok/tensor.hpp"

namespace ctok::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
    explicit TempDir(const std::string& tag = "ctok") {
        static std::uint64_t counter = 0;
        const auto base = std::filesystem::temp_directory_path();
        for (;;) {
            path_ = base / (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
            if (std::filesystem::create_directories(path_)) {
                break;
            }
        }
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
    std::filesystem::path path_;
};

inline Tensor random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
    Tensor t(rows, cols);
    for (double& v : t.values()) {
        v = scale * rng.normal();
    }
    return t;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
}

}  // namespace ctok::testing
