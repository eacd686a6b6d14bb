#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "tap/common.hpp"
#include "tap/model.hpp"

namespace tap::testing {

inline ModelConfig tiny_config(std::uint64_t seed = 0, std::size_t layers = 2) {
    ModelConfig cfg;
    cfg.image_size = 4;
    cfg.channels = 1;
    cfg.patch_size = 2;
    cfg.dim = 8;
    cfg.ffn_dim = 12;
    cfg.heads = 2;
    cfg.layers = layers;
    cfg.num_classes = 3;
    cfg.seed = seed;
    return cfg;
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Matrix m(rows, cols);
    for (double& v : m.data()) v = normal(rng, 0.0, scale);
    return m;
}

inline std::vector<int> random_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_int_distribution<int> pick(0, static_cast<int>(classes) - 1);
    std::vector<int> out(n);
    for (int& v : out) v = pick(rng);
    return out;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

// Fresh directory under the system temp path, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("tap_test_" + tag + "_" + std::to_string(std::random_device{}()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace tap::testing
