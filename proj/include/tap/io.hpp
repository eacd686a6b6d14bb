#pragma once

// Binary containers for models and datasets, plus the file-access log used to
// audit which stage opened which file.
//
// Container layout (little-endian):
//   8 bytes   magic "TAPBIN01"
//   8 bytes   u64 header length in bytes
//   N bytes   UTF-8 JSON header; "blocks" lists {name, rows, cols} in storage order
//   ...       row-major float64 payload of every block, in header order

#include <filesystem>
#include <mutex>
#include <string>
#include <vector>

#include "tap/common.hpp"
#include "tap/model.hpp"

#include <json.hpp>

namespace tap {

struct Dataset {
    Matrix samples;
    std::vector<int> labels;
    std::size_t num_classes = 0;

    std::size_t size() const noexcept { return samples.rows(); }
    Dataset subset(std::span<const std::size_t> indices) const;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

enum class Side { Device, Cloud, Harness };

/// Records every file read or written through the io layer, tagged by side.
class AccessLog {
public:
    struct Entry {
        Side side;
        std::string path;
        bool write;
    };

    void set_side(Side side);
    Side side() const;
    void record(const std::filesystem::path& path, bool write);
    std::vector<Entry> entries() const;

private:
    mutable std::mutex mutex_;
    Side side_ = Side::Harness;
    std::vector<Entry> entries_;
};

void save_model(const Model& model, const std::filesystem::path& path, AccessLog* log = nullptr);
Model load_model(const std::filesystem::path& path, AccessLog* log = nullptr);

void save_dataset(const Dataset& data, const std::filesystem::path& path, AccessLog* log = nullptr);
Dataset load_dataset(const std::filesystem::path& path, AccessLog* log = nullptr);

/// Model container bytes; the file writers use these.
std::string encode_model(const Model& model);
Model decode_model(const std::string& bytes);

void write_text(const std::filesystem::path& path, const std::string& text, AccessLog* log = nullptr);
std::string read_text(const std::filesystem::path& path, AccessLog* log = nullptr);

void write_json(const std::filesystem::path& path, const nlohmann::json& doc, AccessLog* log = nullptr);
nlohmann::json read_json(const std::filesystem::path& path, AccessLog* log = nullptr);

/// Formats a double with 17 significant digits (round-trip exact).
std::string format_double(double value);

}  // namespace tap
