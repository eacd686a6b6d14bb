#pragma once

// Seeded synthetic multi-device scenarios.
//
// Every class is a Gaussian prototype in pixel space; samples are the
// prototype plus isotropic noise. Classes are split into disjoint label groups,
// one per device; the public pool holds every class.

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "tap/io.hpp"
#include "tap/model.hpp"

namespace tap {

struct ScenarioSpec {
    std::size_t num_devices = 10;
    std::size_t num_classes = 20;
    std::size_t pool_per_class = 60;
    std::size_t device_per_class = 100;
    std::size_t image_size = 8;
    std::size_t channels = 1;
    double prototype_scale = 1.0;
    double noise = 0.5;
    // When set, the prototypes of group g are nonzero only on pixel block g.
    bool disjoint_features = false;
    std::uint64_t seed = 0;

    std::size_t input_dim() const noexcept { return image_size * image_size * channels; }
    void validate() const;
};

struct Scenario {
    ScenarioSpec spec;
    Matrix prototypes;                    // num_classes x input_dim
    std::vector<std::vector<int>> groups;  // classes per device
    Dataset pool;
    std::vector<Dataset> devices;
};

/// Label-group partition: a seeded shuffle of the classes cut into near-equal groups.
std::vector<std::vector<int>> partition_labels(std::size_t num_classes, std::size_t num_devices, std::uint64_t seed);

Scenario generate_scenario(const ScenarioSpec& spec);

nlohmann::json spec_json(const ScenarioSpec& spec);
ScenarioSpec spec_from_json(const nlohmann::json& doc);

/// Writes pool.bin, devices/dev_<i>.bin and scenario.json under `dir`.
void save_scenario(const Scenario& scenario, const std::filesystem::path& dir, AccessLog* log = nullptr);

/// Cloud-visible parts of a scenario directory: spec, groups and public pool.
struct PublicScenario {
    ScenarioSpec spec;
    std::vector<std::vector<int>> groups;  // ground truth, used for evaluation bookkeeping only
    Dataset pool;
};
PublicScenario load_public_scenario(const std::filesystem::path& dir, AccessLog* log = nullptr);
std::filesystem::path device_data_path(const std::filesystem::path& dir, std::size_t device);
Dataset load_device_data(const std::filesystem::path& dir, std::size_t device, AccessLog* log = nullptr);

struct TrainConfig {
    std::size_t epochs = 30;
    double learning_rate = 5e-3;  // Adam
    std::size_t batch_size = 32;
    bool train_embedding = true;
    bool train_blocks = false;  // also train attention and FFN weights
    std::uint64_t seed = 0;
};

/// Seeded init, then minibatch Adam on the head plus (optionally) the
/// embeddings and the transformer blocks.
Model train_toy_model(const Dataset& pool, const ModelConfig& architecture, const TrainConfig& config);

/// Architecture matching the scenario's image geometry and class count.
ModelConfig model_config_for(const ScenarioSpec& spec, std::size_t dim, std::size_t ffn_dim, std::size_t heads,
                             std::size_t layers, std::size_t patch_size, std::uint64_t seed);

}  // namespace tap
