#pragma once

// Device/cloud pipeline.
//
// Device side (sees only its own data): extract features, split 80/20 into a
// GMM-fit part and a held-out test part, fit a GMM with BIC-selected K and
// upload its JSON. Cloud side (sees only uploads, the public pool and the base
// model): build the metric dataset, score neurons and layers, allocate budgets,
// prune and fine-tune. The pruned model then goes back to the device, which
// evaluates it on the held-out split.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tap/datagen.hpp"
#include "tap/gmm.hpp"
#include "tap/importance.hpp"
#include "tap/io.hpp"
#include "tap/metric_dataset.hpp"
#include "tap/pruner.hpp"

namespace tap {

struct PipelineConfig {
    std::filesystem::path scenario_dir;
    std::filesystem::path base_model;
    std::filesystem::path out_dir;
    double epsilon_t = 0.3;  // fraction of parameters to remove
    std::map<std::size_t, double> device_epsilon;  // per-device overrides
    double epsilon_max = kDefaultEpsilonMax;
    ScoreWeights weights;
    std::size_t metric_size = 512;
    std::vector<std::size_t> k_range{2, 3, 4, 5, 6, 7, 8, 9, 10};
    FitConfig gmm;
    EstimatorConfig estimator;
    FinetuneConfig finetune;
    double fit_fraction = 0.8;
    bool invert_layer_budget = false;
    bool run_controls = false;  // random-unit and shared-metric control arms
    std::uint64_t seed = 0;

    double epsilon_for(std::size_t device) const;
    void validate() const;
};

nlohmann::json config_json(const PipelineConfig& config);
PipelineConfig config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});

struct ArmResult {
    double accuracy_pruned = 0.0;
    double accuracy_finetuned = 0.0;
    double retention = 1.0;
};

struct DeviceResult {
    std::size_t device_id = 0;
    MetricDataset metric;
    PruneReport prune;
    std::size_t gmm_components = 0;
    double accuracy_base = 0.0;
    double accuracy_pruned = 0.0;
    double accuracy_finetuned = 0.0;
    std::size_t sample_count = 0;  // held-out test samples
    std::map<std::string, ArmResult> controls;
    std::optional<std::string> error;

    bool ok() const noexcept { return !error.has_value(); }
};

struct PipelineSummary {
    std::vector<DeviceResult> devices;
    double weighted_base = 0.0;
    double weighted_pruned = 0.0;
    double weighted_finetuned = 0.0;
    std::map<std::string, double> weighted_controls;
};

enum class AccuracyStage { Base, Pruned, Finetuned };

/// sum_i acc_i * n_i / sum_i n_i over successful devices.
double weighted_accuracy(std::span<const DeviceResult> results, AccuracyStage stage = AccuracyStage::Finetuned);
double weighted_accuracy(std::span<const double> accuracies, std::span<const std::size_t> counts);

/// Seeded split of row indices into (first `fraction`, rest).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double fraction,
                                                                            std::uint64_t seed);

/// Device side: GMM on the fit split of local features.
struct DeviceUpload {
    GmmParams gmm;
    std::string payload;  // exact upload bytes
    std::size_t components = 0;
    std::vector<std::pair<std::size_t, double>> bic;
};
DeviceUpload device_fit_gmm(const Matrix& local_features, const std::vector<std::size_t>& k_range,
                            const FitConfig& fit);

/// Cloud side for one device: everything between the upload and the pruned model.
struct CloudOutput {
    MetricDataset metric;
    NeuronScores neurons;
    LayerScores layers;
    BudgetPlan plan;
    PruneResult pruned;
    Model finetuned;
};

struct CloudInputs {
    const Model& base;
    const Dataset& pool;
    const Matrix& pool_features;
};

CloudOutput cloud_prune(const CloudInputs& inputs, const MetricDataset& metric, double epsilon_t,
                        const PipelineConfig& config, std::uint64_t seed);
/// Same layer budgets as `reference`, units chosen uniformly at random, same fine-tune set.
CloudOutput random_unit_control(const CloudInputs& inputs, const CloudOutput& reference,
                                const PipelineConfig& config, std::uint64_t seed);
/// Device-agnostic metric set: N pool rows drawn uniformly at random.
MetricDataset shared_metric_dataset(std::size_t pool_size, std::size_t n, std::uint64_t seed);

/// Full on-disk pipeline; every device is an isolated unit of work.
PipelineSummary run_pipeline(const PipelineConfig& config, AccessLog* log = nullptr);

nlohmann::json device_result_json(const DeviceResult& result);
nlohmann::json summary_json(const PipelineSummary& summary);

struct AuditReport {
    bool ok = true;
    std::vector<std::string> violations;
    std::vector<std::string> uploads;  // device -> cloud artifacts found in the output tree
};

/// Checks that cloud-side stages only read uploads, the pool and the base model,
/// that the only device->cloud artifacts are GMM JSON files, and that no device
/// sample bytes occur in any file the cloud read.
AuditReport audit_privacy(const AccessLog& log, const PipelineConfig& config);

struct GridRow {
    ScoreWeights weights;
    double accuracy = 0.0;
    std::optional<std::string> error;
};

struct GridSearchResult {
    ScoreWeights best;
    double best_accuracy = 0.0;
    std::vector<GridRow> table;
};

/// Nonnegative multiples of `step` summing to 1, in lexicographic (alpha, beta) order.
std::vector<ScoreWeights> simplex_grid(double step);

/// Score + prune + fine-tune + evaluate per simplex point, evaluated on a
/// validation split of the public pool picked per device by its GMM.
GridSearchResult grid_search_weights(const PipelineConfig& config, double step = 0.1, AccessLog* log = nullptr);

std::string grid_table_csv(const GridSearchResult& result);

}  // namespace tap
