#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "tap/importance.hpp"
#include "tap/io.hpp"
#include "tap/metric_dataset.hpp"
#include "tap/model.hpp"

namespace tap {

inline constexpr double kDefaultEpsilonMax = 0.9;

struct BudgetPlan {
    double epsilon_target = 0.0;  // mean per-layer unit pruning ratio
    double epsilon_max = kDefaultEpsilonMax;
    std::vector<std::size_t> layers;
    std::vector<double> epsilon;            // per layer, before rounding
    std::vector<std::size_t> widths;        // prunable units per layer (empty when not sized)
    std::vector<std::size_t> remove_count;  // per layer, after largest-remainder rounding
    std::vector<std::string> log;           // clamp / redistribution events

    double epsilon_sum() const noexcept;
};

/// eps_l = delta_l * |L| * eps_t, clamped at eps_max with the excess handed to the
/// unclamped layers in proportion to their delta.
BudgetPlan allocate_budgets(const LayerScores& layer_scores, double epsilon_target,
                            double epsilon_max = kDefaultEpsilonMax);

/// Converts the per-layer ratios into integer unit counts by largest remainder,
/// keeping at least one attention channel and one FFN unit per layer.
void assign_unit_counts(BudgetPlan& plan, const Model& model);

/// Layer scores with the opposite budget direction: softmax(-delta').
LayerScores invert_layer_scores(const LayerScores& scores);

/// Prunable units (attention value channels + FFN hidden units) in one block.
std::size_t prunable_units(const Block& block) noexcept;

/// Mean unit pruning ratio that removes `param_ratio` of the model's parameters,
/// given that every unit carries exactly 2d+1 parameters.
double unit_ratio_for_param_target(const Model& model, double param_ratio);

struct LayerPruneRecord {
    std::size_t layer = 0;
    double epsilon = 0.0;
    std::vector<std::size_t> removed;            // combined unit index j (attention first)
    std::vector<std::size_t> removed_attention;  // value channel indices
    std::vector<std::size_t> removed_ffn;        // hidden unit indices
    std::vector<std::size_t> removed_heads;
};

struct PruneReport {
    std::string device_id;
    double epsilon_t = 0.0;
    std::vector<LayerPruneRecord> per_layer;
    std::size_t params_before = 0;
    std::size_t params_after = 0;
    double retention = 1.0;
    double rounding_error = 0.0;  // removed units minus the unrounded budget
};

struct PruneResult {
    Model model;
    PruneReport report;
};

/// Removes, per layer, the plan's count of lowest-I units (ties by ascending index).
PruneResult prune(const Model& model, const NeuronScores& scores, const BudgetPlan& plan);

/// Importance scores that rank units uniformly at random (control arm).
NeuronScores random_unit_scores(const Model& model, std::uint64_t seed);

/// Bottom-k selection in one layer, honouring the one-unit-per-kind floor.
std::vector<std::size_t> select_units_to_remove(const LayerNeuronScores& layer, std::size_t count);

struct FinetuneConfig {
    std::size_t epochs = 50;
    double learning_rate = 1e-2;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
};

struct FinetuneResult {
    Model model;
    double loss_before = 0.0;
    double loss_after = 0.0;
};

/// Head-only minibatch descent; keeps the head with the lowest metric-set loss seen at epoch boundaries.
FinetuneResult finetune(const Model& model, const Dataset& metric_data, const FinetuneConfig& config);
FinetuneResult finetune(const Model& model, const MetricDataset& metric, const Dataset& pool,
                        const FinetuneConfig& config);

nlohmann::json prune_report_json(const PruneReport& report);
nlohmann::json budget_plan_json(const BudgetPlan& plan);

}  // namespace tap
