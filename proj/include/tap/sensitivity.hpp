#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tap/importance.hpp"

namespace tap {

/// Identifiers ordered by descending importance.
struct Ranking {
    std::vector<std::size_t> order;

    std::size_t size() const noexcept { return order.size(); }
    /// Throws ValidationError unless `order` is a permutation of distinct identifiers.
    void validate() const;
};

/// Descending by value; exact ties go to the lower identifier first.
Ranking ranking_from_values(std::span<const double> values);

struct PairCounts {
    std::uint64_t concordant = 0;
    std::uint64_t discordant = 0;
};

/// Concordant/discordant pairs by merge-sort inversion counting, O(n log n).
PairCounts count_pairs(const Ranking& a, const Ranking& b);

/// tau = 2 (P_c - P_d) / (n (n - 1)).
double kendall_tau(const Ranking& a, const Ranking& b);

/// Global ranking of every unit of every layer by composite importance.
Ranking global_ranking(const NeuronScores& scores);
/// Ranking of one kind of unit in one layer.
Ranking group_ranking(const LayerNeuronScores& layer, UnitKind kind);

struct PairBreakdown {
    std::size_t task_a = 0;
    std::size_t task_b = 0;
    double tau = 0.0;
    std::vector<std::size_t> layers;
    std::vector<double> tau_ffn;
    std::vector<double> tau_mha;
};

struct TaskDivergence {
    std::vector<std::string> task_ids;
    Matrix tau;         // global ranking tau, 1 on the diagonal
    Matrix divergence;  // (1 - tau) / 2, 0 on the diagonal
    std::vector<PairBreakdown> pairs;  // a < b

    double mean_layer_tau(std::size_t a, std::size_t b) const;
};

TaskDivergence task_divergence_matrix(std::span<const NeuronScores> score_sets, std::vector<std::string> task_ids = {});

std::string divergence_csv(const TaskDivergence& div);
nlohmann::json divergence_json(const TaskDivergence& div);

struct LayerProfileComparison {
    LayerScores a;
    LayerScores b;
    std::optional<double> tau;  // empty with fewer than two layers
    std::vector<std::size_t> rank_a;
    std::vector<std::size_t> rank_b;
    double mean_abs_rank_shift = 0.0;
};

LayerProfileComparison layer_profile_compare(const Model& model, const Matrix& task_a_metric,
                                             const Matrix& task_b_metric);

nlohmann::json layer_profile_json(const LayerProfileComparison& cmp);

}  // namespace tap
