#pragma once

// Neuron- and layer-level importance over a metric dataset.
//
// A layer's units are its attention value channels (inputs of the output
// projection) followed by its FFN hidden units. Raw criteria:
//   A  mean |activation| over samples (token-averaged)
//   R  minus the mean histogram mutual information with same-kind peers in the layer
//   T  biased HSIC between the unit's output and the logit vectors
// Each criterion is min-max normalised within its (layer, kind) group and the
// composite is I = alpha*A~ + beta*R~ + gamma*T~.

#include <string>
#include <vector>

#include <json.hpp>

#include "tap/common.hpp"
#include "tap/model.hpp"

namespace tap {

enum class UnitKind { Attention, FeedForward };

const char* to_string(UnitKind kind) noexcept;

struct ScoreWeights {
    double alpha = 0.1;
    double beta = 0.1;
    double gamma = 0.8;

    void validate() const;
};

struct EstimatorConfig {
    std::size_t mi_bins = 16;
    double bandwidth_floor = 1e-6;
};

struct UnitScore {
    UnitKind kind = UnitKind::FeedForward;
    std::size_t index = 0;  // channel / hidden-unit index within its kind
    double activeness = 0.0;
    double redundancy = 0.0;
    double relevance = 0.0;
    double activeness_norm = 0.0;
    double redundancy_norm = 0.0;
    double relevance_norm = 0.0;
    double importance = 0.0;
};

struct LayerNeuronScores {
    std::size_t layer = 0;
    std::vector<UnitScore> units;  // attention channels, then FFN units

    std::size_t count(UnitKind kind) const noexcept;
};

struct NeuronScores {
    ScoreWeights weights;
    std::vector<LayerNeuronScores> layers;
    std::vector<std::string> warnings;

    /// Recomputes every composite I_j for new weights; raw and normalised criteria are unchanged.
    void recompose(const ScoreWeights& new_weights);
};

struct LayerScores {
    std::vector<std::size_t> layers;
    std::vector<double> raw;         // delta'_l, mean KL(full || bypassed)
    std::vector<double> normalized;  // softmax(delta')
};

enum class BypassMode { Block, AttentionOnly, FeedForwardOnly };

NeuronScores neuron_scores(const Model& model, const Matrix& metric_samples, const ScoreWeights& weights = {},
                           const EstimatorConfig& config = {});

/// Scores from an existing trace (the trace logits act as the model output).
NeuronScores neuron_scores_from_trace(const ActivationTrace& trace, const ScoreWeights& weights = {},
                                      const EstimatorConfig& config = {});

LayerScores layer_importance(const Model& model, const Matrix& metric_samples, BypassMode mode = BypassMode::Block);

/// Softmax normalisation used for layer scores.
std::vector<double> normalize_layer_scores(std::span<const double> raw);

/// Min-max to [0,1]; a constant input maps to all 0.5.
std::vector<double> min_max_normalize(std::span<const double> values);

/// Histogram mutual information (nats) between two sequences, equal-width bins per sequence.
double histogram_mutual_information(std::span<const double> a, std::span<const double> b, std::size_t bins = 16);

/// Pairwise histogram MI matrix between the columns of `outputs` (samples x units).
Matrix pairwise_mutual_information(const Matrix& outputs, std::size_t bins = 16);

/// Biased HSIC (1/n^2) tr(K H L H) with median-heuristic Gaussian kernels on the rows of x and y.
double hsic(const Matrix& x, const Matrix& y, double bandwidth_floor = 1e-6);

nlohmann::json scores_json(const NeuronScores& neurons, const LayerScores& layers);
/// Parses a scores file; normalised criteria are recomputed from the raw values.
NeuronScores neuron_scores_from_json(const nlohmann::json& doc, const ScoreWeights& weights);
LayerScores layer_scores_from_json(const nlohmann::json& doc);

}  // namespace tap
