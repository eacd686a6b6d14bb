#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tap/common.hpp"
#include "tap/gmm.hpp"
#include "tap/model.hpp"

namespace tap {

/// Maps samples to the feature space in which device GMMs live.
class FeatureExtractor {
public:
    enum class Mode { RawFlatten, ModelEmbedding };

    /// Identity layout: the row-major sample itself.
    static FeatureExtractor raw(std::size_t input_dim);
    /// Class-token representation after block `layer` (default: the last block).
    static FeatureExtractor embedding(std::shared_ptr<const Model> model, std::optional<std::size_t> layer = {});

    Mode mode() const noexcept { return mode_; }
    std::size_t input_dim() const noexcept { return input_dim_; }
    std::size_t output_dim() const noexcept { return output_dim_; }

    Matrix extract(const Matrix& samples) const;

private:
    Mode mode_ = Mode::RawFlatten;
    std::size_t input_dim_ = 0;
    std::size_t output_dim_ = 0;
    std::shared_ptr<const Model> model_;
};

Matrix extract_features(const FeatureExtractor& extractor, const Matrix& samples);

struct MetricDataset {
    std::string device_id;
    std::vector<std::size_t> indices;  // selected pool rows, by descending score
    std::vector<double> scores;        // log-likelihood of every pool row
    std::size_t n = 0;

    std::vector<double> selected_scores() const;
};

/// Top-N pool rows by GMM log-likelihood; ties go to the lower pool index.
MetricDataset construct_metric_dataset(const GmmParams& params, const Matrix& public_features, std::size_t n,
                                       std::string device_id = {});

/// Indices of the N largest scores, ordered by (score desc, index asc).
std::vector<std::size_t> top_n_indices(std::span<const double> scores, std::size_t n);

nlohmann::json manifest_json(const MetricDataset& metric);
MetricDataset metric_from_manifest(const nlohmann::json& doc);

/// Mean over feature dimensions of the histogram KL(reference || candidate),
/// equal-width bins over the joint range. Diagnostic only.
double empirical_kl(const Matrix& reference, const Matrix& candidate, std::size_t bins = 16);

}  // namespace tap
