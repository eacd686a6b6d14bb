#include "tap/metric_dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tap {

FeatureExtractor FeatureExtractor::raw(std::size_t input_dim) {
    if (input_dim == 0) throw ValidationError("raw extractor needs a positive input dimension");
    FeatureExtractor fx;
    fx.mode_ = Mode::RawFlatten;
    fx.input_dim_ = input_dim;
    fx.output_dim_ = input_dim;
    return fx;
}

FeatureExtractor FeatureExtractor::embedding(std::shared_ptr<const Model> model, std::optional<std::size_t> layer) {
    if (!model) throw ValidationError("embedding extractor needs a model");
    validate(*model);
    FeatureExtractor fx;
    fx.mode_ = Mode::ModelEmbedding;
    fx.input_dim_ = model->config.input_dim();
    fx.output_dim_ = model->dim();
    if (layer && *layer + 1 < model->blocks.size()) {
        auto truncated = std::make_shared<Model>(*model);
        truncated->blocks.resize(*layer + 1);
        fx.model_ = std::move(truncated);
    } else if (layer && *layer >= model->blocks.size()) {
        throw ValidationError("embedding layer " + std::to_string(*layer) + " out of range");
    } else {
        fx.model_ = std::move(model);
    }
    return fx;
}

Matrix FeatureExtractor::extract(const Matrix& samples) const {
    if (samples.cols() != input_dim_)
        throw ValidationError("feature extractor expects samples of width " + std::to_string(input_dim_) + ", got " +
                              std::to_string(samples.cols()));
    if (mode_ == Mode::RawFlatten) return samples;
    return forward(*model_, samples).features;
}

Matrix extract_features(const FeatureExtractor& extractor, const Matrix& samples) {
    return extractor.extract(samples);
}

std::vector<double> MetricDataset::selected_scores() const {
    std::vector<double> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(scores[i]);
    return out;
}

std::vector<std::size_t> top_n_indices(std::span<const double> scores, std::size_t n) {
    if (n > scores.size())
        throw ValidationError("cannot select " + std::to_string(n) + " of " + std::to_string(scores.size()) +
                              " samples");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto better = [&scores](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(), better);
    order.resize(n);
    return order;
}

MetricDataset construct_metric_dataset(const GmmParams& params, const Matrix& public_features, std::size_t n,
                                       std::string device_id) {
    if (public_features.cols() != params.dim)
        throw ValidationError("metric dataset: pool features have dim " + std::to_string(public_features.cols()) +
                              ", GMM expects " + std::to_string(params.dim));
    if (n > public_features.rows())
        throw ValidationError("metric dataset: N=" + std::to_string(n) + " exceeds pool size " +
                              std::to_string(public_features.rows()));
    MetricDataset out;
    out.device_id = std::move(device_id);
    out.n = n;
    out.scores = log_density_batch(params, public_features);
    out.indices = top_n_indices(out.scores, n);
    return out;
}

nlohmann::json manifest_json(const MetricDataset& metric) {
    nlohmann::json doc;
    doc["version"] = 1;
    doc["device_id"] = metric.device_id;
    doc["N"] = metric.n;
    doc["indices"] = metric.indices;
    doc["scores"] = metric.selected_scores();
    return doc;
}

MetricDataset metric_from_manifest(const nlohmann::json& doc) {
    if (doc.value("version", 0) != 1) throw FormatError("metric manifest: unsupported version");
    MetricDataset out;
    out.device_id = doc.at("device_id").get<std::string>();
    out.n = doc.at("N").get<std::size_t>();
    out.indices = doc.at("indices").get<std::vector<std::size_t>>();
    if (out.indices.size() != out.n) throw FormatError("metric manifest: N does not match index count");
    // Only selected scores travel in the manifest; unselected entries stay NaN.
    const auto selected = doc.at("scores").get<std::vector<double>>();
    if (selected.size() != out.n) throw FormatError("metric manifest: score count mismatch");
    std::size_t max_index = 0;
    for (auto i : out.indices) max_index = std::max(max_index, i + 1);
    out.scores.assign(max_index, std::nan(""));
    for (std::size_t k = 0; k < out.n; ++k) out.scores[out.indices[k]] = selected[k];
    return out;
}

double empirical_kl(const Matrix& reference, const Matrix& candidate, std::size_t bins) {
    if (reference.cols() != candidate.cols()) throw ValidationError("empirical_kl: dimension mismatch");
    if (reference.rows() == 0 || candidate.rows() == 0) throw ValidationError("empirical_kl: empty sample");
    if (bins == 0) throw ValidationError("empirical_kl: zero bins");
    constexpr double smoothing = 1e-6;
    double total = 0.0;
    for (std::size_t c = 0; c < reference.cols(); ++c) {
        double lo = reference(0, c);
        double hi = lo;
        for (const Matrix* m : {&reference, &candidate})
            for (std::size_t r = 0; r < m->rows(); ++r) {
                lo = std::min(lo, (*m)(r, c));
                hi = std::max(hi, (*m)(r, c));
            }
        const double width = hi > lo ? (hi - lo) / static_cast<double>(bins) : 1.0;
        auto histogram = [&](const Matrix& m) {
            std::vector<double> h(bins, smoothing);
            for (std::size_t r = 0; r < m.rows(); ++r) {
                auto b = static_cast<std::size_t>((m(r, c) - lo) / width);
                h[std::min(b, bins - 1)] += 1.0;
            }
            const double sum = std::accumulate(h.begin(), h.end(), 0.0);
            for (double& v : h) v /= sum;
            return h;
        };
        total += kl_divergence(histogram(reference), histogram(candidate));
    }
    return total / static_cast<double>(reference.cols());
}

}  // namespace tap
