#include "tap/importance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "tap/kernels.hpp"

namespace tap {

namespace {

std::vector<std::uint8_t> bin_sequence(std::span<const double> values, std::size_t bins) {
    std::vector<std::uint8_t> out(values.size(), 0);
    if (values.empty()) return out;
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    if (!(hi > lo)) return out;
    const double width = (hi - lo) / static_cast<double>(bins);
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto b = static_cast<std::size_t>((values[i] - lo) / width);
        out[i] = static_cast<std::uint8_t>(std::min(b, bins - 1));
    }
    return out;
}

std::vector<double> marginal(const std::vector<std::uint8_t>& ids, std::size_t bins) {
    std::vector<double> p(bins, 0.0);
    for (auto b : ids) p[b] += 1.0;
    for (double& v : p) v /= static_cast<double>(ids.size());
    return p;
}

double binned_mi(const std::vector<std::uint8_t>& a, const std::vector<double>& pa, const std::vector<std::uint8_t>& b,
                 const std::vector<double>& pb, std::size_t bins, std::vector<double>& joint) {
    std::fill(joint.begin(), joint.end(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) joint[a[i] * bins + b[i]] += inv_n;
    double mi = 0.0;
    for (std::size_t x = 0; x < bins; ++x)
        for (std::size_t y = 0; y < bins; ++y) {
            const double pxy = joint[x * bins + y];
            if (pxy > 0.0) mi += pxy * std::log(pxy / (pa[x] * pb[y]));
        }
    return std::max(mi, 0.0);
}

Matrix column_matrix(const Matrix& m, std::size_t c) {
    return Matrix(m.rows(), 1, m.column(c));
}

// Raw A/R/T for the units of one kind in one layer.
void score_group(const Matrix& outputs, const Matrix& magnitudes, const Matrix& centered_logit_gram,
                 const EstimatorConfig& cfg, UnitKind kind, std::vector<UnitScore>& dst,
                 std::vector<std::string>& warnings, std::size_t layer) {
    const std::size_t units = outputs.cols();
    const std::size_t n = outputs.rows();
    const std::size_t first = dst.size();
    dst.resize(first + units);

    const Matrix mi = units > 1 ? pairwise_mutual_information(outputs, cfg.mi_bins) : Matrix(1, 1);
    std::vector<char> floored(units, 0);
    const auto total = static_cast<std::ptrdiff_t>(units);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t ij = 0; ij < total; ++ij) {
        const auto j = static_cast<std::size_t>(ij);
        UnitScore& u = dst[first + j];
        u.kind = kind;
        u.index = j;
        double a = 0.0;
        for (std::size_t r = 0; r < n; ++r) a += magnitudes(r, j);
        u.activeness = a / static_cast<double>(n);
        if (units > 1) {
            double acc = 0.0;
            for (std::size_t k = 0; k < units; ++k)
                if (k != j) acc += mi(j, k);
            u.redundancy = -acc / static_cast<double>(units - 1);
        } else {
            u.redundancy = 0.0;
        }
        const Matrix column = column_matrix(outputs, j);
        double bw = kernels::median_pairwise_distance(column);
        if (bw < cfg.bandwidth_floor) {
            bw = cfg.bandwidth_floor;
            floored[j] = 1;
        }
        u.relevance = kernels::serial::hsic_centered(kernels::serial::gaussian_gram(column, bw), centered_logit_gram);
    }
    const auto nfloored = std::count(floored.begin(), floored.end(), 1);
    if (nfloored > 0)
        warnings.push_back("layer " + std::to_string(layer) + " " + to_string(kind) + ": " +
                           std::to_string(nfloored) + " constant unit(s), HSIC bandwidth floored");
}

void normalize_group(std::vector<UnitScore>& units, UnitKind kind) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < units.size(); ++i)
        if (units[i].kind == kind) idx.push_back(i);
    if (idx.empty()) return;
    std::vector<double> a, r, t;
    for (auto i : idx) {
        a.push_back(units[i].activeness);
        r.push_back(units[i].redundancy);
        t.push_back(units[i].relevance);
    }
    const auto an = min_max_normalize(a);
    const auto rn = min_max_normalize(r);
    const auto tn = min_max_normalize(t);
    for (std::size_t k = 0; k < idx.size(); ++k) {
        auto& u = units[idx[k]];
        u.activeness_norm = an[k];
        u.redundancy_norm = rn[k];
        u.relevance_norm = tn[k];
    }
}

}  // namespace

const char* to_string(UnitKind kind) noexcept { return kind == UnitKind::Attention ? "mha" : "ffn"; }

void ScoreWeights::validate() const {
    for (double w : {alpha, beta, gamma})
        if (!(w >= 0.0 && w <= 1.0)) throw ValidationError("score weights must lie in [0,1]");
    if (std::abs(alpha + beta + gamma - 1.0) > 1e-9) throw ValidationError("score weights must sum to 1");
}

std::size_t LayerNeuronScores::count(UnitKind kind) const noexcept {
    return static_cast<std::size_t>(
        std::count_if(units.begin(), units.end(), [kind](const UnitScore& u) { return u.kind == kind; }));
}

void NeuronScores::recompose(const ScoreWeights& new_weights) {
    new_weights.validate();
    weights = new_weights;
    for (auto& layer : layers)
        for (auto& u : layer.units)
            u.importance = weights.alpha * u.activeness_norm + weights.beta * u.redundancy_norm +
                           weights.gamma * u.relevance_norm;
}

std::vector<double> min_max_normalize(std::span<const double> values) {
    std::vector<double> out(values.size(), 0.5);
    if (values.empty()) return out;
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it;
    const double span = *hi_it - lo;
    if (!(span > 0.0)) return out;
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - lo) / span;
    return out;
}

double histogram_mutual_information(std::span<const double> a, std::span<const double> b, std::size_t bins) {
    if (a.size() != b.size()) throw ValidationError("mutual information over sequences of different length");
    if (a.empty()) throw ValidationError("mutual information over empty sequences");
    if (bins == 0 || bins > 256) throw ValidationError("histogram bin count must be in [1, 256]");
    const auto ba = bin_sequence(a, bins);
    const auto bb = bin_sequence(b, bins);
    std::vector<double> joint(bins * bins);
    return binned_mi(ba, marginal(ba, bins), bb, marginal(bb, bins), bins, joint);
}

Matrix pairwise_mutual_information(const Matrix& outputs, std::size_t bins) {
    if (bins == 0 || bins > 256) throw ValidationError("histogram bin count must be in [1, 256]");
    const std::size_t units = outputs.cols();
    std::vector<std::vector<std::uint8_t>> ids(units);
    std::vector<std::vector<double>> margins(units);
    for (std::size_t j = 0; j < units; ++j) {
        const auto col = outputs.column(j);
        ids[j] = bin_sequence(col, bins);
        margins[j] = marginal(ids[j], bins);
    }
    Matrix mi(units, units);
    const auto total = static_cast<std::ptrdiff_t>(units);
#pragma omp parallel
    {
        std::vector<double> joint(bins * bins);
#pragma omp for schedule(dynamic)
        for (std::ptrdiff_t ij = 0; ij < total; ++ij) {
            const auto j = static_cast<std::size_t>(ij);
            for (std::size_t k = j; k < units; ++k) {
                const double v = binned_mi(ids[j], margins[j], ids[k], margins[k], bins, joint);
                mi(j, k) = v;
                mi(k, j) = v;
            }
        }
    }
    return mi;
}

double hsic(const Matrix& x, const Matrix& y, double bandwidth_floor) {
    if (x.rows() != y.rows()) throw ValidationError("HSIC over samples of different count");
    if (x.rows() == 0) throw ValidationError("HSIC over empty samples");
    const double bx = std::max(kernels::median_pairwise_distance(x), bandwidth_floor);
    const double by = std::max(kernels::median_pairwise_distance(y), bandwidth_floor);
    const Matrix lc = kernels::parallel::center_gram(kernels::parallel::gaussian_gram(y, by));
    return kernels::parallel::hsic_centered(kernels::parallel::gaussian_gram(x, bx), lc);
}

NeuronScores neuron_scores_from_trace(const ActivationTrace& trace, const ScoreWeights& weights,
                                      const EstimatorConfig& config) {
    weights.validate();
    if (trace.logits.rows() == 0) throw ValidationError("neuron scores need at least one metric sample");
    NeuronScores out;
    out.weights = weights;

    double logit_bw = kernels::median_pairwise_distance(trace.logits);
    if (logit_bw < config.bandwidth_floor) {
        logit_bw = config.bandwidth_floor;
        out.warnings.push_back("constant logits over the metric batch; logit HSIC bandwidth floored");
    }
    const Matrix centered_logits =
        kernels::parallel::center_gram(kernels::parallel::gaussian_gram(trace.logits, logit_bw));

    for (const auto& lt : trace.layers) {
        LayerNeuronScores ls;
        ls.layer = lt.layer;
        score_group(lt.attn_output, lt.attn_magnitude, centered_logits, config, UnitKind::Attention, ls.units,
                    out.warnings, lt.layer);
        score_group(lt.ffn_output, lt.ffn_magnitude, centered_logits, config, UnitKind::FeedForward, ls.units,
                    out.warnings, lt.layer);
        normalize_group(ls.units, UnitKind::Attention);
        normalize_group(ls.units, UnitKind::FeedForward);
        out.layers.push_back(std::move(ls));
    }
    out.recompose(weights);
    return out;
}

NeuronScores neuron_scores(const Model& model, const Matrix& metric_samples, const ScoreWeights& weights,
                           const EstimatorConfig& config) {
    weights.validate();
    if (metric_samples.rows() == 0) throw ValidationError("neuron scores need at least one metric sample");
    const auto fwd = forward(model, metric_samples, true);
    return neuron_scores_from_trace(*fwd.trace, weights, config);
}

std::vector<double> normalize_layer_scores(std::span<const double> raw) { return softmax(raw); }

LayerScores layer_importance(const Model& model, const Matrix& metric_samples, BypassMode mode) {
    if (model.blocks.empty()) throw ValidationError("layer importance needs at least one layer");
    if (metric_samples.rows() == 0) throw ValidationError("layer importance needs at least one metric sample");
    const auto full = forward(model, metric_samples).logits;
    std::vector<std::vector<double>> p(full.rows());
    for (std::size_t r = 0; r < full.rows(); ++r) p[r] = softmax(full.row(r));

    Model probe = model;
    LayerScores out;
    for (std::size_t l = 0; l < probe.blocks.size(); ++l) {
        if (!model.blocks[l].enabled) continue;
        auto& block = probe.blocks[l];
        switch (mode) {
            case BypassMode::Block: block.enabled = false; break;
            case BypassMode::AttentionOnly: block.skip_attention = true; break;
            case BypassMode::FeedForwardOnly: block.skip_ffn = true; break;
        }
        const auto ablated = forward(probe, metric_samples).logits;
        block = model.blocks[l];
        double acc = 0.0;
        for (std::size_t r = 0; r < ablated.rows(); ++r) acc += kl_divergence(p[r], softmax(ablated.row(r)), 1e-12);
        out.layers.push_back(l);
        out.raw.push_back(acc / static_cast<double>(ablated.rows()));
    }
    out.normalized = normalize_layer_scores(out.raw);
    return out;
}

nlohmann::json scores_json(const NeuronScores& neurons, const LayerScores& layers) {
    nlohmann::json doc;
    doc["version"] = 1;
    doc["weights"] = {neurons.weights.alpha, neurons.weights.beta, neurons.weights.gamma};
    auto arr = nlohmann::json::array();
    for (const auto& l : neurons.layers) {
        auto units = nlohmann::json::array();
        for (std::size_t j = 0; j < l.units.size(); ++j) {
            const auto& u = l.units[j];
            units.push_back({{"j", j},
                             {"kind", to_string(u.kind)},
                             {"index", u.index},
                             {"A", u.activeness},
                             {"R", u.redundancy},
                             {"T", u.relevance},
                             {"I", u.importance}});
        }
        arr.push_back({{"layer", l.layer}, {"units", units}});
    }
    doc["layers"] = arr;
    auto ls = nlohmann::json::array();
    for (std::size_t i = 0; i < layers.raw.size(); ++i)
        ls.push_back({{"layer", layers.layers[i]}, {"delta_raw", layers.raw[i]}, {"delta", layers.normalized[i]}});
    doc["layer_scores"] = ls;
    if (!neurons.warnings.empty()) doc["warnings"] = neurons.warnings;
    return doc;
}

NeuronScores neuron_scores_from_json(const nlohmann::json& doc, const ScoreWeights& weights) {
    if (doc.value("version", 0) != 1) throw FormatError("scores file: unsupported version");
    NeuronScores out;
    for (const auto& l : doc.at("layers")) {
        LayerNeuronScores ls;
        ls.layer = l.at("layer");
        for (const auto& u : l.at("units")) {
            UnitScore s;
            const auto kind = u.at("kind").get<std::string>();
            if (kind != "mha" && kind != "ffn") throw FormatError("scores file: unknown unit kind " + kind);
            s.kind = kind == "mha" ? UnitKind::Attention : UnitKind::FeedForward;
            s.index = u.at("index");
            s.activeness = u.at("A");
            s.redundancy = u.at("R");
            s.relevance = u.at("T");
            ls.units.push_back(s);
        }
        normalize_group(ls.units, UnitKind::Attention);
        normalize_group(ls.units, UnitKind::FeedForward);
        out.layers.push_back(std::move(ls));
    }
    out.recompose(weights);
    return out;
}

LayerScores layer_scores_from_json(const nlohmann::json& doc) {
    LayerScores out;
    for (const auto& l : doc.at("layer_scores")) {
        out.layers.push_back(l.at("layer"));
        out.raw.push_back(l.at("delta_raw"));
        out.normalized.push_back(l.at("delta"));
    }
    return out;
}

}  // namespace tap
