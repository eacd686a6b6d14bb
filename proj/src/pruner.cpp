#include "tap/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tap {

namespace {

template <typename T>
void erase_sorted(std::vector<T>& values, std::span<const std::size_t> sorted_indices) {
    std::size_t next = 0;
    std::size_t out = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (next < sorted_indices.size() && sorted_indices[next] == i) {
            ++next;
            continue;
        }
        values[out++] = values[i];
    }
    values.resize(out);
}

void check_structure(const Block& block, const LayerNeuronScores& layer) {
    const std::size_t channels = block.attn.value_width();
    const std::size_t hidden = block.ffn.width();
    if (layer.units.size() != channels + hidden)
        throw ValidationError("scores for layer " + std::to_string(layer.layer) + " cover " +
                              std::to_string(layer.units.size()) + " units, model has " +
                              std::to_string(channels + hidden));
    for (std::size_t j = 0; j < layer.units.size(); ++j) {
        const auto& u = layer.units[j];
        const bool attn = j < channels;
        if ((u.kind == UnitKind::Attention) != attn || u.index != (attn ? j : j - channels))
            throw ValidationError("scores for layer " + std::to_string(layer.layer) +
                                  " are not ordered attention-then-ffn");
    }
}

void prune_attention(Attention& attn, std::span<const std::size_t> channels, std::vector<std::size_t>& removed_heads) {
    if (channels.empty()) return;
    std::vector<std::size_t> per_head(attn.head_count(), 0);
    for (auto c : channels) {
        std::size_t h = 0;
        while (c >= attn.value_offset(h) + attn.value_dims[h]) ++h;
        ++per_head[h];
    }
    attn.value.weight.remove_rows(channels);
    erase_sorted(attn.value.bias, channels);
    attn.out.weight.remove_cols(channels);

    std::vector<std::size_t> dead_heads;
    std::vector<std::size_t> qk_rows;
    for (std::size_t h = 0; h < attn.head_count(); ++h) {
        attn.value_dims[h] -= per_head[h];
        if (attn.value_dims[h] == 0) {
            dead_heads.push_back(h);
            for (std::size_t c = 0; c < attn.head_dim; ++c) qk_rows.push_back(h * attn.head_dim + c);
        }
    }
    if (dead_heads.empty()) return;
    attn.query.weight.remove_rows(qk_rows);
    erase_sorted(attn.query.bias, qk_rows);
    attn.key.weight.remove_rows(qk_rows);
    erase_sorted(attn.key.bias, qk_rows);
    erase_sorted(attn.value_dims, dead_heads);
    removed_heads = dead_heads;
}

void prune_ffn(FeedForward& ffn, std::span<const std::size_t> units) {
    if (units.empty()) return;
    ffn.up.weight.remove_rows(units);
    erase_sorted(ffn.up.bias, units);
    ffn.down.weight.remove_cols(units);
}

}  // namespace

double BudgetPlan::epsilon_sum() const noexcept { return std::accumulate(epsilon.begin(), epsilon.end(), 0.0); }

BudgetPlan allocate_budgets(const LayerScores& layer_scores, double epsilon_target, double epsilon_max) {
    const auto& delta = layer_scores.normalized;
    const std::size_t n = delta.size();
    if (n == 0) throw ValidationError("allocate_budgets: no layers");
    if (!(epsilon_target >= 0.0 && epsilon_target < 1.0))
        throw ValidationError("allocate_budgets: epsilon_t must lie in [0, 1)");
    if (!(epsilon_max > 0.0 && epsilon_max <= 1.0)) throw ValidationError("allocate_budgets: epsilon_max must lie in (0, 1]");
    double delta_sum = 0.0;
    for (double v : delta) {
        if (!(v >= 0.0)) throw ValidationError("allocate_budgets: negative or NaN layer score");
        delta_sum += v;
    }
    if (std::abs(delta_sum - 1.0) > 1e-9) throw ValidationError("allocate_budgets: layer scores do not sum to 1");
    const double target = static_cast<double>(n) * epsilon_target;
    if (target > static_cast<double>(n) * epsilon_max + 1e-12)
        throw ValidationError("allocate_budgets: |L|*eps_t exceeds the sum of per-layer caps");

    BudgetPlan plan;
    plan.epsilon_target = epsilon_target;
    plan.epsilon_max = epsilon_max;
    plan.layers = layer_scores.layers;
    if (plan.layers.size() != n) {
        plan.layers.resize(n);
        std::iota(plan.layers.begin(), plan.layers.end(), std::size_t{0});
    }
    plan.epsilon.resize(n);
    for (std::size_t l = 0; l < n; ++l) plan.epsilon[l] = delta[l] * static_cast<double>(n) * epsilon_target;

    std::vector<char> clamped(n, 0);
    std::size_t n_clamped = 0;
    for (;;) {
        bool changed = false;
        for (std::size_t l = 0; l < n; ++l) {
            if (!clamped[l] && plan.epsilon[l] > epsilon_max) {
                plan.log.push_back("layer " + std::to_string(plan.layers[l]) + ": " + std::to_string(plan.epsilon[l]) +
                                   " clamped to " + std::to_string(epsilon_max));
                clamped[l] = 1;
                plan.epsilon[l] = epsilon_max;
                ++n_clamped;
                changed = true;
            }
        }
        if (!changed || n_clamped == n) break;
        const double remaining = target - static_cast<double>(n_clamped) * epsilon_max;
        double free_delta = 0.0;
        for (std::size_t l = 0; l < n; ++l)
            if (!clamped[l]) free_delta += delta[l];
        for (std::size_t l = 0; l < n; ++l) {
            if (clamped[l]) continue;
            plan.epsilon[l] = free_delta > 0.0 ? delta[l] / free_delta * remaining
                                               : remaining / static_cast<double>(n - n_clamped);
        }
        plan.log.push_back("redistributed " + std::to_string(remaining) + " over " + std::to_string(n - n_clamped) +
                           " unclamped layer(s)");
    }
    return plan;
}

std::size_t prunable_units(const Block& block) noexcept { return block.attn.value_width() + block.ffn.width(); }

void assign_unit_counts(BudgetPlan& plan, const Model& model) {
    const std::size_t n = plan.epsilon.size();
    plan.widths.assign(n, 0);
    plan.remove_count.assign(n, 0);
    std::vector<std::size_t> cap(n);
    std::vector<double> exact(n);
    double total_exact = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (plan.layers[i] >= model.blocks.size())
            throw ValidationError("budget plan names layer " + std::to_string(plan.layers[i]) + " beyond the model");
        const auto& b = model.blocks[plan.layers[i]];
        plan.widths[i] = prunable_units(b);
        const auto by_ratio = static_cast<std::size_t>(std::floor(plan.epsilon_max * plan.widths[i] + 1e-9));
        cap[i] = std::min(by_ratio, plan.widths[i] >= 2 ? plan.widths[i] - 2 : 0);
        exact[i] = plan.epsilon[i] * static_cast<double>(plan.widths[i]);
        total_exact += exact[i];
        plan.remove_count[i] = std::min(static_cast<std::size_t>(std::floor(exact[i])), cap[i]);
    }
    const auto wanted = static_cast<std::size_t>(std::llround(total_exact));
    std::size_t have = std::accumulate(plan.remove_count.begin(), plan.remove_count.end(), std::size_t{0});
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return exact[a] - std::floor(exact[a]) > exact[b] - std::floor(exact[b]);
    });
    while (have < wanted) {
        bool progressed = false;
        for (auto i : order) {
            if (have >= wanted) break;
            if (plan.remove_count[i] < cap[i]) {
                ++plan.remove_count[i];
                ++have;
                progressed = true;
            }
        }
        if (!progressed) {
            plan.log.push_back("unit caps absorbed " + std::to_string(wanted - have) + " unit(s) of budget");
            break;
        }
    }
}

LayerScores invert_layer_scores(const LayerScores& scores) {
    LayerScores out = scores;
    std::vector<double> neg(scores.raw.size());
    for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -scores.raw[i];
    out.normalized = normalize_layer_scores(neg);
    return out;
}

double unit_ratio_for_param_target(const Model& model, double param_ratio) {
    if (!(param_ratio >= 0.0 && param_ratio < 1.0)) throw ValidationError("parameter pruning ratio must lie in [0, 1)");
    std::size_t units = 0;
    for (const auto& b : model.blocks)
        if (b.enabled) units += prunable_units(b);
    if (units == 0) throw ValidationError("model has no prunable units");
    const double per_unit = 2.0 * static_cast<double>(model.dim()) + 1.0;
    return param_ratio * static_cast<double>(param_count(model)) / (per_unit * static_cast<double>(units));
}

std::vector<std::size_t> select_units_to_remove(const LayerNeuronScores& layer, std::size_t count) {
    std::vector<std::size_t> order(layer.units.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ia = layer.units[a].importance;
        const double ib = layer.units[b].importance;
        if (ia != ib) return ia < ib;
        return a < b;
    });
    std::size_t left_attn = layer.count(UnitKind::Attention);
    std::size_t left_ffn = layer.count(UnitKind::FeedForward);
    std::vector<std::size_t> chosen;
    for (auto j : order) {
        if (chosen.size() == count) break;
        auto& left = layer.units[j].kind == UnitKind::Attention ? left_attn : left_ffn;
        if (left <= 1) continue;
        --left;
        chosen.push_back(j);
    }
    if (chosen.size() < count)
        throw ValidationError("layer " + std::to_string(layer.layer) + ": cannot remove " + std::to_string(count) +
                              " of " + std::to_string(layer.units.size()) + " units");
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

PruneResult prune(const Model& model, const NeuronScores& scores, const BudgetPlan& plan) {
    validate(model);
    if (plan.remove_count.size() != plan.layers.size() || plan.epsilon.size() != plan.layers.size())
        throw ValidationError("budget plan has no unit counts; call assign_unit_counts first");
    PruneResult out{model, {}};
    auto& report = out.report;
    report.epsilon_t = plan.epsilon_target;
    report.params_before = param_count(model);
    double exact_total = 0.0;
    std::size_t removed_total = 0;
    for (std::size_t i = 0; i < plan.layers.size(); ++i) {
        const std::size_t l = plan.layers[i];
        const auto it = std::find_if(scores.layers.begin(), scores.layers.end(),
                                     [l](const LayerNeuronScores& s) { return s.layer == l; });
        LayerPruneRecord rec;
        rec.layer = l;
        rec.epsilon = plan.epsilon[i];
        exact_total += plan.epsilon[i] * static_cast<double>(prunable_units(model.blocks[l]));
        if (plan.remove_count[i] > 0) {
            if (it == scores.layers.end())
                throw ValidationError("no neuron scores for layer " + std::to_string(l));
            check_structure(model.blocks[l], *it);
            if (plan.remove_count[i] > prunable_units(model.blocks[l]))
                throw ValidationError("plan removes more units than layer " + std::to_string(l) + " has");
            rec.removed = select_units_to_remove(*it, plan.remove_count[i]);
            const std::size_t channels = model.blocks[l].attn.value_width();
            for (auto j : rec.removed) (j < channels ? rec.removed_attention : rec.removed_ffn).push_back(j < channels ? j : j - channels);
            auto& block = out.model.blocks[l];
            prune_attention(block.attn, rec.removed_attention, rec.removed_heads);
            prune_ffn(block.ffn, rec.removed_ffn);
            removed_total += rec.removed.size();
        }
        report.per_layer.push_back(std::move(rec));
    }
    validate(out.model);
    report.params_after = param_count(out.model);
    report.retention = static_cast<double>(report.params_after) / static_cast<double>(report.params_before);
    report.rounding_error = static_cast<double>(removed_total) - exact_total;
    return out;
}

NeuronScores random_unit_scores(const Model& model, std::uint64_t seed) {
    Rng rng(seed);
    NeuronScores out;
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const auto& b = model.blocks[l];
        if (!b.enabled) continue;
        LayerNeuronScores ls;
        ls.layer = l;
        for (std::size_t c = 0; c < b.attn.value_width(); ++c) {
            UnitScore u;
            u.kind = UnitKind::Attention;
            u.index = c;
            u.importance = uniform(rng, 0.0, 1.0);
            ls.units.push_back(u);
        }
        for (std::size_t c = 0; c < b.ffn.width(); ++c) {
            UnitScore u;
            u.kind = UnitKind::FeedForward;
            u.index = c;
            u.importance = uniform(rng, 0.0, 1.0);
            ls.units.push_back(u);
        }
        out.layers.push_back(std::move(ls));
    }
    return out;
}

FinetuneResult finetune(const Model& model, const Dataset& metric_data, const FinetuneConfig& config) {
    if (metric_data.size() == 0) throw ValidationError("finetune: empty metric dataset");
    if (!(config.learning_rate >= 0.0)) throw ValidationError("finetune: negative learning rate");
    if (config.batch_size == 0) throw ValidationError("finetune: zero batch size");
    check_labels(metric_data.labels, model.num_classes());

    FinetuneResult result{model, 0.0, 0.0};
    const Matrix features = forward(model, metric_data.samples).features;
    auto loss_of = [&](const Linear& head) {
        Matrix logits(features.rows(), head.out_features());
        for (std::size_t r = 0; r < features.rows(); ++r)
            for (std::size_t k = 0; k < head.out_features(); ++k) {
                double acc = head.bias[k];
                for (std::size_t c = 0; c < features.cols(); ++c) acc += head.weight(k, c) * features(r, c);
                logits(r, k) = acc;
            }
        return cross_entropy(logits, metric_data.labels);
    };
    result.loss_before = loss_of(model.head);
    result.loss_after = result.loss_before;
    if (config.epochs == 0 || config.learning_rate == 0.0) return result;

    Rng rng(config.seed);
    Linear head = model.head;
    std::vector<std::size_t> order(metric_data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            std::span<const std::size_t> batch(order.data() + start, stop - start);
            std::vector<int> labels;
            labels.reserve(batch.size());
            for (auto i : batch) labels.push_back(metric_data.labels[i]);
            head_step(head, features.select_rows(batch), labels, config.learning_rate);
        }
        const double loss = loss_of(head);
        if (loss < result.loss_after) {
            result.loss_after = loss;
            result.model.head = head;
        }
    }
    return result;
}

FinetuneResult finetune(const Model& model, const MetricDataset& metric, const Dataset& pool,
                        const FinetuneConfig& config) {
    for (auto i : metric.indices)
        if (i >= pool.size()) throw ValidationError("metric index " + std::to_string(i) + " outside the pool");
    return finetune(model, pool.subset(metric.indices), config);
}

nlohmann::json prune_report_json(const PruneReport& report) {
    nlohmann::json doc;
    doc["version"] = 1;
    doc["device_id"] = report.device_id;
    doc["epsilon_t"] = report.epsilon_t;
    auto layers = nlohmann::json::array();
    for (const auto& r : report.per_layer)
        layers.push_back({{"layer", r.layer},
                          {"epsilon", r.epsilon},
                          {"removed", r.removed},
                          {"removed_mha", r.removed_attention},
                          {"removed_ffn", r.removed_ffn},
                          {"removed_heads", r.removed_heads}});
    doc["per_layer"] = layers;
    doc["params_before"] = report.params_before;
    doc["params_after"] = report.params_after;
    doc["retention"] = report.retention;
    doc["rounding_error"] = report.rounding_error;
    return doc;
}

nlohmann::json budget_plan_json(const BudgetPlan& plan) {
    nlohmann::json doc;
    doc["epsilon_target"] = plan.epsilon_target;
    doc["epsilon_max"] = plan.epsilon_max;
    doc["layers"] = plan.layers;
    doc["epsilon"] = plan.epsilon;
    doc["widths"] = plan.widths;
    doc["remove_count"] = plan.remove_count;
    doc["log"] = plan.log;
    return doc;
}

}  // namespace tap
