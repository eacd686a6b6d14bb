#include "tap/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "tap/io.hpp"

namespace tap {

namespace {

// Inversions of `seq`, sorting it in place.
std::uint64_t merge_count(std::vector<std::size_t>& seq, std::vector<std::size_t>& buf, std::size_t lo,
                          std::size_t hi) {
    if (hi - lo < 2) return 0;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::uint64_t inv = merge_count(seq, buf, lo, mid) + merge_count(seq, buf, mid, hi);
    std::size_t i = lo, j = mid, k = lo;
    while (i < mid && j < hi) {
        if (seq[i] <= seq[j]) {
            buf[k++] = seq[i++];
        } else {
            inv += mid - i;
            buf[k++] = seq[j++];
        }
    }
    while (i < mid) buf[k++] = seq[i++];
    while (j < hi) buf[k++] = seq[j++];
    std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
              seq.begin() + static_cast<std::ptrdiff_t>(lo));
    return inv;
}

std::vector<std::size_t> ranks_of(const std::vector<std::size_t>& order) {
    std::vector<std::size_t> out(order.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) out[order[pos]] = pos;
    return out;
}

void check_same_structure(const NeuronScores& a, const NeuronScores& b) {
    if (a.layers.size() != b.layers.size()) throw ValidationError("score sets cover different layer counts");
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        const auto& la = a.layers[l];
        const auto& lb = b.layers[l];
        if (la.layer != lb.layer || la.units.size() != lb.units.size() ||
            la.count(UnitKind::Attention) != lb.count(UnitKind::Attention))
            throw ValidationError("score sets differ in structure at layer " + std::to_string(la.layer));
    }
}

}  // namespace

void Ranking::validate() const {
    std::vector<std::size_t> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw ValidationError("ranking repeats an identifier");
}

Ranking ranking_from_values(std::span<const double> values) {
    Ranking r;
    r.order.resize(values.size());
    std::iota(r.order.begin(), r.order.end(), std::size_t{0});
    std::sort(r.order.begin(), r.order.end(), [&](std::size_t a, std::size_t b) {
        if (values[a] != values[b]) return values[a] > values[b];
        return a < b;
    });
    return r;
}

PairCounts count_pairs(const Ranking& a, const Ranking& b) {
    a.validate();
    b.validate();
    if (a.size() != b.size()) throw ValidationError("rankings have different lengths");
    std::unordered_map<std::size_t, std::size_t> pos_b;
    pos_b.reserve(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) pos_b.emplace(b.order[i], i);
    std::vector<std::size_t> seq(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto it = pos_b.find(a.order[i]);
        if (it == pos_b.end()) throw ValidationError("rankings are over different identifier sets");
        seq[i] = it->second;
    }
    std::vector<std::size_t> buf(seq.size());
    const std::uint64_t n = a.size();
    const std::uint64_t discordant = merge_count(seq, buf, 0, seq.size());
    return {n * (n - 1) / 2 - discordant, discordant};
}

double kendall_tau(const Ranking& a, const Ranking& b) {
    if (a.size() < 2) throw ValidationError("kendall tau needs at least two ranked items");
    const auto c = count_pairs(a, b);
    const double n = static_cast<double>(a.size());
    return 2.0 * (static_cast<double>(c.concordant) - static_cast<double>(c.discordant)) / (n * (n - 1.0));
}

Ranking global_ranking(const NeuronScores& scores) {
    std::vector<double> values;
    for (const auto& l : scores.layers)
        for (const auto& u : l.units) values.push_back(u.importance);
    return ranking_from_values(values);
}

Ranking group_ranking(const LayerNeuronScores& layer, UnitKind kind) {
    std::vector<double> values;
    for (const auto& u : layer.units)
        if (u.kind == kind) values.push_back(u.importance);
    return ranking_from_values(values);
}

double TaskDivergence::mean_layer_tau(std::size_t a, std::size_t b) const {
    if (a > b) std::swap(a, b);
    for (const auto& p : pairs) {
        if (p.task_a != a || p.task_b != b) continue;
        double acc = 0.0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < p.layers.size(); ++i) {
            for (double t : {p.tau_ffn[i], p.tau_mha[i]}) {
                if (std::isnan(t)) continue;
                acc += t;
                ++count;
            }
        }
        return count ? acc / static_cast<double>(count) : std::nan("");
    }
    throw ValidationError("no breakdown for the requested task pair");
}

TaskDivergence task_divergence_matrix(std::span<const NeuronScores> score_sets, std::vector<std::string> task_ids) {
    const std::size_t t = score_sets.size();
    if (t < 2) throw ValidationError("task divergence needs at least two tasks");
    for (std::size_t i = 1; i < t; ++i) check_same_structure(score_sets[0], score_sets[i]);
    if (task_ids.empty())
        for (std::size_t i = 0; i < t; ++i) task_ids.push_back("task" + std::to_string(i));
    if (task_ids.size() != t) throw ValidationError("task id count does not match score sets");

    TaskDivergence out;
    out.task_ids = std::move(task_ids);
    out.tau = Matrix(t, t, 1.0);
    out.divergence = Matrix(t, t, 0.0);
    std::vector<Ranking> global(t);
    for (std::size_t i = 0; i < t; ++i) global[i] = global_ranking(score_sets[i]);

    for (std::size_t a = 0; a < t; ++a)
        for (std::size_t b = a + 1; b < t; ++b) {
            PairBreakdown p;
            p.task_a = a;
            p.task_b = b;
            p.tau = kendall_tau(global[a], global[b]);
            for (std::size_t l = 0; l < score_sets[a].layers.size(); ++l) {
                const auto& la = score_sets[a].layers[l];
                const auto& lb = score_sets[b].layers[l];
                p.layers.push_back(la.layer);
                auto group_tau = [&](UnitKind kind) {
                    const auto ra = group_ranking(la, kind);
                    return ra.size() < 2 ? std::nan("") : kendall_tau(ra, group_ranking(lb, kind));
                };
                p.tau_ffn.push_back(group_tau(UnitKind::FeedForward));
                p.tau_mha.push_back(group_tau(UnitKind::Attention));
            }
            out.tau(a, b) = out.tau(b, a) = p.tau;
            out.divergence(a, b) = out.divergence(b, a) = (1.0 - p.tau) / 2.0;
            out.pairs.push_back(std::move(p));
        }
    return out;
}

std::string divergence_csv(const TaskDivergence& div) {
    std::ostringstream os;
    os << "task";
    for (const auto& id : div.task_ids) os << ',' << id;
    os << '\n';
    for (std::size_t a = 0; a < div.task_ids.size(); ++a) {
        os << div.task_ids[a];
        for (std::size_t b = 0; b < div.task_ids.size(); ++b) os << ',' << format_double(div.divergence(a, b));
        os << '\n';
    }
    return os.str();
}

nlohmann::json divergence_json(const TaskDivergence& div) {
    nlohmann::json doc;
    doc["version"] = 1;
    doc["metric"] = "(1 - kendall_tau) / 2 over global neuron-importance rankings";
    doc["task_ids"] = div.task_ids;
    auto rows = [](const Matrix& m) {
        auto out = nlohmann::json::array();
        for (std::size_t r = 0; r < m.rows(); ++r) out.push_back(m.row(r));
        return out;
    };
    doc["divergence"] = rows(div.divergence);
    doc["tau"] = rows(div.tau);
    auto pairs = nlohmann::json::array();
    for (const auto& p : div.pairs) {
        auto layers = nlohmann::json::array();
        for (std::size_t i = 0; i < p.layers.size(); ++i) {
            auto maybe = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
            layers.push_back({{"layer", p.layers[i]}, {"tau_ffn", maybe(p.tau_ffn[i])}, {"tau_mha", maybe(p.tau_mha[i])}});
        }
        pairs.push_back({{"task_a", div.task_ids[p.task_a]},
                         {"task_b", div.task_ids[p.task_b]},
                         {"tau", p.tau},
                         {"divergence", (1.0 - p.tau) / 2.0},
                         {"layers", layers}});
    }
    doc["pairs"] = pairs;
    return doc;
}

LayerProfileComparison layer_profile_compare(const Model& model, const Matrix& task_a_metric,
                                             const Matrix& task_b_metric) {
    LayerProfileComparison out;
    out.a = layer_importance(model, task_a_metric);
    out.b = layer_importance(model, task_b_metric);
    const auto ra = ranking_from_values(out.a.normalized);
    const auto rb = ranking_from_values(out.b.normalized);
    out.rank_a = ranks_of(ra.order);
    out.rank_b = ranks_of(rb.order);
    if (ra.size() >= 2) out.tau = kendall_tau(ra, rb);
    double shift = 0.0;
    for (std::size_t i = 0; i < out.rank_a.size(); ++i)
        shift += std::abs(static_cast<double>(out.rank_a[i]) - static_cast<double>(out.rank_b[i]));
    out.mean_abs_rank_shift = out.rank_a.empty() ? 0.0 : shift / static_cast<double>(out.rank_a.size());
    return out;
}

nlohmann::json layer_profile_json(const LayerProfileComparison& cmp) {
    nlohmann::json doc;
    doc["version"] = 1;
    doc["layers"] = cmp.a.layers;
    doc["delta_a"] = cmp.a.normalized;
    doc["delta_b"] = cmp.b.normalized;
    doc["delta_raw_a"] = cmp.a.raw;
    doc["delta_raw_b"] = cmp.b.raw;
    doc["rank_a"] = cmp.rank_a;
    doc["rank_b"] = cmp.rank_b;
    doc["tau"] = cmp.tau ? nlohmann::json(*cmp.tau) : nlohmann::json("not-applicable");
    doc["mean_abs_rank_shift"] = cmp.mean_abs_rank_shift;
    return doc;
}

}  // namespace tap
