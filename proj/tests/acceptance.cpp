// Acceptance run: one PASS/FAIL line per criterion, each with its runtime limit.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "helpers.hpp"
#include "tap/datagen.hpp"
#include "tap/gmm.hpp"
#include "tap/importance.hpp"
#include "tap/metric_dataset.hpp"
#include "tap/orchestrator.hpp"
#include "tap/pruner.hpp"
#include "tap/sensitivity.hpp"

using namespace tap;
using tap::testing::random_labels;
using tap::testing::random_matrix;
using tap::testing::rel_err;
using tap::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    const char* name;
    double limit_seconds;
    std::function<Outcome()> run;
};

template <typename... Args>
std::string fmt(const char* f, Args... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

LayerScores layer_scores_of(std::vector<double> delta) {
    LayerScores s;
    s.layers.resize(delta.size());
    std::iota(s.layers.begin(), s.layers.end(), std::size_t{0});
    s.raw = delta;
    s.normalized = std::move(delta);
    return s;
}

// 1
Outcome budget_conservation() {
    Rng rng(2024);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    std::size_t clamped = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t L = 1 + static_cast<std::size_t>(u(rng) * 24.0);
        std::vector<double> raw(L);
        const double spread = 0.5 + 4.0 * u(rng);
        for (double& v : raw) v = normal(rng, 0.0, spread);
        const double eps_t = 0.01 + 0.88 * u(rng);
        const auto plan = allocate_budgets(layer_scores_of(normalize_layer_scores(raw)), eps_t);
        worst = std::max(worst, std::abs(plan.epsilon_sum() - static_cast<double>(L) * eps_t));
        clamped += !plan.log.empty();
    }
    return {worst <= 1e-9 && clamped > 0, fmt("max |sum - L*eps_t| = %.2e over 1000 instances, %zu clamped", worst, clamped)};
}

// 2
Outcome retention_accuracy() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 2;
    cfg.dim = 64;
    cfg.ffn_dim = 128;
    cfg.heads = 4;
    cfg.layers = 6;
    cfg.num_classes = 10;
    cfg.seed = 7;
    const Model m = init_model(cfg);
    const Matrix x = random_matrix(64, m.config.input_dim(), 8);
    const auto neurons = neuron_scores(m, x);
    const auto layers = layer_importance(m, x);
    bool ok = true;
    std::string detail = "retention";
    for (double eps : {0.1, 0.2, 0.3, 0.4}) {
        auto plan = allocate_budgets(layers, unit_ratio_for_param_target(m, eps));
        assign_unit_counts(plan, m);
        const double r = prune(m, neurons, plan).report.retention;
        ok = ok && std::abs(r - (1.0 - eps)) <= 0.02;
        detail += fmt(" %.1f->%.4f", eps, r);
    }
    return {ok, detail + " (target 1-eps_t +/-0.02)"};
}

// 3
Outcome em_monotone_and_recovery() {
    double worst_drop = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const std::size_t k = 1 + seed % 4, d = 1 + seed % 3;
        Matrix x(150, d);
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t c = 0; c < d; ++c) x(i, c) = normal(rng, 3.0 * static_cast<double>(i % (k + 1)), 1.0);
        const auto fit = fit_em(x, k, FitConfig{.max_iters = 80, .tol = 0.0, .seed = seed, .restarts = 1});
        const auto& ll = fit.report.log_likelihood;
        for (std::size_t i = 1; i < ll.size(); ++i) worst_drop = std::max(worst_drop, ll[i - 1] - ll[i]);
    }
    Rng rng(99);
    Matrix x(600, 1);
    for (std::size_t i = 0; i < 300; ++i) {
        x(i, 0) = normal(rng, -4.0, 1.0);
        x(300 + i, 0) = normal(rng, 4.0, 1.0);
    }
    const auto fit = fit_em(x, 2, FitConfig{.seed = 99});
    const double lo = std::min(fit.params.means(0, 0), fit.params.means(1, 0));
    const double hi = std::max(fit.params.means(0, 0), fit.params.means(1, 0));
    const double err = std::max(std::abs(lo + 4.0), std::abs(hi - 4.0));
    return {worst_drop <= 1e-8 && err <= 0.2,
            fmt("largest log-likelihood drop %.2e (slack 1e-8); planted means -4,4 recovered as %.3f,%.3f", worst_drop, lo, hi)};
}

// 4
Outcome bic_selection() {
    std::vector<std::size_t> range(9);
    std::iota(range.begin(), range.end(), std::size_t{1});
    bool ok = true;
    std::string detail;
    for (std::size_t k : {2, 3, 4}) {
        int hits = 0;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(1000 * k + seed);
            Matrix x(1500, 2);
            // Component centres on a circle with neighbour distance 8 sigma.
            const double radius = 8.0 / (2.0 * std::sin(std::numbers::pi / static_cast<double>(k)));
            for (std::size_t i = 0; i < 1500; ++i) {
                const double a = 2.0 * std::numbers::pi * static_cast<double>(i % k) / static_cast<double>(k);
                x(i, 0) = radius * std::cos(a) + normal(rng);
                x(i, 1) = radius * std::sin(a) + normal(rng);
            }
            hits += select_k_bic(x, range, FitConfig{.seed = seed}).k == k;
        }
        ok = ok && hits >= 9;
        detail += fmt("K=%zu: %d/10  ", k, hits);
    }
    return {ok, detail + "(need >= 9/10 each)"};
}

// 5
Outcome metric_fidelity() {
    std::size_t matched = 0, total = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        const std::size_t per = 200, dim = 4;
        Matrix pool(2 * per, dim), device(300, dim);
        for (std::size_t i = 0; i < per; ++i)
            for (std::size_t c = 0; c < dim; ++c) {
                pool(i, c) = normal(rng, 0.0, 1.0);
                pool(per + i, c) = normal(rng, 3.0, 1.0);
            }
        for (double& v : device.data()) v = normal(rng, 0.0, 1.0);
        const auto gmm = select_k_bic(device, std::vector<std::size_t>{1, 2, 3}, FitConfig{.seed = seed}).params;
        const auto m = construct_metric_dataset(gmm, pool, pool.rows() / 4);
        for (auto i : m.indices) matched += i < per;
        total += m.indices.size();
    }
    const double frac = static_cast<double>(matched) / static_cast<double>(total);
    return {frac >= 0.98, fmt("%.4f of top-N (N = pool/4, 10 seeds) from the device-matched population (need >= 0.98)", frac)};
}

// 6
Outcome kendall_oracle() {
    Rng rng(6);
    std::size_t mismatches = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 2 + static_cast<std::size_t>(rng() % 199);
        Ranking a, b;
        a.order.resize(n);
        std::iota(a.order.begin(), a.order.end(), std::size_t{0});
        b = a;
        std::shuffle(a.order.begin(), a.order.end(), rng);
        std::shuffle(b.order.begin(), b.order.end(), rng);
        std::vector<std::size_t> pa(n), pb(n);
        for (std::size_t i = 0; i < n; ++i) {
            pa[a.order[i]] = i;
            pb[b.order[i]] = i;
        }
        long long c = 0, d = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) ((pa[i] < pa[j]) == (pb[i] < pb[j]) ? c : d) += 1;
        const double brute = 2.0 * static_cast<double>(c - d) / static_cast<double>(n * (n - 1));
        mismatches += kendall_tau(a, b) != brute;
    }
    Ranking id{{0, 1, 2, 3, 4, 5}}, rev{{5, 4, 3, 2, 1, 0}};
    const double ex = kendall_tau(Ranking{{0, 1, 2, 3}}, Ranking{{0, 2, 1, 3}});
    const bool ok = mismatches == 0 && kendall_tau(id, id) == 1.0 && kendall_tau(id, rev) == -1.0 &&
                    std::abs(ex - 2.0 / 3.0) <= 1e-15;
    return {ok, fmt("%zu/1000 mismatches vs pair enumeration; extremes exact; worked example %.15f", mismatches, ex)};
}

// 7
Outcome zero_neuron_exactness() {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        ModelConfig cfg = tap::testing::tiny_config(seed, 2);
        cfg.dim = 16;
        cfg.ffn_dim = 24;
        cfg.heads = 4;
        Model m = init_model(cfg);
        const Matrix x = random_matrix(16, cfg.input_dim(), seed + 500);
        auto scores = neuron_scores(m, x);
        BudgetPlan plan;
        for (std::size_t l = 0; l < m.blocks.size(); ++l) {
            auto& b = m.blocks[l];
            auto& units = scores.layers[l].units;
            for (auto& u : units) u.importance = 1.0;
            const std::size_t na = b.attn.value_width();
            std::size_t dead = 0;
            for (std::size_t j = 0; j < units.size(); ++j) {
                const bool is_attn = j < na;
                const std::size_t idx = is_attn ? j : j - na;
                // Keep at least one live unit of each kind.
                if (idx == 0 || rng() % 3 != 0) continue;
                if (is_attn) {
                    for (std::size_t c = 0; c < b.attn.value.in_features(); ++c) b.attn.value.weight(idx, c) = 0.0;
                    b.attn.value.bias[idx] = 0.0;
                    for (std::size_t r = 0; r < b.attn.out.out_features(); ++r) b.attn.out.weight(r, idx) = 0.0;
                } else {
                    for (std::size_t c = 0; c < b.ffn.up.in_features(); ++c) b.ffn.up.weight(idx, c) = 0.0;
                    b.ffn.up.bias[idx] = 0.0;
                    for (std::size_t r = 0; r < b.ffn.down.out_features(); ++r) b.ffn.down.weight(r, idx) = 0.0;
                }
                units[j].importance = 0.0;
                ++dead;
            }
            plan.layers.push_back(l);
            plan.epsilon.push_back(static_cast<double>(dead) / static_cast<double>(units.size()));
            plan.remove_count.push_back(dead);
        }
        const auto pruned = prune(m, scores, plan);
        const Matrix a = forward(m, x).logits, b = forward(pruned.model, x).logits;
        for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    }
    return {worst <= 1e-12, fmt("max logit change %.2e over 100 random models (limit 1e-12)", worst)};
}

// 8
Outcome kl_sanity() {
    ModelConfig cfg = tap::testing::tiny_config(8, 3);
    Model m = init_model(cfg);
    auto& b = m.blocks[1];
    for (double& v : b.attn.out.weight.data()) v = 0.0;
    std::fill(b.attn.out.bias.begin(), b.attn.out.bias.end(), 0.0);
    for (double& v : b.ffn.down.weight.data()) v = 0.0;
    std::fill(b.ffn.down.bias.begin(), b.ffn.down.bias.end(), 0.0);
    const auto ls = layer_importance(m, random_matrix(64, cfg.input_dim(), 9));
    const double sum = std::accumulate(ls.normalized.begin(), ls.normalized.end(), 0.0);
    const double kl = kl_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{0.25, 0.75});
    const bool ok = std::abs(ls.raw[1]) <= 1e-12 && std::abs(sum - 1.0) <= 1e-9 && std::abs(kl - 0.14384) <= 1e-4;
    return {ok, fmt("zero block delta' = %.2e, sum delta = %.12f, hand pair KL = %.6f", ls.raw[1], sum, kl)};
}

// Scenario for the end-to-end comparison: 10 devices, 20 classes in pairs.
ScenarioSpec adaptivity_spec(std::uint64_t seed) {
    ScenarioSpec spec;
    spec.num_devices = 10;
    spec.num_classes = 20;
    spec.pool_per_class = 60;
    spec.device_per_class = 250;
    spec.image_size = 8;
    spec.noise = 1.5;
    spec.seed = seed;
    return spec;
}

struct ArmAccuracies {
    double tap = 0.0, random = 0.0, shared = 0.0;
};

ArmAccuracies adaptivity_run(const fs::path& root, std::uint64_t seed, bool invert) {
    PipelineConfig cfg;
    cfg.scenario_dir = root / "scenario";
    cfg.base_model = root / "base.bin";
    cfg.out_dir = root / (invert ? "out_inverted" : "out");
    cfg.epsilon_t = 0.3;
    cfg.metric_size = 512;
    cfg.k_range = {2, 3, 4, 5, 6};
    cfg.run_controls = true;
    cfg.invert_layer_budget = invert;
    cfg.seed = seed;
    const auto s = run_pipeline(cfg);
    return {s.weighted_finetuned, s.weighted_controls.at("random_units"), s.weighted_controls.at("shared_metric")};
}

void adaptivity_prepare(const fs::path& root, std::uint64_t seed) {
    const auto spec = adaptivity_spec(seed);
    const auto sc = generate_scenario(spec);
    save_scenario(sc, root / "scenario");
    const auto arch = model_config_for(spec, 32, 64, 4, 4, 4, seed);
    const Model base = train_toy_model(sc.pool, arch, TrainConfig{.epochs = 20, .train_blocks = true, .seed = seed});
    save_model(base, root / "base.bin");
}

Outcome task_adaptivity() {
    int beat_random = 0, beat_shared = 0;
    std::string detail;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        TempDir dir("accept9_" + std::to_string(seed));
        adaptivity_prepare(dir.path(), seed);
        const auto r = adaptivity_run(dir.path(), seed, false);
        beat_random += r.tap - r.random >= 0.03;
        beat_shared += r.tap > r.shared;
        detail += fmt("\n      seed %2llu: tap %.3f random %.3f shared %.3f", static_cast<unsigned long long>(seed), r.tap,
                      r.random, r.shared);
    }
    return {beat_random >= 8 && beat_shared >= 7,
            fmt("beats random by >= 0.03 in %d/10 (need 8), beats shared in %d/10 (need 7)", beat_random, beat_shared) +
                detail};
}

// 10
Outcome cross_task_divergence() {
    int hits = 0;
    std::string detail;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        ScenarioSpec spec;
        spec.num_devices = 4;
        spec.num_classes = 8;
        spec.pool_per_class = 40;
        spec.device_per_class = 200;
        spec.image_size = 8;
        spec.noise = 0.5;
        spec.disjoint_features = true;
        spec.seed = seed;
        const auto sc = generate_scenario(spec);
        const auto arch = model_config_for(spec, 32, 64, 4, 2, 4, seed);
        const Model m = train_toy_model(sc.pool, arch, TrainConfig{.epochs = 10, .train_blocks = true, .seed = seed});
        std::vector<Ranking> first, second;
        for (const auto& d : sc.devices) {
            const auto [a, b] = split_indices(d.size(), 0.5, seed);
            first.push_back(global_ranking(neuron_scores(m, d.samples.select_rows(a))));
            second.push_back(global_ranking(neuron_scores(m, d.samples.select_rows(b))));
        }
        double intra = 0.0, inter = 0.0;
        std::size_t pairs = 0;
        for (std::size_t i = 0; i < first.size(); ++i) {
            intra += kendall_tau(first[i], second[i]);
            for (std::size_t j = i + 1; j < first.size(); ++j, ++pairs) inter += kendall_tau(first[i], first[j]);
        }
        intra /= static_cast<double>(first.size());
        inter /= static_cast<double>(pairs);
        hits += intra - inter >= 0.2;
        detail += fmt(" %.2f", intra - inter);
    }
    return {hits >= 8, fmt("intra minus inter tau >= 0.2 in %d/10 seeds (need 8); gaps:", hits) + detail};
}

// 11
Outcome grid_enumeration() {
    TempDir dir("accept11");
    ScenarioSpec spec;
    spec.num_devices = 3;
    spec.num_classes = 6;
    spec.pool_per_class = 30;
    spec.device_per_class = 60;
    spec.image_size = 8;
    spec.noise = 1.0;
    spec.seed = 11;
    const auto sc = generate_scenario(spec);
    save_scenario(sc, dir.path() / "scenario");
    const auto arch = model_config_for(spec, 16, 32, 4, 2, 4, 11);
    save_model(train_toy_model(sc.pool, arch, TrainConfig{.epochs = 5, .seed = 11}), dir.path() / "base.bin");
    PipelineConfig cfg;
    cfg.scenario_dir = dir.path() / "scenario";
    cfg.base_model = dir.path() / "base.bin";
    cfg.out_dir = dir.path() / "out";
    cfg.metric_size = 64;
    cfg.k_range = {1, 2, 3};
    cfg.finetune.epochs = 5;
    cfg.seed = 11;
    const auto a = grid_search_weights(cfg, 0.1);
    const auto b = grid_search_weights(cfg, 0.1);
    const std::string csv = grid_table_csv(a);
    const auto lines = std::count(csv.begin(), csv.end(), '\n');
    std::size_t errors = 0;
    for (const auto& row : a.table) errors += row.error.has_value();
    const bool ok = a.table.size() == 66 && lines == 67 && csv == grid_table_csv(b) && errors == 0;
    return {ok, fmt("%zu grid points, %lld table lines, %zu errors, rerun identical: %s; best (%.1f,%.1f,%.1f) acc %.3f",
                    a.table.size(), static_cast<long long>(lines), errors, csv == grid_table_csv(b) ? "yes" : "no",
                    a.best.alpha, a.best.beta, a.best.gamma, a.best_accuracy)};
}

// 12
Outcome head_gradient_check() {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const std::size_t d = 4 + seed % 13, k = 2 + seed % 7, n = 1 + seed % 9;
        Linear head{random_matrix(k, d, seed, 0.5), std::vector<double>(k)};
        Rng rng(seed + 77);
        for (double& v : head.bias) v = normal(rng, 0.0, 0.3);
        const Matrix feats = random_matrix(n, d, seed + 1);
        const auto labels = random_labels(n, k, seed + 2);
        const auto g = head_gradient(head, feats, labels);
        auto loss = [&](const Linear& h) {
            Matrix logits(n, k);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < k; ++c) {
                    double s = h.bias[c];
                    for (std::size_t i = 0; i < d; ++i) s += h.weight(c, i) * feats(r, i);
                    logits(r, c) = s;
                }
            return cross_entropy(logits, labels);
        };
        const double step = 1e-5;
        for (std::size_t i = 0; i < head.weight.size(); ++i) {
            Linear p = head, q = head;
            p.weight.data()[i] += step;
            q.weight.data()[i] -= step;
            worst = std::max(worst, rel_err(g.weight.data()[i], (loss(p) - loss(q)) / (2 * step)));
        }
        for (std::size_t i = 0; i < k; ++i) {
            Linear p = head, q = head;
            p.bias[i] += step;
            q.bias[i] -= step;
            worst = std::max(worst, rel_err(g.bias[i], (loss(p) - loss(q)) / (2 * step)));
        }
    }
    return {worst <= 1e-5, fmt("max relative error %.2e over 50 instances (limit 1e-5)", worst)};
}

// Not a criterion: the opposite layer-budget direction on the same seeds.
void report_inverted_budget(const std::vector<std::uint64_t>& seeds) {
    for (auto seed : seeds) {
        TempDir dir("accept_inv_" + std::to_string(seed));
        adaptivity_prepare(dir.path(), seed);
        const auto lit = adaptivity_run(dir.path(), seed, false);
        const auto inv = adaptivity_run(dir.path(), seed, true);
        std::printf("INFO  layer budget direction, seed %llu: delta-proportional %.3f, inverted %.3f (random %.3f / %.3f)\n",
                    static_cast<unsigned long long>(seed), lit.tap, inv.tap, lit.random, inv.random);
        std::fflush(stdout);
    }
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all{
        {1, "budget conservation", 1, budget_conservation},
        {2, "retention accuracy", 10, retention_accuracy},
        {3, "EM monotonicity and planted recovery", 30, em_monotone_and_recovery},
        {4, "BIC selection", 120, bic_selection},
        {5, "metric-set fidelity", 10, metric_fidelity},
        {6, "Kendall tau oracle equivalence", 10, kendall_oracle},
        {7, "zero-neuron exactness", 10, zero_neuron_exactness},
        {8, "KL layer-score sanity", 1, kl_sanity},
        {9, "end-to-end task adaptivity", 600, task_adaptivity},
        {10, "cross-task divergence", 300, cross_task_divergence},
        {11, "grid-search enumeration", 900, grid_enumeration},
        {12, "head-gradient check", 5, head_gradient_check},
    };
    std::set<int> wanted;
    bool inverted = false;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--inverted") inverted = true;
        else wanted.insert(std::stoi(arg));
    }
    int failed = 0;
    for (const auto& c : all) {
        if (!wanted.empty() && !wanted.contains(c.id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = secs < c.limit_seconds;
        const bool pass = o.pass && in_time;
        failed += !pass;
        std::printf("%s  %2d %s: %s [%.2f s, limit %.0f s%s]\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                    secs, c.limit_seconds, in_time ? "" : ", over time");
        std::fflush(stdout);
    }
    if (inverted) report_inverted_budget({1, 2, 3});
    return failed == 0 ? 0 : 1;
}
