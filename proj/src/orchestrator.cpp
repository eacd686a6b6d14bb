#include "tap/orchestrator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

namespace tap {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSplitTag = 11;
constexpr std::uint64_t kGmmTag = 12;
constexpr std::uint64_t kCloudTag = 13;
constexpr std::uint64_t kRandomArmTag = 14;
constexpr std::uint64_t kSharedArmTag = 15;
constexpr std::uint64_t kGridSplitTag = 16;

const char* kRandomArm = "random_units";
const char* kSharedArm = "shared_metric";

fs::path device_dir(const PipelineConfig& config, std::size_t device) {
    return config.out_dir / ("device_" + std::to_string(device));
}

bool path_under(const fs::path& path, const fs::path& root) {
    const auto p = path.lexically_normal().string();
    auto r = root.lexically_normal().string();
    if (!r.empty() && r.back() != '/') r += '/';
    return p.rfind(r, 0) == 0;
}

double evaluate(const Model& model, const Dataset& data) {
    return accuracy(forward(model, data.samples).logits, data.labels);
}

// Per-device state that never leaves the device.
struct DeviceLocal {
    Dataset test;
    std::size_t components = 0;
};

std::string bytes_of(const double* values, std::size_t count) {
    return std::string(reinterpret_cast<const char*>(values), count * sizeof(double));
}

}  // namespace

double PipelineConfig::epsilon_for(std::size_t device) const {
    const auto it = device_epsilon.find(device);
    return it == device_epsilon.end() ? epsilon_t : it->second;
}

void PipelineConfig::validate() const {
    auto check_eps = [](double e) {
        if (!(e >= 0.0 && e < 1.0)) throw ValidationError("epsilon_t must lie in [0, 1)");
    };
    check_eps(epsilon_t);
    for (const auto& [_, e] : device_epsilon) check_eps(e);
    weights.validate();
    if (metric_size == 0) throw ValidationError("metric dataset size must be positive");
    if (k_range.empty()) throw ValidationError("GMM K range is empty");
    if (!(fit_fraction > 0.0 && fit_fraction < 1.0)) throw ValidationError("fit fraction must lie in (0, 1)");
}

nlohmann::json config_json(const PipelineConfig& c) {
    nlohmann::json doc;
    doc["scenario"] = c.scenario_dir.string();
    doc["base_model"] = c.base_model.string();
    doc["out"] = c.out_dir.string();
    doc["epsilon_t"] = c.epsilon_t;
    nlohmann::json per_device = nlohmann::json::object();
    for (const auto& [d, e] : c.device_epsilon) per_device[std::to_string(d)] = e;
    doc["device_epsilon"] = per_device;
    doc["epsilon_max"] = c.epsilon_max;
    doc["weights"] = {c.weights.alpha, c.weights.beta, c.weights.gamma};
    doc["metric_size"] = c.metric_size;
    doc["k_range"] = c.k_range;
    doc["gmm"] = {{"max_iters", c.gmm.max_iters}, {"tol", c.gmm.tol}, {"restarts", c.gmm.restarts}};
    doc["estimator"] = {{"mi_bins", c.estimator.mi_bins}, {"bandwidth_floor", c.estimator.bandwidth_floor}};
    doc["finetune"] = {{"epochs", c.finetune.epochs},
                       {"learning_rate", c.finetune.learning_rate},
                       {"batch_size", c.finetune.batch_size}};
    doc["fit_fraction"] = c.fit_fraction;
    doc["invert_layer_budget"] = c.invert_layer_budget;
    doc["run_controls"] = c.run_controls;
    doc["seed"] = c.seed;
    return doc;
}

PipelineConfig config_from_json(const nlohmann::json& doc, const fs::path& base_dir) {
    PipelineConfig c;
    auto path_of = [&](const char* key) -> fs::path {
        if (!doc.contains(key)) return {};
        fs::path p = doc.at(key).get<std::string>();
        return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
    c.scenario_dir = path_of("scenario");
    c.base_model = path_of("base_model");
    c.out_dir = path_of("out");
    c.epsilon_t = doc.value("epsilon_t", c.epsilon_t);
    if (doc.contains("device_epsilon"))
        for (const auto& [k, v] : doc.at("device_epsilon").items()) c.device_epsilon[std::stoul(k)] = v.get<double>();
    c.epsilon_max = doc.value("epsilon_max", c.epsilon_max);
    if (doc.contains("weights")) {
        const auto w = doc.at("weights").get<std::vector<double>>();
        if (w.size() != 3) throw ValidationError("weights must have three entries");
        c.weights = {w[0], w[1], w[2]};
    }
    c.metric_size = doc.value("metric_size", c.metric_size);
    if (doc.contains("k_range")) c.k_range = doc.at("k_range").get<std::vector<std::size_t>>();
    if (doc.contains("gmm")) {
        const auto& g = doc.at("gmm");
        c.gmm.max_iters = g.value("max_iters", c.gmm.max_iters);
        c.gmm.tol = g.value("tol", c.gmm.tol);
        c.gmm.restarts = g.value("restarts", c.gmm.restarts);
    }
    if (doc.contains("estimator")) {
        const auto& e = doc.at("estimator");
        c.estimator.mi_bins = e.value("mi_bins", c.estimator.mi_bins);
        c.estimator.bandwidth_floor = e.value("bandwidth_floor", c.estimator.bandwidth_floor);
    }
    if (doc.contains("finetune")) {
        const auto& f = doc.at("finetune");
        c.finetune.epochs = f.value("epochs", c.finetune.epochs);
        c.finetune.learning_rate = f.value("learning_rate", c.finetune.learning_rate);
        c.finetune.batch_size = f.value("batch_size", c.finetune.batch_size);
    }
    c.fit_fraction = doc.value("fit_fraction", c.fit_fraction);
    c.invert_layer_budget = doc.value("invert_layer_budget", c.invert_layer_budget);
    c.run_controls = doc.value("run_controls", c.run_controls);
    c.seed = doc.value("seed", c.seed);
    c.validate();
    return c;
}

double weighted_accuracy(std::span<const double> accuracies, std::span<const std::size_t> counts) {
    if (accuracies.empty()) throw ValidationError("weighted accuracy over no devices");
    if (accuracies.size() != counts.size()) throw ValidationError("accuracy/count length mismatch");
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < accuracies.size(); ++i) {
        if (counts[i] == 0) throw ValidationError("device with zero test samples");
        num += accuracies[i] * static_cast<double>(counts[i]);
        den += static_cast<double>(counts[i]);
    }
    return num / den;
}

double weighted_accuracy(std::span<const DeviceResult> results, AccuracyStage stage) {
    std::vector<double> acc;
    std::vector<std::size_t> counts;
    for (const auto& r : results) {
        if (!r.ok()) continue;
        acc.push_back(stage == AccuracyStage::Base     ? r.accuracy_base
                      : stage == AccuracyStage::Pruned ? r.accuracy_pruned
                                                       : r.accuracy_finetuned);
        counts.push_back(r.sample_count);
    }
    return weighted_accuracy(acc, counts);
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double fraction,
                                                                            std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto cut = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    std::vector<std::size_t> first(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut));
    std::vector<std::size_t> rest(order.begin() + static_cast<std::ptrdiff_t>(cut), order.end());
    std::sort(first.begin(), first.end());
    std::sort(rest.begin(), rest.end());
    return {first, rest};
}

DeviceUpload device_fit_gmm(const Matrix& local_features, const std::vector<std::size_t>& k_range,
                            const FitConfig& fit) {
    std::vector<std::size_t> ks;
    for (auto k : k_range)
        if (k <= local_features.rows()) ks.push_back(k);
    if (ks.empty()) throw ValidationError("device holds fewer samples than the smallest K");
    auto sel = select_k_bic(local_features, ks, fit);
    DeviceUpload up;
    up.components = sel.k;
    up.bic = sel.bic;
    up.payload = to_json(sel.params);
    up.gmm = std::move(sel.params);
    return up;
}

MetricDataset shared_metric_dataset(std::size_t pool_size, std::size_t n, std::uint64_t seed) {
    if (n > pool_size) throw ValidationError("shared metric set larger than the pool");
    std::vector<std::size_t> order(pool_size);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    MetricDataset m;
    m.device_id = "shared";
    m.n = n;
    m.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
    m.scores.assign(pool_size, 0.0);
    return m;
}

CloudOutput cloud_prune(const CloudInputs& inputs, const MetricDataset& metric, double epsilon_t,
                        const PipelineConfig& config, std::uint64_t seed) {
    const Dataset metric_data = inputs.pool.subset(metric.indices);
    CloudOutput out{metric, {}, {}, {}, {}, {}};
    out.neurons = neuron_scores(inputs.base, metric_data.samples, config.weights, config.estimator);
    out.layers = layer_importance(inputs.base, metric_data.samples);
    const auto budget_scores = config.invert_layer_budget ? invert_layer_scores(out.layers) : out.layers;
    out.plan = allocate_budgets(budget_scores, unit_ratio_for_param_target(inputs.base, epsilon_t), config.epsilon_max);
    assign_unit_counts(out.plan, inputs.base);
    out.pruned = prune(inputs.base, out.neurons, out.plan);
    out.pruned.report.device_id = metric.device_id;
    out.pruned.report.epsilon_t = epsilon_t;
    auto ft = config.finetune;
    ft.seed = seed;
    out.finetuned = finetune(out.pruned.model, metric_data, ft).model;
    return out;
}

CloudOutput random_unit_control(const CloudInputs& inputs, const CloudOutput& reference,
                                const PipelineConfig& config, std::uint64_t seed) {
    CloudOutput out{reference.metric, random_unit_scores(inputs.base, seed), reference.layers, reference.plan, {}, {}};
    out.pruned = prune(inputs.base, out.neurons, out.plan);
    out.pruned.report.epsilon_t = reference.pruned.report.epsilon_t;
    auto ft = config.finetune;
    ft.seed = derive_seed(seed, 1);
    out.finetuned = finetune(out.pruned.model, inputs.pool.subset(reference.metric.indices), ft).model;
    return out;
}

PipelineSummary run_pipeline(const PipelineConfig& config, AccessLog* log) {
    config.validate();
    if (config.out_dir.empty()) throw ValidationError("pipeline output directory is not set");
    AccessLog local_log;
    AccessLog& audit = log ? *log : local_log;

    // Device side, phase 1: fit and upload.
    audit.set_side(Side::Device);
    const auto spec = spec_from_json(read_json(config.scenario_dir / "scenario.json", &audit).at("spec"));
    const auto device_model = std::make_shared<const Model>(load_model(config.base_model, &audit));
    const auto device_extractor = FeatureExtractor::embedding(device_model);
    const std::size_t m = spec.num_devices;
    std::vector<DeviceResult> results(m);
    std::vector<DeviceLocal> locals(m);
    const auto md = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < md; ++i) {
        const auto d = static_cast<std::size_t>(i);
        auto& res = results[d];
        res.device_id = d;
        try {
            const Dataset local = load_device_data(config.scenario_dir, d, &audit);
            const auto [fit_rows, test_rows] =
                split_indices(local.size(), config.fit_fraction, derive_seed(config.seed, kSplitTag * 1000 + d));
            locals[d].test = local.subset(test_rows);
            const Matrix features = device_extractor.extract(local.samples.select_rows(fit_rows));
            FitConfig fit = config.gmm;
            fit.seed = derive_seed(config.seed, kGmmTag * 1000 + d);
            const auto upload = device_fit_gmm(features, config.k_range, fit);
            locals[d].components = upload.components;
            res.gmm_components = upload.components;
            const auto dir = device_dir(config, d);
            write_text(dir / "upload" / "gmm.json", upload.payload, &audit);
            nlohmann::json bic = nlohmann::json::array();
            for (const auto& [k, b] : upload.bic) bic.push_back({{"K", k}, {"bic", b}});
            write_json(dir / "device" / "gmm_fit.json", {{"chosen_K", upload.components}, {"bic", bic}}, &audit);
        } catch (const std::exception& e) {
            res.error = std::string("device stage: ") + e.what();
        }
    }

    // Cloud side, phase 2: only uploads, pool and base model.
    audit.set_side(Side::Cloud);
    const Model base = load_model(config.base_model, &audit);
    const Dataset pool = load_public_scenario(config.scenario_dir, &audit).pool;
    const auto cloud_extractor = FeatureExtractor::embedding(std::make_shared<const Model>(base));
    const Matrix pool_features = cloud_extractor.extract(pool.samples);
    const CloudInputs inputs{base, pool, pool_features};

    std::map<double, CloudOutput> shared_arm;
    if (config.run_controls) {
        std::set<double> eps;
        for (std::size_t d = 0; d < m; ++d) eps.insert(config.epsilon_for(d));
        const auto shared = shared_metric_dataset(pool.size(), std::min(config.metric_size, pool.size()),
                                                  derive_seed(config.seed, kSharedArmTag));
        for (double e : eps) shared_arm.emplace(e, cloud_prune(inputs, shared, e, config, derive_seed(config.seed, kSharedArmTag + 1)));
    }

    std::vector<std::optional<Model>> delivered(m);
    std::vector<std::map<std::string, Model>> control_models(m);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < md; ++i) {
        const auto d = static_cast<std::size_t>(i);
        auto& res = results[d];
        if (!res.ok()) continue;
        try {
            const auto dir = device_dir(config, d);
            const auto gmm = gmm_from_json(read_text(dir / "upload" / "gmm.json", &audit));
            auto metric = construct_metric_dataset(gmm, pool_features, config.metric_size, "device_" + std::to_string(d));
            const double eps = config.epsilon_for(d);
            const std::uint64_t seed = derive_seed(config.seed, kCloudTag * 1000 + d);
            auto out = cloud_prune(inputs, metric, eps, config, seed);
            write_json(dir / "cloud" / "metric.json", manifest_json(out.metric), &audit);
            write_json(dir / "cloud" / "scores.json", scores_json(out.neurons, out.layers), &audit);
            write_json(dir / "cloud" / "plan.json", budget_plan_json(out.plan), &audit);
            write_json(dir / "cloud" / "prune.json", prune_report_json(out.pruned.report), &audit);
            save_model(out.finetuned, dir / "cloud" / "model.bin", &audit);
            res.metric = out.metric;
            res.prune = out.pruned.report;
            delivered[d] = out.pruned.model;
            if (config.run_controls) {
                auto rnd = random_unit_control(inputs, out, config, derive_seed(config.seed, kRandomArmTag * 1000 + d));
                control_models[d].emplace(std::string(kRandomArm) + ":pruned", std::move(rnd.pruned.model));
                control_models[d].emplace(std::string(kRandomArm) + ":finetuned", std::move(rnd.finetuned));
                const auto& sh = shared_arm.at(eps);
                control_models[d].emplace(std::string(kSharedArm) + ":pruned", sh.pruned.model);
                control_models[d].emplace(std::string(kSharedArm) + ":finetuned", sh.finetuned);
                nlohmann::json controls;
                controls[kRandomArm] = prune_report_json(rnd.pruned.report);
                controls[kSharedArm] = prune_report_json(sh.pruned.report);
                write_json(dir / "cloud" / "controls.json", controls, &audit);
            }
        } catch (const std::exception& e) {
            res.error = std::string("cloud stage: ") + e.what();
        }
    }

    // Device side, phase 3: evaluate the returned model on held-out local data.
    audit.set_side(Side::Device);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < md; ++i) {
        const auto d = static_cast<std::size_t>(i);
        auto& res = results[d];
        if (!res.ok()) continue;
        try {
            const auto dir = device_dir(config, d);
            const Model finetuned = load_model(dir / "cloud" / "model.bin", &audit);
            const auto& test = locals[d].test;
            res.sample_count = test.size();
            res.accuracy_base = evaluate(*device_model, test);
            res.accuracy_pruned = evaluate(*delivered[d], test);
            res.accuracy_finetuned = evaluate(finetuned, test);
            if (config.run_controls) {
                for (const char* arm : {kRandomArm, kSharedArm}) {
                    ArmResult a;
                    const auto& pruned = control_models[d].at(std::string(arm) + ":pruned");
                    a.accuracy_pruned = evaluate(pruned, test);
                    a.accuracy_finetuned = evaluate(control_models[d].at(std::string(arm) + ":finetuned"), test);
                    a.retention = static_cast<double>(param_count(pruned)) / static_cast<double>(param_count(*device_model));
                    res.controls[arm] = a;
                }
            }
            write_json(dir / "device" / "result.json", device_result_json(res), &audit);
        } catch (const std::exception& e) {
            res.error = std::string("evaluation: ") + e.what();
        }
    }

    audit.set_side(Side::Harness);
    PipelineSummary summary;
    summary.devices = std::move(results);
    if (std::any_of(summary.devices.begin(), summary.devices.end(), [](const DeviceResult& r) { return r.ok(); })) {
        summary.weighted_base = weighted_accuracy(summary.devices, AccuracyStage::Base);
        summary.weighted_pruned = weighted_accuracy(summary.devices, AccuracyStage::Pruned);
        summary.weighted_finetuned = weighted_accuracy(summary.devices, AccuracyStage::Finetuned);
        if (config.run_controls) {
            for (const char* arm : {kRandomArm, kSharedArm}) {
                std::vector<double> acc;
                std::vector<std::size_t> counts;
                for (const auto& r : summary.devices) {
                    if (!r.ok()) continue;
                    acc.push_back(r.controls.at(arm).accuracy_finetuned);
                    counts.push_back(r.sample_count);
                }
                summary.weighted_controls[arm] = weighted_accuracy(acc, counts);
            }
        }
    }
    write_json(config.out_dir / "summary.json", summary_json(summary), &audit);
    return summary;
}

nlohmann::json device_result_json(const DeviceResult& r) {
    nlohmann::json doc;
    doc["version"] = 1;
    doc["device_id"] = r.device_id;
    if (r.error) {
        doc["error"] = *r.error;
        return doc;
    }
    doc["gmm_components"] = r.gmm_components;
    doc["metric_size"] = r.metric.n;
    doc["retention"] = r.prune.retention;
    doc["accuracy_base"] = r.accuracy_base;
    doc["accuracy_pruned"] = r.accuracy_pruned;
    doc["accuracy_finetuned"] = r.accuracy_finetuned;
    doc["test_samples"] = r.sample_count;
    for (const auto& [arm, a] : r.controls)
        doc["controls"][arm] = {{"accuracy_pruned", a.accuracy_pruned},
                                {"accuracy_finetuned", a.accuracy_finetuned},
                                {"retention", a.retention}};
    return doc;
}

nlohmann::json summary_json(const PipelineSummary& s) {
    nlohmann::json doc;
    doc["version"] = 1;
    auto devices = nlohmann::json::array();
    for (const auto& r : s.devices) devices.push_back(device_result_json(r));
    doc["devices"] = devices;
    doc["weighted_accuracy"] = {{"base", s.weighted_base}, {"pruned", s.weighted_pruned}, {"finetuned", s.weighted_finetuned}};
    for (const auto& [arm, v] : s.weighted_controls) doc["weighted_accuracy"]["controls"][arm] = v;
    return doc;
}

AuditReport audit_privacy(const AccessLog& log, const PipelineConfig& config) {
    AuditReport report;
    const auto entries = log.entries();
    const fs::path device_data_root = config.scenario_dir / "devices";
    std::set<std::string> cloud_reads;
    for (const auto& e : entries) {
        if (e.side != Side::Cloud) continue;
        const fs::path p = e.path;
        if (e.write) {
            if (!path_under(p, config.out_dir) || p.parent_path().filename() != "cloud")
                report.violations.push_back("cloud wrote outside a cloud/ directory: " + e.path);
            continue;
        }
        cloud_reads.insert(e.path);
        const bool allowed = p == config.base_model.lexically_normal() ||
                             p == (config.scenario_dir / "pool.bin").lexically_normal() ||
                             p == (config.scenario_dir / "scenario.json").lexically_normal() ||
                             (path_under(p, config.out_dir) && p.parent_path().filename() == "upload");
        if (!allowed) report.violations.push_back("cloud read a non-public file: " + e.path);
        if (path_under(p, device_data_root)) report.violations.push_back("cloud opened device data: " + e.path);
    }

    if (fs::exists(config.out_dir)) {
        for (const auto& entry : fs::recursive_directory_iterator(config.out_dir)) {
            if (!entry.is_regular_file()) continue;
            if (entry.path().parent_path().filename() != "upload") continue;
            report.uploads.push_back(entry.path().lexically_normal().string());
            if (entry.path().filename() != "gmm.json")
                report.violations.push_back("unexpected upload artifact: " + entry.path().string());
        }
        std::sort(report.uploads.begin(), report.uploads.end());
    }

    // Byte-level scan: the first two values of every device sample, as raw doubles.
    std::unordered_set<std::string> patterns;
    if (fs::exists(device_data_root)) {
        for (const auto& entry : fs::directory_iterator(device_data_root)) {
            const auto data = load_dataset(entry.path());
            const std::size_t width = std::min<std::size_t>(2, data.samples.cols());
            for (std::size_t r = 0; r < data.size(); ++r) patterns.insert(bytes_of(data.samples.row(r).data(), width));
        }
    }
    if (!patterns.empty()) {
        const std::size_t plen = patterns.begin()->size();
        for (const auto& path : cloud_reads) {
            const auto bytes = read_text(path);
            for (std::size_t off = 0; off + plen <= bytes.size(); ++off) {
                if (patterns.count(bytes.substr(off, plen))) {
                    report.violations.push_back("device sample bytes found in cloud input " + path);
                    break;
                }
            }
        }
    }
    report.ok = report.violations.empty();
    return report;
}

std::vector<ScoreWeights> simplex_grid(double step) {
    if (!(step > 0.0 && step <= 1.0)) throw ValidationError("grid step must lie in (0, 1]");
    const double inv = 1.0 / step;
    const auto parts = static_cast<std::size_t>(std::llround(inv));
    if (std::abs(inv - static_cast<double>(parts)) > 1e-9) throw ValidationError("grid step must divide 1 evenly");
    std::vector<ScoreWeights> out;
    const auto s = static_cast<double>(parts);
    for (std::size_t i = 0; i <= parts; ++i)
        for (std::size_t j = 0; i + j <= parts; ++j) {
            const std::size_t k = parts - i - j;
            out.push_back({static_cast<double>(i) / s, static_cast<double>(j) / s, static_cast<double>(k) / s});
        }
    return out;
}

GridSearchResult grid_search_weights(const PipelineConfig& config, double step, AccessLog* log) {
    config.validate();
    const auto grid = simplex_grid(step);
    AccessLog local_log;
    AccessLog& audit = log ? *log : local_log;

    audit.set_side(Side::Device);
    const auto spec = spec_from_json(read_json(config.scenario_dir / "scenario.json", &audit).at("spec"));
    const auto model = std::make_shared<const Model>(load_model(config.base_model, &audit));
    const auto extractor = FeatureExtractor::embedding(model);
    const std::size_t m = spec.num_devices;
    std::vector<std::optional<GmmParams>> uploads(m);
    const auto md = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < md; ++i) {
        const auto d = static_cast<std::size_t>(i);
        try {
            const Dataset local = load_device_data(config.scenario_dir, d, &audit);
            const auto [fit_rows, _] =
                split_indices(local.size(), config.fit_fraction, derive_seed(config.seed, kSplitTag * 1000 + d));
            FitConfig fit = config.gmm;
            fit.seed = derive_seed(config.seed, kGmmTag * 1000 + d);
            const auto up = device_fit_gmm(extractor.extract(local.samples.select_rows(fit_rows)), config.k_range, fit);
            uploads[d] = gmm_from_json(up.payload);
        } catch (const std::exception&) {
            uploads[d].reset();
        }
    }

    audit.set_side(Side::Cloud);
    const Dataset pool = load_public_scenario(config.scenario_dir, &audit).pool;
    const Matrix pool_features = extractor.extract(pool.samples);
    const auto [select_rows, val_rows] = split_indices(pool.size(), 0.8, derive_seed(config.seed, kGridSplitTag));
    const Dataset select_pool = pool.subset(select_rows);
    const Dataset val_pool = pool.subset(val_rows);
    const Matrix select_features = pool_features.select_rows(select_rows);
    const Matrix val_features = pool_features.select_rows(val_rows);
    const std::size_t metric_n = std::min(config.metric_size, select_pool.size());
    const std::size_t val_n = std::min(val_pool.size(), std::max<std::size_t>(1, metric_n / 4));

    struct Prepared {
        Dataset metric;
        Dataset validation;
        NeuronScores neurons;
        BudgetPlan plan;
    };
    std::vector<std::optional<Prepared>> prepared(m);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < md; ++i) {
        const auto d = static_cast<std::size_t>(i);
        if (!uploads[d]) continue;
        try {
            const auto metric = construct_metric_dataset(*uploads[d], select_features, metric_n);
            const auto val = construct_metric_dataset(*uploads[d], val_features, val_n);
            Prepared p{select_pool.subset(metric.indices), val_pool.subset(val.indices), {}, {}};
            p.neurons = neuron_scores(*model, p.metric.samples, config.weights, config.estimator);
            auto layers = layer_importance(*model, p.metric.samples);
            if (config.invert_layer_budget) layers = invert_layer_scores(layers);
            p.plan = allocate_budgets(layers, unit_ratio_for_param_target(*model, config.epsilon_for(d)), config.epsilon_max);
            assign_unit_counts(p.plan, *model);
            prepared[d] = std::move(p);
        } catch (const std::exception&) {
            prepared[d].reset();
        }
    }

    GridSearchResult result;
    result.table.resize(grid.size());
    const auto rows = static_cast<std::ptrdiff_t>(grid.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t gi = 0; gi < rows; ++gi) {
        const auto g = static_cast<std::size_t>(gi);
        auto& row = result.table[g];
        row.weights = grid[g];
        try {
            std::vector<double> acc;
            std::vector<std::size_t> counts;
            for (std::size_t d = 0; d < m; ++d) {
                if (!prepared[d]) continue;
                NeuronScores scores = prepared[d]->neurons;
                scores.recompose(grid[g]);
                const auto pruned = prune(*model, scores, prepared[d]->plan);
                auto ft = config.finetune;
                ft.seed = derive_seed(config.seed, kCloudTag * 1000 + d);
                const auto tuned = finetune(pruned.model, prepared[d]->metric, ft).model;
                acc.push_back(evaluate(tuned, prepared[d]->validation));
                counts.push_back(prepared[d]->validation.size());
            }
            row.accuracy = weighted_accuracy(acc, counts);
        } catch (const std::exception& e) {
            row.error = e.what();
        }
    }
    audit.set_side(Side::Harness);

    bool have = false;
    for (const auto& row : result.table) {
        if (row.error) continue;
        const bool better = !have || row.accuracy > result.best_accuracy ||
                            (row.accuracy == result.best_accuracy &&
                             (row.weights.gamma > result.best.gamma ||
                              (row.weights.gamma == result.best.gamma && row.weights.alpha > result.best.alpha)));
        if (better) {
            result.best = row.weights;
            result.best_accuracy = row.accuracy;
            have = true;
        }
    }
    if (!have) {
        std::string msg = "grid search: every configuration failed";
        if (!result.table.empty() && result.table.front().error) msg += "; " + *result.table.front().error;
        throw ValidationError(msg);
    }
    return result;
}

std::string grid_table_csv(const GridSearchResult& result) {
    std::ostringstream os;
    os << "alpha,beta,gamma,weighted_accuracy,error\n";
    for (const auto& row : result.table) {
        os << format_double(row.weights.alpha) << ',' << format_double(row.weights.beta) << ','
           << format_double(row.weights.gamma) << ',' << (row.error ? "" : format_double(row.accuracy)) << ','
           << (row.error ? *row.error : "") << '\n';
    }
    return os.str();
}

}  // namespace tap
