// tap: command-line front end for scenario generation, the device/cloud
// pruning pipeline and its analysis tools.

#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "tap/datagen.hpp"
#include "tap/gmm.hpp"
#include "tap/importance.hpp"
#include "tap/metric_dataset.hpp"
#include "tap/orchestrator.hpp"
#include "tap/pruner.hpp"
#include "tap/sensitivity.hpp"

namespace fs = std::filesystem;
using namespace tap;

namespace {

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out;
    double epsilon = 0.3;
    bool epsilon_set = false;
    std::string weights;
    bool invert = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "JSON configuration file");
    cmd->add_option_function<std::uint64_t>("--seed", [&c](std::uint64_t s) { c.seed = s; c.seed_set = true; },
                                            "random seed");
    cmd->add_option("--out", c.out, "output file or directory");
    cmd->add_option_function<double>("--epsilon", [&c](double e) { c.epsilon = e; c.epsilon_set = true; },
                                     "fraction of parameters to remove");
    cmd->add_option("--weights", c.weights, "alpha,beta,gamma");
    cmd->add_flag("--invert-layer-budget", c.invert, "prune important layers harder");
}

ScoreWeights parse_weights(const std::string& text) {
    std::vector<double> parts;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            parts.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ValidationError("bad weight '" + item + "'");
        }
    }
    if (parts.size() != 3) throw ValidationError("--weights expects three comma-separated values");
    ScoreWeights w{parts[0], parts[1], parts[2]};
    w.validate();
    return w;
}

ScoreWeights weights_or_default(const Common& c) { return c.weights.empty() ? ScoreWeights{} : parse_weights(c.weights); }

nlohmann::json config_doc(const Common& c) {
    return c.config.empty() ? nlohmann::json::object() : read_json(c.config);
}

std::string require_out(const Common& c) {
    if (c.out.empty()) throw ValidationError("--out is required");
    return c.out;
}

std::vector<std::size_t> k_range(std::size_t lo, std::size_t hi) {
    if (lo == 0 || lo > hi) throw ValidationError("invalid K range");
    std::vector<std::size_t> ks;
    for (std::size_t k = lo; k <= hi; ++k) ks.push_back(k);
    return ks;
}

FeatureExtractor extractor_for(const std::string& model_path, std::size_t input_dim) {
    if (model_path.empty()) return FeatureExtractor::raw(input_dim);
    return FeatureExtractor::embedding(std::make_shared<const Model>(load_model(model_path)));
}

void print_json(const nlohmann::json& doc) { std::cout << doc.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
    apply_thread_limit();
    CLI::App app{"Task-adaptive structured pruning for small vision transformers"};
    app.require_subcommand(1);
    Common c;

    // gen-scenario
    auto* gen = app.add_subcommand("gen-scenario", "generate a synthetic multi-device scenario");
    add_common(gen, c);
    ScenarioSpec spec;
    gen->add_option("--devices", spec.num_devices);
    gen->add_option("--classes", spec.num_classes);
    gen->add_option("--pool-per-class", spec.pool_per_class);
    gen->add_option("--device-per-class", spec.device_per_class);
    gen->add_option("--image-size", spec.image_size);
    gen->add_option("--noise", spec.noise);
    gen->add_flag("--disjoint-features", spec.disjoint_features);
    gen->callback([&] {
        ScenarioSpec s = spec;
        if (!c.config.empty()) s = spec_from_json(config_doc(c));
        if (c.seed_set) s.seed = c.seed;
        const auto sc = generate_scenario(s);
        save_scenario(sc, require_out(c));
        print_json({{"scenario", c.out}, {"pool", sc.pool.size()}, {"devices", sc.devices.size()}});
    });

    // train-base
    auto* train = app.add_subcommand("train-base", "train the toy base model on the public pool");
    add_common(train, c);
    std::string scenario_dir;
    std::size_t dim = 32, ffn = 64, heads = 4, layers = 4, patch = 4;
    TrainConfig tcfg;
    train->add_option("--scenario", scenario_dir)->required();
    train->add_option("--dim", dim);
    train->add_option("--ffn-dim", ffn);
    train->add_option("--heads", heads);
    train->add_option("--layers", layers);
    train->add_option("--patch", patch);
    train->add_option("--epochs", tcfg.epochs);
    train->add_option("--lr", tcfg.learning_rate);
    train->add_flag("--train-blocks", tcfg.train_blocks, "train the transformer blocks as well");
    train->callback([&] {
        const auto pub = load_public_scenario(scenario_dir);
        tcfg.seed = c.seed;
        const auto arch = model_config_for(pub.spec, dim, ffn, heads, layers, patch, c.seed);
        const Model model = train_toy_model(pub.pool, arch, tcfg);
        save_model(model, require_out(c));
        const double acc = accuracy(forward(model, pub.pool.samples).logits, pub.pool.labels);
        print_json({{"model", c.out}, {"params", param_count(model)}, {"pool_accuracy", acc}});
    });

    // fit-gmm (device side)
    auto* fit = app.add_subcommand("fit-gmm", "device side: fit a BIC-selected GMM to local features");
    add_common(fit, c);
    std::string model_path;
    std::size_t device = 0, k_lo = 2, k_hi = 10;
    double fit_fraction = 0.8;
    fit->add_option("--scenario", scenario_dir)->required();
    fit->add_option("--device", device)->required();
    fit->add_option("--model", model_path, "base model for embedding features (raw pixels if omitted)");
    fit->add_option("--k-min", k_lo);
    fit->add_option("--k-max", k_hi);
    fit->add_option("--fit-fraction", fit_fraction);
    fit->callback([&] {
        const Dataset local = load_device_data(scenario_dir, device);
        const auto [rows, _] = split_indices(local.size(), fit_fraction, c.seed);
        const auto features = extractor_for(model_path, local.samples.cols()).extract(local.samples.select_rows(rows));
        FitConfig fc;
        fc.seed = c.seed;
        const auto up = device_fit_gmm(features, k_range(k_lo, k_hi), fc);
        write_text(require_out(c), up.payload);
        nlohmann::json bic = nlohmann::json::array();
        for (const auto& [k, b] : up.bic) bic.push_back({{"K", k}, {"bic", b}});
        print_json({{"chosen_K", up.components}, {"bic", bic}});
    });

    // build-metric (cloud side)
    auto* build = app.add_subcommand("build-metric", "cloud side: select the top-N pool rows under a device GMM");
    add_common(build, c);
    std::string gmm_path, device_id;
    std::size_t metric_n = 512;
    build->add_option("--gmm", gmm_path)->required();
    build->add_option("--scenario", scenario_dir)->required();
    build->add_option("--model", model_path);
    build->add_option("--n", metric_n);
    build->add_option("--device-id", device_id);
    build->callback([&] {
        const auto gmm = gmm_from_json(read_text(gmm_path));
        const auto pub = load_public_scenario(scenario_dir);
        const auto features = extractor_for(model_path, pub.pool.samples.cols()).extract(pub.pool.samples);
        const auto metric = construct_metric_dataset(gmm, features, metric_n, device_id);
        write_json(require_out(c), manifest_json(metric));
    });

    // score
    auto* score = app.add_subcommand("score", "neuron and layer importance on a metric dataset");
    add_common(score, c);
    std::string metric_path;
    score->add_option("--model", model_path)->required();
    score->add_option("--scenario", scenario_dir)->required();
    score->add_option("--metric", metric_path)->required();
    score->callback([&] {
        const Model model = load_model(model_path);
        const auto pub = load_public_scenario(scenario_dir);
        const auto metric = metric_from_manifest(read_json(metric_path));
        const Matrix samples = pub.pool.samples.select_rows(metric.indices);
        const auto neurons = neuron_scores(model, samples, weights_or_default(c));
        const auto layer_scores = layer_importance(model, samples);
        write_json(require_out(c), scores_json(neurons, layer_scores));
        for (const auto& w : neurons.warnings) std::cerr << "warning: " << w << '\n';
    });

    // prune
    auto* prune_cmd = app.add_subcommand("prune", "allocate layer budgets and remove the least important units");
    add_common(prune_cmd, c);
    std::string scores_path;
    double epsilon_max = kDefaultEpsilonMax;
    prune_cmd->add_option("--model", model_path)->required();
    prune_cmd->add_option("--scores", scores_path)->required();
    prune_cmd->add_option("--epsilon-max", epsilon_max);
    prune_cmd->add_option("--device-id", device_id);
    prune_cmd->callback([&] {
        const Model model = load_model(model_path);
        const auto doc = read_json(scores_path);
        const auto weights = c.weights.empty() ? neuron_scores_from_json(doc, ScoreWeights{}).weights : parse_weights(c.weights);
        const auto neurons = neuron_scores_from_json(doc, weights);
        auto layer_scores = layer_scores_from_json(doc);
        if (c.invert) layer_scores = invert_layer_scores(layer_scores);
        auto plan = allocate_budgets(layer_scores, unit_ratio_for_param_target(model, c.epsilon), epsilon_max);
        assign_unit_counts(plan, model);
        auto result = prune(model, neurons, plan);
        result.report.device_id = device_id;
        result.report.epsilon_t = c.epsilon;
        const fs::path out = require_out(c);
        save_model(result.model, out / "model.bin");
        write_json(out / "plan.json", budget_plan_json(plan));
        write_json(out / "prune.json", prune_report_json(result.report));
        print_json({{"params_before", result.report.params_before},
                    {"params_after", result.report.params_after},
                    {"retention", result.report.retention}});
    });

    // finetune
    auto* ft = app.add_subcommand("finetune", "fine-tune the classifier head on a metric dataset");
    add_common(ft, c);
    FinetuneConfig fcfg;
    ft->add_option("--model", model_path)->required();
    ft->add_option("--scenario", scenario_dir)->required();
    ft->add_option("--metric", metric_path)->required();
    ft->add_option("--epochs", fcfg.epochs);
    ft->add_option("--lr", fcfg.learning_rate);
    ft->add_option("--batch-size", fcfg.batch_size);
    ft->callback([&] {
        const Model model = load_model(model_path);
        const auto pub = load_public_scenario(scenario_dir);
        const auto metric = metric_from_manifest(read_json(metric_path));
        fcfg.seed = c.seed;
        const auto res = finetune(model, metric, pub.pool, fcfg);
        save_model(res.model, require_out(c));
        print_json({{"loss_before", res.loss_before}, {"loss_after", res.loss_after}});
    });

    // evaluate (device side)
    auto* eval = app.add_subcommand("evaluate", "accuracy of a model on a dataset file or a device's held-out split");
    add_common(eval, c);
    std::string data_path;
    eval->add_option("--model", model_path)->required();
    eval->add_option("--data", data_path, "dataset container");
    eval->add_option("--scenario", scenario_dir);
    eval->add_option("--device", device);
    eval->add_option("--fit-fraction", fit_fraction);
    eval->callback([&] {
        const Model model = load_model(model_path);
        Dataset data;
        if (!data_path.empty()) {
            data = load_dataset(data_path);
        } else if (!scenario_dir.empty()) {
            const Dataset local = load_device_data(scenario_dir, device);
            data = local.subset(split_indices(local.size(), fit_fraction, c.seed).second);
        } else {
            throw ValidationError("evaluate needs --data or --scenario/--device");
        }
        const nlohmann::json doc{{"accuracy", accuracy(forward(model, data.samples).logits, data.labels)},
                                 {"samples", data.size()},
                                 {"params", param_count(model)}};
        if (!c.out.empty()) write_json(c.out, doc);
        print_json(doc);
    });

    // run
    auto* run = app.add_subcommand("run", "full device/cloud pipeline over every device");
    add_common(run, c);
    bool controls = false;
    run->add_flag("--controls", controls, "also run random-unit and shared-metric control arms");
    auto pipeline_config = [&] {
        if (c.config.empty()) throw ValidationError("--config is required");
        auto cfg = config_from_json(config_doc(c), fs::path(c.config).parent_path());
        if (c.seed_set) cfg.seed = c.seed;
        if (!c.out.empty()) cfg.out_dir = c.out;
        if (c.epsilon_set) cfg.epsilon_t = c.epsilon;
        if (!c.weights.empty()) cfg.weights = parse_weights(c.weights);
        if (c.invert) cfg.invert_layer_budget = true;
        if (controls) cfg.run_controls = true;
        cfg.validate();
        return cfg;
    };
    run->callback([&] {
        const auto cfg = pipeline_config();
        AccessLog log;
        const auto summary = run_pipeline(cfg, &log);
        const auto audit = audit_privacy(log, cfg);
        write_json(cfg.out_dir / "audit.json", {{"ok", audit.ok}, {"violations", audit.violations}, {"uploads", audit.uploads}});
        print_json(summary_json(summary)["weighted_accuracy"]);
        for (const auto& r : summary.devices)
            if (r.error) std::cerr << "device " << r.device_id << " failed: " << *r.error << '\n';
        if (!audit.ok) throw std::runtime_error("privacy audit failed");
    });

    // sensitivity
    auto* sens = app.add_subcommand("sensitivity", "cross-task ranking divergence from score files");
    add_common(sens, c);
    std::vector<std::string> score_files;
    std::string run_dir;
    sens->add_option("--scores", score_files, "scores JSON files, one per task");
    sens->add_option("--run", run_dir, "pipeline output directory (uses device_*/cloud/scores.json)");
    sens->callback([&] {
        std::vector<std::string> files = score_files;
        std::vector<std::string> ids;
        if (!run_dir.empty()) {
            std::vector<fs::path> dirs;
            for (const auto& e : fs::directory_iterator(run_dir))
                if (e.is_directory() && e.path().filename().string().rfind("device_", 0) == 0) dirs.push_back(e.path());
            std::sort(dirs.begin(), dirs.end(), [](const fs::path& a, const fs::path& b) {
                return std::stoul(a.filename().string().substr(7)) < std::stoul(b.filename().string().substr(7));
            });
            for (const auto& d : dirs) {
                if (!fs::exists(d / "cloud" / "scores.json")) continue;
                files.push_back((d / "cloud" / "scores.json").string());
                ids.push_back(d.filename().string());
            }
        } else {
            for (const auto& f : files) ids.push_back(fs::path(f).stem().string());
        }
        const auto weights = weights_or_default(c);
        std::vector<NeuronScores> sets;
        for (const auto& f : files) sets.push_back(neuron_scores_from_json(read_json(f), weights));
        const auto div = task_divergence_matrix(sets, ids);
        const fs::path out = require_out(c);
        write_text(out / "divergence.csv", divergence_csv(div));
        write_json(out / "divergence.json", divergence_json(div));
        std::cout << divergence_csv(div);
    });

    // grid-search
    auto* grid = app.add_subcommand("grid-search", "search (alpha, beta, gamma) on the weight simplex");
    add_common(grid, c);
    double step = 0.1;
    grid->add_option("--step", step);
    grid->callback([&] {
        const auto cfg = pipeline_config();
        const auto result = grid_search_weights(cfg, step);
        const fs::path out = cfg.out_dir;
        write_text(out / "grid.csv", grid_table_csv(result));
        const nlohmann::json best{{"weights", {result.best.alpha, result.best.beta, result.best.gamma}},
                                  {"accuracy", result.best_accuracy},
                                  {"configurations", result.table.size()}};
        write_json(out / "grid_best.json", best);
        print_json(best);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const ValidationError& e) {
        std::cerr << "tap: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "tap: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
