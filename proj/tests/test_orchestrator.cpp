#include <doctest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "tap/orchestrator.hpp"

using namespace tap;
using tap::testing::TempDir;
namespace fs = std::filesystem;

namespace {

// Small scenario plus base model on disk, and a config pointing at them.
PipelineConfig small_pipeline(const fs::path& root, std::uint64_t seed) {
    ScenarioSpec spec;
    spec.num_devices = 3;
    spec.num_classes = 6;
    spec.pool_per_class = 12;
    spec.device_per_class = 20;
    spec.image_size = 4;
    spec.seed = seed;
    const auto sc = generate_scenario(spec);
    save_scenario(sc, root / "scenario");
    const auto arch = model_config_for(spec, 8, 12, 2, 2, 2, seed);
    save_model(train_toy_model(sc.pool, arch, TrainConfig{.epochs = 3, .seed = seed}), root / "base.bin");

    PipelineConfig cfg;
    cfg.scenario_dir = root / "scenario";
    cfg.base_model = root / "base.bin";
    cfg.out_dir = root / "out";
    cfg.metric_size = 16;
    cfg.k_range = {1, 2};
    cfg.finetune.epochs = 3;
    cfg.run_controls = true;
    cfg.seed = seed;
    return cfg;
}

std::map<std::string, std::string> read_tree(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        out[fs::relative(e.path(), root).string()] = ss.str();
    }
    return out;
}

}  // namespace

TEST_CASE("weighted accuracy") {
    CHECK(weighted_accuracy(std::vector<double>{1.0, 0.5}, std::vector<std::size_t>{100, 300}) == 0.625);
    CHECK(weighted_accuracy(std::vector<double>{0.2, 0.4, 0.9}, std::vector<std::size_t>{7, 7, 7}) ==
          doctest::Approx(0.5).epsilon(1e-15));
    CHECK(weighted_accuracy(std::vector<double>{0.3}, std::vector<std::size_t>{9}) == 0.3);
    CHECK_THROWS_AS(weighted_accuracy(std::vector<double>{}, std::vector<std::size_t>{}), ValidationError);

    std::vector<DeviceResult> results(3);
    results[0].accuracy_finetuned = 1.0;
    results[0].sample_count = 100;
    results[1].accuracy_finetuned = 0.5;
    results[1].sample_count = 300;
    results[2].accuracy_finetuned = 0.0;
    results[2].sample_count = 50;
    results[2].error = "failed";
    CHECK(weighted_accuracy(results) == 0.625);
}

TEST_CASE("simplex grid enumeration") {
    const auto coarse = simplex_grid(0.5);
    const std::vector<std::array<double, 3>> expected{{0, 0, 1}, {0, 0.5, 0.5}, {0, 1, 0},
                                                      {0.5, 0, 0.5}, {0.5, 0.5, 0}, {1, 0, 0}};
    REQUIRE(coarse.size() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
        CHECK(coarse[i].alpha == doctest::Approx(expected[i][0]));
        CHECK(coarse[i].beta == doctest::Approx(expected[i][1]));
        CHECK(coarse[i].gamma == doctest::Approx(expected[i][2]));
    }
    const auto fine = simplex_grid(0.1);
    CHECK(fine.size() == 66);
    for (const auto& w : fine) {
        CHECK(w.alpha + w.beta + w.gamma == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(w.gamma >= 0.0);
        w.validate();
    }
    CHECK_THROWS_AS(simplex_grid(0.3), ValidationError);
}

TEST_CASE("split indices") {
    const auto [a, b] = split_indices(50, 0.8, 3);
    CHECK(a.size() == 40);
    CHECK(b.size() == 10);
    std::vector<std::size_t> all = a;
    all.insert(all.end(), b.begin(), b.end());
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < 50; ++i) CHECK(all[i] == i);
    CHECK(split_indices(50, 0.8, 3) == split_indices(50, 0.8, 3));
}

TEST_CASE("config validation and JSON round trip") {
    PipelineConfig cfg;
    cfg.scenario_dir = "sc";
    cfg.base_model = "m.bin";
    cfg.out_dir = "o";
    cfg.device_epsilon[2] = 0.1;
    CHECK(cfg.epsilon_for(2) == 0.1);
    CHECK(cfg.epsilon_for(0) == 0.3);
    const auto back = config_from_json(config_json(cfg));
    CHECK(config_json(back) == config_json(cfg));
    cfg.epsilon_t = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg.epsilon_t = 0.3;
    cfg.weights = ScoreWeights{0.5, 0.5, 0.5};
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("zero budget with no fine-tuning returns the base model") {
    TempDir dir("orch_zero");
    auto cfg = small_pipeline(dir.path(), 1);
    cfg.epsilon_t = 0.0;
    cfg.finetune.epochs = 0;
    cfg.run_controls = false;
    const auto summary = run_pipeline(cfg);
    const auto base = read_text(cfg.base_model);
    for (std::size_t d = 0; d < 3; ++d) {
        REQUIRE(summary.devices[d].ok());
        CHECK(read_text(cfg.out_dir / ("device_" + std::to_string(d)) / "cloud" / "model.bin") == base);
        CHECK(summary.devices[d].accuracy_finetuned == summary.devices[d].accuracy_base);
    }
}

TEST_CASE("pipeline output tree, audit and determinism") {
    TempDir a("orch_a"), b("orch_b");
    const auto cfg_a = small_pipeline(a.path(), 2);
    const auto cfg_b = small_pipeline(b.path(), 2);
    AccessLog log;
    const auto summary = run_pipeline(cfg_a, &log);
    run_pipeline(cfg_b);

    for (const auto& d : summary.devices) {
        CHECK(d.ok());
        CHECK(d.controls.contains("random_units"));
        CHECK(d.controls.contains("shared_metric"));
        CHECK(d.metric.indices.size() == 16);
    }
    const auto tree = read_tree(cfg_a.out_dir);
    for (const char* f : {"summary.json", "device_0/upload/gmm.json", "device_0/device/result.json",
                          "device_0/cloud/metric.json", "device_0/cloud/scores.json", "device_0/cloud/plan.json",
                          "device_0/cloud/prune.json", "device_0/cloud/model.bin", "device_0/cloud/controls.json"})
        CHECK_MESSAGE(tree.contains(f), f);
    CHECK(tree == read_tree(cfg_b.out_dir));

    const auto audit = audit_privacy(log, cfg_a);
    CHECK(audit.ok);
    CHECK(audit.uploads.size() == 3);

    // A cloud read of raw device data must be flagged.
    log.set_side(Side::Cloud);
    log.record(device_data_path(cfg_a.scenario_dir, 1), false);
    const auto bad = audit_privacy(log, cfg_a);
    CHECK_FALSE(bad.ok);
    CHECK_FALSE(bad.violations.empty());
}

TEST_CASE("one device failing leaves the others untouched") {
    TempDir clean("orch_clean"), broken("orch_broken");
    const auto cfg_clean = small_pipeline(clean.path(), 3);
    const auto cfg_broken = small_pipeline(broken.path(), 3);
    std::ofstream(device_data_path(cfg_broken.scenario_dir, 1), std::ios::binary | std::ios::trunc) << "garbage";

    const auto good = run_pipeline(cfg_clean);
    const auto bad = run_pipeline(cfg_broken);
    CHECK_FALSE(bad.devices[1].ok());
    for (std::size_t d : {0, 2}) {
        REQUIRE(bad.devices[d].ok());
        CHECK(device_result_json(bad.devices[d]) == device_result_json(good.devices[d]));
    }
    const auto doc = summary_json(bad);
    CHECK(doc.dump().find("error") != std::string::npos);
}

TEST_CASE("shared metric set is a seeded uniform draw") {
    const auto m = shared_metric_dataset(100, 20, 5);
    CHECK(m.indices.size() == 20);
    CHECK(std::set<std::size_t>(m.indices.begin(), m.indices.end()).size() == 20);
    CHECK(shared_metric_dataset(100, 20, 5).indices == m.indices);
    CHECK_THROWS_AS(shared_metric_dataset(10, 20, 5), ValidationError);
}

TEST_CASE("grid search table") {
    TempDir dir("orch_grid");
    auto cfg = small_pipeline(dir.path(), 4);
    cfg.finetune.epochs = 1;
    const auto res = grid_search_weights(cfg, 0.5);
    CHECK(res.table.size() == 6);
    double best = -1.0;
    for (const auto& row : res.table) {
        CHECK_FALSE(row.error.has_value());
        best = std::max(best, row.accuracy);
    }
    CHECK(res.best_accuracy == best);
    const std::string csv = grid_table_csv(res);
    CHECK(csv.substr(0, csv.find('\n')) == "alpha,beta,gamma,weighted_accuracy,error");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
    const auto again = grid_search_weights(cfg, 0.5);
    CHECK(grid_table_csv(again) == csv);
}
