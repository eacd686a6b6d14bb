#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "helpers.hpp"
#include "tap/metric_dataset.hpp"

using namespace tap;
using tap::testing::random_matrix;
using tap::testing::tiny_config;

namespace {

// Pool of two 1-D populations: rows [0, per) from N(0,1), rows [per, 2 per) from N(shift,1).
Matrix two_population_pool(std::size_t per, double shift, std::uint64_t seed) {
    Rng rng(seed);
    Matrix x(2 * per, 1);
    for (std::size_t i = 0; i < per; ++i) {
        x(i, 0) = normal(rng);
        x(per + i, 0) = normal(rng, shift);
    }
    return x;
}

}  // namespace

TEST_CASE("raw extractor is the row-major identity") {
    const auto fx = FeatureExtractor::raw(16);
    const Matrix x = random_matrix(3, 16, 1);
    CHECK(fx.extract(x) == x);
    CHECK(extract_features(fx, x) == x);
    CHECK(fx.output_dim() == 16);
    CHECK_THROWS_AS(fx.extract(random_matrix(1, 15, 1)), ValidationError);
}

TEST_CASE("embedding extractor: zero model gives zero features, deterministic otherwise") {
    Model zero = init_model(tiny_config());
    for (auto span : parameter_spans(zero)) std::fill(span.begin(), span.end(), 0.0);
    const Matrix x = random_matrix(5, zero.config.input_dim(), 2);
    const Matrix f = FeatureExtractor::embedding(std::make_shared<const Model>(zero)).extract(x);
    for (double v : f.data()) CHECK(v == 0.0);

    const auto model = std::make_shared<const Model>(init_model(tiny_config(3, 3)));
    const auto fx = FeatureExtractor::embedding(model);
    CHECK(fx.extract(x) == fx.extract(x));
    CHECK(fx.output_dim() == model->dim());
    const auto early = FeatureExtractor::embedding(model, 0);
    CHECK_FALSE(early.extract(x) == fx.extract(x));
    CHECK_THROWS_AS(FeatureExtractor::embedding(model, 3), ValidationError);
}

TEST_CASE("N = n selects everything by descending score") {
    const Matrix pool = two_population_pool(20, 5.0, 3);
    const auto gmm = fit_em(pool.select_rows(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}), 1).params;
    const auto m = construct_metric_dataset(gmm, pool, pool.rows(), "dev");
    CHECK(m.indices.size() == pool.rows());
    const auto s = m.selected_scores();
    CHECK(std::is_sorted(s.begin(), s.end(), std::greater<>()));
    CHECK(std::set<std::size_t>(m.indices.begin(), m.indices.end()).size() == pool.rows());
    CHECK(m.scores.size() == pool.rows());
}

TEST_CASE("planted two-population pool") {
    const Matrix pool = two_population_pool(100, 20.0, 4);
    Rng rng(5);
    Matrix device(200, 1);
    for (double& v : device.data()) v = normal(rng);
    const auto gmm = fit_em(device, 2, FitConfig{.seed = 5}).params;
    const auto m = construct_metric_dataset(gmm, pool, 50);
    const auto from_first = std::count_if(m.indices.begin(), m.indices.end(), [](std::size_t i) { return i < 100; });
    CHECK(from_first >= 49);
}

TEST_CASE("ties at the boundary go to the lower pool index") {
    const std::vector<double> scores{1.0, 5.0, 3.0, 5.0, 3.0, 3.0};
    CHECK(top_n_indices(scores, 2) == std::vector<std::size_t>{1, 3});
    CHECK(top_n_indices(scores, 4) == std::vector<std::size_t>{1, 3, 2, 4});
    CHECK_THROWS_AS(top_n_indices(scores, 7), ValidationError);
}

TEST_CASE("top-N agrees with a full-sort oracle and is monotone in N") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        std::vector<double> scores(200);
        // Coarse values so ties are common.
        for (double& v : scores) v = std::round(normal(rng) * 4.0) / 4.0;
        std::vector<std::size_t> oracle(scores.size());
        std::iota(oracle.begin(), oracle.end(), std::size_t{0});
        std::stable_sort(oracle.begin(), oracle.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
        const std::size_t n1 = 1 + seed % 60, n2 = n1 + 37;
        const auto a = top_n_indices(scores, n1);
        const auto b = top_n_indices(scores, n2);
        CHECK(a == std::vector<std::size_t>(oracle.begin(), oracle.begin() + static_cast<std::ptrdiff_t>(n1)));
        CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
}

TEST_CASE("permuting the pool selects the same samples") {
    const Matrix pool = two_population_pool(60, 3.0, 6);
    const auto gmm = fit_em(pool.select_rows(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}), 1).params;
    std::vector<std::size_t> perm(pool.rows());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(7);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto plain = construct_metric_dataset(gmm, pool, 30);
    const auto shuffled = construct_metric_dataset(gmm, pool.select_rows(perm), 30);
    std::set<std::size_t> a(plain.indices.begin(), plain.indices.end());
    std::set<std::size_t> b;
    for (auto i : shuffled.indices) b.insert(perm[i]);
    CHECK(a == b);
}

TEST_CASE("validation errors") {
    const Matrix pool = two_population_pool(5, 3.0, 1);
    const auto gmm = fit_em(pool, 1).params;
    CHECK_THROWS_AS(construct_metric_dataset(gmm, pool, 11), ValidationError);
    CHECK_THROWS_AS(construct_metric_dataset(gmm, random_matrix(10, 2, 1), 3), ValidationError);
}

TEST_CASE("manifest round trip") {
    const Matrix pool = two_population_pool(30, 4.0, 8);
    const auto gmm = fit_em(pool, 2).params;
    const auto m = construct_metric_dataset(gmm, pool, 12, "device_3");
    const auto doc = manifest_json(m);
    for (const char* key : {"version", "device_id", "N", "indices", "scores"}) CHECK(doc.contains(key));
    const auto back = metric_from_manifest(doc);
    CHECK(back.indices == m.indices);
    CHECK(back.device_id == "device_3");
    CHECK(back.selected_scores() == m.selected_scores());
    auto broken = doc;
    broken["N"] = 11;
    CHECK_THROWS_AS(metric_from_manifest(broken), FormatError);
}

TEST_CASE("empirical KL diagnostic") {
    const Matrix a = random_matrix(400, 2, 1);
    CHECK(empirical_kl(a, a) == doctest::Approx(0.0).epsilon(1e-9));
    Matrix far = a;
    for (double& v : far.data()) v += 3.0;
    CHECK(empirical_kl(a, far) > empirical_kl(a, random_matrix(400, 2, 2)));
}
