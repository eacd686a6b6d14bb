#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "helpers.hpp"
#include "tap/sensitivity.hpp"

using namespace tap;
using tap::testing::random_matrix;
using tap::testing::tiny_config;

namespace {

// Pair enumeration over positions, the textbook definition.
double brute_force_tau(const Ranking& a, const Ranking& b) {
    const std::size_t n = a.size();
    std::vector<std::size_t> pos_a(n), pos_b(n);
    for (std::size_t i = 0; i < n; ++i) {
        pos_a[a.order[i]] = i;
        pos_b[b.order[i]] = i;
    }
    long long c = 0, d = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const bool sa = pos_a[i] < pos_a[j], sb = pos_b[i] < pos_b[j];
            (sa == sb ? c : d) += 1;
        }
    return 2.0 * static_cast<double>(c - d) / static_cast<double>(n * (n - 1));
}

Ranking identity(std::size_t n) {
    Ranking r;
    r.order.resize(n);
    std::iota(r.order.begin(), r.order.end(), std::size_t{0});
    return r;
}

}  // namespace

TEST_CASE("tau extremes and the four-item example") {
    const Ranking a = identity(7);
    Ranking rev = a;
    std::reverse(rev.order.begin(), rev.order.end());
    CHECK(kendall_tau(a, a) == 1.0);
    CHECK(kendall_tau(a, rev) == -1.0);

    const Ranking x{{0, 1, 2, 3}}, y{{0, 2, 1, 3}};
    const auto pc = count_pairs(x, y);
    CHECK(pc.concordant == 5);
    CHECK(pc.discordant == 1);
    CHECK(kendall_tau(x, y) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("merge-count tau equals pair enumeration on random permutations") {
    Rng rng(11);
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 2 + static_cast<std::size_t>(t % 199);
        Ranking a = identity(n), b = identity(n);
        std::shuffle(a.order.begin(), a.order.end(), rng);
        std::shuffle(b.order.begin(), b.order.end(), rng);
        const double fast = kendall_tau(a, b);
        CHECK(fast == brute_force_tau(a, b));
        CHECK(fast == kendall_tau(b, a));
    }
}

TEST_CASE("ranking validation and tie convention") {
    CHECK_THROWS_AS(Ranking({{0, 0, 1}}).validate(), ValidationError);
    CHECK_THROWS_AS(kendall_tau(Ranking{{0, 3}}, Ranking{{0, 1}}), ValidationError);
    CHECK(kendall_tau(Ranking{{7, 3, 9}}, Ranking{{7, 9, 3}}) == doctest::Approx(1.0 / 3.0));
    CHECK_THROWS_AS(kendall_tau(identity(3), identity(4)), ValidationError);
    CHECK(ranking_from_values(std::vector<double>{0.2, 0.9, 0.2, 0.5}).order == std::vector<std::size_t>{1, 3, 0, 2});
}

TEST_CASE("divergence matrix shape and symmetry") {
    std::vector<NeuronScores> sets;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Model m = init_model(tiny_config(100, 2));
        sets.push_back(neuron_scores(m, random_matrix(48, m.config.input_dim(), seed)));
    }
    const auto div = task_divergence_matrix(sets);
    CHECK(div.divergence.rows() == 10);
    CHECK(div.divergence.cols() == 10);
    CHECK(div.pairs.size() == 45);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(div.divergence(i, i) == 0.0);
        CHECK(div.tau(i, i) == 1.0);
        for (std::size_t j = 0; j < 10; ++j) {
            CHECK(div.divergence(i, j) == div.divergence(j, i));
            CHECK(div.divergence(i, j) >= 0.0);
            CHECK(div.divergence(i, j) <= 1.0);
            CHECK(div.divergence(i, j) == doctest::Approx((1.0 - div.tau(i, j)) / 2.0).epsilon(1e-15));
        }
    }
    for (const auto& p : div.pairs) {
        CHECK(p.layers.size() == 2);
        CHECK(p.tau_ffn.size() == 2);
        CHECK(p.tau_mha.size() == 2);
    }
}

TEST_CASE("identical score sets have zero divergence") {
    const Model m = init_model(tiny_config(3, 2));
    const auto s = neuron_scores(m, random_matrix(32, m.config.input_dim(), 1));
    const std::vector<NeuronScores> sets{s, s};
    const auto div = task_divergence_matrix(sets, {"a", "b"});
    CHECK(div.divergence(0, 1) == 0.0);
    CHECK(div.mean_layer_tau(0, 1) == 1.0);
    CHECK(div.task_ids == std::vector<std::string>{"a", "b"});
}

TEST_CASE("divergence CSV and JSON") {
    const Model m = init_model(tiny_config(3, 2));
    std::vector<NeuronScores> sets;
    for (std::uint64_t seed = 0; seed < 3; ++seed)
        sets.push_back(neuron_scores(m, random_matrix(32, m.config.input_dim(), seed)));
    const auto div = task_divergence_matrix(sets, {"t0", "t1", "t2"});
    const std::string csv = divergence_csv(div);
    CHECK(csv.substr(0, csv.find('\n')) == "task,t0,t1,t2");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    const auto doc = divergence_json(div);
    CHECK(doc["divergence"].size() == 3);
    CHECK(doc["divergence"][1][2] == div.divergence(1, 2));
    CHECK(doc["tau"][0][0] == 1.0);
    CHECK(doc.contains("pairs"));
}

TEST_CASE("layer profile self comparison and the single-layer case") {
    const Model m = init_model(tiny_config(5, 3));
    const Matrix x = random_matrix(24, m.config.input_dim(), 6);
    const auto same = layer_profile_compare(m, x, x);
    REQUIRE(same.tau.has_value());
    CHECK(*same.tau == 1.0);
    CHECK(same.mean_abs_rank_shift == 0.0);
    CHECK(same.a.raw == same.b.raw);

    const Model one = init_model(tiny_config(5, 1));
    const auto single = layer_profile_compare(one, random_matrix(8, 16, 1), random_matrix(8, 16, 2));
    CHECK_FALSE(single.tau.has_value());
    CHECK(single.a.normalized == std::vector<double>{1.0});
    CHECK(single.b.normalized == std::vector<double>{1.0});
    CHECK(layer_profile_json(single)["tau"] == "not-applicable");
}
