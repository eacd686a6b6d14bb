#include "tap/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "tap/io.hpp"
#include "tap/kernels.hpp"

namespace tap {

namespace {

constexpr int kWireVersion = 1;

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return acc;
}

// k-means++: first centre uniform, the rest drawn proportional to D^2.
Matrix kmeans_plus_plus(const Matrix& x, std::size_t k, Rng& rng) {
    const std::size_t n = x.rows();
    Matrix centres(k, x.cols());
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    for (std::size_t c = 0; c < k; ++c) {
        if (c > 0) {
            double total = 0.0;
            for (double v : d2) total += v;
            if (total <= 0.0) {
                pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
            } else {
                const double target = uniform(rng, 0.0, 1.0) * total;
                double cum = 0.0;
                pick = n - 1;
                for (std::size_t i = 0; i < n; ++i) {
                    cum += d2[i];
                    if (cum > target) {
                        pick = i;
                        break;
                    }
                }
            }
        }
        std::copy(x.row(pick).begin(), x.row(pick).end(), centres.row(c).begin());
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(x.row(i), centres.row(c)));
    }
    return centres;
}

GmmFit fit_once(const Matrix& x, std::size_t k, const FitConfig& cfg, std::uint64_t seed) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    Rng rng(seed);

    GmmParams p;
    p.dim = d;
    p.seed = cfg.seed;
    p.weights.assign(k, 1.0 / static_cast<double>(k));
    p.means = kmeans_plus_plus(x, k, rng);
    p.variances = Matrix(k, d);
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += x(i, j);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (x(i, j) - mean) * (x(i, j) - mean);
        var = std::max(var / static_cast<double>(n), cfg.variance_floor);
        for (std::size_t c = 0; c < k; ++c) p.variances(c, j) = var;
    }

    FitReport report;
    Matrix resp(n, k);
    std::vector<double> log_terms(k);
    const double log_two_pi = std::log(2.0 * std::numbers::pi);
    bool warned = false;

    for (std::size_t it = 0; it < cfg.max_iters; ++it) {
        // E-step
        std::vector<double> log_norm(k);
        for (std::size_t c = 0; c < k; ++c) {
            double acc = std::log(p.weights[c]);
            for (std::size_t j = 0; j < d; ++j) acc -= 0.5 * (log_two_pi + std::log(p.variances(c, j)));
            log_norm[c] = acc;
        }
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < k; ++c) {
                double quad = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double diff = x(i, j) - p.means(c, j);
                    quad += diff * diff / p.variances(c, j);
                }
                log_terms[c] = p.weights[c] > 0.0 ? log_norm[c] - 0.5 * quad
                                                  : -std::numeric_limits<double>::infinity();
            }
            const double lse = log_sum_exp(log_terms);
            total += lse;
            for (std::size_t c = 0; c < k; ++c) resp(i, c) = std::exp(log_terms[c] - lse);
        }
        report.log_likelihood.push_back(total);
        report.iterations = it + 1;
        if (it > 0) {
            const double gain = (total - report.log_likelihood[it - 1]) / static_cast<double>(n);
            if (gain < cfg.tol) {
                report.converged = true;
                break;
            }
        }
        if (it + 1 == cfg.max_iters) break;

        // M-step
        for (std::size_t c = 0; c < k; ++c) {
            double nk = 0.0;
            for (std::size_t i = 0; i < n; ++i) nk += resp(i, c);
            if (nk < 1.0 && !warned) {
                report.warnings.push_back("component " + std::to_string(c) + " has " + std::to_string(nk) +
                                          " effective members at iteration " + std::to_string(it) +
                                          "; variance floored");
                warned = true;
            }
            p.weights[c] = nk / static_cast<double>(n);
            if (nk <= 0.0) continue;
            for (std::size_t j = 0; j < d; ++j) {
                double mean = 0.0;
                for (std::size_t i = 0; i < n; ++i) mean += resp(i, c) * x(i, j);
                mean /= nk;
                double var = 0.0;
                for (std::size_t i = 0; i < n; ++i) var += resp(i, c) * (x(i, j) - mean) * (x(i, j) - mean);
                p.means(c, j) = mean;
                p.variances(c, j) = std::max(var / nk, cfg.variance_floor);
            }
        }
        double wsum = 0.0;
        for (double w : p.weights) wsum += w;
        for (double& w : p.weights) w /= wsum;
    }
    report.bic = bic_score(report.log_likelihood.back(), k, d, n);
    return {std::move(p), std::move(report)};
}

std::vector<double> json_vector(const nlohmann::json& arr) { return arr.get<std::vector<double>>(); }

Matrix json_matrix(const nlohmann::json& arr, std::size_t rows, std::size_t cols, const char* what) {
    if (!arr.is_array() || arr.size() != rows) throw FormatError(std::string("gmm json: bad ") + what);
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto row = json_vector(arr[r]);
        if (row.size() != cols) throw FormatError(std::string("gmm json: bad row in ") + what);
        std::copy(row.begin(), row.end(), m.row(r).begin());
    }
    return m;
}

}  // namespace

void GmmParams::validate() const {
    const std::size_t k = weights.size();
    if (k == 0) throw ValidationError("GMM has no components");
    if (dim == 0) throw ValidationError("GMM has zero dimension");
    if (means.rows() != k || means.cols() != dim || variances.rows() != k || variances.cols() != dim)
        throw ValidationError("GMM means/variances do not match K x dim");
    double sum = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw ValidationError("GMM weight is negative or NaN");
        sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("GMM weights do not sum to 1");
    for (double v : variances.data())
        if (!(v >= kVarianceFloor * (1 - 1e-12))) throw ValidationError("GMM variance below floor");
}

std::size_t gmm_free_parameters(std::size_t k, std::size_t dim) noexcept { return (k - 1) + 2 * k * dim; }

double bic_score(double log_likelihood, std::size_t k, std::size_t dim, std::size_t n) noexcept {
    return -2.0 * log_likelihood +
           static_cast<double>(gmm_free_parameters(k, dim)) * std::log(static_cast<double>(n));
}

GmmFit fit_em(const Matrix& features, std::size_t k, const FitConfig& config) {
    if (k == 0) throw ValidationError("fit_em: K must be at least 1");
    if (features.cols() == 0) throw ValidationError("fit_em: features have zero dimension");
    if (features.rows() < k)
        throw ValidationError("fit_em: " + std::to_string(features.rows()) + " samples cannot support K=" +
                              std::to_string(k));
    if (config.max_iters == 0) throw ValidationError("fit_em: max_iters must be positive");
    GmmFit best;
    bool have = false;
    const std::size_t restarts = std::max<std::size_t>(1, config.restarts);
    for (std::size_t r = 0; r < restarts; ++r) {
        auto fit = fit_once(features, k, config, derive_seed(config.seed, r));
        if (!have || fit.report.log_likelihood.back() > best.report.log_likelihood.back()) {
            best = std::move(fit);
            have = true;
        }
    }
    return best;
}

BicSelection select_k_bic(const Matrix& features, std::span<const std::size_t> k_range, const FitConfig& config) {
    if (k_range.empty()) throw ValidationError("select_k_bic: empty K range");
    std::vector<std::size_t> ks(k_range.begin(), k_range.end());
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
    BicSelection out;
    double best = std::numeric_limits<double>::infinity();
    for (auto k : ks) {
        try {
            auto fit = fit_em(features, k, config);
            out.bic.emplace_back(k, fit.report.bic);
            if (fit.report.bic < best) {
                best = fit.report.bic;
                out.k = k;
                out.params = std::move(fit.params);
            }
        } catch (const std::exception& e) {
            out.failures.push_back("K=" + std::to_string(k) + ": " + e.what());
        }
    }
    if (out.bic.empty()) {
        std::string msg = "select_k_bic: every fit failed";
        for (const auto& f : out.failures) msg += "; " + f;
        throw ValidationError(msg);
    }
    return out;
}

double log_density(const GmmParams& params, std::span<const double> x) {
    if (x.size() != params.dim)
        throw ValidationError("log_density: point has dim " + std::to_string(x.size()) + ", GMM has " +
                              std::to_string(params.dim));
    const Matrix point(1, x.size(), std::vector<double>(x.begin(), x.end()));
    return kernels::serial::diag_mixture_log_density(point, params.weights, params.means, params.variances)[0];
}

std::vector<double> log_density_batch(const GmmParams& params, const Matrix& points) {
    if (points.cols() != params.dim)
        throw ValidationError("log_density: points have dim " + std::to_string(points.cols()) + ", GMM has " +
                              std::to_string(params.dim));
    return kernels::parallel::diag_mixture_log_density(points, params.weights, params.means, params.variances);
}

std::vector<double> responsibilities(const GmmParams& params, std::span<const double> x) {
    if (x.size() != params.dim) throw ValidationError("responsibilities: dimension mismatch");
    std::vector<double> logs(params.components());
    for (std::size_t c = 0; c < params.components(); ++c) {
        const Matrix point(1, x.size(), std::vector<double>(x.begin(), x.end()));
        const Matrix mu(1, params.dim, std::vector<double>(params.means.row(c).begin(), params.means.row(c).end()));
        const Matrix var(1, params.dim,
                         std::vector<double>(params.variances.row(c).begin(), params.variances.row(c).end()));
        const double w = params.weights[c];
        logs[c] = w > 0.0 ? std::log(w) + kernels::serial::diag_mixture_log_density(point, std::vector<double>{1.0},
                                                                                     mu, var)[0]
                          : -std::numeric_limits<double>::infinity();
    }
    const double lse = log_sum_exp(logs);
    for (double& v : logs) v = std::exp(v - lse);
    return logs;
}

std::string to_json(const GmmParams& params) {
    params.validate();
    std::ostringstream os;
    auto write_row = [&os](std::span<const double> row) {
        os << '[';
        for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << format_double(row[i]);
        os << ']';
    };
    auto write_matrix = [&](const Matrix& m) {
        os << '[';
        for (std::size_t r = 0; r < m.rows(); ++r) {
            if (r) os << ',';
            write_row(m.row(r));
        }
        os << ']';
    };
    os << "{\"version\":" << kWireVersion << ",\"K\":" << params.components() << ",\"dim\":" << params.dim
       << ",\"seed\":" << params.seed << ",\"weights\":";
    write_row(params.weights);
    os << ",\"means\":";
    write_matrix(params.means);
    os << ",\"variances\":";
    write_matrix(params.variances);
    os << "}\n";
    return os.str();
}

GmmParams gmm_from_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("gmm json: ") + e.what());
    }
    if (doc.value("version", 0) != kWireVersion) throw FormatError("gmm json: unsupported version");
    GmmParams p;
    try {
        const std::size_t k = doc.at("K");
        p.dim = doc.at("dim");
        p.seed = doc.at("seed");
        p.weights = json_vector(doc.at("weights"));
        if (p.weights.size() != k) throw FormatError("gmm json: weights length != K");
        p.means = json_matrix(doc.at("means"), k, p.dim, "means");
        p.variances = json_matrix(doc.at("variances"), k, p.dim, "variances");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("gmm json: ") + e.what());
    }
    p.validate();
    return p;
}

}  // namespace tap
