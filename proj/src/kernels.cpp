#include "tap/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace tap::kernels {

namespace {

void check_linear(const Matrix& input, const Matrix& weight, std::span<const double> bias) {
    if (input.cols() != weight.cols())
        throw ShapeError("linear: input width " + std::to_string(input.cols()) + " != weight width " +
                         std::to_string(weight.cols()));
    if (!bias.empty() && bias.size() != weight.rows())
        throw ShapeError("linear: bias length " + std::to_string(bias.size()) + " != output width " +
                         std::to_string(weight.rows()));
}

inline void linear_row(const Matrix& input, const Matrix& weight, std::span<const double> bias, Matrix& out,
                       std::size_t r) {
    auto x = input.row(r);
    auto y = out.row(r);
    for (std::size_t o = 0; o < weight.rows(); ++o) {
        auto w = weight.row(o);
        double acc = bias.empty() ? 0.0 : bias[o];
        for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * x[i];
        y[o] = acc;
    }
}

inline void gram_row(const Matrix& samples, double inv_two_bw2, Matrix& out, std::size_t a) {
    auto xa = samples.row(a);
    for (std::size_t b = 0; b < samples.rows(); ++b) {
        auto xb = samples.row(b);
        double dist2 = 0.0;
        for (std::size_t c = 0; c < xa.size(); ++c) {
            const double diff = xa[c] - xb[c];
            dist2 += diff * diff;
        }
        out(a, b) = std::exp(-dist2 * inv_two_bw2);
    }
}

struct CenterStats {
    std::vector<double> row_mean;
    std::vector<double> col_mean;
    double grand = 0.0;
};

CenterStats center_stats(const Matrix& gram) {
    const std::size_t n = gram.rows();
    CenterStats s{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0.0};
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
            s.row_mean[a] += gram(a, b);
            s.col_mean[b] += gram(a, b);
        }
    }
    for (std::size_t a = 0; a < n; ++a) {
        s.grand += s.row_mean[a];
        s.row_mean[a] /= static_cast<double>(n);
        s.col_mean[a] /= static_cast<double>(n);
    }
    s.grand /= static_cast<double>(n * n);
    return s;
}

void check_square_pair(const Matrix& a, const Matrix& b) {
    if (a.rows() != a.cols() || b.rows() != b.cols() || a.rows() != b.rows())
        throw ShapeError("HSIC needs two square Gram matrices of equal size");
}

struct MixtureConstants {
    std::vector<double> log_norm;  // log w_k - 0.5 * sum_d log(2 pi var_kd)
    Matrix inv_var;
};

MixtureConstants mixture_constants(const Matrix& points, std::span<const double> weights, const Matrix& means,
                                   const Matrix& variances) {
    const std::size_t k = weights.size();
    if (means.rows() != k || variances.rows() != k || means.cols() != points.cols() ||
        variances.cols() != points.cols())
        throw ShapeError("mixture density: parameter shapes do not match " + std::to_string(k) + " components of dim " +
                         std::to_string(points.cols()));
    MixtureConstants c{std::vector<double>(k), Matrix(k, points.cols())};
    for (std::size_t j = 0; j < k; ++j) {
        double acc = std::log(weights[j]);
        for (std::size_t d = 0; d < points.cols(); ++d) {
            acc -= 0.5 * std::log(2.0 * std::numbers::pi * variances(j, d));
            c.inv_var(j, d) = 1.0 / variances(j, d);
        }
        c.log_norm[j] = acc;
    }
    return c;
}

inline double mixture_row(const Matrix& points, const Matrix& means, const MixtureConstants& c, std::size_t r,
                          std::vector<double>& scratch) {
    auto x = points.row(r);
    for (std::size_t j = 0; j < means.rows(); ++j) {
        auto mu = means.row(j);
        auto iv = c.inv_var.row(j);
        double quad = 0.0;
        for (std::size_t d = 0; d < x.size(); ++d) {
            const double diff = x[d] - mu[d];
            quad += diff * diff * iv[d];
        }
        scratch[j] = c.log_norm[j] - 0.5 * quad;
    }
    return log_sum_exp(scratch);
}

}  // namespace

namespace serial {

Matrix linear(const Matrix& input, const Matrix& weight, std::span<const double> bias) {
    check_linear(input, weight, bias);
    Matrix out(input.rows(), weight.rows());
    for (std::size_t r = 0; r < input.rows(); ++r) linear_row(input, weight, bias, out, r);
    return out;
}

Matrix gaussian_gram(const Matrix& samples, double bandwidth) {
    const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
    Matrix out(samples.rows(), samples.rows());
    for (std::size_t a = 0; a < samples.rows(); ++a) gram_row(samples, inv, out, a);
    return out;
}

Matrix center_gram(const Matrix& gram) {
    const auto s = center_stats(gram);
    Matrix out(gram.rows(), gram.cols());
    for (std::size_t a = 0; a < gram.rows(); ++a)
        for (std::size_t b = 0; b < gram.cols(); ++b)
            out(a, b) = gram(a, b) - s.row_mean[a] - s.col_mean[b] + s.grand;
    return out;
}

double hsic_centered(const Matrix& gram, const Matrix& centered_other) {
    check_square_pair(gram, centered_other);
    const std::size_t n = gram.rows();
    std::vector<double> partial(n, 0.0);
    for (std::size_t a = 0; a < n; ++a) {
        double acc = 0.0;
        for (std::size_t b = 0; b < n; ++b) acc += gram(a, b) * centered_other(b, a);
        partial[a] = acc;
    }
    double total = 0.0;
    for (double p : partial) total += p;
    return total / static_cast<double>(n * n);
}

std::vector<double> diag_mixture_log_density(const Matrix& points, std::span<const double> weights,
                                             const Matrix& means, const Matrix& variances) {
    const auto c = mixture_constants(points, weights, means, variances);
    std::vector<double> out(points.rows());
    std::vector<double> scratch(weights.size());
    for (std::size_t r = 0; r < points.rows(); ++r) out[r] = mixture_row(points, means, c, r, scratch);
    return out;
}

}  // namespace serial

namespace parallel {

Matrix linear(const Matrix& input, const Matrix& weight, std::span<const double> bias) {
    check_linear(input, weight, bias);
    Matrix out(input.rows(), weight.rows());
    const auto rows = static_cast<std::ptrdiff_t>(input.rows());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < rows; ++r) linear_row(input, weight, bias, out, static_cast<std::size_t>(r));
    return out;
}

Matrix gaussian_gram(const Matrix& samples, double bandwidth) {
    const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
    Matrix out(samples.rows(), samples.rows());
    const auto rows = static_cast<std::ptrdiff_t>(samples.rows());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t a = 0; a < rows; ++a) gram_row(samples, inv, out, static_cast<std::size_t>(a));
    return out;
}

Matrix center_gram(const Matrix& gram) {
    const auto s = center_stats(gram);
    Matrix out(gram.rows(), gram.cols());
    const auto rows = static_cast<std::ptrdiff_t>(gram.rows());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ia = 0; ia < rows; ++ia) {
        const auto a = static_cast<std::size_t>(ia);
        for (std::size_t b = 0; b < gram.cols(); ++b)
            out(a, b) = gram(a, b) - s.row_mean[a] - s.col_mean[b] + s.grand;
    }
    return out;
}

double hsic_centered(const Matrix& gram, const Matrix& centered_other) {
    check_square_pair(gram, centered_other);
    const std::size_t n = gram.rows();
    std::vector<double> partial(n, 0.0);
    const auto rows = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ia = 0; ia < rows; ++ia) {
        const auto a = static_cast<std::size_t>(ia);
        double acc = 0.0;
        for (std::size_t b = 0; b < n; ++b) acc += gram(a, b) * centered_other(b, a);
        partial[a] = acc;
    }
    double total = 0.0;
    for (double p : partial) total += p;
    return total / static_cast<double>(n * n);
}

std::vector<double> diag_mixture_log_density(const Matrix& points, std::span<const double> weights,
                                             const Matrix& means, const Matrix& variances) {
    const auto c = mixture_constants(points, weights, means, variances);
    std::vector<double> out(points.rows());
    const auto rows = static_cast<std::ptrdiff_t>(points.rows());
#pragma omp parallel
    {
        std::vector<double> scratch(weights.size());
#pragma omp for schedule(static)
        for (std::ptrdiff_t r = 0; r < rows; ++r)
            out[static_cast<std::size_t>(r)] = mixture_row(points, means, c, static_cast<std::size_t>(r), scratch);
    }
    return out;
}

}  // namespace parallel

double median_pairwise_distance(const Matrix& samples) {
    std::vector<double> dists;
    const std::size_t n = samples.rows();
    dists.reserve(n * (n - 1) / 2);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = a + 1; b < n; ++b) {
            double d2 = 0.0;
            for (std::size_t c = 0; c < samples.cols(); ++c) {
                const double diff = samples(a, c) - samples(b, c);
                d2 += diff * diff;
            }
            if (d2 > 0.0) dists.push_back(std::sqrt(d2));
        }
    }
    if (dists.empty()) return 0.0;
    auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
    std::nth_element(dists.begin(), mid, dists.end());
    return *mid;
}

}  // namespace tap::kernels
