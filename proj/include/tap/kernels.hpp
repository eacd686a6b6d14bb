#pragma once

// Hot loops shared by the network, the importance estimators and GMM scoring.
//
// Every kernel exists twice: `serial::` is the straight reference used by the
// tests, `parallel::` splits the outer loop with OpenMP. Each output element is
// reduced in the same order in both versions, so results are bit-identical.

#include <span>
#include <vector>

#include "tap/common.hpp"

namespace tap::kernels {

namespace serial {

/// out = input * weight^T + bias, input rows x in, weight out x in.
Matrix linear(const Matrix& input, const Matrix& weight, std::span<const double> bias);

/// Gaussian kernel exp(-||x_a - x_b||^2 / (2 bandwidth^2)) over the rows of `samples`.
Matrix gaussian_gram(const Matrix& samples, double bandwidth);

/// H K H with H = I - 11^T/n.
Matrix center_gram(const Matrix& gram);

/// (1/n^2) * sum_ab K_ab * Lc_ab, i.e. the biased HSIC given a centred second Gram matrix.
double hsic_centered(const Matrix& gram, const Matrix& centered_other);

/// Per-row log sum_k w_k N(x | mean_k, diag(var_k)).
std::vector<double> diag_mixture_log_density(const Matrix& points, std::span<const double> weights,
                                             const Matrix& means, const Matrix& variances);

}  // namespace serial

namespace parallel {

Matrix linear(const Matrix& input, const Matrix& weight, std::span<const double> bias);
Matrix gaussian_gram(const Matrix& samples, double bandwidth);
Matrix center_gram(const Matrix& gram);
double hsic_centered(const Matrix& gram, const Matrix& centered_other);
std::vector<double> diag_mixture_log_density(const Matrix& points, std::span<const double> weights,
                                             const Matrix& means, const Matrix& variances);

}  // namespace parallel

/// Median of the nonzero pairwise Euclidean distances between rows (0 when all rows coincide).
double median_pairwise_distance(const Matrix& samples);

}  // namespace tap::kernels
