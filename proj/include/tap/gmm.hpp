#pragma once

// Diagonal-covariance Gaussian mixtures fitted by EM.
//
// GmmParams is the only thing a device ever hands to the cloud; its JSON
// encoding (to_json / gmm_from_json) is the whole upload.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tap/common.hpp"

namespace tap {

inline constexpr double kVarianceFloor = 1e-6;

struct GmmParams {
    std::size_t dim = 0;
    std::uint64_t seed = 0;
    std::vector<double> weights;  // K
    Matrix means;                 // K x dim
    Matrix variances;             // K x dim, diagonal covariances

    std::size_t components() const noexcept { return weights.size(); }
    /// Throws ValidationError if weights/variances/dimensions are inconsistent.
    void validate() const;

    friend bool operator==(const GmmParams&, const GmmParams&) = default;
};

struct FitConfig {
    std::size_t max_iters = 200;
    double tol = 1e-6;  // on the mean per-sample log-likelihood gain
    std::uint64_t seed = 0;
    std::size_t restarts = 3;  // independent k-means++ seedings, best final likelihood kept
    double variance_floor = kVarianceFloor;
};

struct FitReport {
    std::vector<double> log_likelihood;  // total, one entry per E-step
    bool converged = false;
    std::size_t iterations = 0;
    double bic = 0.0;
    std::vector<std::string> warnings;
};

struct GmmFit {
    GmmParams params;
    FitReport report;
};

GmmFit fit_em(const Matrix& features, std::size_t k, const FitConfig& config = {});

struct BicSelection {
    GmmParams params;
    std::size_t k = 0;
    std::vector<std::pair<std::size_t, double>> bic;  // successful fits only, ascending K
    std::vector<std::string> failures;
};

BicSelection select_k_bic(const Matrix& features, std::span<const std::size_t> k_range, const FitConfig& config = {});

/// Free parameters of a diagonal mixture: (K-1) + K*d + K*d.
std::size_t gmm_free_parameters(std::size_t k, std::size_t dim) noexcept;
double bic_score(double log_likelihood, std::size_t k, std::size_t dim, std::size_t n) noexcept;

double log_density(const GmmParams& params, std::span<const double> x);
std::vector<double> log_density_batch(const GmmParams& params, const Matrix& points);
/// Posterior component probabilities for one point.
std::vector<double> responsibilities(const GmmParams& params, std::span<const double> x);

std::string to_json(const GmmParams& params);
GmmParams gmm_from_json(const std::string& text);

}  // namespace tap
