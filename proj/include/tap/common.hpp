#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tap {

// Input violated a documented precondition.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Tensor dimensions disagree somewhere in the network.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed or unreadable file.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    std::vector<double> column(std::size_t c) const;
    Matrix select_rows(std::span<const std::size_t> indices) const;
    void remove_rows(std::span<const std::size_t> sorted_indices);
    void remove_cols(std::span<const std::size_t> sorted_indices);

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a tag.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) noexcept;

double uniform(Rng& rng, double lo, double hi);
double normal(Rng& rng, double mean = 0.0, double stddev = 1.0);

/// Numerically stable log(sum(exp(values))).
double log_sum_exp(std::span<const double> values);

/// Softmax over a vector, shifted by its maximum.
std::vector<double> softmax(std::span<const double> logits);

/// KL(p || q) in nats with q clamped below at `floor`.
double kl_divergence(std::span<const double> p, std::span<const double> q, double floor = 1e-12);

/// Worker bound from TAP_THREADS (0 when unset or invalid).
int configured_threads();
/// Applies TAP_THREADS to the OpenMP runtime when set.
void apply_thread_limit();

}  // namespace tap
