#include "tap/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace tap {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
        throw ShapeError("matrix data has " + std::to_string(data_.size()) + " entries, expected " +
                         std::to_string(rows_ * cols_));
}

std::vector<double> Matrix::column(std::size_t c) const {
    std::vector<double> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
}

Matrix Matrix::select_rows(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), cols_);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        auto src = row(indices[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

void Matrix::remove_rows(std::span<const std::size_t> sorted_indices) {
    if (sorted_indices.empty()) return;
    std::vector<double> kept;
    kept.reserve((rows_ - sorted_indices.size()) * cols_);
    std::size_t next = 0;
    for (std::size_t r = 0; r < rows_; ++r) {
        if (next < sorted_indices.size() && sorted_indices[next] == r) {
            ++next;
            continue;
        }
        auto src = row(r);
        kept.insert(kept.end(), src.begin(), src.end());
    }
    rows_ -= sorted_indices.size();
    data_ = std::move(kept);
}

void Matrix::remove_cols(std::span<const std::size_t> sorted_indices) {
    if (sorted_indices.empty()) return;
    std::vector<char> drop(cols_, 0);
    for (auto c : sorted_indices) drop[c] = 1;
    const std::size_t new_cols = cols_ - sorted_indices.size();
    std::vector<double> kept;
    kept.reserve(rows_ * new_cols);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c)
            if (!drop[c]) kept.push_back((*this)(r, c));
    cols_ = new_cols;
    data_ = std::move(kept);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) noexcept {
    // splitmix64 finalizer over the combined value
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double normal(Rng& rng, double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(rng);
}

double log_sum_exp(std::span<const double> values) {
    if (values.empty()) return -std::numeric_limits<double>::infinity();
    const double peak = *std::max_element(values.begin(), values.end());
    if (!std::isfinite(peak)) return peak;
    double acc = 0.0;
    for (double v : values) acc += std::exp(v - peak);
    return peak + std::log(acc);
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    if (logits.empty()) return out;
    const double peak = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - peak);
        total += out[i];
    }
    for (double& v : out) v /= total;
    return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q, double floor) {
    if (p.size() != q.size()) throw ValidationError("KL divergence over distributions of different length");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        acc += p[i] * (std::log(p[i]) - std::log(std::max(q[i], floor)));
    }
    return acc;
}

int configured_threads() {
    const char* raw = std::getenv("TAP_THREADS");
    if (raw == nullptr) return 0;
    char* end = nullptr;
    const long value = std::strtol(raw, &end, 10);
    if (end == raw || value <= 0) return 0;
    return static_cast<int>(value);
}

void apply_thread_limit() {
#ifdef _OPENMP
    if (const int n = configured_threads(); n > 0) omp_set_num_threads(n);
#endif
}

}  // namespace tap
