#pragma once

// Minimal Vision-Transformer inference engine.
//
// A sample is a square image flattened row-major as (row, col, channel). It is
// cut into non-overlapping patches, linearly embedded, prefixed with a class
// token and summed with positional embeddings. Each block is pre-norm:
//
//   x <- x + Wo * concat_h softmax(Q_h K_h^T / sqrt(d_k)) V_h     (on LN1(x))
//   x <- x + W2 * gelu(W1 * LN2(x))
//
// The classifier head reads the class-token row of the last block; there is
// no final norm. Value channels of every head may be pruned independently, so
// a head owns `head_dim` query/key channels but `value_dims[h]` value channels.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "tap/common.hpp"

namespace tap {

struct ModelConfig {
    std::size_t image_size = 8;
    std::size_t channels = 1;
    std::size_t patch_size = 4;
    std::size_t dim = 32;
    std::size_t ffn_dim = 64;
    std::size_t heads = 4;
    std::size_t layers = 4;
    std::size_t num_classes = 10;
    std::uint64_t seed = 0;

    std::size_t patches_per_side() const noexcept { return image_size / patch_size; }
    std::size_t num_patches() const noexcept { return patches_per_side() * patches_per_side(); }
    std::size_t patch_dim() const noexcept { return patch_size * patch_size * channels; }
    std::size_t input_dim() const noexcept { return image_size * image_size * channels; }
    std::size_t tokens() const noexcept { return num_patches() + 1; }
    std::size_t head_dim() const noexcept { return dim / heads; }

    /// Throws ValidationError when the geometry or widths are inconsistent.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Linear {
    Matrix weight;  // out x in
    std::vector<double> bias;

    std::size_t in_features() const noexcept { return weight.cols(); }
    std::size_t out_features() const noexcept { return weight.rows(); }
    std::size_t param_count() const noexcept { return weight.size() + bias.size(); }

    friend bool operator==(const Linear&, const Linear&) = default;
};

struct LayerNorm {
    std::vector<double> gamma;
    std::vector<double> beta;
    static constexpr double eps = 1e-5;

    friend bool operator==(const LayerNorm&, const LayerNorm&) = default;
};

struct Attention {
    std::size_t head_dim = 0;
    std::vector<std::size_t> value_dims;  // surviving value channels per head
    Linear query;                         // (heads * head_dim) x d
    Linear key;                           // (heads * head_dim) x d
    Linear value;                         // value_width x d, head-major
    Linear out;                           // d x value_width

    std::size_t head_count() const noexcept { return value_dims.size(); }
    std::size_t value_width() const noexcept;
    /// First value channel of head h.
    std::size_t value_offset(std::size_t h) const noexcept;

    friend bool operator==(const Attention&, const Attention&) = default;
};

struct FeedForward {
    Linear up;    // d' x d
    Linear down;  // d x d'

    std::size_t width() const noexcept { return up.out_features(); }

    friend bool operator==(const FeedForward&, const FeedForward&) = default;
};

struct Block {
    LayerNorm norm1;
    Attention attn;
    LayerNorm norm2;
    FeedForward ffn;
    bool enabled = true;
    // Diagnostic sub-module bypasses; not persisted.
    bool skip_attention = false;
    bool skip_ffn = false;

    friend bool operator==(const Block&, const Block&) = default;
};

struct Model {
    ModelConfig config;
    Linear patch_embed;               // d x patch_dim
    std::vector<double> class_token;  // d
    Matrix pos_embed;                 // tokens x d
    std::vector<Block> blocks;
    Linear head;                      // num_classes x d

    std::size_t dim() const noexcept { return config.dim; }
    std::size_t num_classes() const noexcept { return head.out_features(); }

    friend bool operator==(const Model&, const Model&) = default;
};

/// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization; norms start at identity.
Model init_model(const ModelConfig& config);

/// Checks every structural invariant; throws ShapeError naming the offending layer.
void validate(const Model& model);

/// Image (row-major, channel-last) to patch rows, num_patches x patch_dim.
Matrix patchify(const ModelConfig& config, std::span<const double> sample);

/// Token-averaged per-unit values for one layer, one row per sample.
struct LayerTrace {
    std::size_t layer = 0;
    Matrix attn_output;     // mean over tokens of each value channel (input to Wo)
    Matrix attn_magnitude;  // mean over tokens of |value channel|
    Matrix ffn_output;      // mean over tokens of gelu(W1 x)
    Matrix ffn_magnitude;   // mean over tokens of |gelu(W1 x)|
};

struct ActivationTrace {
    std::vector<LayerTrace> layers;  // enabled layers only, ascending
    Matrix logits;
};

struct ForwardResult {
    Matrix logits;    // batch x num_classes
    Matrix features;  // batch x d, class-token representation fed to the head
    std::optional<ActivationTrace> trace;
};

/// Batched inference; samples are processed independently (OpenMP over rows).
ForwardResult forward(const Model& model, const Matrix& batch, bool trace = false);

/// Per-head attention probabilities of every enabled layer for a single sample.
std::vector<std::vector<Matrix>> attention_maps(const Model& model, std::span<const double> sample);

/// Scalar weights in embedding, tokens, enabled blocks and head.
std::size_t param_count(const Model& model);

/// Mean cross-entropy of logits against labels.
double cross_entropy(const Matrix& logits, std::span<const int> labels);
double accuracy(const Matrix& logits, std::span<const int> labels);
std::vector<int> predict(const Matrix& logits);

struct HeadGradient {
    Matrix weight;
    std::vector<double> bias;
};

/// Gradient of mean cross-entropy w.r.t. the head, given the features the head reads.
HeadGradient head_gradient(const Linear& head, const Matrix& features, std::span<const int> labels);

/// One gradient step on the head using precomputed features.
void head_step(Linear& head, const Matrix& features, std::span<const int> labels, double learning_rate);

/// One gradient step on the head for a raw batch; every other parameter is untouched.
Model head_finetune_step(const Model& model, const Matrix& batch, std::span<const int> labels,
                         double learning_rate);

struct EmbeddingGradient {
    Matrix patch_weight;
    std::vector<double> patch_bias;
    std::vector<double> class_token;
    Matrix pos_embed;
};

/// Back-propagates dLoss/dfeatures (one row per sample) through the frozen
/// blocks into the patch embedding, class token and positional embeddings.
EmbeddingGradient embedding_gradient(const Model& model, const Matrix& batch, const Matrix& feature_grad);

/// Same-shaped model whose parameters hold dLoss/dparam for the given
/// dLoss/dfeatures; the head entries are zero (use head_gradient for those).
Model parameter_gradient(const Model& model, const Matrix& batch, const Matrix& feature_grad);
Model zero_gradient(const Model& model);
/// Every trainable parameter array in a fixed order.
std::vector<std::span<double>> parameter_spans(Model& model);

void check_labels(std::span<const int> labels, std::size_t num_classes);

}  // namespace tap
