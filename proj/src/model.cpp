#include "tap/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "tap/kernels.hpp"

namespace tap {

namespace {

std::string layer_name(std::size_t l) { return "block " + std::to_string(l); }

Linear make_linear(Rng& rng, std::size_t out, std::size_t in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear lin{Matrix(out, in), std::vector<double>(out)};
    for (double& w : lin.weight.data()) w = uniform(rng, -bound, bound);
    for (double& b : lin.bias) b = uniform(rng, -bound, bound);
    return lin;
}

LayerNorm identity_norm(std::size_t d) { return {std::vector<double>(d, 1.0), std::vector<double>(d, 0.0)}; }

void check_linear_shape(const Linear& lin, std::size_t out, std::size_t in, const std::string& where) {
    if (lin.weight.rows() != out || lin.weight.cols() != in || lin.bias.size() != out)
        throw ShapeError(where + ": expected " + std::to_string(out) + "x" + std::to_string(in) + " (+bias), got " +
                         std::to_string(lin.weight.rows()) + "x" + std::to_string(lin.weight.cols()) + " (+" +
                         std::to_string(lin.bias.size()) + ")");
}

double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2)); }

double gelu_derivative(double z) {
    const double cdf = 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + z * pdf;
}

struct NormCache {
    Matrix normalized;  // x-hat
    std::vector<double> rstd;
};

Matrix layer_norm(const LayerNorm& norm, const Matrix& x, NormCache* cache) {
    Matrix y(x.rows(), x.cols());
    if (cache) {
        cache->normalized = Matrix(x.rows(), x.cols());
        cache->rstd.assign(x.rows(), 0.0);
    }
    const auto d = static_cast<double>(x.cols());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        auto row = x.row(t);
        const double mean = std::accumulate(row.begin(), row.end(), 0.0) / d;
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= d;
        const double rstd = 1.0 / std::sqrt(var + LayerNorm::eps);
        for (std::size_t c = 0; c < x.cols(); ++c) {
            const double xhat = (row[c] - mean) * rstd;
            y(t, c) = norm.gamma[c] * xhat + norm.beta[c];
            if (cache) cache->normalized(t, c) = xhat;
        }
        if (cache) cache->rstd[t] = rstd;
    }
    return y;
}

Matrix layer_norm_backward(const LayerNorm& norm, const NormCache& cache, const Matrix& grad_out) {
    Matrix gx(grad_out.rows(), grad_out.cols());
    const auto d = static_cast<double>(grad_out.cols());
    std::vector<double> gxhat(grad_out.cols());
    for (std::size_t t = 0; t < grad_out.rows(); ++t) {
        double mean_g = 0.0;
        double mean_gx = 0.0;
        for (std::size_t c = 0; c < grad_out.cols(); ++c) {
            gxhat[c] = grad_out(t, c) * norm.gamma[c];
            mean_g += gxhat[c];
            mean_gx += gxhat[c] * cache.normalized(t, c);
        }
        mean_g /= d;
        mean_gx /= d;
        for (std::size_t c = 0; c < grad_out.cols(); ++c)
            gx(t, c) = cache.rstd[t] * (gxhat[c] - mean_g - cache.normalized(t, c) * mean_gx);
    }
    return gx;
}

// grad (T x out) times weight (out x in) -> T x in
Matrix input_grad(const Matrix& grad, const Matrix& weight) {
    Matrix out(grad.rows(), weight.cols());
    for (std::size_t t = 0; t < grad.rows(); ++t)
        for (std::size_t o = 0; o < weight.rows(); ++o) {
            const double g = grad(t, o);
            if (g == 0.0) continue;
            auto w = weight.row(o);
            auto dst = out.row(t);
            for (std::size_t i = 0; i < w.size(); ++i) dst[i] += g * w[i];
        }
    return out;
}

void add_into(Matrix& dst, const Matrix& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

struct BlockCache {
    NormCache norm1;
    NormCache norm2;
    Matrix h1, h2;
    Matrix q, k, v;
    std::vector<Matrix> probs;
    Matrix concat;
    Matrix z;
    Matrix u;
};

// Runs one block in place on the token matrix.
void run_block(const Block& block, Matrix& x, BlockCache* cache) {
    const auto& attn = block.attn;
    const std::size_t tokens = x.rows();
    if (!block.skip_attention) {
        const Matrix h1 = layer_norm(block.norm1, x, cache ? &cache->norm1 : nullptr);
        const Matrix q = kernels::serial::linear(h1, attn.query.weight, attn.query.bias);
        const Matrix k = kernels::serial::linear(h1, attn.key.weight, attn.key.bias);
        const Matrix v = kernels::serial::linear(h1, attn.value.weight, attn.value.bias);
        Matrix concat(tokens, attn.value_width());
        const double scale = 1.0 / std::sqrt(static_cast<double>(attn.head_dim));
        std::vector<double> scores(tokens);
        if (cache) cache->probs.assign(attn.head_count(), Matrix());
        for (std::size_t h = 0; h < attn.head_count(); ++h) {
            const std::size_t qk0 = h * attn.head_dim;
            const std::size_t v0 = attn.value_offset(h);
            Matrix probs(tokens, tokens);
            for (std::size_t t = 0; t < tokens; ++t) {
                for (std::size_t s = 0; s < tokens; ++s) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < attn.head_dim; ++c) dot += q(t, qk0 + c) * k(s, qk0 + c);
                    scores[s] = dot * scale;
                }
                const auto p = softmax(scores);
                std::copy(p.begin(), p.end(), probs.row(t).begin());
                for (std::size_t c = 0; c < attn.value_dims[h]; ++c) {
                    double acc = 0.0;
                    for (std::size_t s = 0; s < tokens; ++s) acc += p[s] * v(s, v0 + c);
                    concat(t, v0 + c) = acc;
                }
            }
            if (cache) cache->probs[h] = std::move(probs);
        }
        const Matrix projected = kernels::serial::linear(concat, attn.out.weight, attn.out.bias);
        add_into(x, projected);
        if (cache) {
            cache->h1 = h1;
            cache->q = q;
            cache->k = k;
            cache->v = v;
            cache->concat = std::move(concat);
        }
    }
    if (!block.skip_ffn) {
        const Matrix h2 = layer_norm(block.norm2, x, cache ? &cache->norm2 : nullptr);
        Matrix z = kernels::serial::linear(h2, block.ffn.up.weight, block.ffn.up.bias);
        Matrix u(z.rows(), z.cols());
        for (std::size_t i = 0; i < z.size(); ++i) u.data()[i] = gelu(z.data()[i]);
        add_into(x, kernels::serial::linear(u, block.ffn.down.weight, block.ffn.down.bias));
        if (cache) {
            cache->h2 = h2;
            cache->z = std::move(z);
            cache->u = std::move(u);
        }
    }
}

// dW += grad^T input, db += column sums of grad.
void accumulate_linear(Linear& g, const Matrix& grad, const Matrix& input) {
    for (std::size_t t = 0; t < grad.rows(); ++t) {
        auto in = input.row(t);
        for (std::size_t o = 0; o < grad.cols(); ++o) {
            const double go = grad(t, o);
            if (go == 0.0) continue;
            g.bias[o] += go;
            auto w = g.weight.row(o);
            for (std::size_t i = 0; i < in.size(); ++i) w[i] += go * in[i];
        }
    }
}

void accumulate_norm(LayerNorm& g, const NormCache& cache, const Matrix& grad) {
    for (std::size_t t = 0; t < grad.rows(); ++t)
        for (std::size_t c = 0; c < grad.cols(); ++c) {
            g.gamma[c] += grad(t, c) * cache.normalized(t, c);
            g.beta[c] += grad(t, c);
        }
}

// Returns dLoss/d(block input); accumulates parameter gradients into `grad` when given.
Matrix block_backward(const Block& block, const BlockCache& cache, const Matrix& grad_out, Block* grad = nullptr) {
    Matrix g_mid = grad_out;
    if (!block.skip_ffn) {
        Matrix gz = input_grad(grad_out, block.ffn.down.weight);
        if (grad) accumulate_linear(grad->ffn.down, grad_out, cache.u);
        for (std::size_t i = 0; i < gz.size(); ++i) gz.data()[i] *= gelu_derivative(cache.z.data()[i]);
        const Matrix gh2 = input_grad(gz, block.ffn.up.weight);
        if (grad) {
            accumulate_linear(grad->ffn.up, gz, cache.h2);
            accumulate_norm(grad->norm2, cache.norm2, gh2);
        }
        add_into(g_mid, layer_norm_backward(block.norm2, cache.norm2, gh2));
    }
    Matrix g_in = g_mid;
    if (!block.skip_attention) {
        const auto& attn = block.attn;
        const std::size_t tokens = g_mid.rows();
        const Matrix gc = input_grad(g_mid, attn.out.weight);
        if (grad) accumulate_linear(grad->attn.out, g_mid, cache.concat);
        Matrix gq(tokens, attn.query.out_features());
        Matrix gk(tokens, attn.key.out_features());
        Matrix gv(tokens, attn.value_width());
        const double scale = 1.0 / std::sqrt(static_cast<double>(attn.head_dim));
        std::vector<double> gp(tokens);
        for (std::size_t h = 0; h < attn.head_count(); ++h) {
            const auto& probs = cache.probs[h];
            const std::size_t qk0 = h * attn.head_dim;
            const std::size_t v0 = attn.value_offset(h);
            for (std::size_t t = 0; t < tokens; ++t) {
                double weighted = 0.0;
                for (std::size_t s = 0; s < tokens; ++s) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < attn.value_dims[h]; ++c) acc += gc(t, v0 + c) * cache.v(s, v0 + c);
                    gp[s] = acc;
                    weighted += probs(t, s) * acc;
                    for (std::size_t c = 0; c < attn.value_dims[h]; ++c) gv(s, v0 + c) += probs(t, s) * gc(t, v0 + c);
                }
                for (std::size_t s = 0; s < tokens; ++s) {
                    const double gs = probs(t, s) * (gp[s] - weighted) * scale;
                    if (gs == 0.0) continue;
                    for (std::size_t c = 0; c < attn.head_dim; ++c) {
                        gq(t, qk0 + c) += gs * cache.k(s, qk0 + c);
                        gk(s, qk0 + c) += gs * cache.q(t, qk0 + c);
                    }
                }
            }
        }
        Matrix gh1 = input_grad(gq, attn.query.weight);
        add_into(gh1, input_grad(gk, attn.key.weight));
        add_into(gh1, input_grad(gv, attn.value.weight));
        if (grad) {
            accumulate_linear(grad->attn.query, gq, cache.h1);
            accumulate_linear(grad->attn.key, gk, cache.h1);
            accumulate_linear(grad->attn.value, gv, cache.h1);
            accumulate_norm(grad->norm1, cache.norm1, gh1);
        }
        add_into(g_in, layer_norm_backward(block.norm1, cache.norm1, gh1));
    }
    return g_in;
}

Matrix embed_tokens(const Model& model, std::span<const double> sample, Matrix* patches_out) {
    const auto& cfg = model.config;
    if (sample.size() != cfg.input_dim())
        throw ShapeError("patch embedding: sample has " + std::to_string(sample.size()) + " values, expected " +
                         std::to_string(cfg.input_dim()));
    Matrix patches = patchify(cfg, sample);
    const Matrix embedded = kernels::serial::linear(patches, model.patch_embed.weight, model.patch_embed.bias);
    Matrix x(cfg.tokens(), cfg.dim);
    for (std::size_t c = 0; c < cfg.dim; ++c) x(0, c) = model.class_token[c] + model.pos_embed(0, c);
    for (std::size_t t = 1; t < cfg.tokens(); ++t)
        for (std::size_t c = 0; c < cfg.dim; ++c) x(t, c) = embedded(t - 1, c) + model.pos_embed(t, c);
    if (patches_out) *patches_out = std::move(patches);
    return x;
}

void token_means(const Matrix& values, std::span<double> mean_out, std::span<double> magnitude_out) {
    const auto tokens = static_cast<double>(values.rows());
    for (std::size_t c = 0; c < values.cols(); ++c) {
        double sum = 0.0;
        double mag = 0.0;
        for (std::size_t t = 0; t < values.rows(); ++t) {
            sum += values(t, c);
            mag += std::abs(values(t, c));
        }
        mean_out[c] = sum / tokens;
        magnitude_out[c] = mag / tokens;
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (image_size == 0 || channels == 0 || patch_size == 0)
        throw ValidationError("image geometry must be positive");
    if (image_size % patch_size != 0)
        throw ValidationError("patch size " + std::to_string(patch_size) + " does not divide image size " +
                              std::to_string(image_size));
    if (dim == 0 || ffn_dim == 0 || heads == 0 || num_classes == 0)
        throw ValidationError("model widths must be positive");
    if (dim % heads != 0)
        throw ValidationError("head count " + std::to_string(heads) + " does not divide dim " + std::to_string(dim));
}

std::size_t Attention::value_width() const noexcept {
    return std::accumulate(value_dims.begin(), value_dims.end(), std::size_t{0});
}

std::size_t Attention::value_offset(std::size_t h) const noexcept {
    return std::accumulate(value_dims.begin(), value_dims.begin() + static_cast<std::ptrdiff_t>(h), std::size_t{0});
}

Model init_model(const ModelConfig& config) {
    config.validate();
    Rng rng(config.seed);
    Model m;
    m.config = config;
    const std::size_t d = config.dim;
    m.patch_embed = make_linear(rng, d, config.patch_dim());
    const double token_bound = 1.0 / std::sqrt(static_cast<double>(d));
    m.class_token.resize(d);
    for (double& v : m.class_token) v = uniform(rng, -token_bound, token_bound);
    m.pos_embed = Matrix(config.tokens(), d);
    for (double& v : m.pos_embed.data()) v = uniform(rng, -token_bound, token_bound);
    m.blocks.reserve(config.layers);
    for (std::size_t l = 0; l < config.layers; ++l) {
        Block b;
        b.norm1 = identity_norm(d);
        b.norm2 = identity_norm(d);
        b.attn.head_dim = config.head_dim();
        b.attn.value_dims.assign(config.heads, config.head_dim());
        b.attn.query = make_linear(rng, d, d);
        b.attn.key = make_linear(rng, d, d);
        b.attn.value = make_linear(rng, d, d);
        b.attn.out = make_linear(rng, d, d);
        b.ffn.up = make_linear(rng, config.ffn_dim, d);
        b.ffn.down = make_linear(rng, d, config.ffn_dim);
        m.blocks.push_back(std::move(b));
    }
    m.head = make_linear(rng, config.num_classes, d);
    return m;
}

void validate(const Model& model) {
    const auto& cfg = model.config;
    cfg.validate();
    const std::size_t d = cfg.dim;
    if (model.blocks.empty()) throw ShapeError("model has no blocks");
    check_linear_shape(model.patch_embed, d, cfg.patch_dim(), "patch embedding");
    if (model.class_token.size() != d) throw ShapeError("class token has wrong width");
    if (model.pos_embed.rows() != cfg.tokens() || model.pos_embed.cols() != d)
        throw ShapeError("positional embedding has wrong shape");
    check_linear_shape(model.head, model.head.out_features(), d, "head");
    if (model.head.out_features() == 0) throw ShapeError("head has no classes");
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const auto& b = model.blocks[l];
        const auto name = layer_name(l);
        if (b.norm1.gamma.size() != d || b.norm1.beta.size() != d || b.norm2.gamma.size() != d ||
            b.norm2.beta.size() != d)
            throw ShapeError(name + ": layer norm width mismatch");
        const auto& a = b.attn;
        if (a.head_count() == 0) throw ShapeError(name + ": attention has no heads");
        if (a.head_dim == 0) throw ShapeError(name + ": zero head dim");
        for (auto vd : a.value_dims)
            if (vd == 0) throw ShapeError(name + ": head with no value channels");
        const std::size_t qk = a.head_count() * a.head_dim;
        check_linear_shape(a.query, qk, d, name + " query");
        check_linear_shape(a.key, qk, d, name + " key");
        check_linear_shape(a.value, a.value_width(), d, name + " value");
        check_linear_shape(a.out, d, a.value_width(), name + " output projection");
        if (b.ffn.width() == 0) throw ShapeError(name + ": FFN has no hidden units");
        check_linear_shape(b.ffn.up, b.ffn.width(), d, name + " ffn up");
        check_linear_shape(b.ffn.down, d, b.ffn.width(), name + " ffn down");
    }
}

Matrix patchify(const ModelConfig& config, std::span<const double> sample) {
    if (sample.size() != config.input_dim())
        throw ShapeError("patchify: sample has " + std::to_string(sample.size()) + " values, expected " +
                         std::to_string(config.input_dim()));
    const std::size_t side = config.patches_per_side();
    const std::size_t p = config.patch_size;
    const std::size_t ch = config.channels;
    Matrix out(config.num_patches(), config.patch_dim());
    for (std::size_t pr = 0; pr < side; ++pr)
        for (std::size_t pc = 0; pc < side; ++pc) {
            auto dst = out.row(pr * side + pc);
            std::size_t k = 0;
            for (std::size_t r = 0; r < p; ++r)
                for (std::size_t c = 0; c < p; ++c)
                    for (std::size_t z = 0; z < ch; ++z)
                        dst[k++] = sample[((pr * p + r) * config.image_size + (pc * p + c)) * ch + z];
        }
    return out;
}

ForwardResult forward(const Model& model, const Matrix& batch, bool trace) {
    validate(model);
    if (batch.cols() != model.config.input_dim())
        throw ShapeError("patch embedding: batch width " + std::to_string(batch.cols()) + " != input dim " +
                         std::to_string(model.config.input_dim()));
    const std::size_t n = batch.rows();
    const std::size_t d = model.dim();
    ForwardResult result{Matrix(n, model.num_classes()), Matrix(n, d), std::nullopt};
    std::vector<std::size_t> enabled;
    for (std::size_t l = 0; l < model.blocks.size(); ++l)
        if (model.blocks[l].enabled) enabled.push_back(l);
    if (trace) {
        ActivationTrace tr;
        for (auto l : enabled) {
            const auto& b = model.blocks[l];
            tr.layers.push_back(LayerTrace{l, Matrix(n, b.attn.value_width()), Matrix(n, b.attn.value_width()),
                                           Matrix(n, b.ffn.width()), Matrix(n, b.ffn.width())});
        }
        result.trace = std::move(tr);
    }

    const auto rows = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 4)
    for (std::ptrdiff_t ir = 0; ir < rows; ++ir) {
        const auto r = static_cast<std::size_t>(ir);
        Matrix x = embed_tokens(model, batch.row(r), nullptr);
        BlockCache cache;
        for (std::size_t e = 0; e < enabled.size(); ++e) {
            const auto& block = model.blocks[enabled[e]];
            run_block(block, x, trace ? &cache : nullptr);
            if (trace) {
                auto& lt = result.trace->layers[e];
                if (!block.skip_attention) token_means(cache.concat, lt.attn_output.row(r), lt.attn_magnitude.row(r));
                if (!block.skip_ffn) token_means(cache.u, lt.ffn_output.row(r), lt.ffn_magnitude.row(r));
            }
        }
        auto feat = result.features.row(r);
        std::copy(x.row(0).begin(), x.row(0).end(), feat.begin());
        auto logits = result.logits.row(r);
        for (std::size_t k = 0; k < model.num_classes(); ++k) {
            auto w = model.head.weight.row(k);
            double acc = model.head.bias[k];
            for (std::size_t c = 0; c < d; ++c) acc += w[c] * feat[c];
            logits[k] = acc;
        }
    }
    if (trace) result.trace->logits = result.logits;
    return result;
}

std::vector<std::vector<Matrix>> attention_maps(const Model& model, std::span<const double> sample) {
    validate(model);
    Matrix x = embed_tokens(model, sample, nullptr);
    std::vector<std::vector<Matrix>> maps;
    for (const auto& block : model.blocks) {
        if (!block.enabled) continue;
        BlockCache cache;
        run_block(block, x, &cache);
        maps.push_back(std::move(cache.probs));
    }
    return maps;
}

std::size_t param_count(const Model& model) {
    std::size_t total = model.patch_embed.param_count() + model.class_token.size() + model.pos_embed.size() +
                        model.head.param_count();
    for (const auto& b : model.blocks) {
        if (!b.enabled) continue;
        total += b.norm1.gamma.size() + b.norm1.beta.size() + b.norm2.gamma.size() + b.norm2.beta.size();
        total += b.attn.query.param_count() + b.attn.key.param_count() + b.attn.value.param_count() +
                 b.attn.out.param_count();
        total += b.ffn.up.param_count() + b.ffn.down.param_count();
    }
    return total;
}

void check_labels(std::span<const int> labels, std::size_t num_classes) {
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
            throw ValidationError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                                  " outside [0, " + std::to_string(num_classes) + ")");
}

double cross_entropy(const Matrix& logits, std::span<const int> labels) {
    if (logits.rows() != labels.size()) throw ShapeError("cross entropy: logits/labels count mismatch");
    check_labels(labels, logits.cols());
    if (labels.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t r = 0; r < logits.rows(); ++r)
        acc += log_sum_exp(logits.row(r)) - logits(r, static_cast<std::size_t>(labels[r]));
    return acc / static_cast<double>(labels.size());
}

std::vector<int> predict(const Matrix& logits) {
    std::vector<int> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto row = logits.row(r);
        out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

double accuracy(const Matrix& logits, std::span<const int> labels) {
    if (logits.rows() != labels.size()) throw ShapeError("accuracy: logits/labels count mismatch");
    if (labels.empty()) return 0.0;
    const auto pred = predict(logits);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

HeadGradient head_gradient(const Linear& head, const Matrix& features, std::span<const int> labels) {
    if (features.rows() != labels.size()) throw ShapeError("head gradient: features/labels count mismatch");
    if (features.cols() != head.in_features()) throw ShapeError("head gradient: feature width mismatch");
    check_labels(labels, head.out_features());
    HeadGradient g{Matrix(head.out_features(), head.in_features()), std::vector<double>(head.out_features(), 0.0)};
    if (labels.empty()) return g;
    const double inv_n = 1.0 / static_cast<double>(labels.size());
    std::vector<double> logits(head.out_features());
    for (std::size_t r = 0; r < features.rows(); ++r) {
        auto f = features.row(r);
        for (std::size_t k = 0; k < head.out_features(); ++k) {
            auto w = head.weight.row(k);
            double acc = head.bias[k];
            for (std::size_t c = 0; c < f.size(); ++c) acc += w[c] * f[c];
            logits[k] = acc;
        }
        auto p = softmax(logits);
        p[static_cast<std::size_t>(labels[r])] -= 1.0;
        for (std::size_t k = 0; k < head.out_features(); ++k) {
            const double coef = p[k] * inv_n;
            g.bias[k] += coef;
            auto gw = g.weight.row(k);
            for (std::size_t c = 0; c < f.size(); ++c) gw[c] += coef * f[c];
        }
    }
    return g;
}

void head_step(Linear& head, const Matrix& features, std::span<const int> labels, double learning_rate) {
    const auto g = head_gradient(head, features, labels);
    for (std::size_t i = 0; i < head.weight.size(); ++i) head.weight.data()[i] -= learning_rate * g.weight.data()[i];
    for (std::size_t k = 0; k < head.bias.size(); ++k) head.bias[k] -= learning_rate * g.bias[k];
}

Model head_finetune_step(const Model& model, const Matrix& batch, std::span<const int> labels,
                         double learning_rate) {
    if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
    check_labels(labels, model.num_classes());
    Model out = model;
    const auto fwd = forward(model, batch);
    head_step(out.head, fwd.features, labels, learning_rate);
    return out;
}

Model zero_gradient(const Model& model) {
    Model g = model;
    for (auto span : parameter_spans(g)) std::fill(span.begin(), span.end(), 0.0);
    return g;
}

std::vector<std::span<double>> parameter_spans(Model& model) {
    std::vector<std::span<double>> out;
    auto add_linear = [&](Linear& lin) {
        out.emplace_back(lin.weight.data());
        out.emplace_back(lin.bias);
    };
    auto add_norm = [&](LayerNorm& n) {
        out.emplace_back(n.gamma);
        out.emplace_back(n.beta);
    };
    add_linear(model.patch_embed);
    out.emplace_back(model.class_token);
    out.emplace_back(model.pos_embed.data());
    for (auto& b : model.blocks) {
        add_norm(b.norm1);
        add_linear(b.attn.query);
        add_linear(b.attn.key);
        add_linear(b.attn.value);
        add_linear(b.attn.out);
        add_norm(b.norm2);
        add_linear(b.ffn.up);
        add_linear(b.ffn.down);
    }
    add_linear(model.head);
    return out;
}

Model parameter_gradient(const Model& model, const Matrix& batch, const Matrix& feature_grad) {
    validate(model);
    if (feature_grad.rows() != batch.rows() || feature_grad.cols() != model.dim())
        throw ShapeError("parameter gradient: feature gradient shape mismatch");
    const auto& cfg = model.config;
    const std::size_t n = batch.rows();
    std::vector<Model> per_sample(n);
    const auto rows = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 4)
    for (std::ptrdiff_t ir = 0; ir < rows; ++ir) {
        const auto r = static_cast<std::size_t>(ir);
        Model g = zero_gradient(model);
        Matrix patches;
        Matrix x = embed_tokens(model, batch.row(r), &patches);
        std::vector<BlockCache> caches;
        std::vector<std::size_t> order;
        for (std::size_t l = 0; l < model.blocks.size(); ++l) {
            if (!model.blocks[l].enabled) continue;
            caches.emplace_back();
            run_block(model.blocks[l], x, &caches.back());
            order.push_back(l);
        }
        Matrix tg(cfg.tokens(), cfg.dim);
        for (std::size_t c = 0; c < cfg.dim; ++c) tg(0, c) = feature_grad(r, c);
        for (std::size_t e = order.size(); e-- > 0;)
            tg = block_backward(model.blocks[order[e]], caches[e], tg, &g.blocks[order[e]]);
        add_into(g.pos_embed, tg);
        for (std::size_t c = 0; c < cfg.dim; ++c) g.class_token[c] += tg(0, c);
        Matrix patch_grad(cfg.tokens() - 1, cfg.dim);
        for (std::size_t t = 1; t < cfg.tokens(); ++t)
            for (std::size_t c = 0; c < cfg.dim; ++c) patch_grad(t - 1, c) = tg(t, c);
        accumulate_linear(g.patch_embed, patch_grad, patches);
        per_sample[r] = std::move(g);
    }
    // Fixed-order reduction keeps the result independent of the thread count.
    Model total = zero_gradient(model);
    auto dst = parameter_spans(total);
    for (auto& g : per_sample) {
        const auto src = parameter_spans(g);
        for (std::size_t p = 0; p < dst.size(); ++p)
            for (std::size_t i = 0; i < dst[p].size(); ++i) dst[p][i] += src[p][i];
    }
    return total;
}

EmbeddingGradient embedding_gradient(const Model& model, const Matrix& batch, const Matrix& feature_grad) {
    Model g = parameter_gradient(model, batch, feature_grad);
    return {std::move(g.patch_embed.weight), std::move(g.patch_embed.bias), std::move(g.class_token),
            std::move(g.pos_embed)};
}

}  // namespace tap
