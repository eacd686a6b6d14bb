#include "tap/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

namespace tap {

namespace {

constexpr std::uint64_t kPrototypeTag = 1;
constexpr std::uint64_t kPartitionTag = 2;
constexpr std::uint64_t kPoolTag = 1000;
constexpr std::uint64_t kDeviceTag = 100000;

Dataset sample_classes(const Matrix& prototypes, std::span<const int> classes, std::size_t per_class, double noise,
                       std::size_t num_classes, std::uint64_t seed) {
    Dataset out{Matrix(classes.size() * per_class, prototypes.cols()), {}, num_classes};
    out.labels.reserve(classes.size() * per_class);
    std::size_t row = 0;
    for (int c : classes) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
        const auto proto = prototypes.row(static_cast<std::size_t>(c));
        for (std::size_t s = 0; s < per_class; ++s, ++row) {
            auto dst = out.samples.row(row);
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = noise > 0.0 ? proto[i] + noise * normal(rng) : proto[i];
            out.labels.push_back(c);
        }
    }
    return out;
}

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;

    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

    void step(std::span<double> params, std::span<const double> grad, double lr, std::size_t t) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

}  // namespace

void ScenarioSpec::validate() const {
    if (num_devices == 0 || num_classes == 0) throw ValidationError("scenario needs devices and classes");
    if (num_devices > num_classes)
        throw ValidationError("scenario has " + std::to_string(num_devices) + " devices but only " +
                              std::to_string(num_classes) + " classes");
    if (!(noise >= 0.0)) throw ValidationError("noise level must be nonnegative");
    if (image_size == 0 || channels == 0) throw ValidationError("image geometry must be positive");
    if (disjoint_features && num_devices > input_dim())
        throw ValidationError("more label groups than pixels for disjoint feature blocks");
}

std::vector<std::vector<int>> partition_labels(std::size_t num_classes, std::size_t num_devices, std::uint64_t seed) {
    if (num_devices == 0 || num_devices > num_classes)
        throw ValidationError("cannot split " + std::to_string(num_classes) + " classes over " +
                              std::to_string(num_devices) + " devices");
    std::vector<int> classes(num_classes);
    std::iota(classes.begin(), classes.end(), 0);
    Rng rng(derive_seed(seed, kPartitionTag));
    std::shuffle(classes.begin(), classes.end(), rng);
    std::vector<std::vector<int>> groups(num_devices);
    const std::size_t base = num_classes / num_devices;
    const std::size_t extra = num_classes % num_devices;
    std::size_t k = 0;
    for (std::size_t g = 0; g < num_devices; ++g) {
        const std::size_t size = base + (g < extra ? 1 : 0);
        for (std::size_t i = 0; i < size; ++i) groups[g].push_back(classes[k++]);
        std::sort(groups[g].begin(), groups[g].end());
    }
    return groups;
}

Scenario generate_scenario(const ScenarioSpec& spec) {
    spec.validate();
    Scenario sc;
    sc.spec = spec;
    sc.groups = partition_labels(spec.num_classes, spec.num_devices, spec.seed);
    const std::size_t dim = spec.input_dim();
    sc.prototypes = Matrix(spec.num_classes, dim);
    Rng rng(derive_seed(spec.seed, kPrototypeTag));
    for (double& v : sc.prototypes.data()) v = normal(rng, 0.0, spec.prototype_scale);
    if (spec.disjoint_features) {
        for (std::size_t g = 0; g < sc.groups.size(); ++g) {
            const std::size_t lo = g * dim / spec.num_devices;
            const std::size_t hi = (g + 1) * dim / spec.num_devices;
            for (int c : sc.groups[g]) {
                auto row = sc.prototypes.row(static_cast<std::size_t>(c));
                for (std::size_t i = 0; i < dim; ++i)
                    if (i < lo || i >= hi) row[i] = 0.0;
            }
        }
    }
    std::vector<int> all(spec.num_classes);
    std::iota(all.begin(), all.end(), 0);
    sc.pool = sample_classes(sc.prototypes, all, spec.pool_per_class, spec.noise, spec.num_classes,
                             derive_seed(spec.seed, kPoolTag));
    sc.devices.resize(spec.num_devices);
    const auto m = static_cast<std::ptrdiff_t>(spec.num_devices);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < m; ++i) {
        const auto d = static_cast<std::size_t>(i);
        sc.devices[d] = sample_classes(sc.prototypes, sc.groups[d], spec.device_per_class, spec.noise,
                                       spec.num_classes, derive_seed(spec.seed, kDeviceTag + d));
    }
    return sc;
}

nlohmann::json spec_json(const ScenarioSpec& spec) {
    return {{"num_devices", spec.num_devices},     {"num_classes", spec.num_classes},
            {"pool_per_class", spec.pool_per_class}, {"device_per_class", spec.device_per_class},
            {"image_size", spec.image_size},       {"channels", spec.channels},
            {"prototype_scale", spec.prototype_scale}, {"noise", spec.noise},
            {"disjoint_features", spec.disjoint_features}, {"seed", spec.seed}};
}

ScenarioSpec spec_from_json(const nlohmann::json& doc) {
    ScenarioSpec s;
    s.num_devices = doc.value("num_devices", s.num_devices);
    s.num_classes = doc.value("num_classes", s.num_classes);
    s.pool_per_class = doc.value("pool_per_class", s.pool_per_class);
    s.device_per_class = doc.value("device_per_class", s.device_per_class);
    s.image_size = doc.value("image_size", s.image_size);
    s.channels = doc.value("channels", s.channels);
    s.prototype_scale = doc.value("prototype_scale", s.prototype_scale);
    s.noise = doc.value("noise", s.noise);
    s.disjoint_features = doc.value("disjoint_features", s.disjoint_features);
    s.seed = doc.value("seed", s.seed);
    s.validate();
    return s;
}

std::filesystem::path device_data_path(const std::filesystem::path& dir, std::size_t device) {
    return dir / "devices" / ("dev_" + std::to_string(device) + ".bin");
}

void save_scenario(const Scenario& scenario, const std::filesystem::path& dir, AccessLog* log) {
    std::filesystem::create_directories(dir / "devices");
    nlohmann::json doc;
    doc["version"] = 1;
    doc["spec"] = spec_json(scenario.spec);
    doc["seed"] = scenario.spec.seed;
    doc["groups"] = scenario.groups;
    write_json(dir / "scenario.json", doc, log);
    save_dataset(scenario.pool, dir / "pool.bin", log);
    for (std::size_t i = 0; i < scenario.devices.size(); ++i)
        save_dataset(scenario.devices[i], device_data_path(dir, i), log);
}

PublicScenario load_public_scenario(const std::filesystem::path& dir, AccessLog* log) {
    const auto doc = read_json(dir / "scenario.json", log);
    PublicScenario out;
    out.spec = spec_from_json(doc.at("spec"));
    out.groups = doc.at("groups").get<std::vector<std::vector<int>>>();
    out.pool = load_dataset(dir / "pool.bin", log);
    return out;
}

Dataset load_device_data(const std::filesystem::path& dir, std::size_t device, AccessLog* log) {
    return load_dataset(device_data_path(dir, device), log);
}

ModelConfig model_config_for(const ScenarioSpec& spec, std::size_t dim, std::size_t ffn_dim, std::size_t heads,
                             std::size_t layers, std::size_t patch_size, std::uint64_t seed) {
    ModelConfig cfg;
    cfg.image_size = spec.image_size;
    cfg.channels = spec.channels;
    cfg.patch_size = patch_size;
    cfg.dim = dim;
    cfg.ffn_dim = ffn_dim;
    cfg.heads = heads;
    cfg.layers = layers;
    cfg.num_classes = spec.num_classes;
    cfg.seed = seed;
    cfg.validate();
    return cfg;
}

Model train_toy_model(const Dataset& pool, const ModelConfig& architecture, const TrainConfig& config) {
    if (pool.size() == 0) throw ValidationError("train_toy_model: empty pool");
    if (pool.samples.cols() != architecture.input_dim())
        throw ValidationError("train_toy_model: pool samples do not match the architecture's input size");
    if (config.batch_size == 0) throw ValidationError("train_toy_model: zero batch size");
    check_labels(pool.labels, architecture.num_classes);
    Model model = init_model(architecture);
    if (config.epochs == 0) return model;

    const std::size_t d = architecture.dim;
    std::vector<AdamState> adam;
    for (auto span : parameter_spans(model)) adam.emplace_back(span.size());
    const std::size_t head_w = adam.size() - 2;  // head weight, then head bias
    const std::size_t embed_end = 4;              // patch weight, patch bias, class token, pos embed

    Rng rng(config.seed);
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            std::span<const std::size_t> idx(order.data() + start, stop - start);
            const Dataset batch = pool.subset(idx);
            const auto fwd = forward(model, batch.samples);
            const double loss = cross_entropy(fwd.logits, batch.labels);
            if (!std::isfinite(loss))
                throw std::runtime_error("train_toy_model: loss diverged at step " + std::to_string(step));
            ++step;

            const auto hg = head_gradient(model.head, fwd.features, batch.labels);
            std::optional<Model> grad;
            if (config.train_embedding || config.train_blocks) {
                Matrix feature_grad(batch.size(), d);
                const double inv_n = 1.0 / static_cast<double>(batch.size());
                for (std::size_t r = 0; r < batch.size(); ++r) {
                    auto p = softmax(fwd.logits.row(r));
                    p[static_cast<std::size_t>(batch.labels[r])] -= 1.0;
                    for (std::size_t k = 0; k < p.size(); ++k)
                        for (std::size_t c = 0; c < d; ++c) feature_grad(r, c) += p[k] * inv_n * model.head.weight(k, c);
                }
                grad = parameter_gradient(model, batch.samples, feature_grad);
            }
            auto params = parameter_spans(model);
            if (grad) {
                const auto grads = parameter_spans(*grad);
                for (std::size_t p = 0; p < head_w; ++p) {
                    const bool is_embed = p < embed_end;
                    if (is_embed ? config.train_embedding : config.train_blocks)
                        adam[p].step(params[p], grads[p], config.learning_rate, step);
                }
            }
            adam[head_w].step(params[head_w], hg.weight.data(), config.learning_rate, step);
            adam[head_w + 1].step(params[head_w + 1], hg.bias, config.learning_rate, step);
        }
    }
    return model;
}

}  // namespace tap
