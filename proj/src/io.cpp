#include "tap/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tap {

static_assert(std::endian::native == std::endian::little, "container payloads are written in host order");

namespace {

constexpr char kMagic[8] = {'T', 'A', 'P', 'B', 'I', 'N', '0', '1'};
constexpr int kVersion = 1;

struct BlockRef {
    std::string name;
    std::size_t rows;
    std::size_t cols;
    double* data;
};

class ContainerWriter {
public:
    void add(std::string name, std::size_t rows, std::size_t cols, const double* data) {
        header_blocks_.push_back({{"name", name}, {"rows", rows}, {"cols", cols}});
        const auto bytes = rows * cols * sizeof(double);
        const auto old = payload_.size();
        payload_.resize(old + bytes);
        if (bytes) std::memcpy(payload_.data() + old, data, bytes);
    }
    void add(std::string name, const Matrix& m) { add(std::move(name), m.rows(), m.cols(), m.data().data()); }
    void add(std::string name, const std::vector<double>& v) { add(std::move(name), 1, v.size(), v.data()); }

    std::string finish(nlohmann::json header) const {
        header["blocks"] = header_blocks_;
        const std::string text = header.dump();
        std::string out(kMagic, sizeof(kMagic));
        std::uint64_t len = text.size();
        out.append(reinterpret_cast<const char*>(&len), sizeof(len));
        out += text;
        out += payload_;
        return out;
    }

private:
    nlohmann::json header_blocks_ = nlohmann::json::array();
    std::string payload_;
};

class ContainerReader {
public:
    explicit ContainerReader(const std::string& bytes) : bytes_(bytes) {
        if (bytes_.size() < 16 || std::memcmp(bytes_.data(), kMagic, sizeof(kMagic)) != 0)
            throw FormatError("not a TAPBIN01 container");
        std::uint64_t len = 0;
        std::memcpy(&len, bytes_.data() + 8, sizeof(len));
        if (16 + len > bytes_.size()) throw FormatError("container header truncated");
        try {
            header_ = nlohmann::json::parse(bytes_.substr(16, len));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("container header is not JSON: ") + e.what());
        }
        offset_ = 16 + len;
        if (!header_.contains("version") || header_["version"].get<int>() != kVersion)
            throw FormatError("unsupported container version");
        blocks_ = header_.at("blocks");
    }

    const nlohmann::json& header() const { return header_; }

    std::vector<double> take(const std::string& name, std::size_t rows, std::size_t cols) {
        if (next_ >= blocks_.size()) throw FormatError("container ended before block " + name);
        const auto& b = blocks_[next_++];
        if (b.at("name").get<std::string>() != name || b.at("rows").get<std::size_t>() != rows ||
            b.at("cols").get<std::size_t>() != cols)
            throw FormatError("container block mismatch at " + name + ": found " + b.dump());
        const auto bytes = rows * cols * sizeof(double);
        if (offset_ + bytes > bytes_.size()) throw FormatError("container payload truncated at " + name);
        std::vector<double> out(rows * cols);
        if (bytes) std::memcpy(out.data(), bytes_.data() + offset_, bytes);
        offset_ += bytes;
        return out;
    }
    Matrix take_matrix(const std::string& name, std::size_t rows, std::size_t cols) {
        return Matrix(rows, cols, take(name, rows, cols));
    }
    std::vector<double> take_vector(const std::string& name, std::size_t len) { return take(name, 1, len); }

    void finish() const {
        if (next_ != blocks_.size() || offset_ != bytes_.size()) throw FormatError("container has trailing data");
    }

private:
    const std::string& bytes_;
    nlohmann::json header_;
    nlohmann::json blocks_;
    std::size_t offset_ = 0;
    std::size_t next_ = 0;
};

std::string read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void add_linear(ContainerWriter& w, const std::string& prefix, const Linear& lin) {
    w.add(prefix + ".weight", lin.weight);
    w.add(prefix + ".bias", lin.bias);
}

Linear take_linear(ContainerReader& r, const std::string& prefix, std::size_t out, std::size_t in) {
    Linear lin;
    lin.weight = r.take_matrix(prefix + ".weight", out, in);
    lin.bias = r.take_vector(prefix + ".bias", out);
    return lin;
}

}  // namespace

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out{samples.select_rows(indices), {}, num_classes};
    out.labels.reserve(indices.size());
    for (auto i : indices) out.labels.push_back(labels[i]);
    return out;
}

void AccessLog::set_side(Side side) {
    std::lock_guard lock(mutex_);
    side_ = side;
}

Side AccessLog::side() const {
    std::lock_guard lock(mutex_);
    return side_;
}

void AccessLog::record(const std::filesystem::path& path, bool write) {
    std::lock_guard lock(mutex_);
    entries_.push_back({side_, path.lexically_normal().string(), write});
}

std::vector<AccessLog::Entry> AccessLog::entries() const {
    std::lock_guard lock(mutex_);
    return entries_;
}

std::string encode_model(const Model& model) {
    validate(model);
    const auto& cfg = model.config;
    nlohmann::json header;
    header["version"] = kVersion;
    header["kind"] = "model";
    header["d"] = cfg.dim;
    header["d_prime"] = cfg.ffn_dim;
    header["heads"] = cfg.heads;
    header["layers"] = model.blocks.size();
    header["num_classes"] = model.num_classes();
    header["seed"] = cfg.seed;
    header["image_size"] = cfg.image_size;
    header["channels"] = cfg.channels;
    header["patch_size"] = cfg.patch_size;
    auto widths = nlohmann::json::array();
    auto value_dims = nlohmann::json::array();
    auto head_dims = nlohmann::json::array();
    auto enabled = nlohmann::json::array();
    for (const auto& b : model.blocks) {
        widths.push_back(b.ffn.width());
        value_dims.push_back(b.attn.value_dims);
        head_dims.push_back(b.attn.head_dim);
        enabled.push_back(b.enabled);
    }
    header["ffn_widths"] = widths;
    header["value_dims"] = value_dims;
    header["head_dims"] = head_dims;
    header["enabled"] = enabled;

    ContainerWriter w;
    add_linear(w, "patch_embed", model.patch_embed);
    w.add("class_token", model.class_token);
    w.add("pos_embed", model.pos_embed);
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const auto& b = model.blocks[l];
        const auto p = "blocks." + std::to_string(l);
        w.add(p + ".norm1.gamma", b.norm1.gamma);
        w.add(p + ".norm1.beta", b.norm1.beta);
        add_linear(w, p + ".attn.query", b.attn.query);
        add_linear(w, p + ".attn.key", b.attn.key);
        add_linear(w, p + ".attn.value", b.attn.value);
        add_linear(w, p + ".attn.out", b.attn.out);
        w.add(p + ".norm2.gamma", b.norm2.gamma);
        w.add(p + ".norm2.beta", b.norm2.beta);
        add_linear(w, p + ".ffn.up", b.ffn.up);
        add_linear(w, p + ".ffn.down", b.ffn.down);
    }
    add_linear(w, "head", model.head);
    return w.finish(header);
}

Model decode_model(const std::string& bytes) {
    ContainerReader r(bytes);
    const auto& h = r.header();
    if (h.value("kind", "") != "model") throw FormatError("container does not hold a model");
    Model m;
    auto& cfg = m.config;
    try {
        cfg.dim = h.at("d");
        cfg.ffn_dim = h.at("d_prime");
        cfg.heads = h.at("heads");
        cfg.layers = h.at("layers");
        cfg.num_classes = h.at("num_classes");
        cfg.seed = h.at("seed");
        cfg.image_size = h.at("image_size");
        cfg.channels = h.at("channels");
        cfg.patch_size = h.at("patch_size");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model header: ") + e.what());
    }
    cfg.validate();
    const std::size_t d = cfg.dim;
    m.patch_embed = take_linear(r, "patch_embed", d, cfg.patch_dim());
    m.class_token = r.take_vector("class_token", d);
    m.pos_embed = r.take_matrix("pos_embed", cfg.tokens(), d);
    const auto& widths = h.at("ffn_widths");
    const auto& value_dims = h.at("value_dims");
    const auto& head_dims = h.at("head_dims");
    const auto& enabled = h.at("enabled");
    if (widths.size() != cfg.layers || value_dims.size() != cfg.layers || head_dims.size() != cfg.layers ||
        enabled.size() != cfg.layers)
        throw FormatError("model header: per-layer arrays do not match layer count");
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        Block b;
        const auto p = "blocks." + std::to_string(l);
        b.enabled = enabled[l].get<bool>();
        b.attn.head_dim = head_dims[l].get<std::size_t>();
        b.attn.value_dims = value_dims[l].get<std::vector<std::size_t>>();
        const std::size_t qk = b.attn.head_count() * b.attn.head_dim;
        const std::size_t vw = b.attn.value_width();
        const std::size_t ff = widths[l].get<std::size_t>();
        b.norm1.gamma = r.take_vector(p + ".norm1.gamma", d);
        b.norm1.beta = r.take_vector(p + ".norm1.beta", d);
        b.attn.query = take_linear(r, p + ".attn.query", qk, d);
        b.attn.key = take_linear(r, p + ".attn.key", qk, d);
        b.attn.value = take_linear(r, p + ".attn.value", vw, d);
        b.attn.out = take_linear(r, p + ".attn.out", d, vw);
        b.norm2.gamma = r.take_vector(p + ".norm2.gamma", d);
        b.norm2.beta = r.take_vector(p + ".norm2.beta", d);
        b.ffn.up = take_linear(r, p + ".ffn.up", ff, d);
        b.ffn.down = take_linear(r, p + ".ffn.down", d, ff);
        m.blocks.push_back(std::move(b));
    }
    m.head = take_linear(r, "head", cfg.num_classes, d);
    r.finish();
    validate(m);
    return m;
}

void save_model(const Model& model, const std::filesystem::path& path, AccessLog* log) {
    if (log) log->record(path, true);
    write_bytes(path, encode_model(model));
}

Model load_model(const std::filesystem::path& path, AccessLog* log) {
    if (log) log->record(path, false);
    return decode_model(read_bytes(path));
}

void save_dataset(const Dataset& data, const std::filesystem::path& path, AccessLog* log) {
    if (data.labels.size() != data.samples.rows()) throw ShapeError("dataset: labels/samples count mismatch");
    nlohmann::json header;
    header["version"] = kVersion;
    header["kind"] = "dataset";
    header["n"] = data.samples.rows();
    header["dim"] = data.samples.cols();
    header["num_classes"] = data.num_classes;
    ContainerWriter w;
    w.add("samples", data.samples);
    std::vector<double> labels(data.labels.begin(), data.labels.end());
    w.add("labels", labels);
    if (log) log->record(path, true);
    write_bytes(path, w.finish(header));
}

Dataset load_dataset(const std::filesystem::path& path, AccessLog* log) {
    if (log) log->record(path, false);
    const auto bytes = read_bytes(path);
    ContainerReader r(bytes);
    const auto& h = r.header();
    if (h.value("kind", "") != "dataset") throw FormatError(path.string() + " does not hold a dataset");
    const std::size_t n = h.at("n");
    const std::size_t dim = h.at("dim");
    Dataset out;
    out.num_classes = h.at("num_classes");
    out.samples = r.take_matrix("samples", n, dim);
    const auto labels = r.take_vector("labels", n);
    out.labels.reserve(n);
    for (double v : labels) out.labels.push_back(static_cast<int>(v));
    r.finish();
    return out;
}

void write_text(const std::filesystem::path& path, const std::string& text, AccessLog* log) {
    if (log) log->record(path, true);
    write_bytes(path, text);
}

std::string read_text(const std::filesystem::path& path, AccessLog* log) {
    if (log) log->record(path, false);
    return read_bytes(path);
}

void write_json(const std::filesystem::path& path, const nlohmann::json& doc, AccessLog* log) {
    write_text(path, doc.dump(2) + "\n", log);
}

nlohmann::json read_json(const std::filesystem::path& path, AccessLog* log) {
    const auto text = read_text(path, log);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

std::string format_double(double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

}  // namespace tap
