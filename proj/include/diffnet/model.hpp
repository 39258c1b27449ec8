#pragma once

#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "diffnet/autodiff.hpp"
#include "diffnet/grid.hpp"
#include "diffnet/rng.hpp"

namespace diffnet {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Filter-estimator CNN: K conv layers, hidden width 32, five output channels
/// (one per stencil coefficient), 3x3 kernels, ReLU between hidden layers.
struct EstimatorCNNConfig {
    int depth = 4;  ///< K >= 2
    static constexpr int hidden_channels = 32;
    static constexpr int out_channels = 5;

    void validate() const {
        if (depth < 2) throw ShapeError("EstimatorCNNConfig: depth must be >= 2");
    }
    long conv_param_count() const {
        return 9L * (hidden_channels + hidden_channels * out_channels +
                     hidden_channels * hidden_channels * (depth - 2));
    }
    long bias_param_count() const { return 32L * (depth - 1) + out_channels; }
    long param_count() const { return conv_param_count() + bias_param_count(); }
};

struct DiffNetConfig {
    int diffusion_layers = 5;
    EstimatorCNNConfig estimator;
    bool learn_dt = true;
    bool final_relu = true;
    double dt = 0.1;  ///< fixed step when learn_dt is off; initial value otherwise

    void validate() const {
        if (diffusion_layers < 1) throw ShapeError("DiffNetConfig: need at least one layer");
        estimator.validate();
    }
};

/// Size-bound architecture with explicit per-pixel diffusivity planes; four
/// free directional planes per layer, center derived zero-mean.
struct LinearDiffNetConfig {
    int diffusion_layers = 1;
    int image_size = 64;
    bool learn_dt = false;
    double dt = 0.1;

    void validate() const {
        if (diffusion_layers < 1) throw ShapeError("LinearDiffNetConfig: need at least one layer");
        if (image_size < 1) throw ShapeError("LinearDiffNetConfig: bad image size");
    }
};

inline long count_params(const EstimatorCNNConfig& cfg) { return cfg.param_count(); }

inline long count_params(const DiffNetConfig& cfg) {
    cfg.validate();
    return cfg.diffusion_layers * cfg.estimator.param_count() +
           (cfg.learn_dt ? cfg.diffusion_layers : 0);
}

inline long count_params(const LinearDiffNetConfig& cfg) {
    cfg.validate();
    const long n2 = static_cast<long>(cfg.image_size) * cfg.image_size;
    return cfg.diffusion_layers * 4L * n2 + (cfg.learn_dt ? cfg.diffusion_layers : 0);
}

/// Ordered registry of named parameters; the insertion order is the canonical
/// serialization and optimizer-state order.
class ModelParams {
public:
    ModelParams() = default;
    ModelParams(const ModelParams&) = delete;
    ModelParams& operator=(const ModelParams&) = delete;
    ModelParams(ModelParams&&) = default;
    ModelParams& operator=(ModelParams&&) = default;

    Param& add(const std::string& name, Tensor init) {
        params_.emplace_back(name, std::move(init));
        params_.back().index = static_cast<int>(params_.size()) - 1;
        return params_.back();
    }

    Param* find(const std::string& name) {
        for (Param& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    std::vector<Param*> all() {
        std::vector<Param*> v;
        v.reserve(params_.size());
        for (Param& p : params_) v.push_back(&p);
        return v;
    }
    std::vector<const Param*> all() const {
        std::vector<const Param*> v;
        v.reserve(params_.size());
        for (const Param& p : params_) v.push_back(&p);
        return v;
    }

    std::size_t count() const { return params_.size(); }

    long total_size() const {
        long n = 0;
        for (const Param& p : params_) n += static_cast<long>(p.value.numel());
        return n;
    }

    void zero_grads() {
        for (Param& p : params_) p.zero_grad();
    }

    std::vector<Tensor> snapshot_values() const {
        std::vector<Tensor> v;
        v.reserve(params_.size());
        for (const Param& p : params_) v.push_back(p.value);
        return v;
    }
    void restore_values(const std::vector<Tensor>& v) {
        std::size_t i = 0;
        for (Param& p : params_) p.value = v[i++];
    }

    /// Same-shaped zero tensors, for use as a Tape gradient sink.
    std::vector<Tensor> make_grad_buffers() const {
        std::vector<Tensor> v;
        v.reserve(params_.size());
        for (const Param& p : params_) v.emplace_back(p.value.shape, 0.0);
        return v;
    }

private:
    std::deque<Param> params_;  // deque: element addresses stay stable
};

/// Extracts the 5-plane stencil of sample b from an estimator output
/// zeta[B,5,H,W]. Channels 0..3 are the directional coefficients; channel 4 is
/// the diagonal filter z5, stored negated in the center plane so the field
/// holds the actual matrix entries (update is Id - dt*W with W center -z5).
inline FilterField filter_field_from_zeta(const Tensor& zeta, int b = 0) {
    if (zeta.rank() != 4 || zeta.shape[1] != 5)
        throw ShapeError("filter_field_from_zeta: expected [B,5,H,W]");
    const int h = zeta.shape[2], w = zeta.shape[3];
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    const double* base = zeta.data.data() + static_cast<std::size_t>(b) * 5 * hw;
    FilterField f(w, h);
    Image* planes[4] = {&f.north, &f.west, &f.south, &f.east};
    for (int c = 0; c < 4; ++c)
        std::copy_n(base + static_cast<std::size_t>(c) * hw, hw, planes[c]->data.data());
    for (std::size_t i = 0; i < hw; ++i) f.center[i] = -base[4 * hw + i];
    return f;
}

/// Nonlinear diffusion network: per layer, a small CNN estimates a 5-point
/// stencil from the current state and the state is updated explicitly with it.
class DiffNetModel {
public:
    DiffNetConfig cfg;
    ModelParams params;

    DiffNetModel() = default;
    DiffNetModel(DiffNetModel&&) = default;
    DiffNetModel& operator=(DiffNetModel&&) = default;

    static DiffNetModel create(const DiffNetConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        DiffNetModel m;
        m.cfg = cfg;
        Rng rng(mix64(seed));
        for (int k = 0; k < cfg.diffusion_layers; ++k) {
            Layer layer;
            const int depth = cfg.estimator.depth;
            for (int j = 0; j < depth; ++j) {
                const int ci = j == 0 ? 1 : EstimatorCNNConfig::hidden_channels;
                const int co = j == depth - 1 ? EstimatorCNNConfig::out_channels
                                              : EstimatorCNNConfig::hidden_channels;
                Tensor w({co, ci, 3, 3});
                const double bound = 1.0 / std::sqrt(static_cast<double>(ci) * 9.0);
                for (double& v : w.data) v = rng.uniform(-bound, bound);
                const std::string base =
                    "layer" + std::to_string(k) + ".conv" + std::to_string(j);
                layer.weights.push_back(&m.params.add(base + ".weight", std::move(w)));
                layer.biases.push_back(&m.params.add(base + ".bias", Tensor({co}, 0.0)));
            }
            if (cfg.learn_dt)
                layer.dt = &m.params.add("layer" + std::to_string(k) + ".dt",
                                         Tensor::scalar(cfg.dt));
            m.layers_.push_back(layer);
        }
        return m;
    }

    /// Runs the layer-k estimator CNN on x[B,1,H,W]; returns zeta[B,5,H,W].
    int estimator_forward(Tape& t, int x, int layer) const {
        const Layer& l = layers_[static_cast<std::size_t>(layer)];
        int a = x;
        for (std::size_t j = 0; j < l.weights.size(); ++j) {
            a = t.conv3x3(a, *l.weights[j], *l.biases[j]);
            if (j + 1 < l.weights.size()) a = t.relu(a);
        }
        return a;
    }

    /// Full forward pass. When filters is non-null it receives the node id of
    /// every layer's zeta tensor, in layer order.
    int forward(Tape& t, int input, std::vector<int>* filters = nullptr) const {
        int f = input;
        for (int k = 0; k < cfg.diffusion_layers; ++k) {
            const int zeta = estimator_forward(t, f, k);
            if (filters) filters->push_back(zeta);
            f = apply_update(t, f, zeta, k);
        }
        if (cfg.final_relu) f = t.relu(f);
        return f;
    }

    /// Convenience evaluation without retained gradients.
    Tensor infer(const Tensor& x, std::vector<Tensor>* filters = nullptr) const {
        Tape t;
        const int in = t.constant(x);
        std::vector<int> fnodes;
        const int out = forward(t, in, filters ? &fnodes : nullptr);
        if (filters)
            for (int id : fnodes) filters->push_back(t.value(id));
        return t.value(out);
    }

    double layer_dt(int k) const {
        const Layer& l = layers_[static_cast<std::size_t>(k)];
        return l.dt ? l.dt->value.data[0] : cfg.dt;
    }

private:
    struct Layer {
        std::vector<Param*> weights, biases;
        Param* dt = nullptr;
    };

    /// F_k = F_{k-1} - dt * (sum_d zeta_d .* shift_d F + (-z5) .* F)
    int apply_update(Tape& t, int f, int zeta, int k) const {
        const Layer& l = layers_[static_cast<std::size_t>(k)];
        static constexpr Dir dirs[4] = {Dir::North, Dir::West, Dir::South, Dir::East};
        int acc = -1;
        for (int d = 0; d < 4; ++d) {
            const int term = t.pointwise_mul(t.channel(zeta, d), t.shift(f, dirs[d]));
            acc = d == 0 ? term : t.add(acc, term);
        }
        const int center = t.scale_const(t.channel(zeta, 4), -1.0);
        acc = t.add(acc, t.pointwise_mul(center, f));
        const int scaled = l.dt ? t.scale(acc, t.param(*l.dt)) : t.scale_const(acc, cfg.dt);
        return t.sub(f, scaled);
    }

    std::vector<Layer> layers_;
};

/// Linear diffusion network: explicit learned diffusivity planes per layer,
/// zero-mean stencil update F_k = F_{k-1} + dt * L(gamma) F_{k-1}.
class LinearDiffNetModel {
public:
    LinearDiffNetConfig cfg;
    ModelParams params;

    LinearDiffNetModel() = default;
    LinearDiffNetModel(LinearDiffNetModel&&) = default;
    LinearDiffNetModel& operator=(LinearDiffNetModel&&) = default;

    static LinearDiffNetModel create(const LinearDiffNetConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        LinearDiffNetModel m;
        m.cfg = cfg;
        (void)seed;  // planes start at zero (identity network)
        const int n = cfg.image_size;
        static constexpr const char* dir_names[4] = {"north", "west", "south", "east"};
        for (int k = 0; k < cfg.diffusion_layers; ++k) {
            Layer layer;
            for (auto* dn : dir_names)
                layer.planes.push_back(&m.params.add(
                    "layer" + std::to_string(k) + "." + dn, Tensor({n, n}, 0.0)));
            if (cfg.learn_dt)
                layer.dt = &m.params.add("layer" + std::to_string(k) + ".dt",
                                         Tensor::scalar(cfg.dt));
            m.layers_.push_back(layer);
        }
        return m;
    }

    int forward(Tape& t, int input) const {
        const Tensor& in = t.value(input);
        if (in.rank() != 4 || in.shape[2] != cfg.image_size || in.shape[3] != cfg.image_size)
            throw ShapeError("LinearDiffNetModel: input does not match configured image size");
        static constexpr Dir dirs[4] = {Dir::North, Dir::West, Dir::South, Dir::East};
        int f = input;
        for (const Layer& l : layers_) {
            int plane_nodes[4];
            for (int d = 0; d < 4; ++d) plane_nodes[d] = t.param(*l.planes[d]);
            int acc = -1;
            for (int d = 0; d < 4; ++d) {
                const int term = t.mul_plane(t.shift(f, dirs[d]), plane_nodes[d]);
                acc = d == 0 ? term : t.add(acc, term);
            }
            int psum = plane_nodes[0];
            for (int d = 1; d < 4; ++d) psum = t.add(psum, plane_nodes[d]);
            acc = t.add(acc, t.mul_plane(f, t.scale_const(psum, -1.0)));
            const int scaled = l.dt ? t.scale(acc, t.param(*l.dt)) : t.scale_const(acc, cfg.dt);
            f = t.add(f, scaled);
        }
        return f;
    }

    Tensor infer(const Tensor& x) const {
        Tape t;
        const int out = forward(t, t.constant(x));
        return t.value(out);
    }

private:
    struct Layer {
        std::vector<Param*> planes;  // north, west, south, east
        Param* dt = nullptr;
    };
    std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Checkpoint serialization.
//
// Layout: magic "DIFFNET1", u32 array count, then per array. u32 name length,
// name bytes, u32 rank, u32 dims, float32 little-endian payload. and finally a
// u64 FNV-1a checksum over all payload bytes in file order. Model configs ride
// along as one-element "meta.*" arrays.
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr char checkpoint_magic[8] = {'D', 'I', 'F', 'F', 'N', 'E', 'T', '1'};

struct Fnv1a64 {
    std::uint64_t state = 0xcbf29ce484222325ULL;
    void update(const unsigned char* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            state ^= p[i];
            state *= 0x100000001b3ULL;
        }
    }
};

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("checkpoint: truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw IoError("checkpoint: truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void float_to_le_bytes(float f, unsigned char out[4]) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    out[0] = static_cast<unsigned char>(bits);
    out[1] = static_cast<unsigned char>(bits >> 8);
    out[2] = static_cast<unsigned char>(bits >> 16);
    out[3] = static_cast<unsigned char>(bits >> 24);
}

inline float le_bytes_to_float(const unsigned char in[4]) {
    const std::uint32_t bits = static_cast<std::uint32_t>(in[0]) |
                               (static_cast<std::uint32_t>(in[1]) << 8) |
                               (static_cast<std::uint32_t>(in[2]) << 16) |
                               (static_cast<std::uint32_t>(in[3]) << 24);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace detail

struct CheckpointArray {
    std::string name;
    Tensor tensor;  ///< values already round-tripped through float32
};

struct CheckpointData {
    std::vector<CheckpointArray> arrays;

    void add(const std::string& name, Tensor t) { arrays.push_back({name, std::move(t)}); }

    const Tensor* find(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return &a.tensor;
        return nullptr;
    }

    double meta(const std::string& name) const {
        const Tensor* t = find(name);
        if (!t) throw IoError("checkpoint: missing meta entry " + name);
        return t->data[0];
    }
};

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointData& ckpt) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("checkpoint: cannot open " + tmp.string() + " for writing");
        os.write(detail::checkpoint_magic, 8);
        detail::write_u32(os, static_cast<std::uint32_t>(ckpt.arrays.size()));
        detail::Fnv1a64 hash;
        for (const auto& a : ckpt.arrays) {
            detail::write_u32(os, static_cast<std::uint32_t>(a.name.size()));
            os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
            detail::write_u32(os, static_cast<std::uint32_t>(a.tensor.shape.size()));
            for (int d : a.tensor.shape) detail::write_u32(os, static_cast<std::uint32_t>(d));
            for (double v : a.tensor.data) {
                unsigned char b[4];
                detail::float_to_le_bytes(static_cast<float>(v), b);
                hash.update(b, 4);
                os.write(reinterpret_cast<const char*>(b), 4);
            }
        }
        detail::write_u64(os, hash.state);
        if (!os) throw IoError("checkpoint: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::checkpoint_magic, 8) != 0)
        throw IoError("checkpoint: bad magic in " + path.string());
    const std::uint32_t count = detail::read_u32(is);
    CheckpointData ckpt;
    detail::Fnv1a64 hash;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const std::uint32_t rank = detail::read_u32(is);
        if (rank > 4) throw IoError("checkpoint: bad rank for " + name);
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(detail::read_u32(is));
        Tensor t(shape);
        for (double& v : t.data) {
            unsigned char b[4];
            is.read(reinterpret_cast<char*>(b), 4);
            if (!is) throw IoError("checkpoint: truncated payload in " + name);
            hash.update(b, 4);
            v = static_cast<double>(detail::le_bytes_to_float(b));
        }
        ckpt.arrays.push_back({std::move(name), std::move(t)});
    }
    const std::uint64_t stored = detail::read_u64(is);
    if (stored != hash.state) throw IoError("checkpoint: payload checksum mismatch");
    return ckpt;
}

inline CheckpointData to_checkpoint(const DiffNetModel& m) {
    CheckpointData c;
    c.add("meta.kind", Tensor::scalar(0.0));
    c.add("meta.layers", Tensor::scalar(m.cfg.diffusion_layers));
    c.add("meta.estimator_depth", Tensor::scalar(m.cfg.estimator.depth));
    c.add("meta.learn_dt", Tensor::scalar(m.cfg.learn_dt ? 1.0 : 0.0));
    c.add("meta.final_relu", Tensor::scalar(m.cfg.final_relu ? 1.0 : 0.0));
    c.add("meta.dt", Tensor::scalar(m.cfg.dt));
    for (const Param* p : m.params.all()) c.add(p->name, p->value);
    return c;
}

inline CheckpointData to_checkpoint(const LinearDiffNetModel& m) {
    CheckpointData c;
    c.add("meta.kind", Tensor::scalar(1.0));
    c.add("meta.layers", Tensor::scalar(m.cfg.diffusion_layers));
    c.add("meta.image_size", Tensor::scalar(m.cfg.image_size));
    c.add("meta.learn_dt", Tensor::scalar(m.cfg.learn_dt ? 1.0 : 0.0));
    c.add("meta.dt", Tensor::scalar(m.cfg.dt));
    for (const Param* p : m.params.all()) c.add(p->name, p->value);
    return c;
}

using AnyModel = std::variant<DiffNetModel, LinearDiffNetModel>;

inline void load_params_from(ModelParams& params, const CheckpointData& c) {
    for (Param* p : params.all()) {
        const Tensor* t = c.find(p->name);
        if (!t) throw IoError("checkpoint: missing parameter " + p->name);
        if (t->shape != p->value.shape)
            throw IoError("checkpoint: shape mismatch for " + p->name);
        p->value = *t;
    }
}

inline AnyModel model_from_checkpoint(const CheckpointData& c) {
    const int kind = static_cast<int>(c.meta("meta.kind"));
    if (kind == 0) {
        DiffNetConfig cfg;
        cfg.diffusion_layers = static_cast<int>(c.meta("meta.layers"));
        cfg.estimator.depth = static_cast<int>(c.meta("meta.estimator_depth"));
        cfg.learn_dt = c.meta("meta.learn_dt") != 0.0;
        cfg.final_relu = c.meta("meta.final_relu") != 0.0;
        cfg.dt = c.meta("meta.dt");
        DiffNetModel m = DiffNetModel::create(cfg, 0);
        load_params_from(m.params, c);
        return m;
    }
    if (kind == 1) {
        LinearDiffNetConfig cfg;
        cfg.diffusion_layers = static_cast<int>(c.meta("meta.layers"));
        cfg.image_size = static_cast<int>(c.meta("meta.image_size"));
        cfg.learn_dt = c.meta("meta.learn_dt") != 0.0;
        cfg.dt = c.meta("meta.dt");
        LinearDiffNetModel m = LinearDiffNetModel::create(cfg, 0);
        load_params_from(m.params, c);
        return m;
    }
    throw IoError("checkpoint: unknown model kind");
}

}  // namespace diffnet
