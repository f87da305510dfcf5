#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cfdiff/autodiff.hpp"
#include "cfdiff/rng.hpp"
#include "cfdiff/tensor.hpp"

namespace cfdiff {

enum class Backend { Unet, Transformer };

enum class ConditionLabel : int { Healthy = 0, Unhealthy = 1, Null = 2 };

inline const char* backend_name(Backend b) { return b == Backend::Unet ? "unet" : "transformer"; }

// Shared knobs for both noise-prediction backends. UNet uses
// base_width/depth; the transformer uses patch_size/hidden_dim/n_blocks/
// n_heads. embed_dim is the width of the time+label conditioning embedding.
struct DenoiserConfig {
    Backend backend = Backend::Unet;
    int channels_in = 4;
    int base_width = 32;
    int depth = 3;
    int patch_size = 4;
    int hidden_dim = 128;
    int n_blocks = 4;
    int n_heads = 4;
    int embed_dim = 128;
    int n_classes = 3;
};

// Validates config consistency and image-size divisibility.
void validate_config(const DenoiserConfig& cfg, int H, int W);

// Named flat tensor collection; iteration order is insertion order and is
// part of the reproducibility contract (init, checkpoints, optimizer state).
template <typename T>
struct ParamStoreT {
    struct Entry {
        std::string name;
        std::vector<int> shape;
        std::vector<T> data;
    };

    std::vector<Entry> entries;
    std::unordered_map<std::string, size_t> by_name;

    void add(std::string name, std::vector<int> shape, std::vector<T> data) {
        if (by_name.count(name)) throw ContractError("duplicate parameter name: " + name);
        if (static_cast<int64_t>(data.size()) != TensorT<T>::count(shape))
            throw ContractError("parameter data/shape mismatch: " + name);
        by_name.emplace(name, entries.size());
        entries.push_back(Entry{std::move(name), std::move(shape), std::move(data)});
    }

    bool has(const std::string& name) const { return by_name.count(name) != 0; }

    Entry& at(const std::string& name) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ContractError("unknown parameter: " + name);
        return entries[it->second];
    }
    const Entry& at(const std::string& name) const {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ContractError("unknown parameter: " + name);
        return entries[it->second];
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& e : entries) n += static_cast<int64_t>(e.data.size());
        return n;
    }

    // Same names/shapes, zero-filled values (gradient / moment buffers).
    ParamStoreT zeros_like() const {
        ParamStoreT z;
        for (const auto& e : entries) z.add(e.name, e.shape, std::vector<T>(e.data.size(), T(0)));
        return z;
    }
};

using ParamStore = ParamStoreT<float>;

enum class ParamInit { FanInUniform, Zero, One };

struct ParamSpec {
    std::string name;
    std::vector<int> shape;
    ParamInit init = ParamInit::FanInUniform;
    int fan_in = 1;
};

// Full parameter layout for a config, in deterministic order.
std::vector<ParamSpec> param_specs(const DenoiserConfig& cfg);

// Sinusoidal timestep features: half sine / half cosine with geometric
// angular frequencies from 1 down to 1e-4.
template <typename T>
std::vector<T> sinusoidal_time_embed(int t, int dim) {
    if (dim % 2 != 0) throw ContractError("time embedding dimension must be even");
    int half = dim / 2;
    std::vector<T> e(static_cast<size_t>(dim));
    for (int i = 0; i < half; ++i) {
        double expo = (half == 1) ? 0.0 : static_cast<double>(i) / (half - 1);
        double omega = std::pow(10000.0, -expo);
        e[i] = static_cast<T>(std::sin(t * omega));
        e[half + i] = static_cast<T>(std::cos(t * omega));
    }
    return e;
}

// Fixed 2-D sin-cos positional table for a gh x gw token grid, [gh*gw, dim].
template <typename T>
std::vector<T> pos_embed_2d(int gh, int gw, int dim) {
    if (dim % 4 != 0) throw ContractError("positional embedding dimension must be divisible by 4");
    int dh = dim / 2;      // half for the row coordinate, half for the column
    int quarter = dh / 2;  // sin/cos split within each half
    std::vector<T> table(static_cast<size_t>(gh) * gw * dim);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            T* row = table.data() + (static_cast<int64_t>(gy) * gw + gx) * dim;
            for (int i = 0; i < quarter; ++i) {
                double omega = std::pow(10000.0, -static_cast<double>(i) / quarter);
                row[i] = static_cast<T>(std::sin(gy * omega));
                row[quarter + i] = static_cast<T>(std::cos(gy * omega));
                row[dh + i] = static_cast<T>(std::sin(gx * omega));
                row[dh + quarter + i] = static_cast<T>(std::cos(gx * omega));
            }
        }
    return table;
}

template <typename T>
ParamStoreT<T> init_params_t(const DenoiserConfig& cfg, uint64_t seed) {
    std::vector<ParamSpec> specs = param_specs(cfg);
    ParamStoreT<T> store;
    for (size_t idx = 0; idx < specs.size(); ++idx) {
        const ParamSpec& sp = specs[idx];
        int64_t n = TensorT<T>::count(sp.shape);
        std::vector<T> data(static_cast<size_t>(n));
        switch (sp.init) {
            case ParamInit::Zero:
                break;
            case ParamInit::One:
                std::fill(data.begin(), data.end(), T(1));
                break;
            case ParamInit::FanInUniform: {
                double bound = 1.0 / std::sqrt(static_cast<double>(sp.fan_in));
                for (int64_t j = 0; j < n; ++j) {
                    double u = rng::uniform(seed, rng::Stream::ParamInit, static_cast<uint64_t>(idx),
                                            static_cast<uint64_t>(j));
                    data[static_cast<size_t>(j)] = static_cast<T>(bound * (2.0 * u - 1.0));
                }
                break;
            }
        }
        store.add(sp.name, sp.shape, std::move(data));
    }
    return store;
}

ParamStore init_params(const DenoiserConfig& cfg, uint64_t seed);

// Registers every parameter as a tape leaf. The store must outlive the tape.
template <typename T>
std::unordered_map<std::string, ad::NodeT<T>*> make_leaf_map(ad::TapeT<T>& tape, const ParamStoreT<T>& store,
                                                             bool needs_grad) {
    std::unordered_map<std::string, ad::NodeT<T>*> m;
    m.reserve(store.entries.size());
    for (const auto& e : store.entries) m.emplace(e.name, tape.leaf(e.data.data(), e.shape, needs_grad));
    return m;
}

namespace graph {

template <typename T>
using Leaves = std::unordered_map<std::string, ad::NodeT<T>*>;

template <typename T>
ad::NodeT<T>* leaf_of(const Leaves<T>& P, const std::string& name) {
    auto it = P.find(name);
    if (it == P.end()) throw ContractError("graph references unknown parameter: " + name);
    return it->second;
}

// Conditioning embedding: 2-layer projection of the sinusoidal timestep
// features plus a learned label row, summed.
template <typename T>
ad::NodeT<T>* build_conditioning(ad::TapeT<T>& tape, const Leaves<T>& P, const DenoiserConfig& cfg, int t,
                                 ConditionLabel y) {
    using namespace ad;
    NodeT<T>* sin_t = tape.constant(sinusoidal_time_embed<T>(t, cfg.embed_dim), {1, cfg.embed_dim});
    NodeT<T>* h = linear(tape, sin_t, leaf_of(P, "time_mlp.fc1.weight"), leaf_of(P, "time_mlp.fc1.bias"));
    h = silu(tape, h);
    h = linear(tape, h, leaf_of(P, "time_mlp.fc2.weight"), leaf_of(P, "time_mlp.fc2.bias"));
    NodeT<T>* lab = embed_row(tape, leaf_of(P, "label_embed.table"), static_cast<int>(y));
    return add(tape, h, lab);
}

template <typename T>
ad::NodeT<T>* build_unet_forward(ad::TapeT<T>& tape, const Leaves<T>& P, const DenoiserConfig& cfg,
                                 ad::NodeT<T>* x, ad::NodeT<T>* emb);

template <typename T>
ad::NodeT<T>* build_dit_forward(ad::TapeT<T>& tape, const Leaves<T>& P, const DenoiserConfig& cfg,
                                ad::NodeT<T>* x, ad::NodeT<T>* emb);

// Full noise-prediction forward pass for either backend.
template <typename T>
ad::NodeT<T>* build_denoiser_forward(ad::TapeT<T>& tape, const Leaves<T>& P, const DenoiserConfig& cfg,
                                     ad::NodeT<T>* x, int t, ConditionLabel y) {
    if (t < 1) throw ContractError("predict_noise requires t >= 1");
    ad::NodeT<T>* emb = build_conditioning(tape, P, cfg, t, y);
    return cfg.backend == Backend::Unet ? build_unet_forward(tape, P, cfg, x, emb)
                                        : build_dit_forward(tape, P, cfg, x, emb);
}

}  // namespace graph

// eps_theta(x_t, t, y): single-image inference entry point.
Tensor predict_noise(const ParamStore& params, const DenoiserConfig& cfg, const Tensor& xt, int t,
                     ConditionLabel y);

}  // namespace cfdiff

#include "cfdiff/denoiser_graph.hpp"
