#include "cfdiff/denoiser.hpp"

namespace cfdiff {

void validate_config(const DenoiserConfig& cfg, int H, int W) {
    if (cfg.channels_in < 1) throw ContractError("channels_in must be positive");
    if (cfg.n_classes < 3) throw ContractError("n_classes must include healthy/unhealthy/null");
    if (cfg.embed_dim % 2 != 0) throw ContractError("embed_dim must be even");
    if (cfg.backend == Backend::Unet) {
        if (cfg.depth < 1) throw ContractError("unet depth must be >= 1");
        int div = 1 << (cfg.depth - 1);
        if (H % div != 0 || W % div != 0)
            throw ContractError("image side must be divisible by 2^(depth-1)");
    } else {
        if (cfg.hidden_dim % cfg.n_heads != 0)
            throw ContractError("hidden_dim must be divisible by n_heads");
        if (cfg.hidden_dim % 4 != 0) throw ContractError("hidden_dim must be divisible by 4");
        if (H % cfg.patch_size != 0 || W % cfg.patch_size != 0)
            throw ContractError("image side must be divisible by patch_size");
    }
}

namespace {

void add_linear(std::vector<ParamSpec>& v, const std::string& prefix, int dout, int din, bool zero = false) {
    ParamInit wi = zero ? ParamInit::Zero : ParamInit::FanInUniform;
    v.push_back({prefix + ".weight", {dout, din}, wi, din});
    v.push_back({prefix + ".bias", {1, dout}, ParamInit::Zero, din});
}

void add_conv(std::vector<ParamSpec>& v, const std::string& prefix, int cout, int cin, int k) {
    v.push_back({prefix + ".weight", {cout, cin, k, k}, ParamInit::FanInUniform, cin * k * k});
    v.push_back({prefix + ".bias", {1, cout}, ParamInit::Zero, cin * k * k});
}

void add_group_norm(std::vector<ParamSpec>& v, const std::string& prefix, int c) {
    v.push_back({prefix + ".gamma", {1, c}, ParamInit::One, 1});
    v.push_back({prefix + ".beta", {1, c}, ParamInit::Zero, 1});
}

void add_res_block(std::vector<ParamSpec>& v, const std::string& prefix, int cin, int cout, int embed_dim) {
    add_group_norm(v, prefix + ".gn1", cin);
    add_conv(v, prefix + ".conv1", cout, cin, 3);
    add_linear(v, prefix + ".emb", cout, embed_dim);
    add_group_norm(v, prefix + ".gn2", cout);
    add_conv(v, prefix + ".conv2", cout, cout, 3);
    if (cin != cout) add_conv(v, prefix + ".skip", cout, cin, 1);
}

}  // namespace

std::vector<ParamSpec> param_specs(const DenoiserConfig& cfg) {
    std::vector<ParamSpec> v;
    add_linear(v, "time_mlp.fc1", cfg.embed_dim, cfg.embed_dim);
    add_linear(v, "time_mlp.fc2", cfg.embed_dim, cfg.embed_dim);
    v.push_back({"label_embed.table", {cfg.n_classes, cfg.embed_dim}, ParamInit::FanInUniform, cfg.embed_dim});

    if (cfg.backend == Backend::Unet) {
        add_conv(v, "unet.stem", cfg.base_width, cfg.channels_in, 3);
        for (int l = 0; l + 1 < cfg.depth; ++l) {
            int wl = cfg.base_width << l;
            std::string lv = "unet.down" + std::to_string(l);
            add_res_block(v, lv + ".res", wl, wl, cfg.embed_dim);
            add_conv(v, lv + ".pool", 2 * wl, wl, 3);
        }
        int wmid = cfg.base_width << (cfg.depth - 1);
        add_res_block(v, "unet.mid.res", wmid, wmid, cfg.embed_dim);
        for (int l = cfg.depth - 2; l >= 0; --l) {
            int wl = cfg.base_width << l;
            std::string lv = "unet.up" + std::to_string(l);
            add_conv(v, lv + ".conv", wl, 2 * wl, 3);
            add_res_block(v, lv + ".res", 2 * wl, wl, cfg.embed_dim);
        }
        add_group_norm(v, "unet.head.gn", cfg.base_width);
        add_conv(v, "unet.head.conv", cfg.channels_in, cfg.base_width, 3);
    } else {
        int D = cfg.hidden_dim;
        int tok = cfg.patch_size * cfg.patch_size * cfg.channels_in;
        add_linear(v, "dit.patch_embed", D, tok);
        for (int b = 0; b < cfg.n_blocks; ++b) {
            std::string bp = "dit.block" + std::to_string(b);
            add_linear(v, bp + ".adaln", 6 * D, cfg.embed_dim, /*zero=*/true);
            add_linear(v, bp + ".attn.qkv", 3 * D, D);
            add_linear(v, bp + ".attn.proj", D, D);
            add_linear(v, bp + ".mlp.fc1", 4 * D, D);
            add_linear(v, bp + ".mlp.fc2", D, 4 * D);
        }
        add_linear(v, "dit.final.adaln", 2 * D, cfg.embed_dim, /*zero=*/true);
        add_linear(v, "dit.final.head", tok, D);
    }
    return v;
}

ParamStore init_params(const DenoiserConfig& cfg, uint64_t seed) { return init_params_t<float>(cfg, seed); }

Tensor predict_noise(const ParamStore& params, const DenoiserConfig& cfg, const Tensor& xt, int t,
                     ConditionLabel y) {
    if (xt.shape.size() != 3 || xt.shape[0] != cfg.channels_in)
        throw ContractError("predict_noise: input must be [channels_in, H, W]");
    validate_config(cfg, xt.shape[1], xt.shape[2]);
    ad::TapeT<float> tape(/*grad_enabled=*/false);
    auto leaves = make_leaf_map(tape, params, /*needs_grad=*/false);
    ad::NodeT<float>* x = tape.leaf(xt.ptr(), xt.shape, false);
    ad::NodeT<float>* out = graph::build_denoiser_forward(tape, leaves, cfg, x, t, y);
    Tensor result(out->shape);
    std::copy(out->val, out->val + out->n, result.ptr());
    return result;
}

}  // namespace cfdiff
