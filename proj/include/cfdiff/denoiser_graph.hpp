#pragma once

// Backend graph builders. Included at the end of denoiser.hpp; do not include
// directly.

namespace cfdiff::graph {

namespace detail {

inline int gn_groups(int channels) { return channels < 8 ? channels : 8; }

// Residual block: GN -> SiLU -> conv3x3, add conditioning as a per-channel
// bias, GN -> SiLU -> conv3x3, plus a 1x1 projection skip when the channel
// count changes.
template <typename T>
ad::NodeT<T>* res_block(ad::TapeT<T>& tape, const Leaves<T>& P, const std::string& prefix,
                        ad::NodeT<T>* x, ad::NodeT<T>* emb, int cin, int cout) {
    using namespace ad;
    NodeT<T>* h = group_norm(tape, x, leaf_of(P, prefix + ".gn1.gamma"), leaf_of(P, prefix + ".gn1.beta"),
                             gn_groups(cin), T(1e-5));
    h = silu(tape, h);
    h = conv2d(tape, h, leaf_of(P, prefix + ".conv1.weight"), leaf_of(P, prefix + ".conv1.bias"), 1, 1);
    NodeT<T>* v = linear(tape, silu(tape, emb), leaf_of(P, prefix + ".emb.weight"), leaf_of(P, prefix + ".emb.bias"));
    h = add_channel_bias(tape, h, v);
    h = group_norm(tape, h, leaf_of(P, prefix + ".gn2.gamma"), leaf_of(P, prefix + ".gn2.beta"),
                   gn_groups(cout), T(1e-5));
    h = silu(tape, h);
    h = conv2d(tape, h, leaf_of(P, prefix + ".conv2.weight"), leaf_of(P, prefix + ".conv2.bias"), 1, 1);
    NodeT<T>* skip = x;
    if (cin != cout)
        skip = conv2d(tape, x, leaf_of(P, prefix + ".skip.weight"), leaf_of(P, prefix + ".skip.bias"), 1, 0);
    return add(tape, h, skip);
}

template <typename T>
ad::NodeT<T>* attention(ad::TapeT<T>& tape, const Leaves<T>& P, const std::string& prefix,
                        ad::NodeT<T>* x, int n_heads) {
    using namespace ad;
    int D = x->shape[1];
    int dh = D / n_heads;
    NodeT<T>* qkv = linear(tape, x, leaf_of(P, prefix + ".qkv.weight"), leaf_of(P, prefix + ".qkv.bias"));
    NodeT<T>* q = slice_cols(tape, qkv, 0, D);
    NodeT<T>* k = slice_cols(tape, qkv, D, D);
    NodeT<T>* v = slice_cols(tape, qkv, 2 * D, D);
    std::vector<NodeT<T>*> heads;
    heads.reserve(static_cast<size_t>(n_heads));
    T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (int h = 0; h < n_heads; ++h) {
        NodeT<T>* qh = slice_cols(tape, q, h * dh, dh);
        NodeT<T>* kh = slice_cols(tape, k, h * dh, dh);
        NodeT<T>* vh = slice_cols(tape, v, h * dh, dh);
        NodeT<T>* scores = scale(tape, matmul_nt(tape, qh, kh), inv_sqrt);
        NodeT<T>* attn = softmax_rows(tape, scores);
        heads.push_back(matmul(tape, attn, vh));
    }
    NodeT<T>* merged = concat_cols(tape, heads);
    return linear(tape, merged, leaf_of(P, prefix + ".proj.weight"), leaf_of(P, prefix + ".proj.bias"));
}

}  // namespace detail

template <typename T>
ad::NodeT<T>* build_unet_forward(ad::TapeT<T>& tape, const Leaves<T>& P, const DenoiserConfig& cfg,
                                 ad::NodeT<T>* x, ad::NodeT<T>* emb) {
    using namespace ad;
    NodeT<T>* h = conv2d(tape, x, leaf_of(P, "unet.stem.weight"), leaf_of(P, "unet.stem.bias"), 1, 1);
    std::vector<NodeT<T>*> skips;
    for (int l = 0; l + 1 < cfg.depth; ++l) {
        int wl = cfg.base_width << l;
        std::string lv = "unet.down" + std::to_string(l);
        h = detail::res_block(tape, P, lv + ".res", h, emb, wl, wl);
        skips.push_back(h);
        h = conv2d(tape, h, leaf_of(P, lv + ".pool.weight"), leaf_of(P, lv + ".pool.bias"), 2, 1);
    }
    int wmid = cfg.base_width << (cfg.depth - 1);
    h = detail::res_block(tape, P, "unet.mid.res", h, emb, wmid, wmid);
    for (int l = cfg.depth - 2; l >= 0; --l) {
        int wl = cfg.base_width << l;
        std::string lv = "unet.up" + std::to_string(l);
        h = upsample_nearest2(tape, h);
        h = conv2d(tape, h, leaf_of(P, lv + ".conv.weight"), leaf_of(P, lv + ".conv.bias"), 1, 1);
        h = concat_channels(tape, h, skips[static_cast<size_t>(l)]);
        h = detail::res_block(tape, P, lv + ".res", h, emb, 2 * wl, wl);
    }
    h = group_norm(tape, h, leaf_of(P, "unet.head.gn.gamma"), leaf_of(P, "unet.head.gn.beta"),
                   detail::gn_groups(cfg.base_width), T(1e-5));
    h = silu(tape, h);
    return conv2d(tape, h, leaf_of(P, "unet.head.conv.weight"), leaf_of(P, "unet.head.conv.bias"), 1, 1);
}

// DiT-style blocks: adaLN-modulated self-attention and MLP with zero-init
// gates, fixed 2-D sin-cos positions, linear head, unpatchify.
template <typename T>
ad::NodeT<T>* build_dit_forward(ad::TapeT<T>& tape, const Leaves<T>& P, const DenoiserConfig& cfg,
                                ad::NodeT<T>* x, ad::NodeT<T>* emb) {
    using namespace ad;
    int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    int p = cfg.patch_size;
    int D = cfg.hidden_dim;
    int gh = H / p, gw = W / p;

    NodeT<T>* tokens = patchify(tape, x, p);
    tokens = linear(tape, tokens, leaf_of(P, "dit.patch_embed.weight"), leaf_of(P, "dit.patch_embed.bias"));
    NodeT<T>* pos = tape.constant(pos_embed_2d<T>(gh, gw, D), {gh * gw, D});
    tokens = add(tape, tokens, pos);

    NodeT<T>* cond = silu(tape, emb);
    for (int b = 0; b < cfg.n_blocks; ++b) {
        std::string bp = "dit.block" + std::to_string(b);
        NodeT<T>* mod = linear(tape, cond, leaf_of(P, bp + ".adaln.weight"), leaf_of(P, bp + ".adaln.bias"));
        NodeT<T>* shift_msa = slice_cols(tape, mod, 0, D);
        NodeT<T>* scale_msa = slice_cols(tape, mod, D, D);
        NodeT<T>* gate_msa = slice_cols(tape, mod, 2 * D, D);
        NodeT<T>* shift_mlp = slice_cols(tape, mod, 3 * D, D);
        NodeT<T>* scale_mlp = slice_cols(tape, mod, 4 * D, D);
        NodeT<T>* gate_mlp = slice_cols(tape, mod, 5 * D, D);

        NodeT<T>* a = layer_norm_rows(tape, tokens, T(1e-6));
        a = modulate(tape, a, shift_msa, scale_msa);
        a = detail::attention(tape, P, bp + ".attn", a, cfg.n_heads);
        tokens = add(tape, tokens, gate_rows(tape, a, gate_msa));

        NodeT<T>* m = layer_norm_rows(tape, tokens, T(1e-6));
        m = modulate(tape, m, shift_mlp, scale_mlp);
        m = linear(tape, m, leaf_of(P, bp + ".mlp.fc1.weight"), leaf_of(P, bp + ".mlp.fc1.bias"));
        m = gelu(tape, m);
        m = linear(tape, m, leaf_of(P, bp + ".mlp.fc2.weight"), leaf_of(P, bp + ".mlp.fc2.bias"));
        tokens = add(tape, tokens, gate_rows(tape, m, gate_mlp));
    }

    NodeT<T>* mod = linear(tape, cond, leaf_of(P, "dit.final.adaln.weight"), leaf_of(P, "dit.final.adaln.bias"));
    NodeT<T>* shift = slice_cols(tape, mod, 0, D);
    NodeT<T>* scalev = slice_cols(tape, mod, D, D);
    NodeT<T>* out = layer_norm_rows(tape, tokens, T(1e-6));
    out = modulate(tape, out, shift, scalev);
    out = linear(tape, out, leaf_of(P, "dit.final.head.weight"), leaf_of(P, "dit.final.head.bias"));
    return unpatchify(tape, out, C, H, W, p);
}

}  // namespace cfdiff::graph
