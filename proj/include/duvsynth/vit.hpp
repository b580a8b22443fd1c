#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "nn.hpp"
#include "tensor.hpp"

namespace duvsynth {

struct VitConfig {
    int64_t side = 32;        // native input side
    int64_t channels = 3;
    int64_t sub_patch = 4;    // P
    int64_t dim = 64;         // D
    int64_t layers = 4;       // L
    int64_t heads = 4;
    int64_t mlp_hidden = 256;

    int64_t grid() const { return side / sub_patch; }
    int64_t tokens() const { return grid() * grid(); }
};

// Input sequence of Eq.-7 style patch tokenization: projected sub-patches,
// prepended class token, added positional table.
struct PatchSequence {
    Tensor sub_patch_embeddings;  // [N x D]
    Tensor class_token;           // [1 x D]
    Tensor positional;            // [(N+1) x D]
    Tensor tokens;                // class + sub-patches + positional
};

// Pre-norm transformer encoder layer: LN -> MHSA -> residual, LN -> MLP ->
// residual.
struct VitEncoderLayer {
    LayerNorm ln1, ln2;
    Linear wq, wk, wv, wo, fc1, fc2;
    int64_t heads = 1;
    int64_t dim = 0;

    void init(int64_t d, int64_t n_heads, int64_t mlp_hidden, Rng& rng) {
        if (d % n_heads != 0) throw ParameterError("vit: heads must divide dim");
        dim = d;
        heads = n_heads;
        ln1.init(d);
        ln2.init(d);
        wq.init(d, d, rng);
        wk.init(d, d, rng);
        wv.init(d, d, rng);
        wo.init(d, d, rng);
        fc1.init(d, mlp_hidden, rng);
        fc2.init(mlp_hidden, d, rng);
    }

    Tensor forward(const Tensor& x) const {
        Tensor h = ln1.forward(x);
        Tensor q = wq.forward(h);
        Tensor k = wk.forward(h);
        Tensor v = wv.forward(h);
        int64_t dh = dim / heads;
        Tensor att;
        for (int64_t hd = 0; hd < heads; ++hd) {
            Tensor qh = slice(q, 1, hd * dh, dh);
            Tensor kh = slice(k, 1, hd * dh, dh);
            Tensor vh = slice(v, 1, hd * dh, dh);
            Tensor ah = scaled_dot_product_attention(qh, kh, vh);
            att = hd == 0 ? ah : concat(att, ah, 1);
        }
        Tensor res1 = add(x, wo.forward(att));
        Tensor m = fc2.forward(gelu(fc1.forward(ln2.forward(res1))));
        return add(res1, m);
    }

    NamedParams params() {
        NamedParams p;
        append_params(p, "ln1", ln1.params());
        append_params(p, "ln2", ln2.params());
        append_params(p, "wq", wq.params());
        append_params(p, "wk", wk.params());
        append_params(p, "wv", wv.params());
        append_params(p, "wo", wo.params());
        append_params(p, "fc1", fc1.params());
        append_params(p, "fc2", fc2.params());
        return p;
    }
};

namespace detail {

// Bilinear interpolation matrix from a g x g grid to a gl x gl grid, same
// sampling convention as resize_bilinear. Constant, so gradients flow only
// into the positional table it multiplies.
inline Tensor pos_interp_matrix(int64_t g, int64_t gl) {
    Tensor m(Shape{gl * gl, g * g});
    double s = static_cast<double>(g) / static_cast<double>(gl);
    for (int64_t iy = 0; iy < gl; ++iy) {
        double fy = (static_cast<double>(iy) + 0.5) * s - 0.5;
        int64_t y0 = static_cast<int64_t>(std::floor(fy));
        double wy = fy - static_cast<double>(y0);
        int64_t y0c = std::clamp<int64_t>(y0, 0, g - 1);
        int64_t y1c = std::clamp<int64_t>(y0 + 1, 0, g - 1);
        for (int64_t ix = 0; ix < gl; ++ix) {
            double fx = (static_cast<double>(ix) + 0.5) * s - 0.5;
            int64_t x0 = static_cast<int64_t>(std::floor(fx));
            double wx = fx - static_cast<double>(x0);
            int64_t x0c = std::clamp<int64_t>(x0, 0, g - 1);
            int64_t x1c = std::clamp<int64_t>(x0 + 1, 0, g - 1);
            int64_t row = iy * gl + ix;
            m.data()[row * g * g + y0c * g + x0c] += (1 - wy) * (1 - wx);
            m.data()[row * g * g + y0c * g + x1c] += (1 - wy) * wx;
            m.data()[row * g * g + y1c * g + x0c] += wy * (1 - wx);
            m.data()[row * g * g + y1c * g + x1c] += wy * wx;
        }
    }
    return m;
}

}  // namespace detail

struct VitBackbone {
    VitConfig cfg;
    Tensor patch_proj;  // E: [P*P*C x D]
    Tensor cls_token;   // [1 x D]
    Tensor pos;         // [(N+1) x D] at the native side
    std::vector<VitEncoderLayer> layers;
    LayerNorm ln_final;

    void init(const VitConfig& c, Rng& rng) {
        cfg = c;
        if (c.side % c.sub_patch != 0) throw DimensionError("vit: sub_patch must divide side");
        int64_t pdim = c.sub_patch * c.sub_patch * c.channels;
        patch_proj = Tensor::param(Shape{pdim, c.dim}, rng, 1.0 / std::sqrt(static_cast<double>(pdim)));
        cls_token = Tensor::param(Shape{1, c.dim}, rng, 0.02);
        pos = Tensor::param(Shape{c.tokens() + 1, c.dim}, rng, 0.02);
        layers.resize(static_cast<size_t>(c.layers));
        for (auto& l : layers) l.init(c.dim, c.heads, c.mlp_hidden, rng);
        ln_final.init(c.dim);
    }

    // Flattens each P x P x C sub-patch of the image to a row. Pure data
    // rearrangement; images are not gradient paths.
    Tensor sub_patch_rows(const Tensor& image) const {
        if (image.rank() != 3 || image.dim(2) != cfg.channels)
            throw DimensionError("vit: expects [side x side x " + std::to_string(cfg.channels) + "] image, got " +
                                 shape_str(image.shape()));
        int64_t side = image.dim(0);
        if (image.dim(1) != side) throw DimensionError("vit: image must be square");
        int64_t p = cfg.sub_patch;
        if (side % p != 0) throw DimensionError("vit: image side not divisible by sub-patch size");
        int64_t g = side / p;
        int64_t c = cfg.channels;
        Tensor rows(Shape{g * g, p * p * c});
        for (int64_t gy = 0; gy < g; ++gy)
            for (int64_t gx = 0; gx < g; ++gx) {
                double* dst = rows.data() + (gy * g + gx) * p * p * c;
                for (int64_t py = 0; py < p; ++py)
                    for (int64_t px = 0; px < p; ++px)
                        for (int64_t ci = 0; ci < c; ++ci)
                            dst[(py * p + px) * c + ci] =
                                image.data()[((gy * p + py) * side + (gx * p + px)) * c + ci];
            }
        return rows;
    }

    Tensor positional_for(int64_t grid_side) const {
        int64_t g = cfg.grid();
        Tensor cls_pos = slice(pos, 0, 0, 1);
        Tensor body = slice(pos, 0, 1, g * g);
        if (grid_side == g) return concat(cls_pos, body, 0);
        Tensor m = detail::pos_interp_matrix(g, grid_side);
        return concat(cls_pos, matmul(m, body), 0);
    }

    PatchSequence embed_patch(const Tensor& image) const {
        Tensor rows = sub_patch_rows(image);
        int64_t grid_side = image.dim(0) / cfg.sub_patch;
        PatchSequence seq;
        seq.sub_patch_embeddings = matmul(rows, patch_proj);
        seq.class_token = cls_token;
        seq.positional = positional_for(grid_side);
        seq.tokens = add(concat(cls_token, seq.sub_patch_embeddings, 0), seq.positional);
        return seq;
    }

    // Runs the L encoder layers; returns the full (N+1) x D sequence.
    Tensor encode(const Tensor& image) const {
        Tensor h = embed_patch(image).tokens;
        for (const auto& l : layers) h = l.forward(h);
        return h;
    }

    // LN(class token) after the encoder stack: the backbone feature.
    Tensor class_feature(const Tensor& image) const {
        return ln_final.forward(slice(encode(image), 0, 0, 1));
    }

    NamedParams params() {
        NamedParams p;
        p.emplace_back("patch_proj", &patch_proj);
        p.emplace_back("cls_token", &cls_token);
        p.emplace_back("pos", &pos);
        for (size_t i = 0; i < layers.size(); ++i) append_params(p, "layer" + std::to_string(i), layers[i].params());
        append_params(p, "ln_final", ln_final.params());
        return p;
    }
};

}  // namespace duvsynth
