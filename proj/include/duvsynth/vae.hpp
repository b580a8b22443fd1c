#pragma once

#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "csv.hpp"
#include "nn.hpp"
#include "tensor.hpp"

namespace duvsynth {

// Latent grid produced by the encoder; spatial dims are the image dims
// divided by the (structural) downsampling factor.
struct LatentTensor {
    Tensor data;  // [h x w x d]
    int64_t scale_factor = 4;
};

struct VaeConfig {
    int64_t latent_channels = 4;  // d
    int64_t base_width = 32;
    double kl_weight = 1e-4;
    double lr = 1e-3;
    int64_t epochs = 6;
    int64_t batch_size = 16;
    int64_t max_patches = 0;  // 0 = use all
};

// Two stride-2 conv blocks plus a residual block on each side: the smallest
// stack realizing f = 4.
struct VaeParams {
    static constexpr int64_t kScaleFactor = 4;
    Conv2d enc1, enc2, enc_res_a, enc_res_b, enc_head;
    Conv2d dec_in, dec_res_a, dec_res_b, dec_up1, dec_up2, dec_out;
    int64_t latent_channels = 4;

    void init(const VaeConfig& cfg, Rng& rng, int64_t image_channels = 3) {
        latent_channels = cfg.latent_channels;
        int64_t w = cfg.base_width;
        enc1.init(3, 3, image_channels, w, 2, 1, rng);
        enc2.init(3, 3, w, 2 * w, 2, 1, rng);
        enc_res_a.init(3, 3, 2 * w, 2 * w, 1, 1, rng);
        enc_res_b.init(3, 3, 2 * w, 2 * w, 1, 1, rng);
        enc_head.init(3, 3, 2 * w, 2 * latent_channels, 1, 1, rng);  // mean and log-variance heads
        dec_in.init(3, 3, latent_channels, 2 * w, 1, 1, rng);
        dec_res_a.init(3, 3, 2 * w, 2 * w, 1, 1, rng);
        dec_res_b.init(3, 3, 2 * w, 2 * w, 1, 1, rng);
        dec_up1.init(3, 3, 2 * w, w, 1, 1, rng);
        dec_up2.init(3, 3, w, w / 2, 1, 1, rng);
        dec_out.init(3, 3, w / 2, image_channels, 1, 1, rng);
    }

    NamedParams params() {
        NamedParams p;
        append_params(p, "enc1", enc1.params());
        append_params(p, "enc2", enc2.params());
        append_params(p, "enc_res_a", enc_res_a.params());
        append_params(p, "enc_res_b", enc_res_b.params());
        append_params(p, "enc_head", enc_head.params());
        append_params(p, "dec_in", dec_in.params());
        append_params(p, "dec_res_a", dec_res_a.params());
        append_params(p, "dec_res_b", dec_res_b.params());
        append_params(p, "dec_up1", dec_up1.params());
        append_params(p, "dec_up2", dec_up2.params());
        append_params(p, "dec_out", dec_out.params());
        return p;
    }
};

struct LatentStats {
    Tensor mean;     // [h x w x d]
    Tensor log_var;  // [h x w x d]
};

inline void check_codec_input(const VaeParams& params, const Tensor& patch) {
    if (patch.rank() != 3) throw DimensionError("vae: expects [H x W x C] patch, got " + shape_str(patch.shape()));
    if (patch.dim(0) % VaeParams::kScaleFactor != 0 || patch.dim(1) % VaeParams::kScaleFactor != 0)
        throw DimensionError("vae: image dims " + shape_str(patch.shape()) + " not divisible by f=" +
                             std::to_string(VaeParams::kScaleFactor));
    (void)params;
}

inline LatentStats encode_stats(const VaeParams& p, const Tensor& patch) {
    check_codec_input(p, patch);
    Tensor h = gelu(p.enc1.forward(patch));
    h = gelu(p.enc2.forward(h));
    h = add(h, p.enc_res_b.forward(gelu(p.enc_res_a.forward(h))));
    Tensor stats = p.enc_head.forward(h);  // [h x w x 2d]
    LatentStats out;
    out.mean = slice(stats, 2, 0, p.latent_channels);
    out.log_var = slice(stats, 2, p.latent_channels, p.latent_channels);
    return out;
}

// sample=false returns the posterior mean (deterministic; what diffusion
// trains on), sample=true the reparameterized draw mean + sigma * eps.
inline LatentTensor encode(const VaeParams& p, const Tensor& patch, Rng& rng, bool sample) {
    LatentStats st = encode_stats(p, patch);
    LatentTensor z;
    z.scale_factor = VaeParams::kScaleFactor;
    if (!sample) {
        z.data = st.mean;
        return z;
    }
    Tensor eps = Tensor::randn(st.mean.shape(), rng);
    Tensor sigma = duvsynth::exp(scale(st.log_var, 0.5));
    z.data = add(st.mean, mul(sigma, eps));
    return z;
}

inline Tensor decode(const VaeParams& p, const LatentTensor& z) {
    if (z.data.rank() != 3 || z.data.dim(2) != p.latent_channels)
        throw DimensionError("vae decode: latent shape " + shape_str(z.data.shape()) + " does not match config");
    Tensor h = p.dec_in.forward(z.data);
    h = add(h, p.dec_res_b.forward(gelu(p.dec_res_a.forward(h))));
    h = gelu(p.dec_up1.forward(upsample_nearest_2x(h)));
    h = gelu(p.dec_up2.forward(upsample_nearest_2x(h)));
    return sigmoid(p.dec_out.forward(h));
}

// KL(N(mu, sigma^2) || N(0, I)) = 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2).
inline Tensor gaussian_kl(const Tensor& mean, const Tensor& log_var) {
    check_shapes_equal(mean.shape(), log_var.shape(), "gaussian_kl");
    Tensor ones = Tensor::ones(mean.shape());
    Tensor terms = sub(sub(add(mul(mean, mean), duvsynth::exp(log_var)), ones), log_var);
    return scale(sum(terms), 0.5);
}

// MSE reconstruction (per-pixel mean) + kl_weight * KL (summed over latent
// dims).
inline Tensor vae_loss(const VaeParams& p, const Tensor& patch, Rng& rng, double kl_weight) {
    LatentStats st = encode_stats(p, patch);
    Tensor eps = Tensor::randn(st.mean.shape(), rng);
    LatentTensor z;
    z.scale_factor = VaeParams::kScaleFactor;
    z.data = add(st.mean, mul(duvsynth::exp(scale(st.log_var, 0.5)), eps));
    Tensor recon = decode(p, z);
    Tensor diff = sub(recon, patch);
    Tensor mse = mean(mul(diff, diff));
    return add(mse, scale(gaussian_kl(st.mean, st.log_var), kl_weight));
}

struct TrainedVae {
    VaeParams params;
    // Per-channel stds of mean latents over the train set. Latents are
    // divided by these before diffusion and re-multiplied before decoding,
    // so every channel of the diffusion prior is unit scale.
    Tensor latent_stats;  // [d]

    Tensor normalize_latent(const Tensor& z) const {
        Tensor out = z.clone();
        int64_t d = latent_stats.numel();
        int64_t hw = z.numel() / d;
        for (int64_t i = 0; i < hw; ++i)
            for (int64_t c = 0; c < d; ++c) out.data()[i * d + c] /= latent_stats.data()[c];
        return out;
    }

    Tensor denormalize_latent(const Tensor& z) const {
        Tensor out = z.clone();
        int64_t d = latent_stats.numel();
        int64_t hw = z.numel() / d;
        for (int64_t i = 0; i < hw; ++i)
            for (int64_t c = 0; c < d; ++c) out.data()[i * d + c] *= latent_stats.data()[c];
        return out;
    }
};

// Pooled standard deviation of every element of every mean latent.
inline double global_latent_std(const VaeParams& p, const std::vector<Tensor>& patches, Rng& rng) {
    NoGradScope ng;
    double s = 0.0, s2 = 0.0;
    int64_t n = 0;
    for (const Tensor& patch : patches) {
        LatentTensor z = encode(p, patch, rng, false);
        for (int64_t i = 0; i < z.data.numel(); ++i) {
            double v = z.data.data()[i];
            s += v;
            s2 += v * v;
            ++n;
        }
    }
    double m = s / static_cast<double>(n);
    return std::sqrt(std::max(s2 / static_cast<double>(n) - m * m, 1e-12));
}

// Per-channel stds of mean latents, raw (before global-std normalization).
inline std::vector<double> latent_channel_stds(const VaeParams& p, const std::vector<Tensor>& patches, Rng& rng) {
    NoGradScope ng;
    int64_t d = p.latent_channels;
    std::vector<double> s(static_cast<size_t>(d), 0.0), s2(static_cast<size_t>(d), 0.0);
    int64_t per_chan = 0;
    for (const Tensor& patch : patches) {
        LatentTensor z = encode(p, patch, rng, false);
        int64_t hw = z.data.numel() / d;
        per_chan += hw;
        for (int64_t i = 0; i < hw; ++i)
            for (int64_t c = 0; c < d; ++c) {
                double v = z.data.data()[i * d + c];
                s[static_cast<size_t>(c)] += v;
                s2[static_cast<size_t>(c)] += v * v;
            }
    }
    std::vector<double> out(static_cast<size_t>(d));
    for (int64_t c = 0; c < d; ++c) {
        double m = s[static_cast<size_t>(c)] / static_cast<double>(per_chan);
        out[static_cast<size_t>(c)] =
            std::sqrt(std::max(s2[static_cast<size_t>(c)] / static_cast<double>(per_chan) - m * m, 0.0));
    }
    return out;
}

inline TrainedVae train_vae(const VaeConfig& cfg, const std::vector<Tensor>& patches, Rng& rng,
                            const std::string& log_csv_path = "") {
    if (patches.empty()) throw DataError("train_vae: no patches");
    TrainedVae tv;
    tv.params.init(cfg, rng, patches[0].dim(2));
    AdamW opt(cfg.lr);
    NamedParams np = tv.params.params();

    std::unique_ptr<CsvWriter> log;
    if (!log_csv_path.empty()) log = std::make_unique<CsvWriter>(log_csv_path, std::vector<std::string>{"epoch", "loss", "seconds"});

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        std::vector<size_t> order(patches.size());
        std::iota(order.begin(), order.end(), 0);
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        if (cfg.max_patches > 0 && static_cast<int64_t>(order.size()) > cfg.max_patches)
            order.resize(static_cast<size_t>(cfg.max_patches));

        double epoch_loss = 0.0;
        int64_t batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            TapeScope scope;
            Tensor batch_loss;
            for (size_t bi = start; bi < stop; ++bi) {
                Tensor l = vae_loss(tv.params, patches[order[bi]], rng, cfg.kl_weight);
                batch_loss = batch_loss.defined() ? add(batch_loss, l) : l;
            }
            batch_loss = scale(batch_loss, 1.0 / static_cast<double>(stop - start));
            assert_finite(batch_loss, "vae loss");
            scope.tape().backward(batch_loss);
            opt.step(np);
            epoch_loss += batch_loss.item();
            ++batches;
        }
        if (log) {
            double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            log->row({std::to_string(epoch), fmt_double(epoch_loss / static_cast<double>(batches)),
                      fmt_double(secs)});
        }
    }
    std::vector<double> stds = latent_channel_stds(tv.params, patches, rng);
    tv.latent_stats = Tensor(Shape{static_cast<int64_t>(stds.size())});
    for (size_t i = 0; i < stds.size(); ++i) tv.latent_stats.data()[i] = std::max(stds[i], 1e-8);
    return tv;
}

inline void save_vae(TrainedVae& tv, const std::string& path) {
    save_params(tv.params.params(), path, {{"latent_stats", tv.latent_stats}});
}

inline TrainedVae load_vae(const std::string& path, const VaeConfig& cfg, int64_t image_channels = 3) {
    TrainedVae tv;
    Rng init_rng(0);
    tv.params.init(cfg, init_rng, image_channels);
    Checkpoint ck = Checkpoint::load(path);
    load_params(tv.params.params(), ck);
    tv.latent_stats = ck.get("latent_stats");
    if (tv.latent_stats.numel() != cfg.latent_channels)
        throw DataError("vae checkpoint: latent_stats width does not match latent channels");
    return tv;
}

}  // namespace duvsynth
