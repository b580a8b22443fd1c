#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "csv.hpp"
#include "nn.hpp"
#include "tensor.hpp"
#include "vae.hpp"

namespace duvsynth {

// Precomputed beta/alpha/alpha_bar tables, 1-based in t to match the product
// definition; alpha_bar[0] = 1 by convention.
struct NoiseSchedule {
    int64_t T = 0;
    std::vector<double> beta;       // beta[0] unused
    std::vector<double> alpha;      // alpha[t] = 1 - beta[t]
    std::vector<double> alpha_bar;  // prod_{i<=t} alpha[i]
};

inline NoiseSchedule make_schedule(int64_t T, double beta_start, double beta_end) {
    if (T < 1) throw ParameterError("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ParameterError("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.assign(static_cast<size_t>(T + 1), 0.0);
    s.alpha.assign(static_cast<size_t>(T + 1), 1.0);
    s.alpha_bar.assign(static_cast<size_t>(T + 1), 1.0);
    for (int64_t t = 1; t <= T; ++t) {
        double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
        s.beta[static_cast<size_t>(t)] = beta_start + (beta_end - beta_start) * frac;
        s.alpha[static_cast<size_t>(t)] = 1.0 - s.beta[static_cast<size_t>(t)];
        s.alpha_bar[static_cast<size_t>(t)] =
            s.alpha_bar[static_cast<size_t>(t - 1)] * s.alpha[static_cast<size_t>(t)];
    }
    return s;
}

struct NoisedLatent {
    Tensor zt;
    Tensor eps;
};

// Forward marginal draw: zt = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
inline NoisedLatent q_sample(const NoiseSchedule& s, const Tensor& z0, int64_t t, Rng& rng) {
    if (t < 1 || t > s.T) throw ParameterError("q_sample: t out of range 1.." + std::to_string(s.T));
    double ab = s.alpha_bar[static_cast<size_t>(t)];
    double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
    NoisedLatent out;
    out.eps = Tensor::randn(z0.shape(), rng);
    out.zt = Tensor(z0.shape());
    for (int64_t i = 0; i < z0.numel(); ++i) out.zt.data()[i] = c0 * z0.data()[i] + c1 * out.eps.data()[i];
    return out;
}

/* --------------------------------------------------------- conditioning */

struct Conditioning {
    enum class Kind { SslEmbedding, ClassLabel, Null };
    Kind kind = Kind::Null;
    Tensor embedding;     // [D_e], SslEmbedding only
    int64_t class_id = -1;

    static Conditioning ssl(Tensor emb) {
        Conditioning c;
        c.kind = Kind::SslEmbedding;
        c.embedding = std::move(emb);
        return c;
    }
    static Conditioning class_label(int64_t id) {
        Conditioning c;
        c.kind = Kind::ClassLabel;
        c.class_id = id;
        return c;
    }
    static Conditioning none() { return Conditioning{}; }
};

inline const char* conditioning_kind_name(Conditioning::Kind k) {
    switch (k) {
        case Conditioning::Kind::SslEmbedding: return "ssl";
        case Conditioning::Kind::ClassLabel: return "class";
        default: return "null";
    }
}

/* -------------------------------------------------------------- denoiser */

struct DenoiserConfig {
    int64_t latent_channels = 4;
    int64_t width1 = 32;   // 8x8 stage
    int64_t width2 = 64;   // 4x4 stage
    int64_t cond_dim = 64; // conditioning payload width D_e
    int64_t time_dim = 64;
    int64_t time_sin_dim = 32;
    int64_t n_classes = 2;
};

// Conv res block with the timestep vector added per-channel between convs.
struct ResBlockT {
    Conv2d conv1, conv2, skip;
    Linear time_proj;
    bool project_skip = false;

    void init(int64_t cin, int64_t cout, int64_t time_dim, Rng& rng) {
        conv1.init(3, 3, cin, cout, 1, 1, rng);
        conv2.init(3, 3, cout, cout, 1, 1, rng);
        time_proj.init(time_dim, cout, rng);
        project_skip = cin != cout;
        if (project_skip) skip.init(1, 1, cin, cout, 1, 0, rng);
    }

    Tensor forward(const Tensor& x, const Tensor& temb) const {
        int64_t h = x.dim(0), w = x.dim(1);
        Tensor y = conv1.forward(x);
        int64_t cout = y.dim(2);
        Tensor flat = reshape(y, Shape{h * w, cout});
        flat = add_rowvec(flat, reshape(time_proj.forward(temb), Shape{cout}));
        y = conv2.forward(gelu(reshape(flat, Shape{h, w, cout})));
        Tensor sk = project_skip ? skip.forward(x) : x;
        return add(sk, y);
    }

    NamedParams params() {
        NamedParams p;
        append_params(p, "conv1", conv1.params());
        append_params(p, "conv2", conv2.params());
        append_params(p, "time_proj", time_proj.params());
        if (project_skip) append_params(p, "skip", skip.params());
        return p;
    }
};

// Cross-attention over flattened latent tokens; keys/values come from the
// single conditioning token.
struct CrossAttnBlock {
    LayerNorm ln;
    Linear to_q, to_k, to_v, to_out;

    void init(int64_t channels, int64_t cond_dim, Rng& rng) {
        ln.init(channels);
        to_q.init(channels, channels, rng);
        to_k.init(cond_dim, channels, rng);
        to_v.init(cond_dim, channels, rng);
        to_out.init(channels, channels, rng);
    }

    Tensor forward(const Tensor& x, const Tensor& cond_tok) const {
        int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
        Tensor tokens = reshape(x, Shape{h * w, c});
        Tensor q = to_q.forward(ln.forward(tokens));
        Tensor k = to_k.forward(cond_tok);
        Tensor v = to_v.forward(cond_tok);
        Tensor att = scaled_dot_product_attention(q, k, v);
        Tensor out = add(tokens, to_out.forward(att));
        return reshape(out, Shape{h, w, c});
    }

    NamedParams params() {
        NamedParams p;
        append_params(p, "ln", ln.params());
        append_params(p, "to_q", to_q.params());
        append_params(p, "to_k", to_k.params());
        append_params(p, "to_v", to_v.params());
        append_params(p, "to_out", to_out.params());
        return p;
    }
};

// Two-resolution U-Net with one cross-attention block per resolution.
struct DenoiserParams {
    DenoiserConfig cfg;
    Linear time_fc1, time_fc2;
    Conv2d conv_in, down, up_conv, conv_out;
    ResBlockT res1, res2, res_up;
    CrossAttnBlock attn1, attn2;
    Tensor null_token;   // learned unconditional token [1 x cond_dim]
    Tensor class_table;  // learned per-class tokens [n_classes x cond_dim]

    void init(const DenoiserConfig& c, Rng& rng) {
        cfg = c;
        time_fc1.init(c.time_sin_dim, c.time_dim, rng);
        time_fc2.init(c.time_dim, c.time_dim, rng);
        conv_in.init(3, 3, c.latent_channels, c.width1, 1, 1, rng);
        res1.init(c.width1, c.width1, c.time_dim, rng);
        attn1.init(c.width1, c.cond_dim, rng);
        down.init(3, 3, c.width1, c.width2, 2, 1, rng);
        res2.init(c.width2, c.width2, c.time_dim, rng);
        attn2.init(c.width2, c.cond_dim, rng);
        up_conv.init(3, 3, c.width2, c.width1, 1, 1, rng);
        res_up.init(2 * c.width1, c.width1, c.time_dim, rng);
        conv_out.init(3, 3, c.width1, c.latent_channels, 1, 1, rng);
        null_token = Tensor::param(Shape{1, c.cond_dim}, rng, 0.2);
        class_table = Tensor::param(Shape{c.n_classes, c.cond_dim}, rng, 0.2);
    }

    Tensor conditioning_token(const Conditioning& cond) const {
        switch (cond.kind) {
            case Conditioning::Kind::SslEmbedding: {
                if (cond.embedding.rank() != 1 || cond.embedding.numel() != cfg.cond_dim)
                    throw DimensionError("conditioning embedding width " +
                                         std::to_string(cond.embedding.numel()) + " != configured D_e " +
                                         std::to_string(cfg.cond_dim));
                return reshape(cond.embedding, Shape{1, cfg.cond_dim});
            }
            case Conditioning::Kind::ClassLabel: {
                if (cond.class_id < 0 || cond.class_id >= cfg.n_classes)
                    throw ParameterError("conditioning class id out of range");
                return slice(class_table, 0, cond.class_id, 1);
            }
            default:
                return null_token;
        }
    }

    NamedParams params() {
        NamedParams p;
        append_params(p, "time_fc1", time_fc1.params());
        append_params(p, "time_fc2", time_fc2.params());
        append_params(p, "conv_in", conv_in.params());
        append_params(p, "res1", res1.params());
        append_params(p, "attn1", attn1.params());
        append_params(p, "down", down.params());
        append_params(p, "res2", res2.params());
        append_params(p, "attn2", attn2.params());
        append_params(p, "up_conv", up_conv.params());
        append_params(p, "res_up", res_up.params());
        append_params(p, "conv_out", conv_out.params());
        p.emplace_back("null_token", &null_token);
        p.emplace_back("class_table", &class_table);
        return p;
    }
};

// eps_theta(z_t, t, y): same-shape noise prediction. Timestep enters via a
// sinusoidal embedding and per-channel addition inside the res blocks,
// conditioning via cross-attention at both resolutions.
inline Tensor denoise_predict(const DenoiserParams& p, const Tensor& zt, int64_t t, const Conditioning& cond) {
    if (zt.rank() != 3 || zt.dim(2) != p.cfg.latent_channels)
        throw DimensionError("denoise_predict: latent shape " + shape_str(zt.shape()) + " does not match config");
    if (zt.dim(0) % 2 != 0 || zt.dim(1) % 2 != 0)
        throw DimensionError("denoise_predict: latent dims must be even for the 2-resolution U-Net");
    Tensor sin_emb = reshape(timestep_embedding(t, p.cfg.time_sin_dim), Shape{1, p.cfg.time_sin_dim});
    Tensor temb = p.time_fc2.forward(gelu(p.time_fc1.forward(sin_emb)));
    Tensor tok = p.conditioning_token(cond);

    Tensor h = p.conv_in.forward(zt);
    h = p.res1.forward(h, temb);
    h = p.attn1.forward(h, tok);
    Tensor skip8 = h;
    h = gelu(p.down.forward(h));
    h = p.res2.forward(h, temb);
    h = p.attn2.forward(h, tok);
    h = gelu(p.up_conv.forward(upsample_nearest_2x(h)));
    h = p.res_up.forward(concat(h, skip8, 2), temb);
    return p.conv_out.forward(h);
}

// Pluggable denoiser signature; the library denoiser and test oracles both
// fit behind it.
using DenoiseFn = std::function<Tensor(const Tensor& zt, int64_t t, const Conditioning& cond)>;

struct LdmDrawInfo {
    int64_t t = 0;
    bool dropped = false;
};

// Eq.-5 style denoising loss with classifier-free conditioning dropout.
inline Tensor ldm_loss_fn(const DenoiseFn& fn, const NoiseSchedule& s, const Tensor& z0, const Conditioning& cond,
                          Rng& rng, double drop_prob, LdmDrawInfo* info = nullptr) {
    if (drop_prob < 0.0 || drop_prob > 1.0) throw ParameterError("ldm_loss: drop_prob must be in [0,1]");
    int64_t t = 1 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(s.T)));
    NoisedLatent nl = q_sample(s, z0, t, rng);
    bool drop = rng.coin(drop_prob);
    Conditioning used = drop ? Conditioning::none() : cond;
    if (info) {
        info->t = t;
        info->dropped = drop;
    }
    Tensor pred = fn(nl.zt, t, used);
    Tensor diff = sub(nl.eps, pred);
    return mean(mul(diff, diff));
}

inline Tensor ldm_loss(const DenoiserParams& p, const NoiseSchedule& s, const Tensor& z0, const Conditioning& cond,
                       Rng& rng, double drop_prob, LdmDrawInfo* info = nullptr) {
    return ldm_loss_fn([&p](const Tensor& zt, int64_t t, const Conditioning& c) { return denoise_predict(p, zt, t, c); },
                       s, z0, cond, rng, drop_prob, info);
}

// Classifier-free guidance mix: eps_uncond + s * (eps_cond - eps_uncond).
// The s = 0 and s = 1 endpoints return the inputs bit-exactly.
inline Tensor cfg_mix(const Tensor& eps_cond, const Tensor& eps_uncond, double s) {
    check_shapes_equal(eps_cond.shape(), eps_uncond.shape(), "cfg_mix");
    if (s == 1.0) return eps_cond.clone();
    if (s == 0.0) return eps_uncond.clone();
    Tensor out(eps_cond.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out.data()[i] = eps_uncond.data()[i] + s * (eps_cond.data()[i] - eps_uncond.data()[i]);
    return out;
}

// Deterministic DDIM (eta = 0) over an evenly spaced decreasing timestep
// subsequence; steps = T walks the full schedule. Guidance applies at every
// step, including the last.
inline LatentTensor ddim_sample_fn(const DenoiseFn& fn, const NoiseSchedule& s, const Conditioning& cond,
                                   int64_t steps, double guidance_scale, Rng& rng, const Shape& latent_shape) {
    if (steps < 1 || steps > s.T) throw ParameterError("ddim_sample: steps must be in 1..T");
    NoGradScope ng;
    Tensor z = Tensor::randn(latent_shape, rng);
    Conditioning null_cond = Conditioning::none();
    for (int64_t k = steps; k >= 1; --k) {
        int64_t t = k * s.T / steps;       // floor; k = steps gives exactly T
        int64_t t_prev = (k - 1) * s.T / steps;
        Tensor eps_c = fn(z, t, cond);
        Tensor eps_u = fn(z, t, null_cond);
        Tensor eps_hat = cfg_mix(eps_c, eps_u, guidance_scale);
        double ab_t = s.alpha_bar[static_cast<size_t>(t)];
        double ab_p = s.alpha_bar[static_cast<size_t>(t_prev)];
        double sq_t = std::sqrt(ab_t);
        double sq1m_t = std::sqrt(1.0 - ab_t);
        double sq_p = std::sqrt(ab_p);
        double sq1m_p = std::sqrt(1.0 - ab_p);
        for (int64_t i = 0; i < z.numel(); ++i) {
            double z0_pred = (z.data()[i] - sq1m_t * eps_hat.data()[i]) / sq_t;
            z.data()[i] = sq_p * z0_pred + sq1m_p * eps_hat.data()[i];
        }
    }
    LatentTensor out;
    out.data = z;
    out.scale_factor = VaeParams::kScaleFactor;
    return out;
}

inline LatentTensor ddim_sample(const DenoiserParams& p, const NoiseSchedule& s, const Conditioning& cond,
                                int64_t steps, double guidance_scale, Rng& rng, int64_t latent_h,
                                int64_t latent_w) {
    return ddim_sample_fn(
        [&p](const Tensor& zt, int64_t t, const Conditioning& c) { return denoise_predict(p, zt, t, c); }, s, cond,
        steps, guidance_scale, rng, Shape{latent_h, latent_w, p.cfg.latent_channels});
}

// Full synthesis path: DDIM in normalized latent space, un-normalize by the
// stored training stats, decode to a [0,1] image.
inline Tensor synthesize_patch(const TrainedVae& vae, const DenoiserParams& p, const NoiseSchedule& s,
                               const Conditioning& cond, int64_t steps, double guidance_scale, Rng& rng,
                               int64_t latent_h, int64_t latent_w) {
    NoGradScope ng;
    LatentTensor z = ddim_sample(p, s, cond, steps, guidance_scale, rng, latent_h, latent_w);
    z.data = vae.denormalize_latent(z.data);
    return decode(vae.params, z);
}

/* -------------------------------------------------------------- training */

struct LdmConfig {
    DenoiserConfig denoiser;
    int64_t T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    double drop_prob = 0.1;
    double lr = 1e-3;
    int64_t epochs = 4;
    int64_t batch_size = 16;
    int64_t max_latents = 0;  // 0 = all
};

// Trains the denoiser on pre-normalized latents with aligned conditioning.
inline DenoiserParams train_ldm(const LdmConfig& cfg, const std::vector<Tensor>& latents,
                                const std::vector<Conditioning>& conds, Rng& rng,
                                const std::string& log_csv_path = "") {
    if (latents.empty()) throw DataError("train_ldm: no latents");
    if (latents.size() != conds.size()) throw DataError("train_ldm: latents/conditioning misaligned");
    NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
    DenoiserParams params;
    params.init(cfg.denoiser, rng);
    AdamW opt(cfg.lr);
    NamedParams np = params.params();

    std::unique_ptr<CsvWriter> log;
    if (!log_csv_path.empty()) log = std::make_unique<CsvWriter>(log_csv_path, std::vector<std::string>{"epoch", "loss", "seconds"});

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        std::vector<size_t> order(latents.size());
        std::iota(order.begin(), order.end(), 0);
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        if (cfg.max_latents > 0 && static_cast<int64_t>(order.size()) > cfg.max_latents)
            order.resize(static_cast<size_t>(cfg.max_latents));

        double epoch_loss = 0.0;
        int64_t batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            TapeScope scope;
            Tensor batch_loss;
            for (size_t bi = start; bi < stop; ++bi) {
                Tensor l = ldm_loss(params, sched, latents[order[bi]], conds[order[bi]], rng, cfg.drop_prob);
                batch_loss = batch_loss.defined() ? add(batch_loss, l) : l;
            }
            batch_loss = scale(batch_loss, 1.0 / static_cast<double>(stop - start));
            assert_finite(batch_loss, "ldm loss");
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
    return params;
}

inline void save_denoiser(DenoiserParams& p, const std::string& path) { save_params(p.params(), path); }

inline DenoiserParams load_denoiser(const std::string& path, const DenoiserConfig& cfg) {
    DenoiserParams p;
    Rng init_rng(0);
    p.init(cfg, init_rng);
    load_params(p.params(), Checkpoint::load(path));
    return p;
}

}  // namespace duvsynth
