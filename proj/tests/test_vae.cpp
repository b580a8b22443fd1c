#include <catch2/catch_amalgamated.hpp>

#include <duvsynth/dataset.hpp>
#include <duvsynth/vae.hpp>

#include "testutil.hpp"

#include <cmath>
#include <filesystem>
#include <vector>

using namespace duvsynth;

namespace {

VaeConfig micro_config() {
    VaeConfig c;
    c.base_width = 4;
    c.latent_channels = 2;
    return c;
}

}  // namespace

TEST_CASE("encode produces the f=4 latent grid and decode inverts the shape") {
    Rng rng(3);
    VaeConfig cfg;  // defaults: d=4, base width 32
    VaeParams p;
    p.init(cfg, rng);
    Tensor patch = Tensor::rand_uniform(Shape{32, 32, 3}, rng);
    LatentTensor z = encode(p, patch, rng, false);
    REQUIRE(z.data.shape() == Shape{8, 8, 4});
    CHECK(z.scale_factor == 4);

    Tensor recon = decode(p, z);
    REQUIRE(recon.shape() == patch.shape());
    for (int64_t i = 0; i < recon.numel(); ++i) {
        REQUIRE(recon.data()[i] >= 0.0);
        REQUIRE(recon.data()[i] <= 1.0);
    }

    // deterministic mean latents
    Rng r1(9), r2(10);
    LatentTensor z1 = encode(p, patch, r1, false);
    LatentTensor z2 = encode(p, patch, r2, false);
    for (int64_t i = 0; i < z1.data.numel(); ++i) REQUIRE(z1.data.data()[i] == z2.data.data()[i]);

    // reparameterized samples differ from the mean
    LatentTensor zs = encode(p, patch, r1, true);
    double diff = 0;
    for (int64_t i = 0; i < zs.data.numel(); ++i) diff += std::abs(zs.data.data()[i] - z1.data.data()[i]);
    CHECK(diff > 0.0);

    // rectangular-but-divisible inputs keep h = H/f, w = W/f
    Tensor rect = Tensor::rand_uniform(Shape{16, 24, 3}, rng);
    CHECK(encode(p, rect, rng, false).data.shape() == Shape{4, 6, 4});

    Tensor bad = Tensor::rand_uniform(Shape{30, 30, 3}, rng);
    CHECK_THROWS_AS(encode(p, bad, rng, false), DimensionError);
    LatentTensor wrong;
    wrong.data = Tensor::rand_uniform(Shape{8, 8, 3}, rng);
    CHECK_THROWS_AS(decode(p, wrong), DimensionError);
}

TEST_CASE("gaussian kl closed forms") {
    // mu = 0, sigma = 1: zero
    Tensor mu0 = Tensor::zeros(Shape{5});
    Tensor lv0 = Tensor::zeros(Shape{5});
    CHECK(std::abs(gaussian_kl(mu0, lv0).item()) < 1e-15);

    // mu = m, sigma = 1: 0.5 * ||m||^2
    Rng rng(5);
    Tensor m = Tensor::randn(Shape{7}, rng, 2.0);
    double norm2 = 0;
    for (int64_t i = 0; i < 7; ++i) norm2 += m.data()[i] * m.data()[i];
    CHECK(std::abs(gaussian_kl(m, Tensor::zeros(Shape{7})).item() - 0.5 * norm2) < 1e-12);

    // non-negativity sweep
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor mu = Tensor::randn(Shape{6}, rng, 1.5);
        Tensor lv = Tensor::randn(Shape{6}, rng, 1.2);
        REQUIRE(gaussian_kl(mu, lv).item() >= -1e-12);
    }
}

TEST_CASE("kl closed form matches a monte-carlo estimate within 2 percent") {
    Rng rng(11);
    for (int trial = 0; trial < 3; ++trial) {
        Tensor mu = Tensor::randn(Shape{4}, rng, 1.0);
        Tensor lv = Tensor::randn(Shape{4}, rng, 0.7);
        double closed = gaussian_kl(mu, lv).item();
        // E_q[log q(z) - log p(z)] by sampling z = mu + sigma*eps
        int64_t n = 200000;
        double acc = 0.0;
        for (int64_t k = 0; k < n; ++k) {
            for (int64_t i = 0; i < 4; ++i) {
                double s2 = std::exp(lv.data()[i]);
                double eps = rng.normal();
                double z = mu.data()[i] + std::sqrt(s2) * eps;
                double logq = -0.5 * (std::log(6.283185307179586 * s2) + eps * eps);
                double logp = -0.5 * (std::log(6.283185307179586) + z * z);
                acc += logq - logp;
            }
        }
        double mc = acc / static_cast<double>(n);
        INFO("closed=" << closed << " mc=" << mc);
        CHECK(std::abs(mc - closed) / closed < 0.02);
    }
}

TEST_CASE("vae loss components and gradient integrity") {
    Rng rng(13);
    VaeParams p;
    p.init(micro_config(), rng);
    Tensor patch = Tensor::rand_uniform(Shape{8, 8, 3}, rng);

    auto fn = [&]() {
        Rng fixed(77);  // same reparameterization draw every evaluation
        return vae_loss(p, patch, fixed, 1e-4);
    };
    CHECK(fn().item() > 0.0);

    NamedParams np = p.params();
    std::vector<Tensor> params;
    for (auto& [name, t] : np) params.push_back(*t);
    CHECK(testutil::max_grad_rel_error(fn, params) < 1e-4);
}

TEST_CASE("trained vae reconstructs held-out toy patches and keeps sane latent scale", "[slow]") {
    DatasetConfig dcfg;
    dcfg.n_wsi = 12;
    dcfg.wsi_side = 128;
    dcfg.patch_side = 32;
    dcfg.malignant_wsi_fraction = 0.5;
    Rng data_rng(909);
    std::vector<Tensor> train, held_out;
    {
        std::vector<Patch> all;
        for (const auto& w : generate_toy_wsis(dcfg, data_rng))
            for (auto& p : tile_and_filter(w, dcfg.patch_side)) all.push_back(std::move(p));
        REQUIRE(all.size() > 60);
        for (size_t i = 0; i < all.size(); ++i)
            (i % 5 == 0 ? held_out : train).push_back(all[i].image);
    }

    VaeConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 8;
    cfg.lr = 2e-3;
    Rng rng(31337);
    std::filesystem::path log = std::filesystem::temp_directory_path() / "duvsynth_vae_log.csv";
    TrainedVae tv = train_vae(cfg, train, rng, log.string());

    // epoch-5 loss below epoch-1 loss (rows are 0-based epochs)
    auto rows = read_csv(log.string());
    REQUIRE(rows.size() >= 6);
    double first = std::stod(rows[1][1]);
    double fifth = std::stod(rows[5][1]);
    CHECK(fifth < first);

    // held-out reconstruction error
    double mse = 0.0;
    Rng eval_rng(1);
    for (const Tensor& img : held_out) {
        Tensor recon = decode(tv.params, encode(tv.params, img, eval_rng, false));
        double acc = 0.0;
        for (int64_t i = 0; i < img.numel(); ++i) {
            double d = recon.data()[i] - img.data()[i];
            acc += d * d;
        }
        mse += acc / static_cast<double>(img.numel());
    }
    mse /= static_cast<double>(held_out.size());
    INFO("held-out mse=" << mse);
    CHECK(mse < 0.01);

    // per-channel std of the latents diffusion consumes stays in [0.5, 2.0]
    for (int64_t c = 0; c < tv.latent_stats.numel(); ++c) CHECK(tv.latent_stats.data()[c] > 0.0);
    std::vector<double> raw = latent_channel_stds(tv.params, train, eval_rng);
    for (size_t c = 0; c < raw.size(); ++c) {
        double normalized = raw[c] / tv.latent_stats.data()[static_cast<int64_t>(c)];
        INFO("raw=" << raw[c] << " normalized=" << normalized);
        CHECK(normalized > 0.5);
        CHECK(normalized < 2.0);
    }

    // normalize/denormalize round-trip is exact
    Tensor z = encode(tv.params, train[0], eval_rng, false).data;
    Tensor round = tv.denormalize_latent(tv.normalize_latent(z));
    for (int64_t i = 0; i < z.numel(); ++i) REQUIRE(std::abs(round.data()[i] - z.data()[i]) < 1e-12);
}
