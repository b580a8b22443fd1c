#include <catch2/catch_amalgamated.hpp>

#include <duvsynth/dataset.hpp>
#include <duvsynth/dino.hpp>

#include <cmath>
#include <vector>

using namespace duvsynth;

namespace {

DinoConfig micro_config() {
    DinoConfig c;
    c.backbone.side = 32;
    c.backbone.sub_patch = 8;
    c.backbone.dim = 16;
    c.backbone.layers = 1;
    c.backbone.heads = 2;
    c.backbone.mlp_hidden = 32;
    c.proj_hidden = 16;
    c.proj_dim = 32;
    return c;
}

Tensor random_patch(Rng& rng, int64_t side = 32) { return Tensor::rand_uniform(Shape{side, side, 3}, rng); }

double entropy(const Tensor& probs) {
    double h = 0.0;
    for (int64_t i = 0; i < probs.numel(); ++i) {
        double p = probs.data()[i];
        if (p > 0) h -= p * std::log(p);
    }
    return h;
}

double cosine(const Tensor& a, const Tensor& b) {
    double dot = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        dot += a.data()[i] * b.data()[i];
        na += a.data()[i] * a.data()[i];
        nb += b.data()[i] * b.data()[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
}

}  // namespace

TEST_CASE("make_views produces the requested multi-crop structure") {
    Rng rng(1);
    Tensor patch = random_patch(rng);
    ViewSet vs = make_views(patch, rng, 2, 6, 32, 16, "p0");
    REQUIRE(vs.global_views.size() == 2);
    REQUIRE(vs.local_views.size() == 6);
    CHECK(vs.source_patch_id == "p0");
    for (const auto& v : vs.global_views) CHECK(v.shape() == Shape{32, 32, 3});
    for (const auto& v : vs.local_views) {
        CHECK(v.shape() == Shape{16, 16, 3});
        for (int64_t i = 0; i < v.numel(); ++i) {
            REQUIRE(v.data()[i] >= 0.0);
            REQUIRE(v.data()[i] <= 1.0);
        }
    }

    ViewSet global_only = make_views(patch, rng, 2, 0, 32, 16);
    CHECK(global_only.local_views.empty());

    Rng a(99), b(99);
    ViewSet va = make_views(patch, a, 2, 3, 32, 16);
    ViewSet vb = make_views(patch, b, 2, 3, 32, 16);
    for (size_t i = 0; i < va.global_views.size(); ++i)
        for (int64_t j = 0; j < va.global_views[i].numel(); ++j)
            REQUIRE(va.global_views[i].data()[j] == vb.global_views[i].data()[j]);

    Tensor tiny = random_patch(rng, 8);
    CHECK_THROWS_AS(make_views(tiny, rng, 2, 2, 8, 4), ParameterError);
    CHECK_THROWS_AS(make_views(patch, rng, 1, 2, 32, 16), ParameterError);
}

TEST_CASE("distillation loss counts g*(g+l-1) pairs") {
    Rng rng(7);
    DistillationState state;
    state.init(micro_config(), rng);
    Tensor patch = random_patch(rng);
    for (auto [g, l] : std::vector<std::pair<int64_t, int64_t>>{{2, 0}, {2, 2}, {2, 6}, {3, 4}}) {
        ViewSet vs = make_views(patch, rng, g, l, 32, 16);
        DistillationLoss dl = distillation_loss(state, vs);
        CHECK(dl.n_pairs == g * (g + l - 1));
        CHECK(static_cast<int64_t>(dl.teacher_logits.size()) == g);
        CHECK(dl.loss.item() > 0.0);
    }
}

TEST_CASE("self-distillation floor: identical params and views give the sum of entropies") {
    Rng rng(11);
    DinoConfig cfg = micro_config();
    cfg.tau_student = 0.07;
    cfg.tau_teacher = 0.07;  // tau_s = tau_t
    DistillationState state;
    state.init(cfg, rng);  // teacher initialized as a copy of the student
    Tensor view = random_patch(rng);
    ViewSet vs;
    vs.global_views = {view, view};  // both pairs match the same pixels

    DistillationLoss dl = distillation_loss(state, vs);
    REQUIRE(dl.n_pairs == 2);
    Tensor probs;
    {
        NoGradScope ng;
        Tensor logits = reshape(state.teacher_head.forward(state.teacher.class_feature(view)), Shape{cfg.proj_dim});
        probs = softmax_temperature(logits, 0.07);
    }
    CHECK(std::abs(dl.loss.item() - 2.0 * entropy(probs)) < 1e-9);
}

TEST_CASE("gradient flows only into the student") {
    Rng rng(13);
    DistillationState state;
    state.init(micro_config(), rng);
    Tensor patch = random_patch(rng);
    ViewSet vs = make_views(patch, rng, 2, 2, 32, 16);
    TapeScope scope;
    DistillationLoss dl = distillation_loss(state, vs);
    scope.tape().backward(dl.loss);
    for (auto& [name, t] : state.teacher_params()) {
        INFO(name);
        CHECK_FALSE(t->has_grad());
    }
    int64_t with_grad = 0;
    for (auto& [name, t] : state.student_params())
        if (t->has_grad()) ++with_grad;
    CHECK(with_grad > 0);
}

TEST_CASE("ema boundary cases, paper momentum arithmetic and contraction") {
    Rng rng(17);
    DistillationState state;
    state.init(micro_config(), rng);

    auto fill = [](NamedParams ps, double v) {
        for (auto& [n, t] : ps) std::fill(t->data(), t->data() + t->numel(), v);
    };

    // m = 1: teacher untouched
    fill(state.teacher_params(), 0.5);
    fill(state.student_params(), -1.0);
    state.ema_momentum = 1.0;
    ema_update(state);
    for (auto& [n, t] : state.teacher_params())
        for (int64_t i = 0; i < t->numel(); ++i) REQUIRE(t->data()[i] == 0.5);

    // m = 0: teacher = student exactly
    state.ema_momentum = 0.0;
    ema_update(state);
    for (auto& [n, t] : state.teacher_params())
        for (int64_t i = 0; i < t->numel(); ++i) REQUIRE(t->data()[i] == -1.0);

    // m = 0.996 with theta_t = 0, theta_s = 1 gives 0.004
    fill(state.teacher_params(), 0.0);
    fill(state.student_params(), 1.0);
    state.ema_momentum = 0.996;
    ema_update(state);
    for (auto& [n, t] : state.teacher_params())
        for (int64_t i = 0; i < t->numel(); ++i) REQUIRE(std::abs(t->data()[i] - 0.004) < 1e-15);

    // contraction: |theta_t' - theta_s| = m * |theta_t - theta_s| elementwise
    Rng r2(23);
    DistillationState s2;
    s2.init(micro_config(), r2);
    std::vector<double> before;
    auto tp = s2.teacher_params();
    auto sp = s2.student_params();
    for (auto& [n, t] : tp)
        for (int64_t i = 0; i < t->numel(); ++i) t->data()[i] += 0.3;  // detune teacher from student copy
    for (size_t pi = 0; pi < tp.size(); ++pi)
        for (int64_t i = 0; i < tp[pi].second->numel(); ++i)
            before.push_back(std::abs(tp[pi].second->data()[i] - sp[pi].second->data()[i]));
    s2.ema_momentum = 0.9;
    ema_update(s2);
    size_t idx = 0;
    for (size_t pi = 0; pi < tp.size(); ++pi)
        for (int64_t i = 0; i < tp[pi].second->numel(); ++i) {
            double after = std::abs(tp[pi].second->data()[i] - sp[pi].second->data()[i]);
            REQUIRE(std::abs(after - 0.9 * before[idx++]) < 1e-12);
        }
}

TEST_CASE("center update arithmetic, convergence and gradient isolation") {
    Rng rng(29);
    DistillationState state;
    state.init(micro_config(), rng);
    int64_t v = state.center.numel();

    std::vector<Tensor> batch = {Tensor::ones(Shape{v})};
    center_update(state, batch);
    for (int64_t i = 0; i < v; ++i) REQUIRE(std::abs(state.center.data()[i] - 0.1) < 1e-15);

    // repeated constant batches converge geometrically to the constant
    for (int rep = 0; rep < 200; ++rep) center_update(state, batch);
    for (int64_t i = 0; i < v; ++i) REQUIRE(std::abs(state.center.data()[i] - 1.0) < 1e-9);

    CHECK_THROWS_AS(center_update(state, {}), ParameterError);

    // no tape entries: the center is not a gradient path
    TapeScope scope;
    center_update(state, batch);
    CHECK(scope.tape().size() == 0);
}

TEST_CASE("teacher temperature sharpens: max prob at tau_t >= max prob at tau_s") {
    Rng rng(31);
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor logits = Tensor::randn(Shape{16}, rng, 2.0);
        Tensor pt = softmax_temperature(logits, 0.04);
        Tensor ps = softmax_temperature(logits, 0.1);
        double mt = *std::max_element(pt.data(), pt.data() + 16);
        double ms = *std::max_element(ps.data(), ps.data() + 16);
        REQUIRE(mt >= ms - 1e-12);
    }
}

TEST_CASE("extract_embedding is deterministic with the configured width") {
    Rng rng(37);
    DinoConfig cfg = micro_config();
    DistillationState state;
    state.init(cfg, rng);
    Tensor patch = random_patch(rng);
    Tensor e1 = extract_embedding(state.teacher, patch);
    Tensor e2 = extract_embedding(state.teacher, patch);
    REQUIRE(e1.shape() == Shape{cfg.backbone.dim});
    for (int64_t i = 0; i < e1.numel(); ++i) REQUIRE(e1.data()[i] == e2.data()[i]);

    Tensor wrong = random_patch(rng, 24);  // not divisible by sub_patch 8 -> 3x3 grid, but pos interp handles
    Tensor e3 = extract_embedding(state.teacher, wrong);
    CHECK(e3.numel() == cfg.backbone.dim);
    Tensor not_square(Shape{32, 16, 3}, 0.1);
    CHECK_THROWS_AS(extract_embedding(state.teacher, not_square), DimensionError);
}

TEST_CASE("one optimizer step decreases the distillation loss on a fixed batch") {
    Rng rng(41);
    DinoConfig cfg = micro_config();
    DistillationState state;
    state.init(cfg, rng);
    // detune the teacher so the initial loss is not already at the floor
    for (auto& [n, t] : state.teacher_params())
        for (int64_t i = 0; i < t->numel(); ++i) t->data()[i] += 0.05;

    std::vector<ViewSet> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(make_views(random_patch(rng), rng, 2, 2, 32, 16));

    auto batch_loss = [&]() {
        Tensor total;
        for (const auto& vs : batch) {
            Tensor l = distillation_loss(state, vs).loss;
            total = total.defined() ? add(total, l) : l;
        }
        return total;
    };

    double before = batch_loss().item();
    AdamW opt(1e-3, 0.0);
    NamedParams sp = state.student_params();
    {
        TapeScope scope;
        Tensor loss = batch_loss();
        scope.tape().backward(loss);
        opt.step(sp);
    }
    double after = batch_loss().item();
    CHECK(after < before);
}

TEST_CASE("trained teacher embeddings separate the toy classes", "[slow]") {
    DatasetConfig dcfg;
    dcfg.n_wsi = 12;
    dcfg.wsi_side = 128;
    dcfg.patch_side = 32;
    dcfg.malignant_wsi_fraction = 0.5;
    Rng data_rng(2024);
    std::vector<Patch> all;
    for (const auto& w : generate_toy_wsis(dcfg, data_rng))
        for (auto& p : tile_and_filter(w, dcfg.patch_side)) all.push_back(std::move(p));
    REQUIRE(all.size() > 60);

    // held-out split: every 4th patch
    std::vector<Tensor> train_imgs;
    std::vector<Patch> held_out;
    for (size_t i = 0; i < all.size(); ++i) {
        if (i % 4 == 0)
            held_out.push_back(all[i]);
        else
            train_imgs.push_back(all[i].image);
    }

    DinoConfig cfg;
    cfg.backbone.side = 32;
    cfg.backbone.sub_patch = 4;
    cfg.backbone.dim = 32;
    cfg.backbone.layers = 2;
    cfg.backbone.heads = 4;
    cfg.backbone.mlp_hidden = 64;
    cfg.proj_hidden = 64;
    cfg.proj_dim = 64;
    cfg.epochs = 2;
    cfg.batch_size = 6;
    cfg.max_patches = 48;
    cfg.n_local = 4;
    cfg.lr = 1e-3;
    Rng rng(7);
    DistillationState state = train_dino(cfg, train_imgs, rng);

    std::vector<Tensor> emb;
    std::vector<int64_t> lbl;
    for (const auto& p : held_out) {
        emb.push_back(extract_embedding(state.teacher, p.image));
        lbl.push_back(p.label);
    }
    double within = 0, between = 0;
    int64_t nw = 0, nb = 0;
    for (size_t i = 0; i < emb.size(); ++i)
        for (size_t j = i + 1; j < emb.size(); ++j) {
            double c = cosine(emb[i], emb[j]);
            if (lbl[i] == lbl[j]) {
                within += c;
                ++nw;
            } else {
                between += c;
                ++nb;
            }
        }
    REQUIRE(nw > 0);
    REQUIRE(nb > 0);
    within /= static_cast<double>(nw);
    between /= static_cast<double>(nb);
    INFO("within=" << within << " between=" << between);
    CHECK(within > between);
}
