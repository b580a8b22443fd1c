#include <catch2/catch_amalgamated.hpp>

#include <duvsynth/tensor.hpp>

#include "testutil.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

using namespace duvsynth;
using testutil::max_grad_rel_error;

namespace {

Tensor fixed_weights(const Shape& shape, uint64_t seed) {
    Rng rng(seed);
    return Tensor::randn(shape, rng, 1.0);
}

// Scalar readout with fixed random weights so gradients are nontrivial.
Tensor weighted_sum(const Tensor& t, uint64_t seed = 7) {
    return sum(mul(t, fixed_weights(t.shape(), seed)));
}

int64_t argmax(const std::vector<double>& v) {
    return static_cast<int64_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

TEST_CASE("tensor construction enforces shape/data consistency") {
    CHECK_THROWS_AS(Tensor(Shape{2, 3}, std::vector<double>(5, 0.0)), DimensionError);
    CHECK_THROWS_AS(Tensor(Shape{0, 3}), DimensionError);
    Tensor t(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.shape() == Shape{2, 3});
}

TEST_CASE("matmul identity and hand arithmetic") {
    Tensor eye(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
    Tensor a(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    Tensor r = matmul(eye, a);
    for (int64_t i = 0; i < 6; ++i) CHECK(r.data()[i] == a.data()[i]);

    Tensor m(Shape{2, 2}, std::vector<double>{1, 2, 3, 4});
    Tensor v(Shape{2, 1}, std::vector<double>{0, 1});
    Tensor mv = matmul(m, v);
    CHECK(mv.data()[0] == 2.0);
    CHECK(mv.data()[1] == 4.0);

    CHECK_THROWS_AS(matmul(a, m), DimensionError);
}

TEST_CASE("matmul gradient of sum equals ones * b^T and matches finite differences") {
    Rng rng(11);
    Tensor a = Tensor::param(Shape{3, 4}, rng, 1.0);
    Tensor b = Tensor::randn(Shape{4, 2}, rng, 1.0);

    std::vector<double> analytic;
    {
        TapeScope scope;
        Tensor loss = sum(matmul(a, b));
        scope.tape().backward(loss);
        analytic = a.grad();
    }
    // closed form: dL/dA = ones(3x2) * B^T
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 4; ++j) {
            double expect = b.data()[j * 2 + 0] + b.data()[j * 2 + 1];
            CHECK(std::abs(analytic[static_cast<size_t>(i * 4 + j)] - expect) < 1e-12);
        }

    double err = max_grad_rel_error([&] { return sum(matmul(a, b)); }, {a});
    CHECK(err < 1e-4);
}

TEST_CASE("softmax_temperature spec examples") {
    Tensor flat(Shape{5}, std::vector<double>(5, 3.25));
    for (double tau : {0.04, 0.5, 1.0, 7.0}) {
        Tensor y = softmax_temperature(flat, tau);
        for (int64_t i = 0; i < 5; ++i) CHECK(std::abs(y.data()[i] - 0.2) < 1e-12);
    }

    Tensor z(Shape{2}, std::vector<double>{1, 0});
    Tensor y1 = softmax_temperature(z, 1.0);
    double e = std::exp(1.0);
    CHECK(std::abs(y1.data()[0] - e / (e + 1.0)) < 1e-12);
    CHECK(std::abs(y1.data()[1] - 1.0 / (e + 1.0)) < 1e-12);

    // teacher temperature: closed form 1/(1+exp(-1/0.04)) ~ 1 - 1.4e-11
    Tensor yt = softmax_temperature(z, 0.04);
    CHECK(yt.data()[0] > 1.0 - 1e-10);

    CHECK_THROWS_AS(softmax_temperature(z, 0.0), ParameterError);
    CHECK_THROWS_AS(softmax_temperature(z, -1.0), ParameterError);
}

TEST_CASE("softmax_temperature rows normalize and sharpen correctly") {
    Rng rng(5);
    Tensor logits = Tensor::randn(Shape{17, 9}, rng, 3.0);
    Tensor y = softmax_temperature(logits, 0.7);
    for (int64_t r = 0; r < 17; ++r) {
        double s = 0.0;
        for (int64_t j = 0; j < 9; ++j) {
            double p = y.data()[r * 9 + j];
            CHECK(p > 0.0);
            CHECK(p < 1.0);
            s += p;
        }
        CHECK(std::abs(s - 1.0) <= 1e-9);
    }

    // tau -> 0+: argmax of the softmax equals argmax of the logits
    for (int trial = 0; trial < 50; ++trial) {
        Tensor v = Tensor::randn(Shape{12}, rng, 2.0);
        Tensor p = softmax_temperature(v, 1e-3);
        CHECK(argmax(p.values()) == argmax(v.values()));
    }
}

TEST_CASE("cross_entropy spec examples and Gibbs inequality") {
    Tensor fair(Shape{2}, std::vector<double>{0.5, 0.5});
    CHECK(std::abs(cross_entropy(fair, fair).item() - std::log(2.0)) < 1e-12);

    Tensor onehot(Shape{2}, std::vector<double>{1.0, 0.0});
    CHECK(std::abs(cross_entropy(onehot, onehot).item()) < 1e-12);

    Rng rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor p = softmax_temperature(Tensor::randn(Shape{8}, rng, 1.5), 1.0);
        Tensor q = softmax_temperature(Tensor::randn(Shape{8}, rng, 1.5), 1.0);
        double hpq = cross_entropy(p, q).item();
        double hpp = cross_entropy(p, p).item();
        CHECK(hpq >= hpp - 1e-12);
    }

    Tensor bad(Shape{2}, std::vector<double>{0.9, 0.2});
    CHECK_THROWS_AS(cross_entropy(bad, fair), ContractError);
    CHECK_THROWS_AS(cross_entropy(fair, bad), ContractError);
}

TEST_CASE("backward basics: sum gives ones, sum of squares gives 2x") {
    Rng rng(3);
    Tensor x = Tensor::param(Shape{4, 5}, rng, 2.0);
    {
        TapeScope scope;
        Tensor loss = sum(x);
        scope.tape().backward(loss);
        for (double g : x.grad()) CHECK(g == 1.0);
    }
    x.zero_grad();
    {
        TapeScope scope;
        Tensor loss = sum(mul(x, x));
        scope.tape().backward(loss);
        for (int64_t i = 0; i < x.numel(); ++i)
            CHECK(std::abs(x.grad()[static_cast<size_t>(i)] - 2.0 * x.data()[i]) < 1e-12);
    }
}

TEST_CASE("backward contract errors") {
    Rng rng(3);
    Tensor x = Tensor::param(Shape{3}, rng, 1.0);
    {
        TapeScope scope;
        Tensor y = mul(x, x);
        CHECK_THROWS_AS(scope.tape().backward(y), ContractError);  // non-scalar
        Tensor detached = Tensor::scalar(1.0);
        CHECK_THROWS_AS(scope.tape().backward(detached), ContractError);  // not on tape
    }
    CHECK_THROWS_AS(backward(Tensor::scalar(0.0)), StateError);  // no active tape
}

TEST_CASE("tape entries are topologically ordered and visited once") {
    Rng rng(8);
    Tensor x = Tensor::param(Shape{6}, rng, 1.0);
    TapeScope scope;
    Tensor a = mul(x, x);
    Tensor b = add(a, x);
    Tensor loss = sum(b);
    for (const auto& e : scope.tape().entries()) {
        for (const auto& in : e.inputs) CHECK(in->id < e.out->id);
    }
    scope.tape().backward(loss);
    // visited exactly once: d/dx sum(x*x + x) = 2x + 1, no double counting
    for (int64_t i = 0; i < 6; ++i)
        CHECK(std::abs(x.grad()[static_cast<size_t>(i)] - (2.0 * x.data()[i] + 1.0)) < 1e-12);
}

TEST_CASE("finite-difference checks for every differentiable primitive") {
    Rng rng(21);
    auto check = [&](const char* name, const std::function<Tensor()>& fn, const std::vector<Tensor>& params) {
        double err = max_grad_rel_error(fn, params);
        INFO(name);
        CHECK(err < 1e-4);
    };

    Tensor a = Tensor::param(Shape{3, 4}, rng, 1.0);
    Tensor b = Tensor::param(Shape{3, 4}, rng, 1.0);
    check("add", [&] { return weighted_sum(add(a, b)); }, {a, b});
    check("sub", [&] { return weighted_sum(sub(a, b)); }, {a, b});
    check("mul", [&] { return weighted_sum(mul(a, b)); }, {a, b});
    check("scale", [&] { return weighted_sum(scale(a, -1.7)); }, {a});
    check("exp", [&] { return weighted_sum(duvsynth::exp(scale(a, 0.3))); }, {a});
    check("sigmoid", [&] { return weighted_sum(sigmoid(a)); }, {a});
    check("gelu", [&] { return weighted_sum(gelu(a)); }, {a});
    check("mean", [&] { return mean(mul(a, a)); }, {a});

    Tensor v = Tensor::param(Shape{4}, rng, 1.0);
    check("add_rowvec", [&] { return weighted_sum(add_rowvec(a, v)); }, {a, v});

    Tensor m1 = Tensor::param(Shape{3, 4}, rng, 0.8);
    Tensor m2 = Tensor::param(Shape{4, 2}, rng, 0.8);
    check("matmul", [&] { return weighted_sum(matmul(m1, m2)); }, {m1, m2});
    check("transpose", [&] { return weighted_sum(transpose(m1)); }, {m1});
    check("reshape", [&] { return weighted_sum(reshape(m1, Shape{2, 6})); }, {m1});
    check("slice", [&] { return weighted_sum(slice(m1, 1, 1, 2)); }, {m1});
    check("concat0", [&] { return weighted_sum(concat(m1, m1, 0)); }, {m1});
    check("concat_last", [&] { return weighted_sum(concat(m1, m1, 1)); }, {m1});

    Tensor logits = Tensor::param(Shape{2, 5}, rng, 1.5);
    check("softmax_temperature", [&] { return weighted_sum(softmax_temperature(logits, 0.6)); }, {logits});

    Tensor tgt_logits = Tensor::param(Shape{5}, rng, 1.0);
    Tensor prd_logits = Tensor::param(Shape{5}, rng, 1.0);
    check("cross_entropy",
          [&] {
              return cross_entropy(softmax_temperature(tgt_logits, 1.0), softmax_temperature(prd_logits, 0.5));
          },
          {tgt_logits, prd_logits});

    Tensor lx = Tensor::param(Shape{3, 6}, rng, 1.2);
    Tensor gamma = Tensor::param(Shape{6}, rng, 0.3);
    Tensor beta = Tensor::param(Shape{6}, rng, 0.3);
    check("layer_norm", [&] { return weighted_sum(layer_norm(lx, gamma, beta)); }, {lx, gamma, beta});

    Tensor img = Tensor::param(Shape{5, 5, 3}, rng, 1.0);
    Tensor w1 = Tensor::param(Shape{3, 3, 3, 4}, rng, 0.4);
    Tensor bias1 = Tensor::param(Shape{4}, rng, 0.2);
    check("conv2d_s1", [&] { return weighted_sum(conv2d(img, w1, bias1, 1, 1)); }, {img, w1, bias1});
    Tensor img6 = Tensor::param(Shape{6, 6, 3}, rng, 1.0);
    check("conv2d_s2", [&] { return weighted_sum(conv2d(img6, w1, bias1, 2, 1)); }, {img6, w1, bias1});

    Tensor up = Tensor::param(Shape{3, 3, 2}, rng, 1.0);
    check("upsample_nearest_2x", [&] { return weighted_sum(upsample_nearest_2x(up)); }, {up});

    Tensor q = Tensor::param(Shape{4, 6}, rng, 0.7);
    Tensor kk = Tensor::param(Shape{5, 6}, rng, 0.7);
    Tensor vv = Tensor::param(Shape{5, 3}, rng, 0.7);
    check("attention", [&] { return weighted_sum(scaled_dot_product_attention(q, kk, vv)); }, {q, kk, vv});
}

TEST_CASE("finite-difference checks on random composite graphs") {
    Rng rng(31);

    // (1) attention block with layer norm, residual and projections
    Tensor x = Tensor::param(Shape{5, 8}, rng, 0.8);
    Tensor wq = Tensor::param(Shape{8, 8}, rng, 0.35);
    Tensor wk = Tensor::param(Shape{8, 8}, rng, 0.35);
    Tensor wv = Tensor::param(Shape{8, 8}, rng, 0.35);
    Tensor wo = Tensor::param(Shape{8, 8}, rng, 0.35);
    Tensor g1 = Tensor::param(Shape{8}, rng, 0.2);
    Tensor b1 = Tensor::param(Shape{8}, rng, 0.2);
    auto attention_block = [&] {
        Tensor h = layer_norm(x, g1, b1);
        Tensor att = scaled_dot_product_attention(matmul(h, wq), matmul(h, wk), matmul(h, wv));
        Tensor out = add(x, matmul(att, wo));
        return weighted_sum(out, 13);
    };
    CHECK(max_grad_rel_error(attention_block, {x, wq, wk, wv, wo, g1, b1}) < 1e-4);

    // (2) conv / upsample / concat graph
    Tensor cx = Tensor::param(Shape{4, 4, 2}, rng, 0.9);
    Tensor cw1 = Tensor::param(Shape{3, 3, 2, 3}, rng, 0.4);
    Tensor cb1 = Tensor::param(Shape{3}, rng, 0.2);
    Tensor cw2 = Tensor::param(Shape{3, 3, 5, 2}, rng, 0.4);
    Tensor cb2 = Tensor::param(Shape{2}, rng, 0.2);
    auto conv_graph = [&] {
        Tensor h = gelu(conv2d(cx, cw1, cb1, 2, 1));       // 2x2x3
        Tensor u = upsample_nearest_2x(h);                 // 4x4x3
        Tensor cat = concat(u, cx, 2);                     // 4x4x5
        Tensor out = conv2d(cat, cw2, cb2, 1, 1);          // 4x4x2
        return mean(mul(out, out));
    };
    CHECK(max_grad_rel_error(conv_graph, {cx, cw1, cb1, cw2, cb2}) < 1e-4);

    // (3) mlp ending in a distillation-style loss
    Tensor mx = Tensor::param(Shape{1, 6}, rng, 1.0);
    Tensor mw1 = Tensor::param(Shape{6, 10}, rng, 0.4);
    Tensor mb1 = Tensor::param(Shape{10}, rng, 0.2);
    Tensor mw2 = Tensor::param(Shape{10, 4}, rng, 0.4);
    Tensor target = softmax_temperature(fixed_weights(Shape{4}, 55), 1.0);
    auto mlp_graph = [&] {
        Tensor h = gelu(add_rowvec(matmul(mx, mw1), mb1));
        Tensor logits = reshape(matmul(h, mw2), Shape{4});
        return cross_entropy(target, softmax_temperature(logits, 0.7));
    };
    CHECK(max_grad_rel_error(mlp_graph, {mx, mw1, mb1, mw2}) < 1e-4);
}

TEST_CASE("conv2d forward matches a naive direct convolution") {
    Rng rng(41);
    Tensor x = Tensor::randn(Shape{6, 7, 3}, rng, 1.0);
    Tensor w = Tensor::randn(Shape{3, 3, 3, 4}, rng, 0.5);
    Tensor b = Tensor::randn(Shape{4}, rng, 0.5);
    for (int64_t stride : {int64_t(1), int64_t(2)}) {
        Tensor out = conv2d(x, w, b, stride, 1);
        int64_t ho = out.dim(0), wo = out.dim(1);
        for (int64_t oy = 0; oy < ho; ++oy)
            for (int64_t ox = 0; ox < wo; ++ox)
                for (int64_t co = 0; co < 4; ++co) {
                    double acc = b.data()[co];
                    for (int64_t ky = 0; ky < 3; ++ky)
                        for (int64_t kx = 0; kx < 3; ++kx)
                            for (int64_t ci = 0; ci < 3; ++ci) {
                                int64_t iy = oy * stride + ky - 1;
                                int64_t ix = ox * stride + kx - 1;
                                if (iy < 0 || iy >= 6 || ix < 0 || ix >= 7) continue;
                                acc += x.data()[(iy * 7 + ix) * 3 + ci] * w.data()[((ky * 3 + kx) * 3 + ci) * 4 + co];
                            }
                    CHECK(std::abs(out.data()[(oy * wo + ox) * 4 + co] - acc) < 1e-10);
                }
    }
}

TEST_CASE("attention with a single key-value pair returns the value exactly") {
    Rng rng(17);
    Tensor q = Tensor::randn(Shape{3, 4}, rng, 2.0);
    Tensor k = Tensor::randn(Shape{1, 4}, rng, 2.0);
    Tensor v = Tensor::randn(Shape{1, 5}, rng, 2.0);
    Tensor out = scaled_dot_product_attention(q, k, v);
    REQUIRE(out.shape() == Shape{3, 5});
    for (int64_t r = 0; r < 3; ++r)
        for (int64_t j = 0; j < 5; ++j) CHECK(out.data()[r * 5 + j] == v.data()[j]);
}

TEST_CASE("rng streams are reproducible and forkable") {
    Rng a(20240731), b(20240731);
    for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
    for (int i = 0; i < 100; ++i) {
        REQUIRE(a.uniform() == b.uniform());
        REQUIRE(a.normal() == b.normal());
    }
    Rng c = a.fork(1), d = a.fork(2), c2 = a.fork(1);
    bool all_same = true;
    for (int i = 0; i < 16; ++i) {
        uint64_t xc = c.next_u64();
        REQUIRE(xc == c2.next_u64());
        if (xc != d.next_u64()) all_same = false;
    }
    CHECK_FALSE(all_same);

    // uniform range and below() bounds
    Rng r(7);
    for (int i = 0; i < 1000; ++i) {
        double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(r.below(13) < 13);
    }
}

TEST_CASE("timestep embedding is deterministic with sin/cos structure") {
    Tensor e0 = timestep_embedding(0, 8);
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(e0.data()[i] == 0.0);       // sin(0)
        CHECK(e0.data()[4 + i] == 1.0);   // cos(0)
    }
    Tensor e1 = timestep_embedding(37, 16);
    Tensor e2 = timestep_embedding(37, 16);
    for (int64_t i = 0; i < 16; ++i) REQUIRE(e1.data()[i] == e2.data()[i]);
    CHECK_THROWS_AS(timestep_embedding(1, 7), ParameterError);
}

TEST_CASE("operations on finite inputs stay finite") {
    Rng rng(61);
    Tensor x = Tensor::randn(Shape{4, 4, 3}, rng, 5.0);
    Tensor w = Tensor::randn(Shape{3, 3, 3, 2}, rng, 2.0);
    Tensor b = Tensor::randn(Shape{2}, rng, 1.0);
    CHECK(conv2d(x, w, b, 1, 1).all_finite());
    CHECK(softmax_temperature(Tensor::randn(Shape{3, 7}, rng, 50.0), 0.04).all_finite());
    CHECK(gelu(Tensor::randn(Shape{32}, rng, 20.0)).all_finite());
    Tensor nan_t(Shape{2}, std::vector<double>{1.0, std::nan("")});
    CHECK_FALSE(nan_t.all_finite());
    CHECK_THROWS_AS(assert_finite(nan_t, "probe"), ContractError);
}
