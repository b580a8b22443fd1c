#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "checkpoint.hpp"
#include "errors.hpp"
#include "tensor.hpp"

namespace duvsynth {

// Flat named view over a module's parameters. Names double as checkpoint
// record keys and optimizer state keys, so they must be unique and stable.
using NamedParams = std::vector<std::pair<std::string, Tensor*>>;

inline void append_params(NamedParams& dst, const std::string& prefix, const NamedParams& src) {
    for (const auto& [name, t] : src) dst.emplace_back(prefix + "." + name, t);
}

inline void save_params(const NamedParams& params, const std::string& path,
                        const std::vector<std::pair<std::string, Tensor>>& extra = {}) {
    Checkpoint ck;
    for (const auto& [name, t] : params) ck.add(name, *t);
    for (const auto& [name, t] : extra) ck.add(name, t);
    ck.save(path);
}

inline void load_params(const NamedParams& params, const Checkpoint& ck) {
    for (const auto& [name, t] : params) {
        Tensor stored = ck.get(name);
        if (stored.shape() != t->shape())
            throw DataError("checkpoint record '" + name + "' has shape " + shape_str(stored.shape()) +
                            ", expected " + shape_str(t->shape()));
        std::copy(stored.data(), stored.data() + stored.numel(), t->data());
    }
}

inline void zero_grads(const NamedParams& params) {
    for (const auto& [name, t] : params) t->zero_grad();
}

// dst <- m * dst + (1 - m) * src, elementwise over matching param lists.
inline void ema_blend(const NamedParams& dst, const NamedParams& src, double m) {
    if (dst.size() != src.size()) throw DimensionError("ema_blend: parameter lists differ in length");
    for (size_t i = 0; i < dst.size(); ++i) {
        Tensor* a = dst[i].second;
        Tensor* b = src[i].second;
        if (a->shape() != b->shape()) throw DimensionError("ema_blend: shape mismatch at " + dst[i].first);
        for (int64_t j = 0; j < a->numel(); ++j) a->data()[j] = m * a->data()[j] + (1.0 - m) * b->data()[j];
    }
}

inline void copy_params(const NamedParams& dst, const NamedParams& src) { ema_blend(dst, src, 0.0); }

/* -------------------------------------------------------------- modules */

struct Linear {
    Tensor w, b;

    void init(int64_t in, int64_t out, Rng& rng) {
        w = Tensor::param(Shape{in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        b = Tensor(Shape{out}, 0.0, true);
    }

    Tensor forward(const Tensor& x) const { return add_rowvec(matmul(x, w), b); }

    NamedParams params() { return {{"w", &w}, {"b", &b}}; }
};

struct LayerNorm {
    Tensor gamma, beta;

    void init(int64_t n) {
        gamma = Tensor(Shape{n}, 1.0, true);
        beta = Tensor(Shape{n}, 0.0, true);
    }

    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }

    NamedParams params() { return {{"gamma", &gamma}, {"beta", &beta}}; }
};

struct Conv2d {
    Tensor w, b;
    int64_t stride = 1, pad = 1;

    void init(int64_t kh, int64_t kw, int64_t cin, int64_t cout, int64_t stride_, int64_t pad_, Rng& rng,
              double gain = 1.0) {
        double fan_in = static_cast<double>(kh * kw * cin);
        w = Tensor::param(Shape{kh, kw, cin, cout}, rng, gain / std::sqrt(fan_in));
        b = Tensor(Shape{cout}, 0.0, true);
        stride = stride_;
        pad = pad_;
    }

    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }

    NamedParams params() { return {{"w", &w}, {"b", &b}}; }
};

/* ----------------------------------------------------------- optimizers */

// SGD with optional momentum (velocity buffers keyed by param name).
class Sgd {
  public:
    Sgd(double lr, double momentum = 0.0) : lr_(lr), momentum_(momentum) {}

    void step(const NamedParams& params) {
        for (const auto& [name, t] : params) {
            if (!t->has_grad()) continue;
            const auto& g = t->grad();
            double* v = t->data();
            if (momentum_ == 0.0) {
                for (int64_t i = 0; i < t->numel(); ++i) v[i] -= lr_ * g[static_cast<size_t>(i)];
            } else {
                auto& vel = state_[name];
                if (vel.empty()) vel.assign(static_cast<size_t>(t->numel()), 0.0);
                for (int64_t i = 0; i < t->numel(); ++i) {
                    vel[static_cast<size_t>(i)] =
                        momentum_ * vel[static_cast<size_t>(i)] + g[static_cast<size_t>(i)];
                    v[i] -= lr_ * vel[static_cast<size_t>(i)];
                }
            }
        }
        zero_grads(params);
    }

    double lr() const { return lr_; }

  private:
    double lr_, momentum_;
    std::map<std::string, std::vector<double>> state_;
};

// AdamW: decoupled weight decay, bias-corrected moments.
class AdamW {
  public:
    AdamW(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(const NamedParams& params) {
        ++t_;
        double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (const auto& [name, t] : params) {
            if (!t->has_grad()) continue;
            const auto& g = t->grad();
            auto& st = state_[name];
            if (st.m.empty()) {
                st.m.assign(static_cast<size_t>(t->numel()), 0.0);
                st.v.assign(static_cast<size_t>(t->numel()), 0.0);
            }
            double* p = t->data();
            for (int64_t i = 0; i < t->numel(); ++i) {
                size_t si = static_cast<size_t>(i);
                st.m[si] = b1_ * st.m[si] + (1.0 - b1_) * g[si];
                st.v[si] = b2_ * st.v[si] + (1.0 - b2_) * g[si] * g[si];
                double mhat = st.m[si] / bc1;
                double vhat = st.v[si] / bc2;
                p[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p[i]);
            }
        }
        zero_grads(params);
    }

  private:
    struct Moments {
        std::vector<double> m, v;
    };
    double lr_, wd_, b1_, b2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, Moments> state_;
};

}  // namespace duvsynth
