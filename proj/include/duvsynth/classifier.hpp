#pragma once

#include <algorithm>
#include <chrono>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "csv.hpp"
#include "nn.hpp"
#include "patch.hpp"
#include "tensor.hpp"
#include "vit.hpp"

namespace duvsynth {

struct PatchPrediction {
    std::string patch_id;
    std::string wsi_id;
    Tensor logits;    // [2]
    int64_t label = 0;  // argmax(logits)
};

struct ClassifierConfig {
    VitConfig backbone;  // fresh parameters, independent of the DINO backbone
    double lr = 3e-4;
    double momentum = 0.0;  // paper says SGD; momentum is a knob, default off
    int64_t epochs = 40;
    int64_t batch_size = 16;
    int64_t max_patches = 0;    // per-epoch subsample (0 = all)
    int64_t max_val_patches = 256;
};

struct ClassifierParams {
    VitBackbone backbone;
    Linear head;  // LN(class token) -> 2 logits

    void init(const VitConfig& cfg, Rng& rng) {
        backbone.init(cfg, rng);
        head.init(cfg.dim, 2, rng);
    }

    Tensor logits_graph(const Tensor& image) const {
        return reshape(head.forward(backbone.class_feature(image)), Shape{2});
    }

    NamedParams params() {
        NamedParams p;
        append_params(p, "backbone", backbone.params());
        append_params(p, "head", head.params());
        return p;
    }
};

inline PatchPrediction classify_patch(const ClassifierParams& params, const Patch& patch) {
    NoGradScope ng;
    PatchPrediction pred;
    pred.patch_id = patch.patch_id;
    pred.wsi_id = patch.wsi_id;
    pred.logits = params.logits_graph(patch.image);
    pred.label = pred.logits.data()[1] > pred.logits.data()[0] ? 1 : 0;
    return pred;
}

namespace detail {

inline Tensor onehot2(int64_t label) {
    Tensor t(Shape{2});
    t.data()[label == 0 ? 0 : 1] = 1.0;
    return t;
}

}  // namespace detail

inline double classifier_accuracy(const ClassifierParams& params, const std::vector<Patch>& patches,
                                  int64_t cap = 0) {
    if (patches.empty()) return 0.0;
    size_t n = patches.size();
    if (cap > 0) n = std::min(n, static_cast<size_t>(cap));
    int64_t hits = 0;
    for (size_t i = 0; i < n; ++i)
        if (classify_patch(params, patches[i]).label == patches[i].label) ++hits;
    return static_cast<double>(hits) / static_cast<double>(n);
}

// Two-class cross-entropy over the union of real and synthetic patches.
// Synthetic patches carry the class label under which they were synthesized.
inline ClassifierParams train_classifier(const ClassifierConfig& cfg, const std::vector<Patch>& real_patches,
                                         const std::vector<Patch>& synthetic_patches, Rng& rng,
                                         const std::vector<Patch>& val_patches = {},
                                         const std::string& log_csv_path = "") {
    std::vector<const Patch*> all;
    for (const Patch& p : real_patches) all.push_back(&p);
    for (const Patch& p : synthetic_patches) all.push_back(&p);
    if (all.empty()) throw DataError("train_classifier: no training patches");
    bool has0 = false, has1 = false;
    for (const Patch* p : all) (p->label == kMalignant ? has1 : has0) = true;
    if (!has0 || !has1) throw DataError("train_classifier: training set covers a single class");

    ClassifierParams params;
    params.init(cfg.backbone, rng);
    Sgd opt(cfg.lr, cfg.momentum);
    NamedParams np = params.params();

    std::unique_ptr<CsvWriter> log;
    if (!log_csv_path.empty())
        log = std::make_unique<CsvWriter>(log_csv_path,
                                     std::vector<std::string>{"epoch", "train_accuracy", "val_accuracy", "seconds"});

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        std::vector<size_t> order(all.size());
        std::iota(order.begin(), order.end(), 0);
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        if (cfg.max_patches > 0 && static_cast<int64_t>(order.size()) > cfg.max_patches)
            order.resize(static_cast<size_t>(cfg.max_patches));

        int64_t hits = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            TapeScope scope;
            Tensor batch_loss;
            for (size_t bi = start; bi < stop; ++bi) {
                const Patch& p = *all[order[bi]];
                Tensor logits = params.logits_graph(p.image);
                if ((logits.data()[1] > logits.data()[0] ? 1 : 0) == p.label) ++hits;
                Tensor l = cross_entropy(detail::onehot2(p.label), softmax_temperature(logits, 1.0));
                batch_loss = batch_loss.defined() ? add(batch_loss, l) : l;
            }
            batch_loss = scale(batch_loss, 1.0 / static_cast<double>(stop - start));
            assert_finite(batch_loss, "classifier loss");
            scope.tape().backward(batch_loss);
            opt.step(np);
        }
        if (log) {
            double train_acc = static_cast<double>(hits) / static_cast<double>(order.size());
            double val_acc = val_patches.empty()
                                 ? 0.0
                                 : classifier_accuracy(params, val_patches, cfg.max_val_patches);
            double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            log->row({std::to_string(epoch), fmt_double(train_acc), fmt_double(val_acc), fmt_double(secs)});
        }
    }
    return params;
}

inline void save_classifier(ClassifierParams& p, const std::string& path) { save_params(p.params(), path); }

inline ClassifierParams load_classifier(const std::string& path, const VitConfig& cfg) {
    ClassifierParams p;
    Rng init_rng(0);
    p.init(cfg, init_rng);
    load_params(p.params(), Checkpoint::load(path));
    return p;
}

}  // namespace duvsynth
