#pragma once

#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "csv.hpp"
#include "image.hpp"
#include "nn.hpp"
#include "tensor.hpp"
#include "vit.hpp"

namespace duvsynth {

// Augmented multi-crop views of one source patch: teacher consumes the
// global set, the student consumes global + local.
struct ViewSet {
    std::vector<Tensor> global_views;
    std::vector<Tensor> local_views;
    std::string source_patch_id;
};

// Projection head mapping the backbone feature to V prototype logits.
struct DinoHead {
    Linear fc1, fc2;

    void init(int64_t in, int64_t hidden, int64_t out, Rng& rng) {
        fc1.init(in, hidden, rng);
        fc2.init(hidden, out, rng);
    }

    Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

    NamedParams params() {
        NamedParams p;
        append_params(p, "fc1", fc1.params());
        append_params(p, "fc2", fc2.params());
        return p;
    }
};

struct DinoConfig {
    VitConfig backbone;
    int64_t proj_hidden = 128;
    int64_t proj_dim = 256;  // V
    double tau_student = 0.1;
    double tau_teacher = 0.04;
    double ema_momentum = 0.996;
    double center_momentum = 0.9;
    int64_t n_global = 2;
    int64_t n_local = 6;
    double lr = 5e-4;
    double weight_decay = 0.04;
    int64_t epochs = 3;
    int64_t batch_size = 8;
    int64_t max_patches = 256;  // patches subsampled per epoch (0 = all)
};

struct DistillationState {
    VitBackbone student, teacher;
    DinoHead student_head, teacher_head;
    Tensor center;  // [V]
    double tau_s = 0.1, tau_t = 0.04;
    double ema_momentum = 0.996;
    double center_momentum = 0.9;

    void init(const DinoConfig& cfg, Rng& rng) {
        student.init(cfg.backbone, rng);
        student_head.init(cfg.backbone.dim, cfg.proj_hidden, cfg.proj_dim, rng);
        teacher.init(cfg.backbone, rng);
        teacher_head.init(cfg.backbone.dim, cfg.proj_hidden, cfg.proj_dim, rng);
        copy_params(teacher_params(), student_params());  // teacher starts as the student
        center = Tensor(Shape{cfg.proj_dim}, 0.0);
        tau_s = cfg.tau_student;
        tau_t = cfg.tau_teacher;
        ema_momentum = cfg.ema_momentum;
        center_momentum = cfg.center_momentum;
    }

    NamedParams student_params() {
        NamedParams p;
        append_params(p, "backbone", student.params());
        append_params(p, "head", student_head.params());
        return p;
    }

    NamedParams teacher_params() {
        NamedParams p;
        append_params(p, "backbone", teacher.params());
        append_params(p, "head", teacher_head.params());
        return p;
    }
};

// Random square crop covering an area fraction in [lo, hi], resized to
// out_side, then flips and brightness jitter.
inline Tensor augmented_view(const Tensor& patch, Rng& rng, double lo, double hi, int64_t out_side) {
    int64_t side = patch.dim(0);
    double frac = rng.uniform(lo, hi);
    int64_t crop_side = std::clamp<int64_t>(static_cast<int64_t>(std::lround(side * std::sqrt(frac))), 1, side);
    int64_t y0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(side - crop_side + 1)));
    int64_t x0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(side - crop_side + 1)));
    Tensor v = crop(patch, y0, x0, crop_side, crop_side);
    v = resize_bilinear(v, out_side, out_side);
    if (rng.coin(0.5)) v = flip_horizontal(v);
    if (rng.coin(0.5)) v = flip_vertical(v);
    return adjust_brightness(v, rng.uniform(0.8, 1.2));
}

inline ViewSet make_views(const Tensor& patch, Rng& rng, int64_t n_global, int64_t n_local,
                          int64_t global_side, int64_t local_side, const std::string& source_patch_id = "") {
    if (patch.rank() != 3 || patch.dim(0) != patch.dim(1))
        throw DimensionError("make_views: patch must be square [S x S x C]");
    if (patch.dim(0) < 16) throw ParameterError("make_views: patch side must be at least 16");
    if (n_global < 2) throw ParameterError("make_views: need at least 2 global views");
    if (n_local < 0) throw ParameterError("make_views: n_local must be non-negative");
    ViewSet vs;
    vs.source_patch_id = source_patch_id;
    for (int64_t i = 0; i < n_global; ++i)
        vs.global_views.push_back(augmented_view(patch, rng, 0.5, 1.0, global_side));
    for (int64_t i = 0; i < n_local; ++i)
        vs.local_views.push_back(augmented_view(patch, rng, 0.15, 0.4, local_side));
    return vs;
}

struct DistillationLoss {
    Tensor loss;  // scalar, sum over teacher/student view pairs
    int64_t n_pairs = 0;
    std::vector<Tensor> teacher_logits;  // [V] each, for the center update
};

// Eq.-1 style pairing: every teacher global view against every student view
// except itself. Teacher probabilities are centered/sharpened constants;
// only the student path carries gradient.
inline DistillationLoss distillation_loss(DistillationState& state, const ViewSet& views) {
    if (views.global_views.size() < 2)
        throw ParameterError("distillation_loss: need at least 2 global views");
    if (state.tau_s <= 0.0 || state.tau_t <= 0.0)
        throw ParameterError("distillation_loss: temperatures must be positive");

    DistillationLoss out;
    std::vector<Tensor> teacher_probs;
    {
        NoGradScope ng;
        for (const Tensor& g : views.global_views) {
            Tensor logits = reshape(state.teacher_head.forward(state.teacher.class_feature(g)),
                                    Shape{state.center.numel()});
            out.teacher_logits.push_back(logits);
            teacher_probs.push_back(softmax_temperature(sub(logits, state.center), state.tau_t));
        }
    }

    std::vector<Tensor> student_probs;
    std::vector<Tensor> all_views = views.global_views;
    all_views.insert(all_views.end(), views.local_views.begin(), views.local_views.end());
    for (const Tensor& v : all_views) {
        Tensor logits = reshape(state.student_head.forward(state.student.class_feature(v)),
                                Shape{state.center.numel()});
        student_probs.push_back(softmax_temperature(logits, state.tau_s));
    }

    Tensor total;
    for (size_t t = 0; t < teacher_probs.size(); ++t) {
        for (size_t s = 0; s < student_probs.size(); ++s) {
            if (s == t) continue;  // same augmented view
            Tensor h = cross_entropy(teacher_probs[t], student_probs[s]);
            total = total.defined() ? add(total, h) : h;
            ++out.n_pairs;
        }
    }
    out.loss = total;
    return out;
}

// theta_t <- m * theta_t + (1 - m) * theta_s over backbone and head.
inline void ema_update(DistillationState& state) {
    ema_blend(state.teacher_params(), state.student_params(), state.ema_momentum);
}

inline void center_update(DistillationState& state, const std::vector<Tensor>& teacher_logits_batch) {
    if (teacher_logits_batch.empty()) throw ParameterError("center_update: empty batch");
    int64_t v = state.center.numel();
    std::vector<double> mean(static_cast<size_t>(v), 0.0);
    for (const Tensor& t : teacher_logits_batch)
        for (int64_t i = 0; i < v; ++i) mean[static_cast<size_t>(i)] += t.data()[i];
    for (double& m : mean) m /= static_cast<double>(teacher_logits_batch.size());
    double mc = state.center_momentum;
    for (int64_t i = 0; i < v; ++i)
        state.center.data()[i] = mc * state.center.data()[i] + (1.0 - mc) * mean[static_cast<size_t>(i)];
}

// Frozen-teacher backbone feature for one patch; deterministic, no
// augmentation, no gradient.
inline Tensor extract_embedding(const VitBackbone& teacher, const Tensor& patch) {
    NoGradScope ng;
    return reshape(teacher.class_feature(patch), Shape{teacher.cfg.dim});
}

// Self-distillation training over raw patch images. Returns the state with
// the frozen teacher used downstream as the embedding extractor.
inline DistillationState train_dino(const DinoConfig& cfg, const std::vector<Tensor>& patches, Rng& rng,
                                    const std::string& log_csv_path = "") {
    if (patches.empty()) throw DataError("train_dino: no patches");
    DistillationState state;
    state.init(cfg, rng);
    AdamW opt(cfg.lr, cfg.weight_decay);
    NamedParams sp = state.student_params();

    std::unique_ptr<CsvWriter> log;
    if (!log_csv_path.empty()) log = std::make_unique<CsvWriter>(log_csv_path, std::vector<std::string>{"epoch", "loss", "seconds"});

    int64_t local_side = cfg.backbone.side / 2;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        std::vector<size_t> order(patches.size());
        std::iota(order.begin(), order.end(), 0);
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        if (cfg.max_patches > 0 && static_cast<int64_t>(order.size()) > cfg.max_patches)
            order.resize(static_cast<size_t>(cfg.max_patches));

        double epoch_loss = 0.0;
        int64_t epoch_pairs = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            TapeScope scope;
            Tensor batch_loss;
            int64_t batch_pairs = 0;
            std::vector<Tensor> batch_teacher_logits;
            for (size_t bi = start; bi < stop; ++bi) {
                ViewSet views = make_views(patches[order[bi]], rng, cfg.n_global, cfg.n_local,
                                           cfg.backbone.side, local_side);
                DistillationLoss dl = distillation_loss(state, views);
                batch_loss = batch_loss.defined() ? add(batch_loss, dl.loss) : dl.loss;
                batch_pairs += dl.n_pairs;
                for (auto& t : dl.teacher_logits) batch_teacher_logits.push_back(t);
            }
            Tensor step_loss = scale(batch_loss, 1.0 / static_cast<double>(batch_pairs));
            assert_finite(step_loss, "dino loss");
            scope.tape().backward(step_loss);
            opt.step(sp);
            ema_update(state);
            center_update(state, batch_teacher_logits);
            epoch_loss += batch_loss.item();
            epoch_pairs += batch_pairs;
        }
        if (log) {
            double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            log->row({std::to_string(epoch), fmt_double(epoch_loss / static_cast<double>(epoch_pairs)),
                      fmt_double(secs)});
        }
    }
    return state;
}

inline void save_dino(DistillationState& state, const std::string& teacher_path, const std::string& student_path) {
    save_params(state.teacher_params(), teacher_path, {{"center", state.center}});
    save_params(state.student_params(), student_path, {{"center", state.center}});
}

inline void load_teacher(DistillationState& state, const std::string& teacher_path) {
    Checkpoint ck = Checkpoint::load(teacher_path);
    load_params(state.teacher_params(), ck);
    if (const Tensor* c = ck.find("center"))
        std::copy(c->data(), c->data() + c->numel(), state.center.data());
}

}  // namespace duvsynth
