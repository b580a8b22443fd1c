#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "classifier.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace duvsynth {

/* ---------------------------------------------------- WSI aggregation */

struct WsiPrediction {
    std::string wsi_id;
    double patch_fraction_malignant = 0.0;
    double threshold = 0.2;
    int64_t label = kBenign;  // 1 iff fraction > threshold, strictly
};

// Mean of the (binary) patch predictions against a strict threshold. Only
// real patches of the WSI belong here; synthetic patches never reach
// evaluation.
inline WsiPrediction aggregate_wsi(const std::vector<PatchPrediction>& patch_preds, double theta) {
    if (patch_preds.empty()) throw DataError("aggregate_wsi: no patch predictions");
    if (theta < 0.0 || theta > 1.0) throw ParameterError("aggregate_wsi: theta must be in [0,1]");
    WsiPrediction out;
    out.wsi_id = patch_preds.front().wsi_id;
    int64_t malignant = 0;
    for (const auto& p : patch_preds) {
        if (p.wsi_id != out.wsi_id) throw DataError("aggregate_wsi: predictions span multiple WSIs");
        if (p.label == kMalignant) ++malignant;
    }
    out.patch_fraction_malignant = static_cast<double>(malignant) / static_cast<double>(patch_preds.size());
    out.threshold = theta;
    out.label = out.patch_fraction_malignant > theta ? kMalignant : kBenign;
    return out;
}

/* ------------------------------------------------------------- metrics */

struct ConfusionMetrics {
    int64_t tp = 0, fn = 0, tn = 0, fp = 0;
    std::optional<double> accuracy, sensitivity, specificity;
};

// Malignant is positive. Metrics with an empty denominator are reported as
// absent, not zero.
inline ConfusionMetrics confusion_metrics(const std::vector<WsiPrediction>& preds,
                                          const std::map<std::string, int64_t>& truth) {
    ConfusionMetrics m;
    for (const auto& p : preds) {
        auto it = truth.find(p.wsi_id);
        if (it == truth.end()) throw DataError("confusion_metrics: no ground truth for " + p.wsi_id);
        bool actual = it->second == kMalignant;
        bool called = p.label == kMalignant;
        if (actual && called) ++m.tp;
        else if (actual && !called) ++m.fn;
        else if (!actual && !called) ++m.tn;
        else ++m.fp;
    }
    int64_t total = m.tp + m.fn + m.tn + m.fp;
    if (total > 0) m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(total);
    if (m.tp + m.fn > 0) m.sensitivity = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
    if (m.tn + m.fp > 0) m.specificity = static_cast<double>(m.tn) / static_cast<double>(m.tn + m.fp);
    return m;
}

/* ---------------------------------------------------------------- folds */

struct FoldSplit {
    int64_t fold_index = 0;
    std::vector<std::string> test_wsi_ids;
    std::vector<std::string> train_wsi_ids;
    std::vector<std::string> val_wsi_ids;
};

// Stratified k-fold at WSI level; within each fold, non-test WSIs are split
// 80/20 into train/val, also per class, so no patch of a test WSI can reach
// training.
inline std::vector<FoldSplit> make_folds(const std::vector<std::string>& wsi_ids,
                                         const std::vector<int64_t>& labels, int64_t k, Rng& rng) {
    if (k < 2) throw ParameterError("make_folds: k must be >= 2");
    if (wsi_ids.size() != labels.size()) throw DataError("make_folds: ids/labels misaligned");
    std::vector<std::vector<std::string>> by_class(2);
    for (size_t i = 0; i < wsi_ids.size(); ++i) by_class[labels[i] == kMalignant ? 1 : 0].push_back(wsi_ids[i]);
    for (auto& group : by_class) {
        if (static_cast<int64_t>(group.size()) < k)
            throw DataError("make_folds: a class has fewer WSIs than folds");
        for (size_t i = group.size(); i > 1; --i) std::swap(group[i - 1], group[rng.below(i)]);
    }
    std::vector<FoldSplit> folds(static_cast<size_t>(k));
    for (int64_t f = 0; f < k; ++f) folds[static_cast<size_t>(f)].fold_index = f;
    for (const auto& group : by_class)
        for (size_t i = 0; i < group.size(); ++i)
            folds[i % static_cast<size_t>(k)].test_wsi_ids.push_back(group[i]);
    for (auto& fold : folds) {
        for (const auto& group : by_class) {
            std::vector<std::string> rest;
            for (const auto& id : group)
                if (std::find(fold.test_wsi_ids.begin(), fold.test_wsi_ids.end(), id) == fold.test_wsi_ids.end())
                    rest.push_back(id);
            for (size_t i = rest.size(); i > 1; --i) std::swap(rest[i - 1], rest[rng.below(i)]);
            size_t n_val = static_cast<size_t>(std::lround(0.2 * static_cast<double>(rest.size())));
            for (size_t i = 0; i < rest.size(); ++i)
                (i < n_val ? fold.val_wsi_ids : fold.train_wsi_ids).push_back(rest[i]);
        }
        std::sort(fold.test_wsi_ids.begin(), fold.test_wsi_ids.end());
        std::sort(fold.train_wsi_ids.begin(), fold.train_wsi_ids.end());
        std::sort(fold.val_wsi_ids.begin(), fold.val_wsi_ids.end());
    }
    return folds;
}

/* ------------------------------------------------------ feature stats */

struct GaussianStats {
    Tensor mean;  // [d]
    Tensor cov;   // [d x d], symmetric
    int64_t n = 0;
};

// Sample mean and unbiased covariance of feature vectors.
inline GaussianStats feature_stats(const std::vector<Tensor>& features) {
    if (features.empty()) throw DataError("feature_stats: no features");
    int64_t d = features.front().numel();
    if (static_cast<int64_t>(features.size()) < d + 1)
        throw DataError("feature_stats: need at least d+1 = " + std::to_string(d + 1) + " samples, got " +
                        std::to_string(features.size()));
    GaussianStats st;
    st.n = static_cast<int64_t>(features.size());
    st.mean = Tensor(Shape{d});
    for (const Tensor& f : features) {
        if (f.numel() != d) throw DimensionError("feature_stats: inconsistent feature width");
        for (int64_t i = 0; i < d; ++i) st.mean.data()[i] += f.data()[i];
    }
    for (int64_t i = 0; i < d; ++i) st.mean.data()[i] /= static_cast<double>(st.n);
    st.cov = Tensor(Shape{d, d});
    for (const Tensor& f : features)
        for (int64_t i = 0; i < d; ++i) {
            double di = f.data()[i] - st.mean.data()[i];
            for (int64_t j = 0; j < d; ++j)
                st.cov.data()[i * d + j] += di * (f.data()[j] - st.mean.data()[j]);
        }
    for (int64_t i = 0; i < d * d; ++i) st.cov.data()[i] /= static_cast<double>(st.n - 1);
    return st;
}

inline GaussianStats feature_stats(const std::vector<Patch>& patches,
                                   const std::function<Tensor(const Tensor&)>& extractor) {
    std::vector<Tensor> feats;
    feats.reserve(patches.size());
    for (const Patch& p : patches) feats.push_back(extractor(p.image));
    return feature_stats(feats);
}

/* ------------------------------------------------------------- linalg */

namespace linalg {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
// eigenvalues (unsorted) and column eigenvectors with A = V diag(w) V^T.
inline void sym_eigen(const Tensor& a, std::vector<double>& eigenvalues, Tensor& eigenvectors) {
    if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw DimensionError("sym_eigen: matrix must be square");
    int64_t n = a.dim(0);
    Tensor m = a.clone();
    eigenvectors = Tensor(Shape{n, n});
    for (int64_t i = 0; i < n; ++i) eigenvectors.data()[i * n + i] = 1.0;
    double* md = m.data();
    double* vd = eigenvectors.data();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) off += md[p * n + q] * md[p * n + q];
        if (off < 1e-26 * static_cast<double>(n * n)) break;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) {
                double apq = md[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                double app = md[p * n + p], aqq = md[q * n + q];
                double tau = (aqq - app) / (2.0 * apq);
                double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = t * c;
                for (int64_t i = 0; i < n; ++i) {
                    double aip = md[i * n + p], aiq = md[i * n + q];
                    md[i * n + p] = c * aip - s * aiq;
                    md[i * n + q] = s * aip + c * aiq;
                }
                for (int64_t i = 0; i < n; ++i) {
                    double api = md[p * n + i], aqi = md[q * n + i];
                    md[p * n + i] = c * api - s * aqi;
                    md[q * n + i] = s * api + c * aqi;
                }
                for (int64_t i = 0; i < n; ++i) {
                    double vip = vd[i * n + p], viq = vd[i * n + q];
                    vd[i * n + p] = c * vip - s * viq;
                    vd[i * n + q] = s * vip + c * viq;
                }
            }
    }
    eigenvalues.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) eigenvalues[static_cast<size_t>(i)] = md[i * n + i];
}

inline Tensor mat_mul(const Tensor& a, const Tensor& b) {
    Tensor out(Shape{a.dim(0), b.dim(1)});
    detail::gemm(false, false, a.dim(0), b.dim(1), a.dim(1), 1.0, a.data(), b.data(), 0.0, out.data());
    return out;
}

// Symmetric PSD square root via eigendecomposition; negative eigenvalues
// are clamped to zero.
inline Tensor sqrtm_psd(const Tensor& a) {
    std::vector<double> w;
    Tensor v;
    sym_eigen(a, w, v);
    int64_t n = a.dim(0);
    Tensor scaled(Shape{n, n});
    for (int64_t i = 0; i < n; ++i) {
        double s = std::sqrt(std::max(w[static_cast<size_t>(i)], 0.0));
        for (int64_t r = 0; r < n; ++r) scaled.data()[r * n + i] = v.data()[r * n + i] * s;
    }
    Tensor vt(Shape{n, n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) vt.data()[i * n + j] = v.data()[j * n + i];
    return mat_mul(scaled, vt);
}

}  // namespace linalg

// Frechet distance between Gaussian feature summaries:
// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the matrix
// square root evaluated through the symmetric product
// S_a^{1/2} S_b S_a^{1/2} and negative eigenvalues clamped to zero.
inline double fid(const GaussianStats& a, const GaussianStats& b) {
    if (a.mean.numel() != b.mean.numel()) throw DimensionError("fid: dimension mismatch");
    int64_t d = a.mean.numel();
    double mean_term = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        double diff = a.mean.data()[i] - b.mean.data()[i];
        mean_term += diff * diff;
    }
    double tr_a = 0.0, tr_b = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        tr_a += a.cov.data()[i * d + i];
        tr_b += b.cov.data()[i * d + i];
    }
    Tensor root_a = linalg::sqrtm_psd(a.cov);
    Tensor inner = linalg::mat_mul(linalg::mat_mul(root_a, b.cov), root_a);
    // symmetrize against fp drift before the eigensolve
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = i + 1; j < d; ++j) {
            double m = 0.5 * (inner.data()[i * d + j] + inner.data()[j * d + i]);
            inner.data()[i * d + j] = m;
            inner.data()[j * d + i] = m;
        }
    std::vector<double> w;
    Tensor v;
    linalg::sym_eigen(inner, w, v);
    double tr_sqrt = 0.0;
    for (double lam : w) tr_sqrt += std::sqrt(std::max(lam, 0.0));
    return std::max(mean_term + tr_a + tr_b - 2.0 * tr_sqrt, 0.0);
}

}  // namespace duvsynth
