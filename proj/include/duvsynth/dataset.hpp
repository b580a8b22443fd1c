#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "csv.hpp"
#include "errors.hpp"
#include "image.hpp"
#include "manifest.hpp"
#include "patch.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace duvsynth {

namespace fs = std::filesystem;

struct DatasetConfig {
    int64_t n_wsi = 40;
    int64_t wsi_side = 256;
    int64_t patch_side = 32;
    double malignant_wsi_fraction = 0.59;          // mirrors 84/142
    double background_intensity_threshold = 0.05;  // pixel counts as background below this
    double background_fraction_threshold = 0.9;    // drop patch when more than this is background
};

// A synthetic whole-surface image: tissue disk on a dark background, with
// per-pixel malignant annotation mask.
struct ToyWsi {
    std::string wsi_id;
    Tensor image;  // [S x S x 3]
    Tensor mask;   // [S x S x 1], 1 = malignant
    int64_t label = kBenign;
};

namespace detail {

// Scalar intensity field -> fluorescence-like RGB.
inline void shade(double v, double* rgb) {
    rgb[0] = std::clamp(0.45 * v, 0.0, 1.0);
    rgb[1] = std::clamp(0.85 * v, 0.0, 1.0);
    rgb[2] = std::clamp(1.00 * v, 0.0, 1.0);
}

struct Blob {
    double cx, cy, sigma, amp;
};

struct TumorRegion {
    double cx, cy, ax, ay, rot;      // ellipse
    double wavelength, angle, phase; // grating texture
};

}  // namespace detail

// Benign tissue renders as smooth low-frequency blobs, malignant regions as
// high-frequency gratings; both sit on a near-black background so the
// background filter has work to do.
inline ToyWsi generate_toy_wsi(Rng& rng, const std::string& wsi_id, int64_t label, int64_t side) {
    ToyWsi w;
    w.wsi_id = wsi_id;
    w.label = label;
    w.image = Tensor(Shape{side, side, 3});
    w.mask = Tensor(Shape{side, side, 1});

    double s = static_cast<double>(side);
    double cx = s * rng.uniform(0.45, 0.55);
    double cy = s * rng.uniform(0.45, 0.55);
    double radius = s * rng.uniform(0.40, 0.46);

    std::vector<detail::Blob> blobs;
    for (int i = 0; i < 4; ++i)
        blobs.push_back({cx + radius * rng.uniform(-0.7, 0.7), cy + radius * rng.uniform(-0.7, 0.7),
                         s * rng.uniform(0.12, 0.30), rng.uniform(-0.15, 0.20)});

    std::vector<detail::TumorRegion> regions;
    if (label == kMalignant) {
        int n_regions = 2 + static_cast<int>(rng.below(2));  // 2..3
        for (int i = 0; i < n_regions; ++i) {
            detail::TumorRegion r;
            double rr = radius * rng.uniform(0.0, 0.55);
            double th = rng.uniform(0.0, 6.283185307179586);
            r.cx = cx + rr * std::cos(th);
            r.cy = cy + rr * std::sin(th);
            r.ax = radius * rng.uniform(0.35, 0.62);
            r.ay = radius * rng.uniform(0.35, 0.62);
            r.rot = rng.uniform(0.0, 3.141592653589793);
            r.wavelength = rng.uniform(4.0, 6.5);
            r.angle = rng.uniform(0.0, 3.141592653589793);
            r.phase = rng.uniform(0.0, 6.283185307179586);
            regions.push_back(r);
        }
    }

    for (int64_t y = 0; y < side; ++y) {
        for (int64_t x = 0; x < side; ++x) {
            double dx = static_cast<double>(x) - cx;
            double dy = static_cast<double>(y) - cy;
            double dist = std::sqrt(dx * dx + dy * dy);
            double v;
            double mask_v = 0.0;
            if (dist > radius) {
                v = 0.02;  // slide background
            } else {
                v = 0.45;
                for (const auto& b : blobs) {
                    double bx = static_cast<double>(x) - b.cx;
                    double by = static_cast<double>(y) - b.cy;
                    v += b.amp * std::exp(-(bx * bx + by * by) / (2.0 * b.sigma * b.sigma));
                }
                v = std::clamp(v, 0.18, 0.85);
                for (const auto& r : regions) {
                    double rx = static_cast<double>(x) - r.cx;
                    double ry = static_cast<double>(y) - r.cy;
                    double ex = (rx * std::cos(r.rot) + ry * std::sin(r.rot)) / r.ax;
                    double ey = (-rx * std::sin(r.rot) + ry * std::cos(r.rot)) / r.ay;
                    double e = ex * ex + ey * ey;
                    if (e < 1.0) {
                        // fade over the outer 15% of the ellipse
                        double env = std::clamp((1.0 - e) / 0.15, 0.0, 1.0);
                        double carrier =
                            std::sin(6.283185307179586 *
                                         (static_cast<double>(x) * std::cos(r.angle) +
                                          static_cast<double>(y) * std::sin(r.angle)) /
                                         r.wavelength +
                                     r.phase);
                        double grating = 0.52 + 0.40 * carrier;
                        v = (1.0 - env) * v + env * grating;
                        if (env > 0.5) mask_v = 1.0;
                    }
                }
                // soften the disk rim so edge tiles grade into background
                double rim = std::clamp((radius - dist) / 2.0, 0.0, 1.0);
                v = rim * v + (1.0 - rim) * 0.02;
            }
            detail::shade(v, w.image.data() + (y * side + x) * 3);
            w.mask.data()[y * side + x] = mask_v;
        }
    }
    return w;
}

inline std::vector<ToyWsi> generate_toy_wsis(const DatasetConfig& cfg, Rng& rng) {
    if (cfg.n_wsi < 10) throw ParameterError("generate_toy_dataset: n_wsi must be >= 10");
    int64_t n_malignant = static_cast<int64_t>(std::lround(cfg.malignant_wsi_fraction * static_cast<double>(cfg.n_wsi)));
    std::vector<ToyWsi> out;
    for (int64_t i = 0; i < cfg.n_wsi; ++i) {
        char id[32];
        std::snprintf(id, sizeof(id), "wsi_%04lld", static_cast<long long>(i));
        int64_t label = i < n_malignant ? kMalignant : kBenign;
        Rng wsi_rng = rng.fork(static_cast<uint64_t>(i) + 1000);
        out.push_back(generate_toy_wsi(wsi_rng, id, label, cfg.wsi_side));
    }
    return out;
}

// Non-overlapping grid tiling with background filtering and mask-majority
// labeling.
inline std::vector<Patch> tile_and_filter(const ToyWsi& wsi, int64_t patch_side,
                                          double bg_intensity_threshold = 0.05,
                                          double bg_fraction_threshold = 0.9) {
    int64_t side = wsi.image.dim(0);
    if (patch_side <= 0 || side % patch_side != 0)
        throw ParameterError("tile_and_filter: patch_side must divide the WSI side");
    int64_t grid = side / patch_side;
    std::vector<Patch> out;
    for (int64_t gy = 0; gy < grid; ++gy) {
        for (int64_t gx = 0; gx < grid; ++gx) {
            int64_t background = 0, malignant = 0;
            Tensor img(Shape{patch_side, patch_side, 3});
            for (int64_t y = 0; y < patch_side; ++y)
                for (int64_t x = 0; x < patch_side; ++x) {
                    int64_t sy = gy * patch_side + y, sx = gx * patch_side + x;
                    const double* px = wsi.image.data() + (sy * side + sx) * 3;
                    double intensity = (px[0] + px[1] + px[2]) / 3.0;
                    if (intensity < bg_intensity_threshold) ++background;
                    if (wsi.mask.data()[sy * side + sx] > 0.5) ++malignant;
                    for (int64_t c = 0; c < 3; ++c) img.data()[(y * patch_side + x) * 3 + c] = px[c];
                }
            double n_px = static_cast<double>(patch_side * patch_side);
            if (static_cast<double>(background) / n_px > bg_fraction_threshold) continue;
            Patch p;
            char pid[64];
            std::snprintf(pid, sizeof(pid), "%s_r%02lldc%02lld", wsi.wsi_id.c_str(), static_cast<long long>(gy),
                          static_cast<long long>(gx));
            p.patch_id = pid;
            p.wsi_id = wsi.wsi_id;
            p.label = static_cast<double>(malignant) / n_px > 0.5 ? kMalignant : kBenign;
            p.image = img;
            out.push_back(std::move(p));
        }
    }
    return out;
}

/* ------------------------------------------------------- directory IO */

struct ToyDataset {
    int64_t wsi_side = 256;
    int64_t patch_side = 32;
    std::vector<Patch> patches;
    std::map<std::string, int64_t> wsi_labels;
};

inline void write_dataset(const std::string& dir, const std::vector<ToyWsi>& wsis,
                          const std::vector<Patch>& patches, const DatasetConfig& cfg,
                          ManifestRecorder* manifest = nullptr) {
    fs::create_directories(fs::path(dir) / "wsis");
    fs::create_directories(fs::path(dir) / "patches");
    auto note = [&](const fs::path& p) {
        if (manifest) manifest->note_write(p.string());
    };
    {
        CsvWriter meta((fs::path(dir) / "meta.csv").string(), {"key", "value"});
        meta.row({"wsi_side", std::to_string(cfg.wsi_side)});
        meta.row({"patch_side", std::to_string(cfg.patch_side)});
    }
    note(fs::path(dir) / "meta.csv");
    {
        CsvWriter labels((fs::path(dir) / "labels.csv").string(), {"wsi_id", "label"});
        for (const auto& w : wsis) {
            labels.row({w.wsi_id, label_name(w.label)});
            fs::path img = fs::path(dir) / "wsis" / (w.wsi_id + ".png");
            fs::path mask = fs::path(dir) / "wsis" / (w.wsi_id + "_mask.png");
            write_png(img.string(), w.image);
            write_png(mask.string(), w.mask);
            note(img);
            note(mask);
        }
    }
    note(fs::path(dir) / "labels.csv");
    {
        CsvWriter pcsv((fs::path(dir) / "patches.csv").string(), {"patch_id", "wsi_id", "label"});
        for (const auto& p : patches) {
            pcsv.row({p.patch_id, p.wsi_id, label_name(p.label)});
            fs::path pd = fs::path(dir) / "patches" / p.wsi_id;
            fs::create_directories(pd);
            fs::path f = pd / (p.patch_id + ".png");
            write_png(f.string(), p.image);
            note(f);
        }
    }
    note(fs::path(dir) / "patches.csv");
}

// Generates, tiles and persists the toy dataset; the on-disk layout is the
// contract every stage reads from.
inline ToyDataset generate_toy_dataset(const DatasetConfig& cfg, Rng& rng, const std::string& dir,
                                       ManifestRecorder* manifest = nullptr) {
    std::vector<ToyWsi> wsis = generate_toy_wsis(cfg, rng);
    ToyDataset ds;
    ds.wsi_side = cfg.wsi_side;
    ds.patch_side = cfg.patch_side;
    for (const auto& w : wsis) {
        ds.wsi_labels[w.wsi_id] = w.label;
        for (auto& p : tile_and_filter(w, cfg.patch_side, cfg.background_intensity_threshold,
                                       cfg.background_fraction_threshold))
            ds.patches.push_back(std::move(p));
    }
    write_dataset(dir, wsis, ds.patches, cfg, manifest);
    return ds;
}

inline ToyDataset load_dataset(const std::string& dir, ManifestRecorder* manifest = nullptr) {
    ToyDataset ds;
    auto note = [&](const fs::path& p) {
        if (manifest) manifest->note_read(p.string());
    };
    fs::path meta_path = fs::path(dir) / "meta.csv";
    if (!fs::exists(meta_path)) throw DataError("load_dataset: no dataset at " + dir);
    for (const auto& row : read_csv(meta_path.string())) {
        if (row.size() == 2 && row[0] == "wsi_side") ds.wsi_side = std::stoll(row[1]);
        if (row.size() == 2 && row[0] == "patch_side") ds.patch_side = std::stoll(row[1]);
    }
    note(meta_path);
    fs::path labels_path = fs::path(dir) / "labels.csv";
    auto label_rows = read_csv(labels_path.string());
    for (size_t i = 1; i < label_rows.size(); ++i)
        ds.wsi_labels[label_rows[i][0]] = label_rows[i][1] == "malignant" ? kMalignant : kBenign;
    note(labels_path);
    fs::path patches_path = fs::path(dir) / "patches.csv";
    auto patch_rows = read_csv(patches_path.string());
    for (size_t i = 1; i < patch_rows.size(); ++i) {
        Patch p;
        p.patch_id = patch_rows[i][0];
        p.wsi_id = patch_rows[i][1];
        p.label = patch_rows[i][2] == "malignant" ? kMalignant : kBenign;
        fs::path f = fs::path(dir) / "patches" / p.wsi_id / (p.patch_id + ".png");
        p.image = read_png(f.string());
        note(f);
        ds.patches.push_back(std::move(p));
    }
    note(patches_path);
    return ds;
}

/* --------------------------------------------------- synthetic patches */

struct SyntheticRecord {
    std::string filename;
    int64_t label = kBenign;
    std::string cond_kind;  // "ssl" | "class"
    uint64_t seed = 0;
    std::string source_patch_id;  // real patch whose embedding conditioned this
};

inline void write_synthetic(const std::string& dataset_dir, const std::string& tag,
                            const std::vector<Patch>& patches, const std::vector<SyntheticRecord>& records,
                            ManifestRecorder* manifest = nullptr) {
    if (patches.size() != records.size()) throw DataError("write_synthetic: records misaligned");
    fs::path dir = fs::path(dataset_dir) / "synthetic" / tag;
    fs::create_directories(dir);
    CsvWriter m((dir / "manifest.csv").string(), {"filename", "class", "cond_kind", "seed", "source_patch"});
    for (size_t i = 0; i < patches.size(); ++i) {
        fs::path f = dir / records[i].filename;
        write_png(f.string(), patches[i].image);
        if (manifest) manifest->note_write(f.string());
        m.row({records[i].filename, label_name(records[i].label), records[i].cond_kind,
               std::to_string(records[i].seed), records[i].source_patch_id});
    }
    m.flush();
    if (manifest) manifest->note_write((dir / "manifest.csv").string());
}

inline std::pair<std::vector<Patch>, std::vector<SyntheticRecord>> load_synthetic(
    const std::string& dataset_dir, const std::string& tag, ManifestRecorder* manifest = nullptr) {
    fs::path dir = fs::path(dataset_dir) / "synthetic" / tag;
    auto rows = read_csv((dir / "manifest.csv").string());
    std::vector<Patch> patches;
    std::vector<SyntheticRecord> records;
    for (size_t i = 1; i < rows.size(); ++i) {
        SyntheticRecord r;
        r.filename = rows[i][0];
        r.label = rows[i][1] == "malignant" ? kMalignant : kBenign;
        r.cond_kind = rows[i][2];
        r.seed = std::stoull(rows[i][3]);
        if (rows[i].size() > 4) r.source_patch_id = rows[i][4];
        Patch p;
        p.patch_id = r.filename;
        p.label = r.label;
        p.synthetic = true;
        p.source_patch_id = r.source_patch_id;
        fs::path f = dir / r.filename;
        p.image = read_png(f.string());
        if (manifest) manifest->note_read(f.string());
        patches.push_back(std::move(p));
        records.push_back(std::move(r));
    }
    if (manifest) manifest->note_read((dir / "manifest.csv").string());
    return {patches, records};
}

}  // namespace duvsynth
