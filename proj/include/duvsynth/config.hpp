#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "classifier.hpp"
#include "dataset.hpp"
#include "diffusion.hpp"
#include "dino.hpp"
#include "errors.hpp"
#include "vae.hpp"

namespace duvsynth {

using json = nlohmann::json;

struct SamplingConfig {
    int64_t count_per_class = 5000;
    double guidance_scale = 2.0;
    int64_t steps = 50;
    std::string conditioning = "ssl";  // ssl | class
};

struct EvaluationConfig {
    int64_t k_folds = 5;
    double threshold = 0.2;  // Eq.-9 theta
    std::vector<uint64_t> seeds = {1, 2, 3};
};

struct PipelineConfig {
    bool parallel_folds = true;
};

// Every stage hyperparameter in one serializable document: a run is
// reproducible from this plus the master seed.
struct ExperimentConfig {
    DatasetConfig dataset;
    DinoConfig dino;
    VaeConfig vae;
    LdmConfig ldm;
    SamplingConfig sampling;
    ClassifierConfig classifier;
    std::string classifier_synthetic = "ssl";  // none | ssl | class
    EvaluationConfig evaluation;
    PipelineConfig pipeline;

    // Fields derived from others rather than read from the file.
    void finalize() {
        dino.backbone.side = dataset.patch_side;
        dino.backbone.channels = 3;
        classifier.backbone.side = dataset.patch_side;
        classifier.backbone.channels = 3;
        ldm.denoiser.latent_channels = vae.latent_channels;
        ldm.denoiser.cond_dim = dino.backbone.dim;
        ldm.denoiser.n_classes = 2;
    }

    void validate() const {
        if (dataset.patch_side % VaeParams::kScaleFactor != 0)
            throw ParameterError("config: patch_side must be divisible by the VAE factor 4");
        if (dataset.patch_side % dino.backbone.sub_patch != 0)
            throw ParameterError("config: dino sub_patch must divide patch_side");
        if (dataset.patch_side % classifier.backbone.sub_patch != 0)
            throw ParameterError("config: classifier sub_patch must divide patch_side");
        if (dino.backbone.dim % dino.backbone.heads != 0 ||
            classifier.backbone.dim % classifier.backbone.heads != 0)
            throw ParameterError("config: heads must divide dim");
        if (sampling.steps < 1 || sampling.steps > ldm.T)
            throw ParameterError("config: sampling steps must be in 1..T");
        if (sampling.conditioning != "ssl" && sampling.conditioning != "class")
            throw ParameterError("config: sampling.conditioning must be ssl or class");
        if (classifier_synthetic != "none" && classifier_synthetic != "ssl" && classifier_synthetic != "class")
            throw ParameterError("config: classifier.synthetic must be none, ssl or class");
        if (classifier_synthetic != "none" && classifier_synthetic != sampling.conditioning)
            throw ParameterError("config: classifier.synthetic must match sampling.conditioning");
        if (ldm.drop_prob < 0.0 || ldm.drop_prob > 1.0)
            throw ParameterError("config: drop_prob must be in [0,1]");
        if (evaluation.threshold < 0.0 || evaluation.threshold > 1.0)
            throw ParameterError("config: threshold must be in [0,1]");
        if (evaluation.k_folds < 2) throw ParameterError("config: k_folds must be >= 2");
        if (evaluation.seeds.empty()) throw ParameterError("config: need at least one seed");
    }
};

namespace detail {

inline json backbone_to_json(const VitConfig& b) {
    return json{{"sub_patch", b.sub_patch}, {"dim", b.dim},       {"layers", b.layers},
                {"heads", b.heads},         {"mlp_hidden", b.mlp_hidden}};
}

inline void backbone_from_json(const json& j, VitConfig& b) {
    b.sub_patch = j.at("sub_patch").get<int64_t>();
    b.dim = j.at("dim").get<int64_t>();
    b.layers = j.at("layers").get<int64_t>();
    b.heads = j.at("heads").get<int64_t>();
    b.mlp_hidden = j.at("mlp_hidden").get<int64_t>();
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
    json j;
    j["dataset"] = {{"n_wsi", c.dataset.n_wsi},
                    {"wsi_side", c.dataset.wsi_side},
                    {"patch_side", c.dataset.patch_side},
                    {"malignant_wsi_fraction", c.dataset.malignant_wsi_fraction},
                    {"background_intensity_threshold", c.dataset.background_intensity_threshold},
                    {"background_fraction_threshold", c.dataset.background_fraction_threshold}};
    j["dino"] = {{"epochs", c.dino.epochs},
                 {"batch_size", c.dino.batch_size},
                 {"max_patches", c.dino.max_patches},
                 {"lr", c.dino.lr},
                 {"weight_decay", c.dino.weight_decay},
                 {"ema_momentum", c.dino.ema_momentum},
                 {"center_momentum", c.dino.center_momentum},
                 {"tau_student", c.dino.tau_student},
                 {"tau_teacher", c.dino.tau_teacher},
                 {"n_global", c.dino.n_global},
                 {"n_local", c.dino.n_local},
                 {"proj_hidden", c.dino.proj_hidden},
                 {"proj_dim", c.dino.proj_dim},
                 {"backbone", detail::backbone_to_json(c.dino.backbone)}};
    j["vae"] = {{"epochs", c.vae.epochs},       {"batch_size", c.vae.batch_size},
                {"max_patches", c.vae.max_patches}, {"lr", c.vae.lr},
                {"kl_weight", c.vae.kl_weight}, {"latent_channels", c.vae.latent_channels},
                {"base_width", c.vae.base_width}};
    j["ldm"] = {{"epochs", c.ldm.epochs},
                {"batch_size", c.ldm.batch_size},
                {"max_latents", c.ldm.max_latents},
                {"lr", c.ldm.lr},
                {"T", c.ldm.T},
                {"beta_start", c.ldm.beta_start},
                {"beta_end", c.ldm.beta_end},
                {"drop_prob", c.ldm.drop_prob},
                {"width1", c.ldm.denoiser.width1},
                {"width2", c.ldm.denoiser.width2},
                {"time_dim", c.ldm.denoiser.time_dim},
                {"time_sin_dim", c.ldm.denoiser.time_sin_dim}};
    j["sampling"] = {{"count_per_class", c.sampling.count_per_class},
                     {"guidance_scale", c.sampling.guidance_scale},
                     {"steps", c.sampling.steps},
                     {"conditioning", c.sampling.conditioning}};
    j["classifier"] = {{"epochs", c.classifier.epochs},
                       {"batch_size", c.classifier.batch_size},
                       {"max_patches", c.classifier.max_patches},
                       {"max_val_patches", c.classifier.max_val_patches},
                       {"lr", c.classifier.lr},
                       {"momentum", c.classifier.momentum},
                       {"synthetic", c.classifier_synthetic},
                       {"backbone", detail::backbone_to_json(c.classifier.backbone)}};
    j["evaluation"] = {{"k_folds", c.evaluation.k_folds},
                       {"threshold", c.evaluation.threshold},
                       {"seeds", c.evaluation.seeds}};
    j["pipeline"] = {{"parallel_folds", c.pipeline.parallel_folds}};
    return j;
}

namespace detail {

// Unknown keys are an error: they silently change experiments otherwise.
inline void check_known_keys(const json& user, const json& schema, const std::string& path) {
    for (auto it = user.begin(); it != user.end(); ++it) {
        std::string key_path = path.empty() ? it.key() : path + "." + it.key();
        if (!schema.contains(it.key())) throw DataError("config: unknown key '" + key_path + "'");
        if (schema.at(it.key()).is_object()) {
            if (!it.value().is_object()) throw DataError("config: '" + key_path + "' must be an object");
            check_known_keys(it.value(), schema.at(it.key()), key_path);
        }
    }
}

inline json merged_with_defaults(const json& user, const json& defaults) {
    json out = defaults;
    out.merge_patch(user);
    return out;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& user) {
    ExperimentConfig def;
    def.finalize();
    json schema = to_json(def);
    detail::check_known_keys(user, schema, "");
    json j = detail::merged_with_defaults(user, schema);

    ExperimentConfig c;
    const json& d = j.at("dataset");
    c.dataset.n_wsi = d.at("n_wsi").get<int64_t>();
    c.dataset.wsi_side = d.at("wsi_side").get<int64_t>();
    c.dataset.patch_side = d.at("patch_side").get<int64_t>();
    c.dataset.malignant_wsi_fraction = d.at("malignant_wsi_fraction").get<double>();
    c.dataset.background_intensity_threshold = d.at("background_intensity_threshold").get<double>();
    c.dataset.background_fraction_threshold = d.at("background_fraction_threshold").get<double>();

    const json& dn = j.at("dino");
    c.dino.epochs = dn.at("epochs").get<int64_t>();
    c.dino.batch_size = dn.at("batch_size").get<int64_t>();
    c.dino.max_patches = dn.at("max_patches").get<int64_t>();
    c.dino.lr = dn.at("lr").get<double>();
    c.dino.weight_decay = dn.at("weight_decay").get<double>();
    c.dino.ema_momentum = dn.at("ema_momentum").get<double>();
    c.dino.center_momentum = dn.at("center_momentum").get<double>();
    c.dino.tau_student = dn.at("tau_student").get<double>();
    c.dino.tau_teacher = dn.at("tau_teacher").get<double>();
    c.dino.n_global = dn.at("n_global").get<int64_t>();
    c.dino.n_local = dn.at("n_local").get<int64_t>();
    c.dino.proj_hidden = dn.at("proj_hidden").get<int64_t>();
    c.dino.proj_dim = dn.at("proj_dim").get<int64_t>();
    detail::backbone_from_json(dn.at("backbone"), c.dino.backbone);

    const json& v = j.at("vae");
    c.vae.epochs = v.at("epochs").get<int64_t>();
    c.vae.batch_size = v.at("batch_size").get<int64_t>();
    c.vae.max_patches = v.at("max_patches").get<int64_t>();
    c.vae.lr = v.at("lr").get<double>();
    c.vae.kl_weight = v.at("kl_weight").get<double>();
    c.vae.latent_channels = v.at("latent_channels").get<int64_t>();
    c.vae.base_width = v.at("base_width").get<int64_t>();

    const json& l = j.at("ldm");
    c.ldm.epochs = l.at("epochs").get<int64_t>();
    c.ldm.batch_size = l.at("batch_size").get<int64_t>();
    c.ldm.max_latents = l.at("max_latents").get<int64_t>();
    c.ldm.lr = l.at("lr").get<double>();
    c.ldm.T = l.at("T").get<int64_t>();
    c.ldm.beta_start = l.at("beta_start").get<double>();
    c.ldm.beta_end = l.at("beta_end").get<double>();
    c.ldm.drop_prob = l.at("drop_prob").get<double>();
    c.ldm.denoiser.width1 = l.at("width1").get<int64_t>();
    c.ldm.denoiser.width2 = l.at("width2").get<int64_t>();
    c.ldm.denoiser.time_dim = l.at("time_dim").get<int64_t>();
    c.ldm.denoiser.time_sin_dim = l.at("time_sin_dim").get<int64_t>();

    const json& s = j.at("sampling");
    c.sampling.count_per_class = s.at("count_per_class").get<int64_t>();
    c.sampling.guidance_scale = s.at("guidance_scale").get<double>();
    c.sampling.steps = s.at("steps").get<int64_t>();
    c.sampling.conditioning = s.at("conditioning").get<std::string>();

    const json& cl = j.at("classifier");
    c.classifier.epochs = cl.at("epochs").get<int64_t>();
    c.classifier.batch_size = cl.at("batch_size").get<int64_t>();
    c.classifier.max_patches = cl.at("max_patches").get<int64_t>();
    c.classifier.max_val_patches = cl.at("max_val_patches").get<int64_t>();
    c.classifier.lr = cl.at("lr").get<double>();
    c.classifier.momentum = cl.at("momentum").get<double>();
    c.classifier_synthetic = cl.at("synthetic").get<std::string>();
    detail::backbone_from_json(cl.at("backbone"), c.classifier.backbone);

    const json& e = j.at("evaluation");
    c.evaluation.k_folds = e.at("k_folds").get<int64_t>();
    c.evaluation.threshold = e.at("threshold").get<double>();
    c.evaluation.seeds = e.at("seeds").get<std::vector<uint64_t>>();

    c.pipeline.parallel_folds = j.at("pipeline").at("parallel_folds").get<bool>();

    c.finalize();
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("config: cannot open " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw DataError("config: parse error in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

inline void save_config(const ExperimentConfig& c, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("config: cannot write " + path);
    os << to_json(c).dump(2) << "\n";
}

}  // namespace duvsynth
