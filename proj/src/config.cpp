#include "nexvitad/config.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "nexvitad/datagen.hpp"

namespace nexvitad {

using nlohmann::json;

namespace {

std::string u64_hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

std::uint64_t hex_u64(const std::string& s) { return std::stoull(s, nullptr, 16); }

} // namespace

void RunConfig::validate() const {
    if (classes < 2 || classes > kNumTextureClasses) {
        throw_config("classes must be in [2," + std::to_string(kNumTextureClasses) + "]");
    }
    if (per_class_train < 2 || per_class_test < 0) throw_config("bad per-class sample counts");
    if (image_size < 32 || image_size % model.backbone.hiera_strides.back() != 0) {
        throw_config("image_size must be >= 32 and divisible by the coarsest backbone stride");
    }
    if (n_target_classes <= 0 || n_target_classes >= classes) throw_config("bad target class count");
    if (threads < 1) throw_config("threads must be >= 1");
    train.validate();
    if (infer.k < 1 || infer.m_images < 1) throw_config("bad inference config");
}

RunConfig resolve_run_config(RunConfig cfg) {
    if (cfg.source_classes.empty() || cfg.target_classes.empty()) {
        SplitConfig split = random_split(cfg.classes, cfg.n_target_classes, cfg.seed);
        cfg.source_classes = split.source_classes;
        cfg.target_classes = split.target_classes;
    }
    cfg.n_target_classes = static_cast<int>(cfg.target_classes.size());
    cfg.model.source_classes = cfg.source_classes;
    cfg.model.target_classes = cfg.target_classes;
    cfg.model.shared_source_head = !cfg.train.mtl_enabled;
    cfg.model.init_seed = mix_seed(cfg.seed, 0x1217u);
    cfg.model.backbone.seed = mix_seed(cfg.seed, 0xbacbu);
    cfg.train.seed = mix_seed(cfg.seed, 0x7e41u);
    cfg.infer.seed = mix_seed(cfg.seed, 0x8a9eu);
    cfg.validate();
    return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["data"] = {{"classes", cfg.classes},
                 {"per_class_train", cfg.per_class_train},
                 {"per_class_test", cfg.per_class_test},
                 {"image_size", cfg.image_size},
                 {"n_target_classes", cfg.n_target_classes},
                 {"source_classes", cfg.source_classes},
                 {"target_classes", cfg.target_classes}};
    j["model"] = json::parse(model_config_to_json(cfg.model));
    j["train"] = {{"epochs", cfg.train.epochs},
                  {"base_lr", cfg.train.base_lr},
                  {"warmup_epochs", cfg.train.warmup_epochs},
                  {"batch_size", cfg.train.batch_size},
                  {"theta", cfg.train.theta},
                  {"pseudo_refresh_every", cfg.train.pseudo_refresh_every},
                  {"phase1_epochs", cfg.train.phase1_epochs},
                  {"mtl_enabled", cfg.train.mtl_enabled},
                  {"pseudo_enabled", cfg.train.pseudo_enabled},
                  {"augment_prob", cfg.train.augment_prob},
                  {"noise_sigma", cfg.train.noise_sigma},
                  {"lambda1", cfg.train.weights.lambda1},
                  {"lambda2", cfg.train.weights.lambda2},
                  {"seed", u64_hex(cfg.train.seed)}};
    j["inference"] = {{"k", cfg.infer.k},
                      {"m_images", cfg.infer.m_images},
                      {"eps_scale", cfg.infer.eps_scale},
                      {"sigma", cfg.infer.sigma},
                      {"sinkhorn_tol", cfg.infer.sinkhorn_tol},
                      {"sinkhorn_max_iter", cfg.infer.sinkhorn_max_iter},
                      {"outer_iters", cfg.infer.outer_iters},
                      {"move_tol", cfg.infer.move_tol},
                      {"fused_features", cfg.infer.fused_features},
                      {"scale_weights", cfg.infer.scale_weights},
                      {"seed", u64_hex(cfg.infer.seed)}};
    j["metrics"] = {{"pro_mode", cfg.pro_mode == ProMode::BestSweep ? "best_sweep" : "fixed"},
                    {"pro_tau", cfg.pro_tau}};
    j["seed"] = u64_hex(cfg.seed);
    j["threads"] = cfg.threads;
    return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
    json j = json::parse(text);
    RunConfig cfg;
    if (j.contains("data")) {
        const auto& d = j["data"];
        cfg.classes = d.value("classes", cfg.classes);
        cfg.per_class_train = d.value("per_class_train", cfg.per_class_train);
        cfg.per_class_test = d.value("per_class_test", cfg.per_class_test);
        cfg.image_size = d.value("image_size", cfg.image_size);
        cfg.n_target_classes = d.value("n_target_classes", cfg.n_target_classes);
        cfg.source_classes = d.value("source_classes", cfg.source_classes);
        cfg.target_classes = d.value("target_classes", cfg.target_classes);
    }
    if (j.contains("model")) cfg.model = model_config_from_json(j["model"].dump());
    if (j.contains("train")) {
        const auto& t = j["train"];
        cfg.train.epochs = t.value("epochs", cfg.train.epochs);
        cfg.train.base_lr = t.value("base_lr", cfg.train.base_lr);
        cfg.train.warmup_epochs = t.value("warmup_epochs", cfg.train.warmup_epochs);
        cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
        cfg.train.theta = t.value("theta", cfg.train.theta);
        cfg.train.pseudo_refresh_every = t.value("pseudo_refresh_every", cfg.train.pseudo_refresh_every);
        cfg.train.phase1_epochs = t.value("phase1_epochs", cfg.train.phase1_epochs);
        cfg.train.mtl_enabled = t.value("mtl_enabled", cfg.train.mtl_enabled);
        cfg.train.pseudo_enabled = t.value("pseudo_enabled", cfg.train.pseudo_enabled);
        cfg.train.augment_prob = t.value("augment_prob", cfg.train.augment_prob);
        cfg.train.noise_sigma = t.value("noise_sigma", cfg.train.noise_sigma);
        cfg.train.weights.lambda1 = t.value("lambda1", cfg.train.weights.lambda1);
        cfg.train.weights.lambda2 = t.value("lambda2", cfg.train.weights.lambda2);
        if (t.contains("seed")) cfg.train.seed = hex_u64(t["seed"].get<std::string>());
    }
    if (j.contains("inference")) {
        const auto& i = j["inference"];
        cfg.infer.k = i.value("k", cfg.infer.k);
        cfg.infer.m_images = i.value("m_images", cfg.infer.m_images);
        cfg.infer.eps_scale = i.value("eps_scale", cfg.infer.eps_scale);
        cfg.infer.sigma = i.value("sigma", cfg.infer.sigma);
        cfg.infer.sinkhorn_tol = i.value("sinkhorn_tol", cfg.infer.sinkhorn_tol);
        cfg.infer.sinkhorn_max_iter = i.value("sinkhorn_max_iter", cfg.infer.sinkhorn_max_iter);
        cfg.infer.outer_iters = i.value("outer_iters", cfg.infer.outer_iters);
        cfg.infer.move_tol = i.value("move_tol", cfg.infer.move_tol);
        cfg.infer.fused_features = i.value("fused_features", cfg.infer.fused_features);
        cfg.infer.scale_weights = i.value("scale_weights", cfg.infer.scale_weights);
        if (i.contains("seed")) cfg.infer.seed = hex_u64(i["seed"].get<std::string>());
    }
    if (j.contains("metrics")) {
        const auto& m = j["metrics"];
        cfg.pro_mode = m.value("pro_mode", std::string("best_sweep")) == "fixed" ? ProMode::Fixed : ProMode::BestSweep;
        cfg.pro_tau = m.value("pro_tau", cfg.pro_tau);
    }
    if (j.contains("seed")) cfg.seed = hex_u64(j["seed"].get<std::string>());
    cfg.threads = j.value("threads", cfg.threads);
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw_data("cannot open config: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return run_config_from_json(buf.str());
}

void write_run_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw_data("cannot write config: " + path);
    os << run_config_to_json(cfg) << "\n";
}

} // namespace nexvitad
