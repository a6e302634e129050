#include "nexvitad/model.hpp"

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "nexvitad/tensor_io.hpp"

namespace nexvitad {

namespace fs = std::filesystem;
using nlohmann::json;

Model::Model(const ModelConfig& c)
    : cfg(c), encoder(c.backbone), fusion(init_fusion_params(c.backbone, c.init_seed)),
      heads(make_head_bank(c.source_classes, c.target_classes, c.fused_channels(), c.decoder_channels,
                           c.shared_source_head, c.init_seed)) {}

std::vector<ParamTensor*> Model::trainable() {
    std::vector<ParamTensor*> out = fusion.trainable();
    auto h = heads.trainable();
    out.insert(out.end(), h.begin(), h.end());
    return out;
}

std::vector<std::pair<std::string, Tensor*>> Model::buffers() {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto add_head = [&](DecoderHead& head, const std::string& prefix) {
        auto b = head.buffers(prefix);
        out.insert(out.end(), b.begin(), b.end());
    };
    for (std::size_t i = 0; i < heads.source_heads.size(); ++i) {
        add_head(heads.source_heads[i], "src" + std::to_string(i));
    }
    for (std::size_t i = 0; i < heads.target_seg_heads.size(); ++i) {
        add_head(heads.target_seg_heads[i], "tgt" + std::to_string(i));
    }
    return out;
}

std::uint64_t Model::backbone_checksum() const {
    return encoder.hiera.checksum() ^ (encoder.dense.checksum() * 0x9e3779b97f4a7c15ULL);
}

namespace {

std::string sanitize(const std::string& name) {
    std::string out = name;
    for (auto& ch : out) {
        if (ch == '.' || ch == '/' || ch == ' ') ch = '_';
    }
    return out;
}

std::string u64_hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

std::uint64_t hex_u64(const std::string& s) { return std::stoull(s, nullptr, 16); }

} // namespace

std::string model_config_to_json(const ModelConfig& cfg) {
    json j;
    j["backbone"] = {{"hiera_dims", cfg.backbone.hiera_dims},
                     {"hiera_strides", cfg.backbone.hiera_strides},
                     {"d_dino", cfg.backbone.d_dino},
                     {"dino_stride", cfg.backbone.dino_stride},
                     {"seed", u64_hex(cfg.backbone.seed)}};
    j["decoder_channels"] = cfg.decoder_channels;
    j["source_classes"] = cfg.source_classes;
    j["target_classes"] = cfg.target_classes;
    j["shared_source_head"] = cfg.shared_source_head;
    j["init_seed"] = u64_hex(cfg.init_seed);
    return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
    json j = json::parse(text);
    ModelConfig cfg;
    cfg.backbone.hiera_dims = j.at("backbone").at("hiera_dims").get<std::vector<int>>();
    cfg.backbone.hiera_strides = j.at("backbone").at("hiera_strides").get<std::vector<int>>();
    cfg.backbone.d_dino = j.at("backbone").at("d_dino").get<int>();
    cfg.backbone.dino_stride = j.at("backbone").at("dino_stride").get<int>();
    cfg.backbone.seed = hex_u64(j.at("backbone").at("seed").get<std::string>());
    cfg.decoder_channels = j.at("decoder_channels").get<std::vector<int>>();
    cfg.source_classes = j.at("source_classes").get<std::vector<int>>();
    cfg.target_classes = j.at("target_classes").get<std::vector<int>>();
    cfg.shared_source_head = j.at("shared_source_head").get<bool>();
    cfg.init_seed = hex_u64(j.at("init_seed").get<std::string>());
    return cfg;
}

void save_checkpoint(Model& model, const TrainerState* state, const std::string& dir) {
    fs::create_directories(dir);
    fs::create_directories(fs::path(dir) / "params");
    json index;
    index["format"] = "nexvitad-checkpoint-v1";
    index["model_config"] = json::parse(model_config_to_json(model.cfg));
    json tensors = json::array();
    auto params = model.trainable();
    for (ParamTensor* p : params) {
        const std::string file = "params/" + sanitize(p->name) + ".nxt";
        save_tensor(p->value, (fs::path(dir) / file).string());
        tensors.push_back({{"name", p->name}, {"file", file}, {"dims", p->value.dims}, {"frozen", p->frozen}});
    }
    index["tensors"] = tensors;
    json buffers = json::array();
    for (auto& [name, tensor] : model.buffers()) {
        const std::string file = "params/buf_" + sanitize(name) + ".nxt";
        save_tensor(*tensor, (fs::path(dir) / file).string());
        buffers.push_back({{"name", name}, {"file", file}});
    }
    index["buffers"] = buffers;
    if (state) {
        if (state->adam.size() != params.size()) throw_contract("trainer state does not match model params");
        fs::create_directories(fs::path(dir) / "adam");
        json adam = json::array();
        for (std::size_t i = 0; i < params.size(); ++i) {
            const std::string base = "adam/" + sanitize(params[i]->name);
            save_tensor(state->adam[i].m, (fs::path(dir) / (base + "_m.nxt")).string());
            save_tensor(state->adam[i].v, (fs::path(dir) / (base + "_v.nxt")).string());
            adam.push_back({{"name", params[i]->name},
                            {"m", base + "_m.nxt"},
                            {"v", base + "_v.nxt"},
                            {"step", state->adam[i].step_count},
                            {"lr", state->adam[i].lr}});
        }
        index["adam"] = adam;
        json trainer;
        trainer["next_epoch"] = state->next_epoch;
        trainer["rng"] = {u64_hex(state->rng_state[0]), u64_hex(state->rng_state[1]), u64_hex(state->rng_state[2]),
                          u64_hex(state->rng_state[3])};
        json cache = json::array();
        fs::create_directories(fs::path(dir) / "pseudo");
        for (const auto& [idx, map] : state->pseudo_cache) {
            const std::string lf = "pseudo/labels_" + std::to_string(idx) + ".nxt";
            const std::string cf = "pseudo/conf_" + std::to_string(idx) + ".nxt";
            save_tensor(map.labels, (fs::path(dir) / lf).string());
            save_tensor(map.confidence, (fs::path(dir) / cf).string());
            cache.push_back({{"index", idx}, {"labels", lf}, {"confidence", cf}});
        }
        trainer["pseudo_cache"] = cache;
        index["trainer"] = trainer;
    }
    std::ofstream os(fs::path(dir) / "index.json");
    if (!os) throw_data("cannot write checkpoint index under " + dir);
    os << index.dump(2) << "\n";
}

Model load_checkpoint(const std::string& dir, TrainerState* state) {
    std::ifstream is(fs::path(dir) / "index.json");
    if (!is) throw_data("missing checkpoint index: " + dir + "/index.json");
    json index = json::parse(is);
    if (index.value("format", "") != "nexvitad-checkpoint-v1") throw_data("unrecognized checkpoint format in " + dir);
    ModelConfig cfg = model_config_from_json(index.at("model_config").dump());
    Model model(cfg);
    auto params = model.trainable();
    std::unordered_map<std::string, ParamTensor*> by_name;
    for (auto* p : params) by_name[p->name] = p;
    for (const auto& t : index.at("tensors")) {
        auto it = by_name.find(t.at("name").get<std::string>());
        if (it == by_name.end()) throw_data("checkpoint names unknown param " + t.at("name").get<std::string>());
        Tensor loaded = load_tensor((fs::path(dir) / t.at("file").get<std::string>()).string());
        if (loaded.dims != it->second->value.dims) {
            throw_data("checkpoint dims mismatch for " + it->first);
        }
        it->second->value = std::move(loaded);
    }
    std::unordered_map<std::string, Tensor*> buf_by_name;
    for (auto& [name, tensor] : model.buffers()) buf_by_name[name] = tensor;
    for (const auto& b : index.at("buffers")) {
        auto it = buf_by_name.find(b.at("name").get<std::string>());
        if (it == buf_by_name.end()) throw_data("checkpoint names unknown buffer " + b.at("name").get<std::string>());
        *it->second = load_tensor((fs::path(dir) / b.at("file").get<std::string>()).string());
    }
    if (state) {
        if (!index.contains("adam") || !index.contains("trainer")) {
            throw_data("checkpoint has no trainer state (saved without resume info): " + dir);
        }
        state->adam.clear();
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& a = index.at("adam").at(i);
            if (a.at("name").get<std::string>() != params[i]->name) {
                throw_data("adam state order mismatch in checkpoint " + dir);
            }
            AdamState s(params[i]->value.dims);
            s.m = load_tensor((fs::path(dir) / a.at("m").get<std::string>()).string());
            s.v = load_tensor((fs::path(dir) / a.at("v").get<std::string>()).string());
            s.step_count = a.at("step").get<long>();
            s.lr = a.at("lr").get<real>();
            state->adam.push_back(std::move(s));
        }
        const auto& trainer = index.at("trainer");
        state->next_epoch = trainer.at("next_epoch").get<int>();
        for (int i = 0; i < 4; ++i) {
            state->rng_state[i] = hex_u64(trainer.at("rng").at(i).get<std::string>());
        }
        state->pseudo_cache.clear();
        for (const auto& entry : trainer.at("pseudo_cache")) {
            PseudoLabelMap map;
            map.labels = load_tensor((fs::path(dir) / entry.at("labels").get<std::string>()).string());
            map.confidence = load_tensor((fs::path(dir) / entry.at("confidence").get<std::string>()).string());
            state->pseudo_cache.emplace_back(entry.at("index").get<int>(), std::move(map));
        }
    }
    return model;
}

} // namespace nexvitad
