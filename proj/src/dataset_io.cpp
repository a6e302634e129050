#include "nexvitad/dataset_io.hpp"

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "nexvitad/image.hpp"
#include "nexvitad/tensor_io.hpp"

namespace nexvitad {

namespace fs = std::filesystem;
using nlohmann::json;

void write_dataset(const std::string& dir, const std::vector<ImageSample>& dataset, const ManifestHeader& header,
                   bool force, bool export_nxt) {
    if (fs::exists(fs::path(dir) / "manifest.jsonl") && !force) {
        throw_data("dataset already exists at " + dir + " (use --force to overwrite)");
    }
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.jsonl", std::ios::trunc);
    if (!manifest) throw_data("cannot write manifest under " + dir);
    json head;
    head["type"] = "header";
    head["classes"] = header.classes;
    head["image_size"] = header.image_size;
    head["source_classes"] = header.source_classes;
    head["target_classes"] = header.target_classes;
    std::ostringstream seed_hex;
    seed_hex << std::hex << header.seed;
    head["seed"] = seed_hex.str();
    manifest << head.dump() << "\n";
    for (const auto& s : dataset) {
        std::ostringstream name;
        name << "class_" << (s.class_id < 10 ? "0" : "") << s.class_id;
        const std::string cls_dir = name.str();
        fs::create_directories(fs::path(dir) / cls_dir);
        std::ostringstream stem;
        stem << (s.split == Split::Train ? "train" : "test") << "_";
        if (s.index < 100) stem << "0";
        if (s.index < 10) stem << "0";
        stem << s.index;
        const std::string rel = cls_dir + "/" + stem.str() + ".png";
        save_image_png(s.image, (fs::path(dir) / rel).string());
        json rec;
        rec["path"] = rel;
        rec["class_id"] = s.class_id;
        rec["split"] = s.split == Split::Train ? "train" : "test";
        rec["is_defective"] = s.is_defective;
        if (s.is_defective) {
            const std::string mask_rel = cls_dir + "/" + stem.str() + "_mask.png";
            save_mask_png(s.mask, (fs::path(dir) / mask_rel).string());
            rec["mask_path"] = mask_rel;
        }
        if (export_nxt) {
            save_tensor(s.image, (fs::path(dir) / (cls_dir + "/" + stem.str() + ".nxt")).string());
        }
        manifest << rec.dump() << "\n";
    }
}

LoadedDataset load_dataset(const std::string& dir) {
    std::ifstream manifest(fs::path(dir) / "manifest.jsonl");
    if (!manifest) throw_data("missing manifest: " + dir + "/manifest.jsonl");
    LoadedDataset out;
    std::string line;
    bool saw_header = false;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line);
        if (rec.value("type", "") == "header") {
            out.header.classes = rec.at("classes").get<int>();
            out.header.image_size = rec.at("image_size").get<int>();
            out.header.source_classes = rec.at("source_classes").get<std::vector<int>>();
            out.header.target_classes = rec.at("target_classes").get<std::vector<int>>();
            out.header.seed = std::stoull(rec.at("seed").get<std::string>(), nullptr, 16);
            saw_header = true;
            continue;
        }
        ImageSample s;
        const std::string rel = rec.at("path").get<std::string>();
        s.image = load_image_png((fs::path(dir) / rel).string());
        s.class_id = rec.at("class_id").get<int>();
        s.split = rec.at("split").get<std::string>() == "train" ? Split::Train : Split::Test;
        s.is_defective = rec.at("is_defective").get<bool>();
        if (rec.contains("mask_path")) {
            s.mask = load_mask_png((fs::path(dir) / rec.at("mask_path").get<std::string>()).string());
        } else {
            s.mask = Tensor({s.image.dim(0), s.image.dim(1)});
        }
        // recover the per-class sample index from the file stem
        const std::string stem = fs::path(rel).stem().string();
        const auto us = stem.rfind('_');
        s.index = us == std::string::npos ? 0 : std::stoi(stem.substr(us + 1));
        out.paths.push_back(rel);
        out.samples.push_back(std::move(s));
    }
    if (!saw_header) throw_data("manifest has no header record: " + dir);
    return out;
}

std::string score_stem(const std::string& image_path) {
    std::string out = image_path;
    for (auto& ch : out) {
        if (ch == '/' || ch == '\\') ch = '_';
    }
    const auto dot = out.rfind('.');
    if (dot != std::string::npos) out = out.substr(0, dot);
    return out;
}

} // namespace nexvitad
