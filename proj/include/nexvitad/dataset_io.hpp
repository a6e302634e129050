#pragma once

#include <string>
#include <vector>

#include "nexvitad/datagen.hpp"

namespace nexvitad {

struct ManifestHeader {
    int classes = 0;
    int image_size = 0;
    std::vector<int> source_classes;
    std::vector<int> target_classes;
    std::uint64_t seed = 0;
};

// Dataset directory layout: manifest.jsonl (one header record, then one
// record per sample {path, class_id, split, is_defective, mask_path?}),
// class_NN/ subdirectories of PNG images and defect masks. export_nxt adds
// an NXT1 tensor next to each image.
void write_dataset(const std::string& dir, const std::vector<ImageSample>& dataset, const ManifestHeader& header,
                   bool force, bool export_nxt);

struct LoadedDataset {
    ManifestHeader header;
    std::vector<ImageSample> samples;
    std::vector<std::string> paths; // manifest path per sample
};

LoadedDataset load_dataset(const std::string& dir);

// stable score-file stem for a manifest image path
std::string score_stem(const std::string& image_path);

} // namespace nexvitad
