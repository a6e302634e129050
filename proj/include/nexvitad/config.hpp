#pragma once

#include <string>

#include "nexvitad/inference.hpp"
#include "nexvitad/metrics.hpp"
#include "nexvitad/model.hpp"
#include "nexvitad/trainer.hpp"

namespace nexvitad {

// One JSON document drives every command; each run writes its resolved copy
// next to its outputs.
struct RunConfig {
    // data
    int classes = 12;
    int per_class_train = 40;
    int per_class_test = 20;
    int image_size = 64;
    int n_target_classes = 1;
    std::vector<int> source_classes; // drawn from the seed when left empty
    std::vector<int> target_classes;

    ModelConfig model;
    TrainConfig train;
    InferenceConfig infer;

    ProMode pro_mode = ProMode::BestSweep;
    real pro_tau = 0.5;

    std::uint64_t seed = 0;
    int threads = 1;

    void validate() const;
};

// fills the per-module seeds and the class split from the master seed
RunConfig resolve_run_config(RunConfig cfg);

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);
void write_run_config(const RunConfig& cfg, const std::string& path);

} // namespace nexvitad
