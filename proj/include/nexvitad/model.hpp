#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nexvitad/backbone.hpp"
#include "nexvitad/decoder.hpp"
#include "nexvitad/fusion.hpp"
#include "nexvitad/optim.hpp"

namespace nexvitad {

struct ModelConfig {
    BackboneConfig backbone;
    std::vector<int> decoder_channels = {64, 32, 16};
    std::vector<int> source_classes;
    std::vector<int> target_classes;
    bool shared_source_head = false; // true when multi-task heads are ablated
    std::uint64_t init_seed = 1;

    std::vector<int> fused_channels() const {
        std::vector<int> out;
        for (int d : backbone.hiera_dims) out.push_back(2 * d);
        return out;
    }
};

struct Model {
    ModelConfig cfg;
    Encoder encoder; // frozen stand-in backbones
    FusionParams fusion;
    HeadBank heads;

    explicit Model(const ModelConfig& c);

    std::vector<ParamTensor*> trainable();
    std::vector<std::pair<std::string, Tensor*>> buffers();
    std::uint64_t backbone_checksum() const;
};

// Trainer state that must survive a checkpoint/resume round trip.
struct TrainerState {
    std::vector<AdamState> adam; // parallel to Model::trainable()
    std::uint64_t rng_state[4] = {0, 0, 0, 0};
    int next_epoch = 0;
    // cached pseudo labels per target_train sample position
    std::vector<std::pair<int, PseudoLabelMap>> pseudo_cache;
};

void save_checkpoint(Model& model, const TrainerState* state, const std::string& dir);
Model load_checkpoint(const std::string& dir, TrainerState* state);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

} // namespace nexvitad
