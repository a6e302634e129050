#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nexvitad/rng.hpp"
#include "nexvitad/tensor.hpp"

namespace nexvitad {

enum class Split { Train, Test };
enum class DefectKind { Scratch, Blob, PatchSwap };

struct ImageSample {
    Tensor image; // (h,w,3) in [0,1]
    Tensor mask;  // (h,w) binary, all-zero for normal samples
    int class_id = 0;
    Split split = Split::Train;
    bool is_defective = false;
    int index = 0;
};

// Target-domain training view: no mask field at all, so ground truth cannot
// leak into the trainer.
struct UnlabeledSample {
    Tensor image;
    int class_id = 0;
    int index = 0;
};

struct SplitConfig {
    std::vector<int> source_classes;
    std::vector<int> target_classes;
    std::uint64_t seed = 0;
};

struct DatasetSplit {
    std::vector<ImageSample> source_train;      // labeled, masks included
    std::vector<UnlabeledSample> target_train;  // defect-free images only
    std::vector<ImageSample> target_test;       // masks kept for evaluation
    std::vector<UnlabeledSample> bank_candidates; // M defect-free target images
};

inline constexpr int kNumTextureClasses = 12;

// One procedural texture family per class id; the defective half of each
// split carries exact change masks. Deterministic in (args, seed).
std::vector<ImageSample> synth_class(int class_id, std::uint64_t seed, int n_train, int n_test, int size);

ImageSample inject_defect(const ImageSample& sample, DefectKind kind, std::uint64_t seed);

// Geometry-explicit injectors (inject_defect draws parameters and delegates).
// Every touched pixel is guaranteed to change, so mask == changed set.
void inject_scratch(Tensor& image, Tensor& mask, real x0, real y0, real x1, real y1, real width, real delta);
void inject_blob(Tensor& image, Tensor& mask, real cx, real cy, real radius, real delta);
void inject_patch_swap(Tensor& image, Tensor& mask, int sx, int sy, int dx, int dy, int pw, int ph);

// Source/target class partition drawn by seeded shuffle.
SplitConfig random_split(int total_classes, int n_target, std::uint64_t seed);
void validate_split(const SplitConfig& config, int total_classes);

DatasetSplit make_split(const std::vector<ImageSample>& dataset, const SplitConfig& config, int bank_images);

// smooth value noise in [0,1] over a (cells x cells) lattice
Tensor value_noise(int h, int w, int cells, Rng& rng);

void hsv_to_rgb(real h, real s, real v, real rgb[3]);

} // namespace nexvitad
