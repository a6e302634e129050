#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nexvitad/datagen.hpp"
#include "nexvitad/model.hpp"

namespace nexvitad {

// Decoder-free anomaly scoring: per-scale Sinkhorn K-means prototypes over
// normal-image patch embeddings, nearest-prototype distances, upsample and
// Gaussian smoothing.

struct InferenceConfig {
    int k = 30;            // prototypes per scale
    int m_images = 10;     // memory bank size
    real eps_scale = 0.05; // entropic regularization as a fraction of mean cost
    real sigma = 2.0;      // smoothing
    real sinkhorn_tol = 1e-7;
    int sinkhorn_max_iter = 500;
    int outer_iters = 50;
    real move_tol = 1e-6;
    bool fused_features = true; // false drops the dense half of the embedding
    // cross-scale aggregation weights, finest first; fine scales carry most
    // of the localization signal
    std::vector<real> scale_weights = {0.8, 0.1, 0.06, 0.04};
    std::uint64_t seed = 0;
};

struct TransportPlan {
    Tensor t; // (N,K), nonnegative, row sums 1/N, column sums 1/K
    real eps = 0.0;
    int iterations = 0;
    real max_violation = 0.0;
    bool converged = false;
    std::vector<real> energy_trace; // primal <T,C> + eps * sum T (log T - 1) per sweep
    std::vector<real> dual_trace;   // dual <f,a> + <g,b> - eps * mass(T); exact
                                    // block ascent makes this non-decreasing
};

// Balanced entropic OT between the uniform measure on rows of z and the
// uniform measure on prototypes, cost ||z_i - p_k||^2, log-domain scalings.
TransportPlan sinkhorn_assign(const Tensor& z, const Tensor& p, real eps, int max_iter, real tol);

// order-canonical k-means++ seeding (rows are visited in lexicographic order,
// so permuting the input rows cannot change the chosen centers)
Tensor kmeans_pp_init(const Tensor& z, int k, std::uint64_t seed);

// alternating sinkhorn_assign / weighted-mean updates; eps = eps_scale * mean cost
Tensor sinkhorn_kmeans(const Tensor& z, int k, real eps_scale, int outer_iters, std::uint64_t seed,
                       real sinkhorn_tol = 1e-7, int sinkhorn_max_iter = 500, real move_tol = 1e-6);

struct MemoryBank {
    std::vector<Tensor> prototypes; // per scale, (K, channel dim)
    // mean nearest-prototype distance of the bank's own patches, per scale;
    // scoring divides by this, so scales are balanced and scores stay
    // comparable across images
    std::vector<real> scale_calibration;
    int k = 0;
    int m_images = 0;
    real eps_scale = 0.0;
    bool fused_features = true;
    std::uint64_t seed = 0;
};

// per-scale stacked patch matrices (M*h_n*w_n rows x channel dim)
std::vector<Tensor> build_bank_features(const Encoder& enc, const FusionParams& fusion,
                                        const std::vector<UnlabeledSample>& normals, bool fused_features,
                                        int batch_size);

MemoryBank build_memory_bank(const Encoder& enc, const FusionParams& fusion,
                             const std::vector<UnlabeledSample>& normals, const InferenceConfig& cfg);

void save_memory_bank(const MemoryBank& bank, const std::string& dir);
MemoryBank load_memory_bank(const std::string& dir);

struct AnomalyMap {
    std::vector<Tensor> per_scale; // raw min-distance grids (h_n, w_n)
    Tensor smoothed;               // (H,W), normalized, weighted-averaged, blurred
    real sigma = 0.0;
    int k = 0;
    std::vector<real> scale_weights;
};

// batched scoring; one map per image in images (b,h,w,3)
std::vector<AnomalyMap> anomaly_score_maps(const Encoder& enc, const FusionParams& fusion,
                                           const MemoryBank& bank, const Tensor& images,
                                           const InferenceConfig& cfg);

// nearest-prototype distances for a flattened feature matrix (rows x d)
Tensor min_distance_rows(const Tensor& rows, const Tensor& prototypes);

struct BenchEntry {
    int k = 0;
    int batch = 0;
    real mean_ms = 0.0;
    real std_ms = 0.0;
};

// wall-clock of scoring (feature extraction included); one warmup run per
// configuration is excluded from the statistics
std::vector<BenchEntry> bench_inference(const Encoder& enc, const FusionParams& fusion,
                                        const std::vector<UnlabeledSample>& normals,
                                        const std::vector<Tensor>& test_images, const std::vector<int>& ks,
                                        const std::vector<int>& batch_sizes, int reps,
                                        const InferenceConfig& cfg);

} // namespace nexvitad
