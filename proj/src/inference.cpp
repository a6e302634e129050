#include "nexvitad/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <numeric>

#include "nexvitad/ops.hpp"
#include "nexvitad/tensor_io.hpp"

namespace nexvitad {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// squared Euclidean cost matrix (N,K)
Tensor cost_matrix(const Tensor& z, const Tensor& p) {
    const int n = z.dim(0), d = z.dim(1), k = p.dim(0);
    Tensor c({n, k});
    for (int i = 0; i < n; ++i) {
        const real* zi = z.data.data() + static_cast<std::size_t>(i) * d;
        real* ci = c.data.data() + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < k; ++j) {
            const real* pj = p.data.data() + static_cast<std::size_t>(j) * d;
            real acc = 0.0;
            for (int t = 0; t < d; ++t) {
                const real diff = zi[t] - pj[t];
                acc += diff * diff;
            }
            ci[j] = acc;
        }
    }
    return c;
}

struct SinkhornWork {
    std::vector<real> f; // row potentials
    std::vector<real> g; // column potentials
};

// one log-domain Sinkhorn solve against cost c; potentials warm-startable
TransportPlan sinkhorn_core(const Tensor& c, real eps, int max_iter, real tol, SinkhornWork* work) {
    const int n = c.dim(0), k = c.dim(1);
    const real log_a = -std::log(static_cast<real>(n));
    const real log_b = -std::log(static_cast<real>(k));
    std::vector<real> f(static_cast<std::size_t>(n), 0.0), g(static_cast<std::size_t>(k), 0.0);
    if (work && static_cast<int>(work->f.size()) == n && static_cast<int>(work->g.size()) == k) {
        f = work->f;
        g = work->g;
    }
    TransportPlan plan;
    plan.eps = eps;
    plan.t = Tensor({n, k});
    std::vector<real> col_acc(static_cast<std::size_t>(k));
    auto materialize = [&]() {
        for (int i = 0; i < n; ++i) {
            const real* ci = c.data.data() + static_cast<std::size_t>(i) * k;
            real* ti = plan.t.data.data() + static_cast<std::size_t>(i) * k;
            for (int j = 0; j < k; ++j) ti[j] = std::exp((f[static_cast<std::size_t>(i)] + g[static_cast<std::size_t>(j)] - ci[j]) / eps);
        }
    };
    auto row_violation = [&]() {
        real worst = 0.0;
        for (int i = 0; i < n; ++i) {
            const real* ti = plan.t.data.data() + static_cast<std::size_t>(i) * k;
            real s = 0.0;
            for (int j = 0; j < k; ++j) s += ti[j];
            worst = std::max(worst, std::abs(s - 1.0 / n));
        }
        return worst;
    };
    auto energy = [&]() {
        real e = 0.0;
        for (int i = 0; i < n; ++i) {
            const real* ci = c.data.data() + static_cast<std::size_t>(i) * k;
            const real* ti = plan.t.data.data() + static_cast<std::size_t>(i) * k;
            for (int j = 0; j < k; ++j) {
                if (ti[j] > 0.0) e += ti[j] * ci[j] + eps * ti[j] * (std::log(ti[j]) - 1.0);
            }
        }
        return e;
    };

    int sweep = 0;
    for (; sweep < max_iter; ++sweep) {
        // f update: rows become exact
        for (int i = 0; i < n; ++i) {
            const real* ci = c.data.data() + static_cast<std::size_t>(i) * k;
            real mx = -1e300;
            for (int j = 0; j < k; ++j) mx = std::max(mx, g[static_cast<std::size_t>(j)] - ci[j]);
            real s = 0.0;
            for (int j = 0; j < k; ++j) s += std::exp((g[static_cast<std::size_t>(j)] - ci[j] - mx) / eps);
            f[static_cast<std::size_t>(i)] = eps * log_a - mx - eps * std::log(s);
        }
        // g update: columns become exact
        std::fill(col_acc.begin(), col_acc.end(), -1e300);
        for (int j = 0; j < k; ++j) {
            real mx = -1e300;
            for (int i = 0; i < n; ++i) {
                mx = std::max(mx, f[static_cast<std::size_t>(i)] - c.at(i, j));
            }
            real s = 0.0;
            for (int i = 0; i < n; ++i) s += std::exp((f[static_cast<std::size_t>(i)] - c.at(i, j) - mx) / eps);
            g[static_cast<std::size_t>(j)] = eps * log_b - mx - eps * std::log(s);
        }
        materialize();
        plan.energy_trace.push_back(energy());
        real mass = 0.0;
        for (real v : plan.t.data) mass += v;
        real dual = -eps * mass;
        for (int i = 0; i < n; ++i) dual += f[static_cast<std::size_t>(i)] / n;
        for (int j = 0; j < k; ++j) dual += g[static_cast<std::size_t>(j)] / k;
        plan.dual_trace.push_back(dual);
        plan.max_violation = row_violation();
        if (plan.max_violation < tol) {
            plan.converged = true;
            ++sweep;
            break;
        }
    }
    plan.iterations = sweep;
    if (work) {
        work->f = f;
        work->g = g;
    }
    return plan;
}

Tensor flatten_scale(const Tensor& feature_map) {
    // (b,h,w,c) -> (b*h*w, c); row (m*h*w + y*w + x) is F_m[y,x,:]
    const int c = feature_map.dims.back();
    const int rows = static_cast<int>(feature_map.size()) / c;
    return Tensor::from({rows, c}, feature_map.data);
}

Tensor hiera_half(const Tensor& fused_rows) {
    const int c2 = fused_rows.dim(1);
    const int c = c2 / 2;
    Tensor out({fused_rows.dim(0), c});
    for (int i = 0; i < fused_rows.dim(0); ++i) {
        const real* src = fused_rows.data.data() + static_cast<std::size_t>(i) * c2;
        real* dst = out.data.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) dst[j] = src[2 * j];
    }
    return out;
}

} // namespace

TransportPlan sinkhorn_assign(const Tensor& z, const Tensor& p, real eps, int max_iter, real tol) {
    if (eps <= 0.0) throw_config("sinkhorn eps must be > 0");
    if (z.rank() != 2 || p.rank() != 2) throw_shape("sinkhorn_assign expects 2-D point and prototype matrices");
    if (z.dim(1) != p.dim(1)) {
        throw_shape("sinkhorn_assign dim mismatch: points " + dims_to_string(z.dims) + " vs prototypes " +
                    dims_to_string(p.dims));
    }
    if (z.dim(0) < 1 || p.dim(0) < 1) throw_config("sinkhorn_assign needs N, K >= 1");
    Tensor c = cost_matrix(z, p);
    return sinkhorn_core(c, eps, max_iter, tol, nullptr);
}

Tensor kmeans_pp_init(const Tensor& z, int k, std::uint64_t seed) {
    const int n = z.dim(0), d = z.dim(1);
    if (n < k) throw_config("kmeans needs N >= K");
    // canonical row order: lexicographic, so the seeding is invariant to row
    // permutations of z
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const real* ra = z.data.data() + static_cast<std::size_t>(a) * d;
        const real* rb = z.data.data() + static_cast<std::size_t>(b) * d;
        return std::lexicographical_compare(ra, ra + d, rb, rb + d);
    });
    Rng rng(mix_seed(seed, 0x9119u));
    Tensor centers({k, d});
    std::vector<real> min_d2(static_cast<std::size_t>(n), 1e300);
    int first = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n)));
    const real* row0 = z.data.data() + static_cast<std::size_t>(order[static_cast<std::size_t>(first)]) * d;
    std::copy(row0, row0 + d, centers.data.begin());
    for (int centers_chosen = 1; centers_chosen < k; ++centers_chosen) {
        const real* last = centers.data.data() + static_cast<std::size_t>(centers_chosen - 1) * d;
        real total = 0.0;
        for (int oi = 0; oi < n; ++oi) {
            const real* row = z.data.data() + static_cast<std::size_t>(order[static_cast<std::size_t>(oi)]) * d;
            real acc = 0.0;
            for (int t = 0; t < d; ++t) {
                const real diff = row[t] - last[t];
                acc += diff * diff;
            }
            min_d2[static_cast<std::size_t>(oi)] = std::min(min_d2[static_cast<std::size_t>(oi)], acc);
            total += min_d2[static_cast<std::size_t>(oi)];
        }
        int pick = n - 1;
        if (total > 0.0) {
            const real u = rng.uniform() * total;
            real cum = 0.0;
            for (int oi = 0; oi < n; ++oi) {
                cum += min_d2[static_cast<std::size_t>(oi)];
                if (u < cum) {
                    pick = oi;
                    break;
                }
            }
        }
        const real* row = z.data.data() + static_cast<std::size_t>(order[static_cast<std::size_t>(pick)]) * d;
        std::copy(row, row + d, centers.data.begin() + static_cast<std::ptrdiff_t>(centers_chosen) * d);
    }
    return centers;
}

Tensor sinkhorn_kmeans(const Tensor& z, int k, real eps_scale, int outer_iters, std::uint64_t seed,
                       real sinkhorn_tol, int sinkhorn_max_iter, real move_tol) {
    const int n = z.dim(0), d = z.dim(1);
    if (n < k) throw_config("sinkhorn_kmeans needs N >= K, got N=" + std::to_string(n) + " K=" + std::to_string(k));
    Tensor p = kmeans_pp_init(z, k, seed);
    SinkhornWork work;
    const real col_target = 1.0 / k;
    for (int outer = 0; outer < outer_iters; ++outer) {
        Tensor c = cost_matrix(z, p);
        real mean_cost = 0.0;
        for (real v : c.data) mean_cost += v;
        mean_cost /= static_cast<real>(c.size());
        const real eps = std::max(eps_scale * mean_cost, static_cast<real>(1e-12));
        TransportPlan plan = sinkhorn_core(c, eps, sinkhorn_max_iter, sinkhorn_tol, &work);
        Tensor p_new({k, d});
        std::vector<real> mass(static_cast<std::size_t>(k), 0.0);
        for (int i = 0; i < n; ++i) {
            const real* ti = plan.t.data.data() + static_cast<std::size_t>(i) * k;
            const real* zi = z.data.data() + static_cast<std::size_t>(i) * d;
            for (int j = 0; j < k; ++j) {
                const real w = ti[j];
                if (w == 0.0) continue;
                mass[static_cast<std::size_t>(j)] += w;
                real* pj = p_new.data.data() + static_cast<std::size_t>(j) * d;
                for (int t = 0; t < d; ++t) pj[t] += w * zi[t];
            }
        }
        real movement = 0.0;
        for (int j = 0; j < k; ++j) {
            real* pj = p_new.data.data() + static_cast<std::size_t>(j) * d;
            if (mass[static_cast<std::size_t>(j)] < col_target / (10.0 * n)) {
                // starved prototype: reseed at the point farthest from its center
                int far_i = 0;
                real far_d = -1.0;
                for (int i = 0; i < n; ++i) {
                    if (c.at(i, j) > far_d) {
                        far_d = c.at(i, j);
                        far_i = i;
                    }
                }
                const real* zi = z.data.data() + static_cast<std::size_t>(far_i) * d;
                std::copy(zi, zi + d, pj);
            } else {
                for (int t = 0; t < d; ++t) pj[t] /= mass[static_cast<std::size_t>(j)];
            }
            const real* old = p.data.data() + static_cast<std::size_t>(j) * d;
            real acc = 0.0;
            for (int t = 0; t < d; ++t) {
                const real diff = pj[t] - old[t];
                acc += diff * diff;
            }
            movement = std::max(movement, std::sqrt(acc));
        }
        p = std::move(p_new);
        if (movement < move_tol) break;
    }
    return p;
}

std::vector<Tensor> build_bank_features(const Encoder& enc, const FusionParams& fusion,
                                        const std::vector<UnlabeledSample>& normals, bool fused_features,
                                        int batch_size) {
    if (normals.empty()) throw_config("memory bank needs at least one normal image");
    std::vector<Tensor> stacked;
    for (std::size_t off = 0; off < normals.size(); off += static_cast<std::size_t>(batch_size)) {
        std::vector<Tensor> images;
        for (std::size_t i = off; i < std::min(off + static_cast<std::size_t>(batch_size), normals.size()); ++i) {
            images.push_back(normals[i].image);
        }
        Tensor batch({static_cast<int>(images.size()), images[0].dim(0), images[0].dim(1), 3});
        for (std::size_t i = 0; i < images.size(); ++i) {
            std::copy(images[i].data.begin(), images[i].data.end(),
                      batch.data.begin() + static_cast<std::ptrdiff_t>(i * images[i].size()));
        }
        FusedPyramid fused = encode(enc, fusion, batch, nullptr);
        if (stacked.empty()) stacked.resize(fused.scales.size());
        for (std::size_t s = 0; s < fused.scales.size(); ++s) {
            Tensor rows = flatten_scale(fused.scales[s]);
            if (!fused_features) rows = hiera_half(rows);
            if (stacked[s].size() == 0) {
                stacked[s] = std::move(rows);
            } else {
                Tensor merged({stacked[s].dim(0) + rows.dim(0), rows.dim(1)});
                std::copy(stacked[s].data.begin(), stacked[s].data.end(), merged.data.begin());
                std::copy(rows.data.begin(), rows.data.end(),
                          merged.data.begin() + static_cast<std::ptrdiff_t>(stacked[s].size()));
                stacked[s] = std::move(merged);
            }
        }
    }
    return stacked;
}

MemoryBank build_memory_bank(const Encoder& enc, const FusionParams& fusion,
                             const std::vector<UnlabeledSample>& normals, const InferenceConfig& cfg) {
    if (static_cast<int>(normals.size()) < cfg.m_images) {
        throw_data("memory bank needs " + std::to_string(cfg.m_images) + " normal images, have " +
                   std::to_string(normals.size()));
    }
    std::vector<UnlabeledSample> selected(normals.begin(), normals.begin() + cfg.m_images);
    auto features = build_bank_features(enc, fusion, selected, cfg.fused_features, 8);
    MemoryBank bank;
    bank.k = cfg.k;
    bank.m_images = cfg.m_images;
    bank.eps_scale = cfg.eps_scale;
    bank.fused_features = cfg.fused_features;
    bank.seed = cfg.seed;
    for (std::size_t s = 0; s < features.size(); ++s) {
        bank.prototypes.push_back(sinkhorn_kmeans(features[s], cfg.k, cfg.eps_scale, cfg.outer_iters,
                                                  mix_seed(cfg.seed, s), cfg.sinkhorn_tol,
                                                  cfg.sinkhorn_max_iter, cfg.move_tol));
        Tensor self_dist = min_distance_rows(features[s], bank.prototypes.back());
        real mean = 0.0;
        for (real v : self_dist.data) mean += v;
        mean /= static_cast<real>(self_dist.size());
        bank.scale_calibration.push_back(std::max(mean, static_cast<real>(1e-9)));
    }
    return bank;
}

void save_memory_bank(const MemoryBank& bank, const std::string& dir) {
    fs::create_directories(dir);
    json meta;
    meta["k"] = bank.k;
    meta["m_images"] = bank.m_images;
    meta["eps_scale"] = bank.eps_scale;
    meta["fused_features"] = bank.fused_features;
    meta["seed"] = std::to_string(bank.seed);
    meta["scales"] = bank.prototypes.size();
    meta["scale_calibration"] = bank.scale_calibration;
    for (std::size_t s = 0; s < bank.prototypes.size(); ++s) {
        save_tensor(bank.prototypes[s], (fs::path(dir) / ("prototypes_scale" + std::to_string(s) + ".nxt")).string());
    }
    std::ofstream os(fs::path(dir) / "bank.json");
    if (!os) throw_data("cannot write bank metadata under " + dir);
    os << meta.dump(2) << "\n";
}

MemoryBank load_memory_bank(const std::string& dir) {
    std::ifstream is(fs::path(dir) / "bank.json");
    if (!is) throw_data("missing bank metadata: " + dir + "/bank.json");
    json meta = json::parse(is);
    MemoryBank bank;
    bank.k = meta.at("k").get<int>();
    bank.m_images = meta.at("m_images").get<int>();
    bank.eps_scale = meta.at("eps_scale").get<real>();
    bank.fused_features = meta.at("fused_features").get<bool>();
    bank.seed = std::stoull(meta.at("seed").get<std::string>());
    bank.scale_calibration = meta.at("scale_calibration").get<std::vector<real>>();
    const std::size_t scales = meta.at("scales").get<std::size_t>();
    for (std::size_t s = 0; s < scales; ++s) {
        bank.prototypes.push_back(
            load_tensor((fs::path(dir) / ("prototypes_scale" + std::to_string(s) + ".nxt")).string()));
    }
    return bank;
}

Tensor min_distance_rows(const Tensor& rows, const Tensor& prototypes) {
    if (rows.dim(1) != prototypes.dim(1)) {
        throw_shape("feature dim " + dims_to_string(rows.dims) + " does not match prototypes " +
                    dims_to_string(prototypes.dims));
    }
    const int n = rows.dim(0), d = rows.dim(1), k = prototypes.dim(0);
    Tensor out({n});
    for (int i = 0; i < n; ++i) {
        const real* zi = rows.data.data() + static_cast<std::size_t>(i) * d;
        real best = 1e300;
        for (int j = 0; j < k; ++j) {
            const real* pj = prototypes.data.data() + static_cast<std::size_t>(j) * d;
            real acc = 0.0;
            for (int t = 0; t < d; ++t) {
                const real diff = zi[t] - pj[t];
                acc += diff * diff;
            }
            best = std::min(best, acc);
        }
        out.at(i) = std::sqrt(best);
    }
    return out;
}

std::vector<AnomalyMap> anomaly_score_maps(const Encoder& enc, const FusionParams& fusion,
                                           const MemoryBank& bank, const Tensor& images,
                                           const InferenceConfig& cfg) {
    if (images.rank() != 4) throw_shape("anomaly_score_maps expects (b,h,w,3)");
    const int b = images.dim(0), h = images.dim(1), w = images.dim(2);
    FusedPyramid fused = encode(enc, fusion, images, nullptr);
    if (fused.scales.size() != bank.prototypes.size()) {
        throw_config("bank scale count does not match encoder output");
    }
    std::vector<real> weights = cfg.scale_weights;
    if (weights.size() != fused.scales.size()) {
        throw_config("scale_weights must have one entry per scale");
    }
    real wsum = 0.0;
    for (real v : weights) {
        if (v < 0.0) throw_config("scale_weights must be nonnegative");
        wsum += v;
    }
    if (wsum <= 0.0) throw_config("scale_weights must not all be zero");
    for (auto& v : weights) v /= wsum;
    std::vector<AnomalyMap> maps(static_cast<std::size_t>(b));
    for (auto& m : maps) {
        m.sigma = cfg.sigma;
        m.k = bank.k;
        m.scale_weights = weights;
        m.smoothed = Tensor({h, w});
    }
    std::vector<Tensor> accum(static_cast<std::size_t>(b), Tensor({h, w}));
    for (std::size_t s = 0; s < fused.scales.size(); ++s) {
        const Tensor& fmap = fused.scales[s];
        const int fh = fmap.dim(1), fw = fmap.dim(2);
        const int c = fmap.dim(3);
        for (int bi = 0; bi < b; ++bi) {
            Tensor rows({fh * fw, c});
            std::copy(fmap.data.begin() + static_cast<std::ptrdiff_t>(bi) * fh * fw * c,
                      fmap.data.begin() + static_cast<std::ptrdiff_t>(bi + 1) * fh * fw * c, rows.data.begin());
            Tensor use_rows = bank.fused_features ? std::move(rows) : hiera_half(rows);
            Tensor dist = min_distance_rows(use_rows, bank.prototypes[s]);
            Tensor grid = Tensor::from({fh, fw}, std::move(dist.data));
            maps[static_cast<std::size_t>(bi)].per_scale.push_back(grid);
            // bank-relative distances keep scales balanced and scores
            // comparable across images
            grid.scale_(1.0 / bank.scale_calibration[s]);
            Tensor up = bilinear_resize(grid, h, w);
            up.scale_(weights[s]);
            accum[static_cast<std::size_t>(bi)].add_(up);
        }
    }
    for (int bi = 0; bi < b; ++bi) {
        maps[static_cast<std::size_t>(bi)].smoothed = gaussian_blur(accum[static_cast<std::size_t>(bi)], cfg.sigma);
    }
    return maps;
}

std::vector<BenchEntry> bench_inference(const Encoder& enc, const FusionParams& fusion,
                                        const std::vector<UnlabeledSample>& normals,
                                        const std::vector<Tensor>& test_images, const std::vector<int>& ks,
                                        const std::vector<int>& batch_sizes, int reps,
                                        const InferenceConfig& cfg) {
    if (test_images.empty()) throw_config("bench needs test images");
    std::vector<BenchEntry> entries;
    for (int k : ks) {
        InferenceConfig kcfg = cfg;
        kcfg.k = k;
        MemoryBank bank = build_memory_bank(enc, fusion, normals, kcfg); // untimed
        for (int batch : batch_sizes) {
            Tensor stacked({batch, test_images[0].dim(0), test_images[0].dim(1), 3});
            for (int i = 0; i < batch; ++i) {
                const Tensor& src = test_images[static_cast<std::size_t>(i) % test_images.size()];
                std::copy(src.data.begin(), src.data.end(),
                          stacked.data.begin() + static_cast<std::ptrdiff_t>(i) * src.size());
            }
            std::vector<real> times;
            for (int rep = 0; rep <= reps; ++rep) {
                const auto t0 = std::chrono::steady_clock::now();
                auto maps = anomaly_score_maps(enc, fusion, bank, stacked, kcfg);
                const auto t1 = std::chrono::steady_clock::now();
                if (rep == 0) continue; // warmup excluded
                times.push_back(std::chrono::duration<real, std::milli>(t1 - t0).count());
            }
            real mean = 0.0;
            for (real t : times) mean += t;
            mean /= static_cast<real>(times.size());
            real var = 0.0;
            for (real t : times) var += (t - mean) * (t - mean);
            var /= static_cast<real>(times.size());
            entries.push_back({k, batch, mean, std::sqrt(var)});
        }
    }
    return entries;
}

} // namespace nexvitad
