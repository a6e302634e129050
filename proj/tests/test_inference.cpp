#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "nexvitad/inference.hpp"
#include "nexvitad/rng.hpp"

using namespace nexvitad;

namespace {

Tensor random_points(int n, int d, Rng& rng, real scale = 1.0) {
    Tensor t({n, d});
    for (auto& v : t.data) v = rng.normal(0.0, scale);
    return t;
}

// plain Lloyd's k-means from a given init; the oracle for criterion-style checks
Tensor lloyd_kmeans(const Tensor& z, Tensor centers, int iters) {
    const int n = z.dim(0), d = z.dim(1), k = centers.dim(0);
    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    for (int it = 0; it < iters; ++it) {
        for (int i = 0; i < n; ++i) {
            real best = 1e300;
            for (int j = 0; j < k; ++j) {
                real acc = 0.0;
                for (int t = 0; t < d; ++t) {
                    const real diff = z.at(i, t) - centers.at(j, t);
                    acc += diff * diff;
                }
                if (acc < best) {
                    best = acc;
                    assign[static_cast<std::size_t>(i)] = j;
                }
            }
        }
        Tensor next({k, d});
        std::vector<int> counts(static_cast<std::size_t>(k), 0);
        for (int i = 0; i < n; ++i) {
            const int j = assign[static_cast<std::size_t>(i)];
            ++counts[static_cast<std::size_t>(j)];
            for (int t = 0; t < d; ++t) next.at(j, t) += z.at(i, t);
        }
        for (int j = 0; j < k; ++j) {
            if (counts[static_cast<std::size_t>(j)] == 0) {
                for (int t = 0; t < d; ++t) next.at(j, t) = centers.at(j, t);
            } else {
                for (int t = 0; t < d; ++t) next.at(j, t) /= counts[static_cast<std::size_t>(j)];
            }
        }
        centers = std::move(next);
    }
    return centers;
}

std::vector<std::vector<real>> sorted_rows(const Tensor& m) {
    std::vector<std::vector<real>> rows;
    for (int i = 0; i < m.dim(0); ++i) {
        rows.emplace_back(m.data.begin() + static_cast<std::ptrdiff_t>(i) * m.dim(1),
                          m.data.begin() + static_cast<std::ptrdiff_t>(i + 1) * m.dim(1));
    }
    std::sort(rows.begin(), rows.end());
    return rows;
}

} // namespace

TEST_CASE("sinkhorn_assign hand cases") {
    SUBCASE("antidiagonal cost recovers the diagonal plan") {
        Tensor z = Tensor::from({2, 1}, {0.0, 10.0});
        // prototypes at the points: cost [[0,100],[100,0]] ~ [[0,10],[10,0]] scaled
        Tensor p = Tensor::from({2, 1}, {0.0, 10.0});
        TransportPlan plan = sinkhorn_assign(z, p, 0.5, 500, 1e-9);
        CHECK(plan.converged);
        CHECK(plan.t.at(0, 0) == doctest::Approx(0.5).epsilon(1e-3));
        CHECK(plan.t.at(1, 1) == doctest::Approx(0.5).epsilon(1e-3));
        CHECK(plan.t.at(0, 1) < 1e-3);
        CHECK(plan.t.at(1, 0) < 1e-3);
    }
    SUBCASE("constant cost maximizes entropy: uniform plan") {
        Tensor z = Tensor::from({3, 1}, {1.0, 1.0, 1.0});
        Tensor p = Tensor::from({2, 1}, {4.0, 4.0});
        TransportPlan plan = sinkhorn_assign(z, p, 1.0, 200, 1e-9);
        for (real v : plan.t.data) CHECK(v == doctest::Approx(1.0 / 6.0).epsilon(1e-6));
    }
    SUBCASE("marginals hold on random instances") {
        Rng rng(3);
        for (int trial = 0; trial < 30; ++trial) {
            const int n = 2 + static_cast<int>(rng.next_below(40));
            const int k = 1 + static_cast<int>(rng.next_below(8));
            Tensor z = random_points(n, 3, rng);
            Tensor p = random_points(k, 3, rng);
            TransportPlan plan = sinkhorn_assign(z, p, 0.3, 2000, 1e-8);
            REQUIRE(plan.converged);
            for (int i = 0; i < n; ++i) {
                real s = 0.0;
                for (int j = 0; j < k; ++j) s += plan.t.at(i, j);
                CHECK(std::abs(s - 1.0 / n) < 1e-6);
            }
            for (int j = 0; j < k; ++j) {
                real s = 0.0;
                for (int i = 0; i < n; ++i) s += plan.t.at(i, j);
                CHECK(std::abs(s - 1.0 / k) < 1e-6);
            }
        }
    }
    SUBCASE("solver objective improves monotonically across sweeps") {
        // Each scaling is an exact block-coordinate-ascent step on the dual
        // of <T,C> + eps*sum T(log T - 1), so the dual trace never decreases
        // and the primal energy of the iterates converges to it.
        Rng rng(4);
        for (int trial = 0; trial < 20; ++trial) {
            Tensor z = random_points(12, 2, rng);
            Tensor p = random_points(4, 2, rng);
            TransportPlan plan = sinkhorn_assign(z, p, 0.2, 300, 1e-9);
            REQUIRE(plan.dual_trace.size() >= 2);
            for (std::size_t s = 1; s < plan.dual_trace.size(); ++s) {
                CHECK(plan.dual_trace[s] >= plan.dual_trace[s - 1] - 1e-9);
            }
            // duality gap shrinks with the marginal violation; loose sanity bound
            CHECK(std::abs(plan.energy_trace.back() - plan.dual_trace.back()) <
                  1e-2 * std::max<real>(1.0, std::abs(plan.energy_trace.back())));
        }
    }
    SUBCASE("bad inputs") {
        Tensor z = Tensor::from({2, 1}, {0.0, 1.0});
        Tensor p = Tensor::from({1, 2}, {0.0, 1.0});
        CHECK_THROWS_AS(sinkhorn_assign(z, p, 0.1, 10, 1e-6), Error);
        Tensor p1 = Tensor::from({1, 1}, {0.0});
        CHECK_THROWS_AS(sinkhorn_assign(z, p1, 0.0, 10, 1e-6), Error);
    }
}

TEST_CASE("sinkhorn_kmeans") {
    SUBCASE("K=1 returns the column mean") {
        Rng rng(5);
        Tensor z = random_points(40, 3, rng);
        Tensor p = sinkhorn_kmeans(z, 1, 0.05, 50, 9);
        for (int t = 0; t < 3; ++t) {
            real mean = 0.0;
            for (int i = 0; i < 40; ++i) mean += z.at(i, t);
            mean /= 40.0;
            CHECK(p.at(0, t) == doctest::Approx(mean).epsilon(1e-6));
        }
    }
    SUBCASE("well-separated blobs match Lloyd's oracle") {
        Rng rng(6);
        for (int k : {2, 3, 5}) {
            std::vector<std::pair<real, real>> centers;
            for (int j = 0; j < k; ++j) centers.push_back({20.0 * j, 10.0 * ((j % 2) ? 1 : -1)});
            const int per = 30;
            Tensor z({k * per, 2});
            int row = 0;
            for (int j = 0; j < k; ++j) {
                for (int i = 0; i < per; ++i, ++row) {
                    z.at(row, 0) = centers[static_cast<std::size_t>(j)].first + rng.normal(0.0, 0.5);
                    z.at(row, 1) = centers[static_cast<std::size_t>(j)].second + rng.normal(0.0, 0.5);
                }
            }
            // small eps approaches the hard-assignment limit
            Tensor init = kmeans_pp_init(z, k, 17);
            Tensor soft = sinkhorn_kmeans(z, k, 0.002, 80, 17);
            Tensor hard = lloyd_kmeans(z, init, 80);
            real separation = 1e300;
            for (int a = 0; a < k; ++a)
                for (int b = a + 1; b < k; ++b) {
                    const real dx = centers[static_cast<std::size_t>(a)].first - centers[static_cast<std::size_t>(b)].first;
                    const real dy = centers[static_cast<std::size_t>(a)].second - centers[static_cast<std::size_t>(b)].second;
                    separation = std::min(separation, std::hypot(dx, dy));
                }
            auto soft_rows = sorted_rows(soft);
            auto hard_rows = sorted_rows(hard);
            for (int j = 0; j < k; ++j) {
                const real dist = std::hypot(soft_rows[static_cast<std::size_t>(j)][0] - hard_rows[static_cast<std::size_t>(j)][0],
                                             soft_rows[static_cast<std::size_t>(j)][1] - hard_rows[static_cast<std::size_t>(j)][1]);
                CHECK(dist < 0.05 * separation);
            }
        }
    }
    SUBCASE("permuting rows leaves the prototype set unchanged") {
        Rng rng(7);
        Tensor z = random_points(60, 3, rng);
        Tensor p1 = sinkhorn_kmeans(z, 4, 0.05, 50, 23);
        // reverse the rows
        Tensor zr({60, 3});
        for (int i = 0; i < 60; ++i)
            for (int t = 0; t < 3; ++t) zr.at(i, t) = z.at(59 - i, t);
        Tensor p2 = sinkhorn_kmeans(zr, 4, 0.05, 50, 23);
        auto r1 = sorted_rows(p1);
        auto r2 = sorted_rows(p2);
        for (std::size_t j = 0; j < r1.size(); ++j) {
            for (std::size_t t = 0; t < r1[j].size(); ++t) {
                CHECK(r1[j][t] == doctest::Approx(r2[j][t]).epsilon(1e-9));
            }
        }
    }
    SUBCASE("N < K rejected") {
        Rng rng(8);
        Tensor z = random_points(3, 2, rng);
        CHECK_THROWS_AS(sinkhorn_kmeans(z, 5, 0.05, 10, 1), Error);
    }
}

TEST_CASE("min distance scoring") {
    Tensor protos = Tensor::from({2, 2}, {0.0, 0.0, 10.0, 10.0});
    SUBCASE("patch equal to a prototype scores zero") {
        Tensor rows = Tensor::from({1, 2}, {10.0, 10.0});
        Tensor d = min_distance_rows(rows, protos);
        CHECK(d.at(0) == doctest::Approx(0.0));
    }
    SUBCASE("euclidean hand value") {
        Tensor rows = Tensor::from({1, 2}, {1.0, 1.0});
        Tensor d = min_distance_rows(rows, protos);
        CHECK(d.at(0) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-9));
    }
    SUBCASE("scores are invariant under prototype row permutation") {
        Rng rng(9);
        Tensor rows = random_points(20, 4, rng);
        Tensor p = random_points(6, 4, rng);
        Tensor perm({6, 4});
        for (int j = 0; j < 6; ++j)
            for (int t = 0; t < 4; ++t) perm.at(j, t) = p.at(5 - j, t);
        Tensor d1 = min_distance_rows(rows, p);
        Tensor d2 = min_distance_rows(rows, perm);
        for (std::size_t i = 0; i < d1.data.size(); ++i) CHECK(d1.data[i] == doctest::Approx(d2.data[i]));
    }
}

TEST_CASE("memory bank pipeline on a tiny encoder") {
    BackboneConfig bcfg;
    bcfg.hiera_dims = {8, 8, 8, 8};
    bcfg.d_dino = 8;
    Encoder enc(bcfg);
    FusionParams fusion = init_fusion_params(bcfg, 3);
    Rng rng(10);
    std::vector<UnlabeledSample> normals;
    for (int i = 0; i < 4; ++i) {
        Tensor img({32, 32, 3});
        for (auto& v : img.data) v = rng.uniform();
        normals.push_back({img, 0, i});
    }

    SUBCASE("bank feature row counts and layout") {
        auto features = build_bank_features(enc, fusion, normals, true, 2);
        REQUIRE(features.size() == 4);
        CHECK(features[0].dims == std::vector<int>{4 * 8 * 8, 16});
        CHECK(features[3].dims == std::vector<int>{4 * 1 * 1, 16});
        // row (m, y*w + x) equals the fused map at (m, y, x)
        Tensor batch({1, 32, 32, 3});
        std::copy(normals[2].image.data.begin(), normals[2].image.data.end(), batch.data.begin());
        FusedPyramid fused = encode(enc, fusion, batch, nullptr);
        const int w = fused.scales[0].dim(2);
        for (int y = 0; y < 3; ++y)
            for (int x = 0; x < 3; ++x)
                for (int c = 0; c < 16; ++c) {
                    CHECK(features[0].at(2 * 64 + y * w + x, c) == doctest::Approx(fused.scales[0].at(0, y, x, c)));
                }
    }

    SUBCASE("scoring pipeline shapes and constants") {
        InferenceConfig icfg;
        icfg.k = 3;
        icfg.m_images = 4;
        MemoryBank bank = build_memory_bank(enc, fusion, normals, icfg);
        REQUIRE(bank.prototypes.size() == 4);
        CHECK(bank.prototypes[0].dims == std::vector<int>{3, 16});
        Tensor batch({2, 32, 32, 3});
        std::copy(normals[0].image.data.begin(), normals[0].image.data.end(), batch.data.begin());
        std::copy(normals[1].image.data.begin(), normals[1].image.data.end(),
                  batch.data.begin() + static_cast<std::ptrdiff_t>(normals[0].image.size()));
        auto maps = anomaly_score_maps(enc, fusion, bank, batch, icfg);
        REQUIRE(maps.size() == 2);
        CHECK(maps[0].smoothed.dims == std::vector<int>{32, 32});
        CHECK(maps[0].per_scale.size() == 4);
        for (real v : maps[0].smoothed.data) CHECK(v >= -1e-12);
        for (real v : maps[0].smoothed.data) CHECK(std::isfinite(v));
    }

    SUBCASE("bank round trip") {
        InferenceConfig icfg;
        icfg.k = 2;
        icfg.m_images = 3;
        MemoryBank bank = build_memory_bank(enc, fusion, normals, icfg);
        const std::string dir = "/tmp/nexvitad_bank_test";
        save_memory_bank(bank, dir);
        MemoryBank loaded = load_memory_bank(dir);
        CHECK(loaded.k == bank.k);
        CHECK(loaded.fused_features == bank.fused_features);
        REQUIRE(loaded.prototypes.size() == bank.prototypes.size());
        for (std::size_t s = 0; s < bank.prototypes.size(); ++s) {
            for (std::size_t i = 0; i < bank.prototypes[s].data.size(); ++i) {
                CHECK(loaded.prototypes[s].data[i] ==
                      doctest::Approx(bank.prototypes[s].data[i]).epsilon(1e-6));
            }
        }
    }
}
