// End-to-end acceptance suite: runs every release gate at its pinned
// tolerance and prints one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "nexvitad/commands.hpp"
#include "nexvitad/image.hpp"
#include "nexvitad/tensor_io.hpp"

using namespace nexvitad;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Criterion {
    int id;
    const char* name;
    bool passed;
    std::string details;
};

std::vector<Criterion> g_results;

void report(int id, const char* name, bool passed, const std::string& details) {
    g_results.push_back({id, name, passed, details});
    std::printf("[%s] C%-2d %-28s %s\n", passed ? "PASS" : "FAIL", id, name, details.c_str());
    std::fflush(stdout);
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------------- C1

void criterion_gradients() {
    GradCheckOutcome outcome = cmd_grad_check(1e-4, 1e-5);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "max rel err %.2e over %zu params, %.1f s (< 1e-4, < 60 s)",
                  outcome.report.max_rel_err, outcome.report.params_checked, outcome.seconds);
    report(1, "gradient correctness", outcome.passed && outcome.seconds < 60.0, buf);
}

// ---------------------------------------------------------------------- C3

void criterion_transport() {
    Rng rng(314);
    real worst = 0.0;
    bool ok = true;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 2 + static_cast<int>(rng.next_below(255));
        const int k = 1 + static_cast<int>(rng.next_below(40));
        const int d = 1 + static_cast<int>(rng.next_below(6));
        Tensor z({n, d}), p({k, d});
        for (auto& v : z.data) v = rng.normal(0.0, 1.0);
        for (auto& v : p.data) v = rng.normal(0.0, 1.0);
        TransportPlan plan = sinkhorn_assign(z, p, 0.25, 4000, 1e-8);
        for (int i = 0; i < n; ++i) {
            real s = 0.0;
            for (int j = 0; j < k; ++j) s += plan.t.at(i, j);
            worst = std::max(worst, std::abs(s - 1.0 / n));
        }
        for (int j = 0; j < k; ++j) {
            real s = 0.0;
            for (int i = 0; i < n; ++i) s += plan.t.at(i, j);
            worst = std::max(worst, std::abs(s - 1.0 / k));
        }
    }
    ok &= worst < 1e-6;

    // 2x2 antidiagonal cost: prototypes on the points
    Tensor z2 = Tensor::from({2, 1}, {0.0, 10.0});
    TransportPlan plan2 = sinkhorn_assign(z2, z2, 0.5, 2000, 1e-10);
    const real diag_err = std::max(std::abs(plan2.t.at(0, 0) - 0.5), std::abs(plan2.t.at(1, 1) - 0.5));
    const real off_mass = plan2.t.at(0, 1) + plan2.t.at(1, 0);
    ok &= diag_err < 1e-3 && off_mass < 1e-3;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "marginal violation %.2e (< 1e-6), antidiagonal off-mass %.2e (< 1e-3)", worst,
                  off_mass);
    report(3, "transport invariants", ok, buf);
}

// ---------------------------------------------------------------------- C4

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

void criterion_clustering() {
    Rng rng(2718);
    bool ok = true;
    real worst_frac = 0.0;
    const int ks[5] = {2, 3, 5, 3, 2};
    for (int ds = 0; ds < 5; ++ds) {
        const int k = ks[ds];
        std::vector<std::pair<real, real>> blob_centers;
        for (int j = 0; j < k; ++j) {
            blob_centers.push_back({25.0 * j + rng.uniform(-2.0, 2.0), 15.0 * ((j % 2) ? 1 : -1) + rng.uniform(-2.0, 2.0)});
        }
        const int per = 40;
        Tensor z({k * per, 2});
        int row = 0;
        for (int j = 0; j < k; ++j) {
            for (int i = 0; i < per; ++i, ++row) {
                z.at(row, 0) = blob_centers[static_cast<std::size_t>(j)].first + rng.normal(0.0, 0.6);
                z.at(row, 1) = blob_centers[static_cast<std::size_t>(j)].second + rng.normal(0.0, 0.6);
            }
        }
        real separation = 1e300;
        for (int a = 0; a < k; ++a) {
            for (int b = a + 1; b < k; ++b) {
                separation = std::min(separation,
                                      std::hypot(blob_centers[static_cast<std::size_t>(a)].first -
                                                     blob_centers[static_cast<std::size_t>(b)].first,
                                                 blob_centers[static_cast<std::size_t>(a)].second -
                                                     blob_centers[static_cast<std::size_t>(b)].second));
            }
        }
        const std::uint64_t seed = 99 + static_cast<std::uint64_t>(ds);
        Tensor init = kmeans_pp_init(z, k, seed);
        Tensor soft = sinkhorn_kmeans(z, k, 0.002, 100, seed);
        Tensor hard = lloyd_kmeans(z, init, 100);
        // compare as sorted sets
        auto sorted_rows = [](const Tensor& m) {
            std::vector<std::vector<real>> rows;
            for (int i = 0; i < m.dim(0); ++i) {
                rows.emplace_back(m.data.begin() + static_cast<std::ptrdiff_t>(i) * m.dim(1),
                                  m.data.begin() + static_cast<std::ptrdiff_t>(i + 1) * m.dim(1));
            }
            std::sort(rows.begin(), rows.end());
            return rows;
        };
        auto s_rows = sorted_rows(soft);
        auto h_rows = sorted_rows(hard);
        for (int j = 0; j < k; ++j) {
            const real dist = std::hypot(s_rows[static_cast<std::size_t>(j)][0] - h_rows[static_cast<std::size_t>(j)][0],
                                         s_rows[static_cast<std::size_t>(j)][1] - h_rows[static_cast<std::size_t>(j)][1]);
            worst_frac = std::max(worst_frac, dist / separation);
        }
    }
    ok = worst_frac < 0.05;
    char buf[120];
    std::snprintf(buf, sizeof(buf), "worst prototype offset %.3f of separation (< 0.05)", worst_frac);
    report(4, "clustering oracle", ok, buf);
}

// ---------------------------------------------------------------------- C5

real auc_oracle(const std::vector<real>& scores, const std::vector<int>& labels) {
    real wins = 0.0;
    long pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return wins / static_cast<real>(pairs);
}

real ap_oracle(const std::vector<real>& scores, const std::vector<int>& labels) {
    std::vector<real> thresholds = scores;
    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    long total_pos = 0;
    for (int l : labels) total_pos += l;
    real ap = 0.0, recall_prev = 0.0;
    for (real t : thresholds) {
        long tp = 0, fp = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (scores[i] >= t) (labels[i] == 1 ? tp : fp) += 1;
        }
        const real recall = static_cast<real>(tp) / total_pos;
        ap += (recall - recall_prev) * (static_cast<real>(tp) / (tp + fp));
        recall_prev = recall;
    }
    return ap;
}

void criterion_metric_oracles() {
    Rng rng(1618);
    real worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 2 + static_cast<int>(rng.next_below(199));
        std::vector<real> scores;
        std::vector<int> labels;
        bool pos = false, neg = false;
        for (int i = 0; i < n; ++i) {
            scores.push_back(std::round(rng.uniform() * 32.0) / 32.0);
            labels.push_back(static_cast<int>(rng.next_below(2)));
            pos |= labels.back() == 1;
            neg |= labels.back() == 0;
        }
        if (!pos) labels[0] = 1;
        if (!neg) labels[static_cast<std::size_t>(n) - 1] = 0;
        worst = std::max(worst, std::abs(auc(scores, labels) - auc_oracle(scores, labels)));
        worst = std::max(worst, std::abs(average_precision(scores, labels) - ap_oracle(scores, labels)));
    }
    bool ok = worst < 1e-9;

    Tensor gt({4, 4});
    gt.at(1, 1) = 1.0;
    gt.at(1, 2) = 1.0;
    Tensor perfect = gt;
    Tensor disjoint({4, 4});
    disjoint.at(3, 3) = 1.0;
    Tensor third({4, 4});
    third.at(1, 2) = 1.0;
    third.at(2, 2) = 1.0;
    ok &= pro_mean_iou({perfect}, {gt}, ProMode::Fixed, 0.5).value == 1.0;
    ok &= pro_mean_iou({disjoint}, {gt}, ProMode::Fixed, 0.5).value == 0.0;
    ok &= std::abs(pro_mean_iou({third}, {gt}, ProMode::Fixed, 0.5).value - 1.0 / 3.0) < 1e-15;
    char buf[120];
    std::snprintf(buf, sizeof(buf), "worst oracle gap %.2e over 1000 instances (< 1e-9), hand PRO exact", worst);
    report(5, "metric oracles", ok, buf);
}

// ----------------------------------------------------- shared benchmark runs

struct SeedRun {
    MetricReport bank_report;
    MetricReport decoder_report;
    bool backbone_frozen = false;
    std::string data_dir;
    std::string checkpoint_dir;
    std::string run_dir;
    RunConfig cfg;
};

RunConfig benchmark_config(std::uint64_t seed, int n_target) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.n_target_classes = n_target;
    return cfg; // spec defaults everywhere else
}

SeedRun run_benchmark_seed(const fs::path& root, std::uint64_t seed, int n_target, bool pseudo, bool mtl,
                           bool also_decoder_report) {
    SeedRun out;
    RunConfig cfg = benchmark_config(seed, n_target);
    cfg.train.pseudo_enabled = pseudo;
    cfg.train.mtl_enabled = mtl;
    out.cfg = resolve_run_config(cfg);

    const fs::path dir = root / ("seed" + std::to_string(seed) + (pseudo ? "" : "_nopseudo") + (mtl ? "" : "_nomtl") +
                                 "_t" + std::to_string(n_target));
    out.data_dir = (dir / "data").string();
    out.run_dir = (dir / "run").string();
    cmd_gen_data(out.cfg, out.data_dir, true, false);

    Model probe(out.cfg.model);
    const std::uint64_t checksum_before = probe.backbone_checksum();
    TrainOutcome train_out = cmd_train(out.cfg, out.data_dir, out.run_dir);
    out.checkpoint_dir = train_out.checkpoint_dir;
    Model trained = load_checkpoint(out.checkpoint_dir, nullptr);
    out.backbone_frozen = trained.backbone_checksum() == checksum_before;

    const std::string bank_dir = cmd_build_bank(out.cfg, out.checkpoint_dir, out.data_dir, out.run_dir);
    cmd_infer(out.cfg, out.checkpoint_dir, bank_dir, out.data_dir, out.run_dir, false);
    out.bank_report = cmd_eval(out.cfg, out.run_dir + "/scores", out.data_dir, out.run_dir + "/report.json");
    if (also_decoder_report) {
        const std::string dec_dir = out.run_dir + "/decoder";
        cmd_infer(out.cfg, out.checkpoint_dir, "", out.data_dir, dec_dir, true);
        out.decoder_report = cmd_eval(out.cfg, dec_dir + "/scores", out.data_dir, dec_dir + "/report.json");
    }
    return out;
}

std::vector<SeedRun> g_bench_runs; // criterion 6 artifacts, reused by 8

void criterion_benchmark(const fs::path& root) {
    const auto t0 = Clock::now();
    const std::uint64_t seeds[3] = {1, 2, 3};
    real auc_sum = 0.0, pro_sum = 0.0;
    bool frozen = true;
    for (std::uint64_t seed : seeds) {
        SeedRun run = run_benchmark_seed(root / "bench", seed, 1, true, true, false);
        auc_sum += run.bank_report.auc;
        pro_sum += run.bank_report.pro;
        frozen &= run.backbone_frozen;
        g_bench_runs.push_back(std::move(run));
    }
    const double elapsed = seconds_since(t0);
    const real mean_auc = auc_sum / 3.0;
    const real mean_pro = pro_sum / 3.0;
    char buf[200];
    std::snprintf(buf, sizeof(buf), "mean AUC %.4f (>= 0.90), mean PRO %.4f (>= 0.70), %.0f s (< 900 s)", mean_auc,
                  mean_pro, elapsed);
    report(6, "end-to-end benchmark", mean_auc >= 0.90 && mean_pro >= 0.70 && elapsed < 900.0, buf);
    report(2, "frozen-backbone contract", frozen, frozen ? "backbone checksums bit-identical after training"
                                                         : "backbone parameters changed during training");
}

void criterion_ablations(const fs::path& root) {
    const std::uint64_t seeds[3] = {1, 2, 3};
    real bank_auc = 0.0, decoder_auc = 0.0, pseudo_on = 0.0, pseudo_off = 0.0, mtl_on = 0.0, mtl_off = 0.0;
    for (std::uint64_t seed : seeds) {
        SeedRun full = run_benchmark_seed(root / "ablate", seed, 2, true, true, true);
        SeedRun nopseudo = run_benchmark_seed(root / "ablate", seed, 2, false, true, false);
        SeedRun nomtl = run_benchmark_seed(root / "ablate", seed, 2, true, false, false);
        bank_auc += full.bank_report.auc;
        decoder_auc += full.decoder_report.auc;
        pseudo_on += full.bank_report.auc;
        pseudo_off += nopseudo.bank_report.auc;
        mtl_on += full.bank_report.auc;
        mtl_off += nomtl.bank_report.auc;
    }
    bank_auc /= 3.0;
    decoder_auc /= 3.0;
    pseudo_on /= 3.0;
    pseudo_off /= 3.0;
    mtl_on /= 3.0;
    mtl_off /= 3.0;
    const bool ok = bank_auc >= decoder_auc - 0.01 && pseudo_on >= pseudo_off - 0.01 && mtl_on >= mtl_off - 0.01;
    char buf[240];
    std::snprintf(buf, sizeof(buf),
                  "bank %.4f vs decoder %.4f; pseudo on %.4f vs off %.4f; mtl on %.4f vs shared %.4f (tol -0.01)",
                  bank_auc, decoder_auc, pseudo_on, pseudo_off, mtl_on, mtl_off);
    report(7, "ablation directionality", ok, buf);
}

void criterion_cluster_sweep() {
    const int sweep[4] = {5, 20, 30, 40};
    real mean_auc[4] = {0, 0, 0, 0};
    for (const SeedRun& run : g_bench_runs) {
        for (int i = 0; i < 4; ++i) {
            RunConfig cfg = run.cfg;
            cfg.infer.k = sweep[i];
            if (sweep[i] == 30) {
                mean_auc[i] += run.bank_report.auc; // already computed at K=30
                continue;
            }
            const std::string kdir = run.run_dir + "/k" + std::to_string(sweep[i]);
            const std::string bank_dir = cmd_build_bank(cfg, run.checkpoint_dir, run.data_dir, kdir);
            cmd_infer(cfg, run.checkpoint_dir, bank_dir, run.data_dir, kdir, false);
            MetricReport rep = cmd_eval(cfg, kdir + "/scores", run.data_dir, kdir + "/report.json");
            mean_auc[i] += rep.auc;
        }
    }
    for (auto& v : mean_auc) v /= static_cast<real>(g_bench_runs.size());
    const real best_high = std::max({mean_auc[1], mean_auc[2], mean_auc[3]});
    const bool ok = best_high - mean_auc[0] >= 0.02;
    char buf[200];
    std::snprintf(buf, sizeof(buf), "AUC: K5 %.4f, K20 %.4f, K30 %.4f, K40 %.4f; best-K5 gap %.4f (>= 0.02)",
                  mean_auc[0], mean_auc[1], mean_auc[2], mean_auc[3], best_high - mean_auc[0]);
    report(8, "cluster-count sweep shape", ok, buf);
}

void criterion_timing_bench(const fs::path& root) {
    RunConfig cfg;
    cfg.seed = 5;
    const std::vector<int> ks = {5, 10, 20, 30, 40};
    const std::vector<int> batches = {1, 5, 10, 15};
    auto entries = cmd_bench(cfg, ks, batches, 7, (root / "bench.json").string());
    // mean over batch sizes per K
    std::vector<real> mean_ms(ks.size(), 0.0);
    for (const auto& e : entries) {
        for (std::size_t i = 0; i < ks.size(); ++i) {
            if (e.k == ks[i]) mean_ms[i] += e.mean_ms / static_cast<real>(batches.size());
        }
    }
    bool monotone = true;
    for (std::size_t i = 1; i < mean_ms.size(); ++i) {
        if (mean_ms[i] < mean_ms[i - 1] * 0.90) monotone = false;
    }
    // least-squares fit of time vs K
    real sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
    const real n = static_cast<real>(ks.size());
    for (std::size_t i = 0; i < ks.size(); ++i) {
        sx += ks[i];
        sy += mean_ms[i];
        sxx += static_cast<real>(ks[i]) * ks[i];
        sxy += ks[i] * mean_ms[i];
        syy += mean_ms[i] * mean_ms[i];
    }
    const real cov = sxy - sx * sy / n;
    const real var_x = sxx - sx * sx / n;
    const real var_y = syy - sy * sy / n;
    const real r2 = var_x > 0 && var_y > 0 ? (cov * cov) / (var_x * var_y) : 0.0;
    char buf[200];
    std::snprintf(buf, sizeof(buf), "mean ms per K: %.1f %.1f %.1f %.1f %.1f; monotone(10%%)=%s R2=%.3f (> 0.9)",
                  mean_ms[0], mean_ms[1], mean_ms[2], mean_ms[3], mean_ms[4], monotone ? "yes" : "no", r2);
    report(9, "timing bench shape", monotone && r2 > 0.9, buf);
}

void criterion_determinism(const fs::path& root) {
    RunConfig cfg;
    cfg.classes = 4;
    cfg.per_class_train = 8;
    cfg.per_class_test = 4;
    cfg.n_target_classes = 1;
    cfg.seed = 77;
    cfg.threads = 1;
    cfg.train.epochs = 8;
    cfg.train.warmup_epochs = 2;
    cfg.train.phase1_epochs = 3;
    cfg.train.pseudo_refresh_every = 2;
    cfg.train.batch_size = 4;
    cfg.infer.k = 5;
    cfg.infer.m_images = 4;

    auto run_once = [&](const fs::path& dir) {
        const std::string data = (dir / "data").string();
        const std::string run = (dir / "run").string();
        cmd_gen_data(cfg, data, true, false);
        TrainOutcome t = cmd_train(cfg, data, run);
        const std::string bank = cmd_build_bank(cfg, t.checkpoint_dir, data, run);
        return cmd_infer(cfg, t.checkpoint_dir, bank, data, run, false);
    };
    const std::string s1 = run_once(root / "det1");
    const std::string s2 = run_once(root / "det2");

    bool identical = true;
    std::size_t files = 0;
    for (const auto& entry : fs::directory_iterator(s1)) {
        if (entry.path().extension() != ".nxt") continue;
        ++files;
        std::ifstream f1(entry.path(), std::ios::binary);
        std::ifstream f2(fs::path(s2) / entry.path().filename(), std::ios::binary);
        if (!f2) {
            identical = false;
            break;
        }
        std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        identical &= b1 == b2;
    }
    char buf[120];
    std::snprintf(buf, sizeof(buf), "%zu score tensors byte-identical across two pipeline runs", files);
    report(10, "determinism", identical && files > 0, buf);
}

} // namespace

int main() {
    const auto t0 = Clock::now();
    fs::path root = fs::temp_directory_path() / "nexvitad_acceptance";
    fs::remove_all(root);
    fs::create_directories(root);

    try {
        criterion_gradients();
        criterion_transport();
        criterion_clustering();
        criterion_metric_oracles();
        criterion_benchmark(root);   // also reports C2
        criterion_cluster_sweep();   // reuses C6 checkpoints
        criterion_ablations(root);
        criterion_timing_bench(root);
        criterion_determinism(root);
    } catch (const std::exception& e) {
        std::printf("[FAIL] acceptance aborted: %s\n", e.what());
        return 1;
    }

    std::sort(g_results.begin(), g_results.end(), [](const Criterion& a, const Criterion& b) { return a.id < b.id; });
    int failed = 0;
    for (const auto& c : g_results) failed += c.passed ? 0 : 1;
    std::printf("----\n%d/%zu criteria passed in %.0f s\n", static_cast<int>(g_results.size()) - failed,
                g_results.size(), seconds_since(t0));
    return failed == 0 ? 0 : 1;
}
