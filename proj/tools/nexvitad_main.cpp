#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <string>

#include "nexvitad/commands.hpp"

using namespace nexvitad;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

int exit_code_for(const Error& e) {
    switch (e.kind()) {
        case ErrorKind::Config:
        case ErrorKind::Shape:
        case ErrorKind::Contract:
            return kExitConfig;
        case ErrorKind::Data:
            return kExitData;
        case ErrorKind::Numeric:
            return kExitNumeric;
    }
    return 1;
}

struct CommonOpts {
    std::string config_path;
    std::string out = "out";
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;
};

RunConfig build_config(const CommonOpts& opts) {
    RunConfig cfg;
    if (!opts.config_path.empty()) cfg = load_run_config(opts.config_path);
    if (opts.seed_set) cfg.seed = opts.seed;
    if (opts.threads > 0) cfg.threads = opts.threads;
    if (const char* env = std::getenv("NEXVITAD_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) cfg.threads = n;
    }
    return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "run config JSON (defaults apply when omitted)");
    cmd->add_option("--out", opts.out, "output directory");
    cmd->add_option("--seed", opts.seed, "master seed")->each([&](const std::string&) { opts.seed_set = true; });
    cmd->add_option("--threads", opts.threads, "worker threads (default 1, deterministic)");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"NexViTAD cross-domain anomaly detection pipeline"};
    app.require_subcommand(1);

    CommonOpts gen_opts, train_opts, bank_opts, infer_opts, eval_opts, bench_opts;

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "synthesize the multi-class texture dataset");
    add_common(gen, gen_opts);
    std::string gen_data_dir = "data";
    bool gen_force = false, gen_export_nxt = false;
    int gen_targets = 0;
    gen->add_option("--data", gen_data_dir, "dataset directory to create");
    gen->add_flag("--force", gen_force, "overwrite an existing dataset");
    gen->add_flag("--export-nxt", gen_export_nxt, "also write NXT1 tensors next to the PNGs");
    gen->add_option("--target-classes", gen_targets, "number of target-domain classes (split drawn from seed)");

    // train
    auto* tr = app.add_subcommand("train", "train adapters, projections, and decoder heads");
    add_common(tr, train_opts);
    std::string train_data_dir = "data", resume_dir;
    bool no_pseudo = false, no_mtl = false;
    int train_epochs = 0;
    tr->add_option("--data", train_data_dir, "dataset directory");
    tr->add_option("--resume", resume_dir, "checkpoint directory to resume from");
    tr->add_flag("--no-pseudo", no_pseudo, "disable pseudo-labeling (target terms dropped)");
    tr->add_flag("--no-mtl", no_mtl, "use a single shared source head");
    tr->add_option("--epochs", train_epochs, "override epoch count");

    // build-bank
    auto* bank = app.add_subcommand("build-bank", "cluster normal-image embeddings into the memory bank");
    add_common(bank, bank_opts);
    std::string bank_ckpt, bank_data_dir = "data";
    int bank_k = 0, bank_m = 0;
    bank->add_option("--checkpoint", bank_ckpt, "trained checkpoint directory")->required();
    bank->add_option("--data", bank_data_dir, "dataset directory");
    bank->add_option("--k", bank_k, "prototypes per scale (default 30)");
    bank->add_option("--m", bank_m, "normal images in the bank (default 10)");

    // infer
    auto* inf = app.add_subcommand("infer", "score target test images into heatmaps and NXT1 tensors");
    add_common(inf, infer_opts);
    std::string infer_ckpt, infer_bank, infer_data_dir = "data";
    bool decoder_inference = false;
    inf->add_option("--checkpoint", infer_ckpt, "trained checkpoint directory")->required();
    inf->add_option("--bank", infer_bank, "memory bank directory");
    inf->add_option("--data", infer_data_dir, "dataset directory");
    inf->add_flag("--decoder-inference", decoder_inference, "score with the trained target head instead of the bank");

    // eval
    auto* ev = app.add_subcommand("eval", "compute AUC / AP / PRO from saved score tensors");
    add_common(ev, eval_opts);
    std::string eval_scores, eval_data_dir = "data";
    std::string eval_pro_mode;
    ev->add_option("--scores", eval_scores, "scores directory")->required();
    ev->add_option("--data", eval_data_dir, "dataset directory");
    ev->add_option("--pro-mode", eval_pro_mode, "fixed | best_sweep");

    // grad-check
    auto* gc = app.add_subcommand("grad-check", "validate every analytic gradient against finite differences");
    double gc_tol = 1e-4;
    gc->add_option("--tol", gc_tol, "max relative error tolerance");

    // bench
    auto* bn = app.add_subcommand("bench", "inference timing across prototype counts and batch sizes");
    add_common(bn, bench_opts);
    std::vector<int> bench_ks{5, 10, 20, 30, 40};
    std::vector<int> bench_batches{1, 5, 10, 15};
    int bench_reps = 5;
    bn->add_option("--k-sweep", bench_ks, "prototype counts");
    bn->add_option("--batches", bench_batches, "batch sizes");
    bn->add_option("--reps", bench_reps, "timed repetitions per configuration");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            RunConfig cfg = build_config(gen_opts);
            if (gen_targets > 0) cfg.n_target_classes = gen_targets;
            cmd_gen_data(cfg, gen_data_dir, gen_force, gen_export_nxt);
            std::printf("dataset written to %s\n", gen_data_dir.c_str());
        } else if (tr->parsed()) {
            RunConfig cfg = build_config(train_opts);
            if (no_pseudo) cfg.train.pseudo_enabled = false;
            if (no_mtl) cfg.train.mtl_enabled = false;
            if (train_epochs > 0) cfg.train.epochs = train_epochs;
            TrainOutcome outcome = cmd_train(cfg, train_data_dir, train_opts.out, resume_dir);
            std::printf("checkpoint written to %s (%zu epochs logged)\n", outcome.checkpoint_dir.c_str(),
                        outcome.logs.size());
        } else if (bank->parsed()) {
            RunConfig cfg = build_config(bank_opts);
            if (bank_k > 0) cfg.infer.k = bank_k;
            if (bank_m > 0) cfg.infer.m_images = bank_m;
            const std::string dir = cmd_build_bank(cfg, bank_ckpt, bank_data_dir, bank_opts.out);
            std::printf("memory bank written to %s\n", dir.c_str());
        } else if (inf->parsed()) {
            RunConfig cfg = build_config(infer_opts);
            if (!decoder_inference && infer_bank.empty()) {
                std::fprintf(stderr, "error: --bank is required unless --decoder-inference is set\n");
                return kExitConfig;
            }
            const std::string dir =
                cmd_infer(cfg, infer_ckpt, infer_bank, infer_data_dir, infer_opts.out, decoder_inference);
            std::printf("scores written to %s\n", dir.c_str());
        } else if (ev->parsed()) {
            RunConfig cfg = build_config(eval_opts);
            if (eval_pro_mode == "fixed") cfg.pro_mode = ProMode::Fixed;
            else if (eval_pro_mode == "best_sweep") cfg.pro_mode = ProMode::BestSweep;
            else if (!eval_pro_mode.empty()) throw_config("unknown --pro-mode " + eval_pro_mode);
            const std::string report = eval_opts.out + "/report.json";
            MetricReport r = cmd_eval(cfg, eval_scores, eval_data_dir, report);
            std::printf("auc=%.4f ap=%.4f pro=%.4f (tau=%.2f) over %d images\n", r.auc, r.ap, r.pro, r.pro_tau,
                        r.images);
        } else if (gc->parsed()) {
            GradCheckOutcome outcome = cmd_grad_check(gc_tol);
            for (const auto& entry : outcome.report.entries) {
                if (entry.max_rel_err >= gc_tol) {
                    std::printf("FAIL %-28s rel_err=%.3e analytic=%.6e numeric=%.6e\n", entry.param.c_str(),
                                entry.max_rel_err, entry.analytic, entry.numeric);
                }
            }
            std::printf("grad-check: %zu params, max rel err %.3e, %.1f s -> %s\n", outcome.report.params_checked,
                        outcome.report.max_rel_err, outcome.seconds, outcome.passed ? "PASS" : "FAIL");
            if (!outcome.passed) return kExitNumeric;
        } else if (bn->parsed()) {
            RunConfig cfg = build_config(bench_opts);
            const std::string out_path = bench_opts.out + "/bench.json";
            std::filesystem::create_directories(bench_opts.out);
            auto entries = cmd_bench(cfg, bench_ks, bench_batches, bench_reps, out_path);
            for (const auto& e : entries) {
                std::printf("K=%-3d batch=%-3d %8.2f ms (+- %.2f)\n", e.k, e.batch, e.mean_ms, e.std_ms);
            }
            std::printf("bench written to %s\n", out_path.c_str());
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
