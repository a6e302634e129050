#pragma once

#include <string>
#include <vector>

#include "nexvitad/config.hpp"
#include "nexvitad/dataset_io.hpp"
#include "nexvitad/grad_check.hpp"

namespace nexvitad {

// Command layer shared by the CLI and the acceptance suite. Every command is
// a pure function of (config, input files) in single-threaded mode.

void cmd_gen_data(const RunConfig& cfg, const std::string& data_dir, bool force, bool export_nxt);

struct TrainOutcome {
    std::vector<EpochLog> logs;
    std::string checkpoint_dir;
};
TrainOutcome cmd_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
                       const std::string& resume_checkpoint = {});

std::string cmd_build_bank(const RunConfig& cfg, const std::string& checkpoint_dir, const std::string& data_dir,
                           const std::string& out_dir);

// scores every target-domain test image; decoder_inference swaps the memory
// bank for the trained target segmentation head
std::string cmd_infer(const RunConfig& cfg, const std::string& checkpoint_dir, const std::string& bank_dir,
                      const std::string& data_dir, const std::string& out_dir, bool decoder_inference);

struct MetricReport {
    real auc = 0.0;
    real ap = 0.0;
    real pro = 0.0;
    real pro_tau = 0.0;
    int images = 0;
    int defective_images = 0;
};
MetricReport cmd_eval(const RunConfig& cfg, const std::string& scores_dir, const std::string& data_dir,
                      const std::string& report_path);

struct GradCheckOutcome {
    GradCheckReport report;
    real seconds = 0.0;
    bool passed = false;
};
// every trainable parameter against central differences through the full
// joint objective, on a micro configuration sized to finish quickly
GradCheckOutcome cmd_grad_check(real tol = 1e-4, real h = 1e-5);

std::vector<BenchEntry> cmd_bench(const RunConfig& cfg, const std::vector<int>& ks,
                                  const std::vector<int>& batch_sizes, int reps, const std::string& out_path);

} // namespace nexvitad
