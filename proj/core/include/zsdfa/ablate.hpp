#pragma once

#include <span>
#include <string>
#include <vector>

#include "zsdfa/eval.hpp"
#include "zsdfa/train.hpp"

namespace zsdfa {

struct AblationRun {
    std::string name;
    ModuleSet modules;
    LossConfig losses;
};

/// Eleven module on/off rows (single views through the full stack). Loss
/// terms that depend on a disabled module are dropped automatically.
std::vector<AblationRun> module_grid(const LossConfig& base);

/// Five cumulative loss-term rows: dfa, +dfacc, +cmc, +dcpc, +kl.
std::vector<AblationRun> loss_grid(const LossConfig& base);

std::vector<AblationRun> lambda_grid(const LossConfig& base,
                                     std::span<const double> lambdas);

std::vector<AblationRun> margin_grid(const LossConfig& base,
                                     std::span<const double> margins);

struct AblationRowResult {
    std::string name;
    std::uint64_t seed = 0;  // 0 in median rows
    bool is_median = false;
    double seen_acc = 0;
    std::vector<double> unseen_acc;
};

struct AblationResults {
    std::vector<double> thresholds;
    std::vector<AblationRowResult> rows;  // per (config, seed), then medians

    std::string csv() const;
    std::string markdown() const;
    const AblationRowResult& median_of(const std::string& name) const;
};

/// Trains and evaluates every (run, seed) pair; runs may execute concurrently
/// (each training is single-threaded). One row per pair plus a median row per
/// configuration.
AblationResults run_ablation(const EncoderConfig& model_config, const ProtocolData& data,
                             const TrainConfig& base, const std::vector<AblationRun>& runs,
                             std::span<const std::uint64_t> seeds,
                             const std::vector<double>& thresholds, int threads = 0);

} // namespace zsdfa
