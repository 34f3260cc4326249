#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "zsdfa/losses.hpp"
#include "zsdfa/model.hpp"

namespace zsdfa {

struct TrainConfig {
    int epochs = 30;
    double lr = 1e-4;
    double weight_decay = 1e-3;
    int lr_drop_every = 15;      // epochs between /10 learning-rate drops
    double lr_drop_factor = 10.0;
    int batch = 16;
    std::uint64_t seed = 0;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    ModuleSet modules;
    LossConfig losses;
    int threads = 0;  // used only for the read-only per-epoch evaluation

    /// Rejects contradictory flag combinations (e.g. the dcpc loss enabled
    /// while the parsing encoder is off).
    void validate() const;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Adam with L2-style weight decay folded into the gradient. Parameters that
/// received no gradient in a step are skipped entirely.
class Adam {
public:
    Adam(std::vector<std::pair<std::string, Tensor<float>*>> params, const TrainConfig& cfg);

    void set_lr(double lr) { lr_ = lr; }
    void step();
    void zero_grad();

private:
    struct Slot {
        Tensor<float>* param;
        std::vector<float> m, v;
        long t = 0;
    };
    std::vector<Slot> slots_;
    double lr_, wd_, beta1_, beta2_, eps_;
};

struct EpochSummary {
    int epoch = 0;
    LossReport mean_losses;
    double gate_diag_mean = 0;  // mean |A_uu| over the active block, per epoch
    double seen_acc = 0;
    double lr = 0;
};

struct TrainResult {
    ModelParams<float> params;       // after the final epoch
    ModelParams<float> best_params;  // at the best seen-accuracy epoch
    int best_epoch = -1;
    double best_seen_acc = 0;
    long steps = 0;
    std::vector<EpochSummary> epochs;
    std::string step_csv;   // one LossReport row per optimization step
    std::string epoch_csv;  // per-epoch means plus gate magnitude and seen ACC
};

/// Deterministic training given (config, seed): fixed shuffle schedule and a
/// single-threaded tape. Per-epoch seen accuracy is measured on the seen
/// portion of `data.test` (read-only, may run on several threads).
/// Raises NumericError naming the step and term values if a loss goes
/// non-finite.
TrainResult train(const EncoderConfig& model_config, const ProtocolData& data,
                  const TrainConfig& cfg);

/// Fills dataset-derived fields (classes, vocabulary size, image geometry,
/// prompt length) into a model configuration.
EncoderConfig resolve_model_config(EncoderConfig base, const DatasetSplit& split,
                                   int vocab_size, int num_classes);

/// Deep copy (tensors are handles; plain copies would alias).
template <typename T>
ModelParams<T> clone_params(const ModelParams<T>& params);

} // namespace zsdfa
