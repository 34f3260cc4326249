#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "zsdfa/model.hpp"
#include "zsdfa/preprocess.hpp"

namespace zsdfa {

inline constexpr int kUnseenDecision = -1;

std::vector<double> softmax_values(std::span<const double> logits);

/// Max-softmax open-set rule: softmax the logits; below-threshold maxima map
/// to kUnseenDecision, otherwise the argmax index (ties to the smallest).
int thresholded_attribution(std::span<const double> logits, double theta);

struct GeneratorRow {
    std::string family;
    bool seen = false;
    int count = 0;
    double argmax_acc = 0;             // argmax accuracy (seen families)
    std::vector<double> unseen_rate;   // per threshold: fraction decided unseen
};

struct EvalReport {
    std::vector<double> thresholds;
    std::vector<std::string> class_names;
    double seen_acc = 0;              // threshold-free argmax accuracy on seen samples
    std::vector<double> unseen_acc;   // per threshold: unseen samples flagged unseen
    std::vector<GeneratorRow> per_generator;
    /// One (classes+1) x (classes+1) matrix per threshold; the last row
    /// groups unseen-family samples, the last column is the unseen decision.
    std::vector<std::vector<std::vector<long>>> confusion;

    nlohmann::json to_json() const;
    std::string to_csv() const;
    std::string confusion_csv(std::size_t threshold_index) const;
};

/// Pure aggregation over precomputed logits (one vector per sample).
EvalReport aggregate_decisions(const std::vector<std::vector<double>>& logits,
                               const std::vector<const FaceSample*>& samples,
                               const std::vector<std::string>& class_names,
                               const std::vector<double>& thresholds);

/// Runs the inference path over the test set (read-only, parallel over
/// samples) and aggregates decisions. Deterministic for fixed inputs.
EvalReport evaluate(const ModelParams<float>& params,
                    const std::vector<const FaceSample*>& samples,
                    const std::vector<std::string>& class_names,
                    const std::vector<double>& thresholds, const ModuleSet& modules,
                    int threads = 0);

EvalReport evaluate(const ModelParams<float>& params, const std::vector<FaceSample>& samples,
                    const std::vector<std::string>& class_names,
                    const std::vector<double>& thresholds, const ModuleSet& modules,
                    int threads = 0);

double seen_argmax_accuracy(const ModelParams<float>& params,
                            const std::vector<const FaceSample*>& seen_samples,
                            const ModuleSet& modules, int threads = 0);

struct RobustnessCell {
    CorruptionKind kind = CorruptionKind::Saturation;
    int severity = 0;
    double seen_acc = 0;
    std::vector<double> unseen_acc;
};

/// Corrupts every test image at each (kind, severity), reruns the full
/// preprocessing + inference path, and records accuracies. The severity-0
/// column reproduces the uncorrupted evaluation exactly.
std::vector<RobustnessCell> robustness_sweep(const ModelParams<float>& params,
                                             const std::vector<FaceSample>& samples,
                                             const std::vector<std::string>& class_names,
                                             const std::vector<double>& thresholds,
                                             const std::vector<CorruptionKind>& kinds,
                                             const ModuleSet& modules, int threads = 0,
                                             const CorruptionTables& tables = {});

std::string robustness_csv(const std::vector<RobustnessCell>& cells,
                           const std::vector<double>& thresholds);

struct EmbeddingPoint {
    double x = 0, y = 0;
    std::string family;
};

/// Projects test-set visual embeddings onto their top-2 principal components.
std::vector<EmbeddingPoint> pca_embedding_export(const ModelParams<float>& params,
                                                 const std::vector<FaceSample>& samples,
                                                 const ModuleSet& modules, int threads = 0);

std::string embedding_csv(const std::vector<EmbeddingPoint>& points);

} // namespace zsdfa
