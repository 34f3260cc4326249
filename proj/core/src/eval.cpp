#include "zsdfa/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "zsdfa/parallel.hpp"
#include "zsdfa/rng.hpp"

namespace zsdfa {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

} // namespace

std::vector<double> softmax_values(std::span<const double> logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    std::vector<double> e(logits.size());
    double denom = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        e[i] = std::exp(logits[i] - mx);
        denom += e[i];
    }
    for (auto& v : e) v /= denom;
    return e;
}

int thresholded_attribution(std::span<const double> logits, double theta) {
    if (logits.empty()) throw ContractError("thresholded_attribution: empty logits");
    if (!(theta > 0.0 && theta < 1.0))
        throw ContractError("thresholded_attribution: threshold must lie in (0, 1)");
    const auto p = softmax_values(logits);
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.size(); ++i)
        if (p[i] > p[best]) best = i;  // ties keep the smallest index
    if (p[best] < theta) return kUnseenDecision;
    return static_cast<int>(best);
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

EvalReport aggregate_decisions(const std::vector<std::vector<double>>& logits,
                               const std::vector<const FaceSample*>& samples,
                               const std::vector<std::string>& class_names,
                               const std::vector<double>& thresholds) {
    if (samples.empty()) throw ConfigError("evaluate: empty test set");
    if (logits.size() != samples.size())
        throw ContractError("aggregate_decisions: logits/sample count mismatch");
    const int x = static_cast<int>(class_names.size());

    EvalReport report;
    report.thresholds = thresholds;
    report.class_names = class_names;
    report.confusion.assign(thresholds.size(),
                            std::vector<std::vector<long>>(
                                x + 1, std::vector<long>(x + 1, 0)));

    struct FamilyAcc {
        bool seen = false;
        long count = 0;
        long argmax_hits = 0;
        std::vector<long> unseen_flags;
    };
    std::map<std::string, FamilyAcc> families;

    long seen_total = 0, seen_hits = 0;
    std::vector<long> unseen_total(thresholds.size(), 0), unseen_hits(thresholds.size(), 0);

    for (std::size_t i = 0; i < samples.size(); ++i) {
        const FaceSample& s = *samples[i];
        auto& fam = families[s.family];
        if (fam.unseen_flags.empty()) fam.unseen_flags.assign(thresholds.size(), 0);
        fam.seen = s.class_index >= 0;
        fam.count++;

        const auto& lg = logits[i];
        if (static_cast<int>(lg.size()) != x)
            throw ContractError("aggregate_decisions: logit width mismatch");
        std::size_t argmax = 0;
        for (std::size_t j = 1; j < lg.size(); ++j)
            if (lg[j] > lg[argmax]) argmax = j;

        if (s.class_index >= 0) {
            seen_total++;
            if (static_cast<int>(argmax) == s.class_index) {
                seen_hits++;
                fam.argmax_hits++;
            }
        }
        const int true_row = s.class_index >= 0 ? s.class_index : x;
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            const int decision = thresholded_attribution(lg, thresholds[t]);
            const int col = decision == kUnseenDecision ? x : decision;
            report.confusion[t][true_row][col]++;
            if (decision == kUnseenDecision) fam.unseen_flags[t]++;
            if (s.class_index < 0) {
                unseen_total[t]++;
                if (decision == kUnseenDecision) unseen_hits[t]++;
            }
        }
    }

    report.seen_acc = seen_total ? double(seen_hits) / seen_total : 0.0;
    report.unseen_acc.resize(thresholds.size(), 0.0);
    for (std::size_t t = 0; t < thresholds.size(); ++t)
        report.unseen_acc[t] = unseen_total[t] ? double(unseen_hits[t]) / unseen_total[t] : 0.0;

    for (const auto& [name, acc] : families) {
        GeneratorRow row;
        row.family = name;
        row.seen = acc.seen;
        row.count = static_cast<int>(acc.count);
        row.argmax_acc = acc.seen && acc.count ? double(acc.argmax_hits) / acc.count : 0.0;
        for (std::size_t t = 0; t < thresholds.size(); ++t)
            row.unseen_rate.push_back(acc.count ? double(acc.unseen_flags[t]) / acc.count : 0.0);
        report.per_generator.push_back(std::move(row));
    }
    return report;
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json gens = nlohmann::json::array();
    for (const auto& g : per_generator)
        gens.push_back({{"family", g.family},
                        {"seen", g.seen},
                        {"count", g.count},
                        {"argmax_acc", g.argmax_acc},
                        {"unseen_rate", g.unseen_rate}});
    nlohmann::json conf = nlohmann::json::array();
    for (std::size_t t = 0; t < thresholds.size(); ++t)
        conf.push_back({{"threshold", thresholds[t]}, {"matrix", confusion[t]}});
    nlohmann::json unseen = nlohmann::json::object();
    for (std::size_t t = 0; t < thresholds.size(); ++t)
        unseen[fmt(thresholds[t])] = unseen_acc[t];
    return {{"thresholds", thresholds},
            {"class_names", class_names},
            {"seen_acc", seen_acc},
            {"unseen_acc", unseen},
            {"per_generator", gens},
            {"confusion", conf}};
}

std::string EvalReport::to_csv() const {
    std::string csv = "family,seen,count,argmax_acc";
    for (double t : thresholds) csv += ",unseen_rate_" + fmt(t);
    csv += "\n";
    for (const auto& g : per_generator) {
        csv += g.family + "," + (g.seen ? "1" : "0") + "," + std::to_string(g.count) + "," +
               fmt(g.argmax_acc);
        for (double r : g.unseen_rate) csv += "," + fmt(r);
        csv += "\n";
    }
    csv += "OVERALL_SEEN,,," + fmt(seen_acc);
    for (double u : unseen_acc) csv += "," + fmt(u);
    csv += "\n";
    return csv;
}

std::string EvalReport::confusion_csv(std::size_t t) const {
    std::string csv = "true\\decision";
    for (const auto& c : class_names) csv += "," + c;
    csv += ",UNSEEN\n";
    const int x = static_cast<int>(class_names.size());
    for (int r = 0; r <= x; ++r) {
        csv += r < x ? class_names[r] : "UNSEEN_GROUP";
        for (int c = 0; c <= x; ++c) csv += "," + std::to_string(confusion[t][r][c]);
        csv += "\n";
    }
    return csv;
}

// ---------------------------------------------------------------------------
// Model-driven evaluation
// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<double>> batch_inference(const ModelParams<float>& params,
                                                 const std::vector<const FaceSample*>& samples,
                                                 const ModuleSet& modules, int threads) {
    std::vector<std::vector<double>> logits(samples.size());
    parallel_for(samples.size(), effective_threads(threads), [&](std::size_t i) {
        Tensor<float> out = forward_infer(params, samples[i]->image, modules);
        logits[i].assign(out.data().begin(), out.data().end());
    });
    return logits;
}

} // namespace

EvalReport evaluate(const ModelParams<float>& params,
                    const std::vector<const FaceSample*>& samples,
                    const std::vector<std::string>& class_names,
                    const std::vector<double>& thresholds, const ModuleSet& modules,
                    int threads) {
    if (samples.empty()) throw ConfigError("evaluate: empty test set");
    return aggregate_decisions(batch_inference(params, samples, modules, threads), samples,
                               class_names, thresholds);
}

EvalReport evaluate(const ModelParams<float>& params, const std::vector<FaceSample>& samples,
                    const std::vector<std::string>& class_names,
                    const std::vector<double>& thresholds, const ModuleSet& modules,
                    int threads) {
    std::vector<const FaceSample*> ptrs;
    ptrs.reserve(samples.size());
    for (const auto& s : samples) ptrs.push_back(&s);
    return evaluate(params, ptrs, class_names, thresholds, modules, threads);
}

double seen_argmax_accuracy(const ModelParams<float>& params,
                            const std::vector<const FaceSample*>& seen_samples,
                            const ModuleSet& modules, int threads) {
    if (seen_samples.empty()) throw ConfigError("seen_argmax_accuracy: no samples");
    const auto logits = batch_inference(params, seen_samples, modules, threads);
    long hits = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        std::size_t argmax = 0;
        for (std::size_t j = 1; j < logits[i].size(); ++j)
            if (logits[i][j] > logits[i][argmax]) argmax = j;
        if (static_cast<int>(argmax) == seen_samples[i]->class_index) hits++;
    }
    return double(hits) / double(logits.size());
}

// ---------------------------------------------------------------------------
// Robustness sweep
// ---------------------------------------------------------------------------

std::vector<RobustnessCell> robustness_sweep(const ModelParams<float>& params,
                                             const std::vector<FaceSample>& samples,
                                             const std::vector<std::string>& class_names,
                                             const std::vector<double>& thresholds,
                                             const std::vector<CorruptionKind>& kinds,
                                             const ModuleSet& modules, int threads,
                                             const CorruptionTables& tables) {
    if (samples.empty()) throw ConfigError("robustness_sweep: empty test set");
    std::vector<RobustnessCell> cells;
    std::vector<const FaceSample*> ptrs(samples.size());
    std::vector<FaceSample> corrupted(samples.size());
    for (std::size_t k = 0; k < kinds.size(); ++k) {
        for (int severity = 0; severity <= 5; ++severity) {
            const CorruptionSpec spec{kinds[k], severity};
            parallel_for(samples.size(), effective_threads(threads), [&](std::size_t i) {
                corrupted[i] = samples[i];
                corrupted[i].image =
                    corrupt(samples[i].image, spec, hash_seed(samples[i].seed, k), tables);
                ptrs[i] = &corrupted[i];
            });
            const EvalReport r = evaluate(params, ptrs, class_names, thresholds, modules, threads);
            cells.push_back({kinds[k], severity, r.seen_acc, r.unseen_acc});
        }
    }
    return cells;
}

std::string robustness_csv(const std::vector<RobustnessCell>& cells,
                           const std::vector<double>& thresholds) {
    std::string csv = "kind,severity,seen_acc";
    for (double t : thresholds) csv += ",unseen_acc_" + fmt(t);
    csv += "\n";
    for (const auto& c : cells) {
        csv += std::string(to_string(c.kind)) + "," + std::to_string(c.severity) + "," +
               fmt(c.seen_acc);
        for (double u : c.unseen_acc) csv += "," + fmt(u);
        csv += "\n";
    }
    return csv;
}

// ---------------------------------------------------------------------------
// PCA embedding export
// ---------------------------------------------------------------------------

std::vector<EmbeddingPoint> pca_embedding_export(const ModelParams<float>& params,
                                                 const std::vector<FaceSample>& samples,
                                                 const ModuleSet& modules, int threads) {
    if (samples.empty()) throw ConfigError("pca_embedding_export: empty sample set");
    const int d = params.config.d;
    std::vector<std::vector<double>> rows(samples.size());
    parallel_for(samples.size(), effective_threads(threads), [&](std::size_t i) {
        Tensor<float> v = visual_embedding(params, samples[i].image, modules);
        rows[i].assign(v.data().begin(), v.data().end());
    });

    std::vector<double> mean(d, 0);
    for (const auto& r : rows)
        for (int j = 0; j < d; ++j) mean[j] += r[j];
    for (auto& m : mean) m /= double(rows.size());
    for (auto& r : rows)
        for (int j = 0; j < d; ++j) r[j] -= mean[j];

    std::vector<double> cov(static_cast<std::size_t>(d) * d, 0);
    for (const auto& r : rows)
        for (int a = 0; a < d; ++a)
            for (int b = 0; b < d; ++b) cov[static_cast<std::size_t>(a) * d + b] += r[a] * r[b];
    for (auto& c : cov) c /= double(rows.size());

    // Top-2 eigenvectors by power iteration with deflation; the fixed start
    // vector keeps the export deterministic.
    auto power_iter = [&cov, d](const std::vector<double>& deflate, double lambda1) {
        std::vector<double> v(d);
        for (int j = 0; j < d; ++j) v[j] = 1.0 / std::sqrt(double(d));
        std::vector<double> next(d);
        for (int it = 0; it < 300; ++it) {
            for (int a = 0; a < d; ++a) {
                double acc = 0;
                for (int b = 0; b < d; ++b) acc += cov[static_cast<std::size_t>(a) * d + b] * v[b];
                next[a] = acc;
            }
            if (!deflate.empty()) {
                double proj = 0;
                for (int j = 0; j < d; ++j) proj += deflate[j] * v[j];
                for (int j = 0; j < d; ++j) next[j] -= lambda1 * proj * deflate[j];
            }
            double norm = 0;
            for (double x : next) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-300) break;
            for (int j = 0; j < d; ++j) v[j] = next[j] / norm;
        }
        return v;
    };

    const std::vector<double> e1 = power_iter({}, 0.0);
    double lambda1 = 0;
    for (int a = 0; a < d; ++a) {
        double acc = 0;
        for (int b = 0; b < d; ++b) acc += cov[static_cast<std::size_t>(a) * d + b] * e1[b];
        lambda1 += e1[a] * acc;
    }
    const std::vector<double> e2 = power_iter(e1, lambda1);

    std::vector<EmbeddingPoint> points(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        double px = 0, py = 0;
        for (int j = 0; j < d; ++j) {
            px += rows[i][j] * e1[j];
            py += rows[i][j] * e2[j];
        }
        points[i] = {px, py, samples[i].family};
    }
    return points;
}

std::string embedding_csv(const std::vector<EmbeddingPoint>& points) {
    std::string csv = "x,y,family\n";
    for (const auto& p : points) csv += fmt(p.x) + "," + fmt(p.y) + "," + p.family + "\n";
    return csv;
}

} // namespace zsdfa
