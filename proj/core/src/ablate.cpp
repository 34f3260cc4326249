#include "zsdfa/ablate.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

#include "zsdfa/parallel.hpp"

namespace zsdfa {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

AblationRun make_module_run(bool ae, bool ne, bool ee, bool pe, bool le,
                            const LossConfig& base) {
    AblationRun run;
    run.modules.appearance = ae;
    run.modules.noise = ne;
    run.modules.edge = ee;
    run.modules.parsing = pe;
    run.modules.language = le;
    run.losses = base;
    run.losses.use_dcpc = base.use_dcpc && pe;
    run.losses.use_cmc = base.use_cmc && le;
    run.losses.use_kl = base.use_kl && le;
    run.name = run.modules.describe();
    return run;
}

} // namespace

std::vector<AblationRun> module_grid(const LossConfig& base) {
    return {
        make_module_run(true, false, false, false, false, base),
        make_module_run(false, false, true, false, false, base),
        make_module_run(false, true, false, false, false, base),
        make_module_run(true, true, false, false, false, base),
        make_module_run(true, true, false, false, true, base),
        make_module_run(true, true, false, true, true, base),
        make_module_run(true, false, true, false, false, base),
        make_module_run(true, true, true, false, false, base),
        make_module_run(true, true, true, true, false, base),
        make_module_run(true, true, true, false, true, base),
        make_module_run(true, true, true, true, true, base),
    };
}

std::vector<AblationRun> loss_grid(const LossConfig& base) {
    std::vector<AblationRun> runs;
    const char* names[] = {"dfa", "dfa+dfacc", "dfa+dfacc+cmc", "dfa+dfacc+cmc+dcpc",
                           "dfa+dfacc+cmc+dcpc+kl"};
    for (int level = 0; level < 5; ++level) {
        AblationRun run;
        run.name = names[level];
        run.losses = base;
        run.losses.use_dfa = true;
        run.losses.use_dfacc = level >= 1;
        run.losses.use_cmc = level >= 2;
        run.losses.use_dcpc = level >= 3;
        run.losses.use_kl = level >= 4;
        runs.push_back(std::move(run));
    }
    return runs;
}

std::vector<AblationRun> lambda_grid(const LossConfig& base, std::span<const double> lambdas) {
    std::vector<AblationRun> runs;
    for (double l : lambdas) {
        AblationRun run;
        run.name = "lambda=" + fmt(l);
        run.losses = base;
        run.losses.lambda = l;
        runs.push_back(std::move(run));
    }
    return runs;
}

std::vector<AblationRun> margin_grid(const LossConfig& base, std::span<const double> margins) {
    std::vector<AblationRun> runs;
    for (double m : margins) {
        AblationRun run;
        run.name = "m=" + fmt(m);
        run.losses = base;
        run.losses.margin = m;
        runs.push_back(std::move(run));
    }
    return runs;
}

std::string AblationResults::csv() const {
    std::string csv = "name,seed,is_median,seen_acc";
    char buf[32];
    for (double t : thresholds) {
        std::snprintf(buf, sizeof buf, ",unseen_acc_%.2f", t);
        csv += buf;
    }
    csv += "\n";
    for (const auto& r : rows) {
        csv += r.name + "," + std::to_string(r.seed) + "," + (r.is_median ? "1" : "0") + "," +
               fmt(r.seen_acc);
        for (double u : r.unseen_acc) csv += "," + fmt(u);
        csv += "\n";
    }
    return csv;
}

std::string AblationResults::markdown() const {
    char buf[48];
    std::string md = "| configuration | seen ACC |";
    for (double t : thresholds) {
        std::snprintf(buf, sizeof buf, " unseen ACC @%.2f |", t);
        md += buf;
    }
    md += "\n|---|---|";
    for (std::size_t i = 0; i < thresholds.size(); ++i) md += "---|";
    md += "\n";
    for (const auto& r : rows) {
        if (!r.is_median) continue;
        md += "| " + r.name + " | " + fmt(r.seen_acc) + " |";
        for (double u : r.unseen_acc) md += " " + fmt(u) + " |";
        md += "\n";
    }
    return md;
}

const AblationRowResult& AblationResults::median_of(const std::string& name) const {
    for (const auto& r : rows)
        if (r.is_median && r.name == name) return r;
    throw ConfigError("no median row for configuration '" + name + "'");
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

AblationResults run_ablation(const EncoderConfig& model_config, const ProtocolData& data,
                             const TrainConfig& base, const std::vector<AblationRun>& runs,
                             std::span<const std::uint64_t> seeds,
                             const std::vector<double>& thresholds, int threads) {
    if (runs.empty()) throw ConfigError("ablation grid is empty");
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
    for (const auto& run : runs) {
        TrainConfig probe = base;
        probe.modules = run.modules;
        probe.losses = run.losses;
        probe.validate();  // surfaces conflicting flags before any training
    }

    struct Job {
        std::size_t run_index;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (std::size_t r = 0; r < runs.size(); ++r)
        for (std::uint64_t s : seeds) jobs.push_back({r, s});

    std::vector<AblationRowResult> results(jobs.size());
    parallel_for(jobs.size(), effective_threads(threads), [&](std::size_t j) {
        const auto& run = runs[jobs[j].run_index];
        TrainConfig cfg = base;
        cfg.modules = run.modules;
        cfg.losses = run.losses;
        cfg.seed = jobs[j].seed;
        cfg.threads = 1;
        TrainResult trained = train(model_config, data, cfg);
        EvalReport report =
            evaluate(trained.params, data.test, data.class_names, thresholds, run.modules, 1);
        results[j] = {run.name, jobs[j].seed, false, report.seen_acc, report.unseen_acc};
    });

    AblationResults out;
    out.thresholds = thresholds;
    out.rows = std::move(results);
    for (const auto& run : runs) {
        std::vector<double> seen;
        std::vector<std::vector<double>> unseen(thresholds.size());
        for (const auto& r : out.rows) {
            if (r.is_median || r.name != run.name) continue;
            seen.push_back(r.seen_acc);
            for (std::size_t t = 0; t < thresholds.size(); ++t)
                unseen[t].push_back(r.unseen_acc[t]);
        }
        AblationRowResult med;
        med.name = run.name;
        med.is_median = true;
        med.seen_acc = median(seen);
        for (auto& u : unseen) med.unseen_acc.push_back(median(u));
        out.rows.push_back(std::move(med));
    }
    return out;
}

} // namespace zsdfa
