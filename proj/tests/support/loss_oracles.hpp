#pragma once

// Independent scalar-arithmetic oracles for the batch losses. These never
// touch the tensor engine, so they can certify the vectorized implementations.

#include <cmath>
#include <vector>

#include "zsdfa/rng.hpp"

namespace zsdfa::testing {

struct DfaccOracleResult {
    double total = 0, intra = 0, inter = 0;
};

/// Literal double-loop evaluation: per-sample center distances, pairwise
/// margin-gated cross-class terms, total = intra + lambda * inter.
inline DfaccOracleResult naive_dfacc(const std::vector<std::vector<double>>& vecs,
                                     const std::vector<int>& labels,
                                     const std::vector<std::vector<double>>& centers,
                                     double lambda, double margin) {
    const int b = static_cast<int>(vecs.size());
    const std::size_t dim = vecs.front().size();
    DfaccOracleResult r;
    for (int u = 0; u < b; ++u) {
        double d2 = 0;
        for (std::size_t j = 0; j < dim; ++j) {
            const double d = vecs[u][j] - centers[labels[u]][j];
            d2 += d * d;
        }
        r.intra += std::sqrt(d2);
    }
    r.intra /= b;
    for (int u = 0; u < b; ++u) {
        for (int v = u + 1; v < b; ++v) {
            if (labels[u] == labels[v]) continue;
            double cd2 = 0, dd2 = 0;
            for (std::size_t j = 0; j < dim; ++j) {
                const double dc = centers[labels[u]][j] - centers[labels[v]][j];
                const double dv = vecs[u][j] - vecs[v][j];
                cd2 += dc * dc;
                dd2 += dv * dv;
            }
            const double dist = std::sqrt(dd2);
            r.inter += std::sqrt(cd2) < margin ? std::max(dist - margin, 0.0) : -dist;
        }
    }
    r.inter *= 2.0 / (double(b) * (b - 1));
    r.total = r.intra + lambda * r.inter;
    return r;
}

/// The gated contrastive loss evaluated through its algebraic decomposition:
/// symmetric ungated cross-entropy plus the diagonal gate penalty.
inline double dcpc_decomposed(const std::vector<std::vector<double>>& visual,
                              const std::vector<std::vector<double>>& parsing,
                              const std::vector<std::vector<double>>& gate, double tau) {
    const int b = static_cast<int>(visual.size());
    const std::size_t dim = visual.front().size();
    auto directional_ce = [&](const std::vector<std::vector<double>>& q,
                              const std::vector<std::vector<double>>& k) {
        double ce = 0;
        for (int u = 0; u < b; ++u) {
            double mx = -1e300;
            std::vector<double> sims(b);
            for (int v = 0; v < b; ++v) {
                double dot = 0;
                for (std::size_t j = 0; j < dim; ++j) dot += q[u][j] * k[v][j];
                sims[v] = dot / tau;
                mx = std::max(mx, sims[v]);
            }
            double denom = 0;
            for (int v = 0; v < b; ++v) denom += std::exp(sims[v] - mx);
            ce += -(sims[u] - mx - std::log(denom));
        }
        return ce / b;
    };
    double gate_penalty = 0;
    for (int u = 0; u < b; ++u) {
        const double sig = 1.0 / (1.0 + std::exp(-gate[u][u]));
        gate_penalty += -std::log(sig);
    }
    gate_penalty /= b;
    return 0.5 * (directional_ce(visual, parsing) + directional_ce(parsing, visual)) +
           gate_penalty;
}

inline std::vector<std::vector<double>> random_matrix(Rng& rng, int rows, int cols,
                                                      double lo = -1.5, double hi = 1.5) {
    std::vector<std::vector<double>> m(rows, std::vector<double>(cols));
    for (auto& row : m)
        for (auto& v : row) v = rng.uniform(lo, hi);
    return m;
}

inline std::vector<double> flatten(const std::vector<std::vector<double>>& m) {
    std::vector<double> out;
    for (const auto& row : m) out.insert(out.end(), row.begin(), row.end());
    return out;
}

} // namespace zsdfa::testing
