#include "zsdfa/losses.hpp"

#include <cmath>
#include <cstdio>

namespace zsdfa {

void LossConfig::validate() const {
    if (lambda < 0) throw ConfigError("loss lambda must be >= 0");
    if (margin <= 0) throw ConfigError("loss margin must be > 0");
    if (tau_cmc_init <= 0) throw ConfigError("tau_cmc_init must be > 0");
    if (kl_temperature <= 0) throw ConfigError("kl_temperature must be > 0");
}

std::string LossReport::csv_header() {
    return "step,dfa,intra,inter,dfacc,cmc,dcpc,kl,total";
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

} // namespace

std::string LossReport::csv_row(long step) const {
    return std::to_string(step) + "," + fmt(dfa) + "," + fmt(intra) + "," + fmt(inter) +
           "," + fmt(dfacc) + "," + fmt(cmc) + "," + fmt(dcpc) + "," + fmt(kl) + "," +
           fmt(total);
}

bool LossReport::finite() const {
    for (double v : {dfa, intra, inter, dfacc, cmc, dcpc, kl, total})
        if (!std::isfinite(v)) return false;
    return true;
}

std::string LossReport::describe() const {
    return "dfa=" + fmt(dfa) + " dfacc=" + fmt(dfacc) + " cmc=" + fmt(cmc) +
           " dcpc=" + fmt(dcpc) + " kl=" + fmt(kl) + " total=" + fmt(total);
}

// ---------------------------------------------------------------------------
// dfa
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dfa_loss(const Tensor<T>& probs, std::span<const int> labels) {
    detail::require_rank2(probs, "dfa_loss");
    const int b = probs.dim(0), x = probs.dim(1);
    if (static_cast<int>(labels.size()) != b)
        throw ContractError("dfa_loss: got " + std::to_string(labels.size()) +
                            " labels for " + std::to_string(b) + " rows");
    const auto pd = probs.data();
    for (int i = 0; i < b; ++i) {
        T s = T(0);
        for (int j = 0; j < x; ++j) s += pd[static_cast<std::size_t>(i) * x + j];
        if (std::abs(double(s) - 1.0) > 1e-4)
            throw ContractError("dfa_loss: row " + std::to_string(i) +
                                " is not a probability vector (sum " + std::to_string(double(s)) + ")");
        if (labels[i] < 0 || labels[i] >= x)
            throw ContractError("dfa_loss: label " + std::to_string(labels[i]) +
                                " outside [0, " + std::to_string(x) + ")");
    }
    std::vector<Tensor<T>> terms;
    terms.reserve(b);
    for (int i = 0; i < b; ++i) {
        Tensor<T> row = row_slice(probs, i, 1);
        Tensor<T> p = col_slice(row, labels[i], 1);
        terms.push_back(neg(reshape(log(clamp_min(p, T(1e-12))), {1})));
    }
    return mean_scalars_sorted(terms);
}

// ---------------------------------------------------------------------------
// dfacc
// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> row_distance(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> diff = sub(a, b);
    return reshape(sqrt(rowsum(mul(diff, diff))), {1});
}

} // namespace

template <typename T>
DfaccParts<T> dfacc_loss(const Tensor<T>& vecs, std::span<const int> labels,
                         const Tensor<T>& centers, T lambda, T margin) {
    detail::require_rank2(vecs, "dfacc_loss");
    detail::require_rank2(centers, "dfacc_loss");
    const int b = vecs.dim(0), x = vecs.dim(1);
    if (b < 2) throw ContractError("dfacc_loss: needs a batch of at least 2");
    if (centers.dim(1) != x)
        throw ShapeError("dfacc_loss: centers " + shape_str(centers.shape()) +
                         " do not match vectors " + shape_str(vecs.shape()));
    if (static_cast<int>(labels.size()) != b)
        throw ContractError("dfacc_loss: label count mismatch");
    for (int i = 0; i < b; ++i)
        if (labels[i] < 0 || labels[i] >= centers.dim(0))
            throw ContractError("dfacc_loss: label " + std::to_string(labels[i]) +
                                " has no center");
    if (margin <= T(0)) throw ContractError("dfacc_loss: margin must be > 0");

    // Compactness: mean distance of each sample to its own class center.
    std::vector<Tensor<T>> intra_terms;
    intra_terms.reserve(b);
    for (int i = 0; i < b; ++i)
        intra_terms.push_back(
            row_distance(row_slice(vecs, i, 1), row_slice(centers, labels[i], 1)));
    Tensor<T> intra = mean_scalars_sorted(intra_terms);

    // Cross-class pairs: the branch condition uses detached center values so
    // the comparison itself carries no gradient.
    const auto cd = centers.data();
    auto center_distance = [&](int a, int c) {
        double acc = 0;
        for (int j = 0; j < x; ++j) {
            const double dv = double(cd[static_cast<std::size_t>(a) * x + j]) -
                              double(cd[static_cast<std::size_t>(c) * x + j]);
            acc += dv * dv;
        }
        return std::sqrt(acc);
    };

    std::vector<Tensor<T>> pair_terms;
    for (int u = 0; u < b; ++u) {
        for (int v = u + 1; v < b; ++v) {
            if (labels[u] == labels[v]) continue;
            Tensor<T> dist = row_distance(row_slice(vecs, u, 1), row_slice(vecs, v, 1));
            if (center_distance(labels[u], labels[v]) < double(margin))
                pair_terms.push_back(relu(add_scalar(dist, -margin)));
            else
                pair_terms.push_back(neg(dist));
        }
    }
    Tensor<T> inter = pair_terms.empty()
                          ? Tensor<T>::scalar(T(0))
                          : scale(sum_scalars_sorted(pair_terms),
                                  T(2) / (static_cast<T>(b) * static_cast<T>(b - 1)));
    Tensor<T> total = add(intra, scale(inter, lambda));
    return {total, intra, inter};
}

// ---------------------------------------------------------------------------
// dcpc
// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> gated_diagonal_ce(const Tensor<T>& queries, const Tensor<T>& keys,
                            const Tensor<T>& gate_block, const Tensor<T>& inv_tau) {
    const int b = queries.dim(0);
    Tensor<T> sims = mul_scalar_t(matmul_nt(queries, keys), inv_tau);
    Tensor<T> gated = mul(softmax_rows(sims), sigmoid(gate_block));
    Tensor<T> diag_terms = neg(log(diag(gated)));
    std::vector<Tensor<T>> terms;
    terms.reserve(b);
    for (int i = 0; i < b; ++i) terms.push_back(reshape(row_slice(diag_terms, i, 1), {1}));
    return mean_scalars_sorted(terms);
}

} // namespace

template <typename T>
Tensor<T> dcpc_loss(const Tensor<T>& visual, const Tensor<T>& parsing,
                    const Tensor<T>& gate, const Tensor<T>& log_tau) {
    detail::require_same_shape(visual, parsing, "dcpc_loss");
    detail::require_rank2(visual, "dcpc_loss");
    const int b = visual.dim(0);
    if (gate.rank() != 2 || gate.dim(0) < b || gate.dim(1) < b)
        throw ShapeError("dcpc_loss: gate " + shape_str(gate.shape()) +
                         " smaller than batch " + std::to_string(b));
    const T tau = std::exp(log_tau.value());
    if (!(tau > T(0)) || !std::isfinite(double(tau)))
        throw ContractError("dcpc_loss: temperature must be positive and finite");

    Tensor<T> gate_block = gate;
    if (gate.dim(0) != b || gate.dim(1) != b)
        gate_block = col_slice(row_slice(gate, 0, b), 0, b);
    Tensor<T> inv_tau = exp(neg(log_tau));
    Tensor<T> v2p = gated_diagonal_ce(visual, parsing, gate_block, inv_tau);
    Tensor<T> p2v = gated_diagonal_ce(parsing, visual, gate_block, inv_tau);
    return scale(add(v2p, p2v), T(0.5));
}

// ---------------------------------------------------------------------------
// cmc
// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, const char* who) {
    Tensor<T> sq = rowsum(mul(x, x));
    for (int i = 0; i < sq.dim(0); ++i)
        if (!(sq.at(static_cast<std::size_t>(i)) > T(0)))
            throw ContractError(std::string(who) + ": row " + std::to_string(i) +
                                " has zero norm");
    return scale_rows(x, reciprocal(sqrt(sq)));
}

template <typename T>
Tensor<T> diagonal_ce(const Tensor<T>& sims) {
    const int b = sims.dim(0);
    Tensor<T> probs = softmax_rows(sims);
    Tensor<T> diag_terms = neg(log(diag(probs)));
    std::vector<Tensor<T>> terms;
    terms.reserve(b);
    for (int i = 0; i < b; ++i) terms.push_back(reshape(row_slice(diag_terms, i, 1), {1}));
    return mean_scalars_sorted(terms);
}

} // namespace

template <typename T>
Tensor<T> cmc_loss(const Tensor<T>& visual, const Tensor<T>& language,
                   const Tensor<T>& log_tau_cmc) {
    detail::require_same_shape(visual, language, "cmc_loss");
    detail::require_rank2(visual, "cmc_loss");
    const T tau = std::exp(log_tau_cmc.value());
    if (!(tau > T(0)) || !std::isfinite(double(tau)))
        throw ContractError("cmc_loss: temperature must be positive and finite");
    Tensor<T> vn = l2_normalize_rows(visual, "cmc_loss(visual)");
    Tensor<T> ln = l2_normalize_rows(language, "cmc_loss(language)");
    Tensor<T> inv_tau = exp(neg(log_tau_cmc));
    Tensor<T> sims = mul_scalar_t(matmul_nt(vn, ln), inv_tau);
    Tensor<T> v2l = diagonal_ce(sims);
    Tensor<T> l2v = diagonal_ce(transpose(sims));
    return scale(add(v2l, l2v), T(0.5));
}

// ---------------------------------------------------------------------------
// kl
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> kl_align_loss(const Tensor<T>& predicted, const Tensor<T>& target,
                        T temperature) {
    detail::require_same_shape(predicted, target, "kl_align_loss");
    detail::require_rank2(predicted, "kl_align_loss");
    if (!(temperature > T(0))) throw ContractError("kl_align_loss: temperature must be > 0");
    const int b = predicted.dim(0);
    const T inv_temp = T(1) / temperature;
    Tensor<T> p = softmax_rows(scale(detach(target), inv_temp));
    Tensor<T> log_q = log(softmax_rows(scale(predicted, inv_temp)));
    Tensor<T> log_p = log(p);
    // KL(p || q) per row = sum p * (log p - log q); p is constant.
    Tensor<T> row_kl = rowsum(mul(p, sub(log_p, log_q)));
    std::vector<Tensor<T>> terms;
    terms.reserve(b);
    for (int i = 0; i < b; ++i) terms.push_back(reshape(row_slice(row_kl, i, 1), {1}));
    return mean_scalars_sorted(terms);
}

// ---------------------------------------------------------------------------
// total
// ---------------------------------------------------------------------------

template <typename T>
LossBundle<T> total_loss(const Tensor<T>& dfa, const DfaccParts<T>& dfacc,
                         const Tensor<T>& cmc, const Tensor<T>& dcpc, const Tensor<T>& kl) {
    LossBundle<T> out;
    out.dfa = dfa;
    out.intra = dfacc.intra;
    out.inter = dfacc.inter;
    out.dfacc = dfacc.total;
    out.cmc = cmc;
    out.dcpc = dcpc;
    out.kl = kl;
    out.total = add(add(add(add(dfa, dfacc.total), cmc), dcpc), kl);
    return out;
}

template <typename T>
LossReport to_report(const LossBundle<T>& b) {
    LossReport r;
    r.dfa = double(b.dfa.value());
    r.intra = double(b.intra.value());
    r.inter = double(b.inter.value());
    r.dfacc = double(b.dfacc.value());
    r.cmc = double(b.cmc.value());
    r.dcpc = double(b.dcpc.value());
    r.kl = double(b.kl.value());
    r.total = double(b.total.value());
    return r;
}

template <typename T>
LossReport LossBundle<T>::report() const {
    return to_report(*this);
}

template struct DfaccParts<float>;
template struct DfaccParts<double>;
template struct LossBundle<float>;
template struct LossBundle<double>;

template Tensor<float> dfa_loss(const Tensor<float>&, std::span<const int>);
template Tensor<double> dfa_loss(const Tensor<double>&, std::span<const int>);
template DfaccParts<float> dfacc_loss(const Tensor<float>&, std::span<const int>,
                                      const Tensor<float>&, float, float);
template DfaccParts<double> dfacc_loss(const Tensor<double>&, std::span<const int>,
                                       const Tensor<double>&, double, double);
template Tensor<float> dcpc_loss(const Tensor<float>&, const Tensor<float>&,
                                 const Tensor<float>&, const Tensor<float>&);
template Tensor<double> dcpc_loss(const Tensor<double>&, const Tensor<double>&,
                                  const Tensor<double>&, const Tensor<double>&);
template Tensor<float> cmc_loss(const Tensor<float>&, const Tensor<float>&,
                                const Tensor<float>&);
template Tensor<double> cmc_loss(const Tensor<double>&, const Tensor<double>&,
                                 const Tensor<double>&);
template Tensor<float> kl_align_loss(const Tensor<float>&, const Tensor<float>&, float);
template Tensor<double> kl_align_loss(const Tensor<double>&, const Tensor<double>&, double);
template LossBundle<float> total_loss(const Tensor<float>&, const DfaccParts<float>&,
                                      const Tensor<float>&, const Tensor<float>&,
                                      const Tensor<float>&);
template LossBundle<double> total_loss(const Tensor<double>&, const DfaccParts<double>&,
                                       const Tensor<double>&, const Tensor<double>&,
                                       const Tensor<double>&);

} // namespace zsdfa
