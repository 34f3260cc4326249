#pragma once

#include <span>
#include <string>
#include <vector>

#include "zsdfa/ops.hpp"

// The training objective: attribution cross-entropy (dfa), the contrastive
// center loss with margin-gated cross-class terms (dfacc), the gated
// vision-parsing contrastive loss (dcpc), the symmetric vision-language
// InfoNCE (cmc), and the language-alignment KL term. The total is their
// unweighted sum.

namespace zsdfa {

struct LossConfig {
    double lambda = 0.5;        // balance of the cross-class term inside dfacc
    double margin = 0.7;        // center-distance gate / distance margin
    double tau_cmc_init = 0.07;
    double kl_temperature = 1.0;
    bool use_dfa = true;
    bool use_dfacc = true;
    bool use_cmc = true;
    bool use_dcpc = true;
    bool use_kl = true;

    void validate() const;
};

/// Per-term values for one batch. total is the plain sum of the five terms.
struct LossReport {
    double dfa = 0, intra = 0, inter = 0, dfacc = 0, cmc = 0, dcpc = 0, kl = 0, total = 0;

    static std::string csv_header();  // step,dfa,intra,inter,dfacc,cmc,dcpc,kl,total
    std::string csv_row(long step) const;
    bool finite() const;
    std::string describe() const;
};

/// Mean cross-entropy of softmax rows against integer labels; log is floored
/// at 1e-12. Rows must already be normalized (|sum - 1| <= 1e-4).
template <typename T>
Tensor<T> dfa_loss(const Tensor<T>& probs, std::span<const int> labels);

template <typename T>
struct DfaccParts {
    Tensor<T> total, intra, inter;
};

/// vecs are the pre-softmax logits [b x x]; centers is the trainable [x x x]
/// center table. Same-class samples are pulled to their centers; cross-class
/// pairs are pulled within the margin when their centers sit closer than the
/// margin (measured on detached centers) and pushed apart otherwise.
/// total = intra + lambda * inter.
template <typename T>
DfaccParts<T> dfacc_loss(const Tensor<T>& vecs, std::span<const int> labels,
                         const Tensor<T>& centers, T lambda, T margin);

/// Gated cross-view contrastive loss over [b x d] visual/parsing rows. The
/// row-softmax over dot-product similarities (scaled by 1/tau) is multiplied
/// elementwise by sigmoid(gate) without renormalization; the loss is the mean
/// -log of the diagonal, averaged over both directions. gate is the top-left
/// b x b block of the learnable gate matrix; tau = exp(log_tau) > 0.
template <typename T>
Tensor<T> dcpc_loss(const Tensor<T>& visual, const Tensor<T>& parsing,
                    const Tensor<T>& gate, const Tensor<T>& log_tau);

/// Symmetric InfoNCE on L2-normalized rows with temperature exp(log_tau_cmc):
/// cross-entropy of the cosine-similarity softmax against the diagonal,
/// averaged over both directions. Zero-norm rows are rejected.
template <typename T>
Tensor<T> cmc_loss(const Tensor<T>& visual, const Tensor<T>& language,
                   const Tensor<T>& log_tau_cmc);

/// Mean KL(softmax(target/temp) || softmax(predicted/temp)); the target side
/// is detached so the gradient drives only the prediction.
template <typename T>
Tensor<T> kl_align_loss(const Tensor<T>& predicted, const Tensor<T>& target,
                        T temperature);

template <typename T>
struct LossBundle {
    Tensor<T> dfa, intra, inter, dfacc, cmc, dcpc, kl, total;
    LossReport report() const;
};

/// Sums the enabled terms (disabled terms contribute exactly 0).
template <typename T>
LossBundle<T> total_loss(const Tensor<T>& dfa, const DfaccParts<T>& dfacc,
                         const Tensor<T>& cmc, const Tensor<T>& dcpc, const Tensor<T>& kl);

} // namespace zsdfa
