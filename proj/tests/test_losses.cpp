#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "support/loss_oracles.hpp"
#include "zsdfa/losses.hpp"
#include "zsdfa/rng.hpp"

using namespace zsdfa;

namespace {

Tensor<double> matrix(const std::vector<std::vector<double>>& rows) {
    std::vector<double> flat = testing::flatten(rows);
    return Tensor<double>::from(
        {static_cast<int>(rows.size()), static_cast<int>(rows.front().size())},
        std::move(flat));
}

Tensor<double> log_tau_of(double tau) {
    return Tensor<double>::scalar(std::log(tau));
}

} // namespace

// ---------------------------------------------------------------------------
// dfa
// ---------------------------------------------------------------------------

TEST_CASE("dfa fixtures") {
    auto perfect = matrix({{1.0, 0.0, 0.0}});
    CHECK(dfa_loss(perfect, std::vector<int>{0}).value() == doctest::Approx(0.0));

    auto even = matrix({{0.5, 0.5}});
    CHECK(dfa_loss(even, std::vector<int>{0}).value() ==
          doctest::Approx(0.693147).epsilon(1e-6));
    CHECK(dfa_loss(even, std::vector<int>{1}).value() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-9));

    auto bad = matrix({{0.9, 0.3}});
    CHECK_THROWS_AS(dfa_loss(bad, std::vector<int>{0}), ContractError);
}

TEST_CASE("dfa is nonnegative and permutation invariant") {
    Rng rng(100);
    for (int trial = 0; trial < 30; ++trial) {
        const int b = 2 + int(rng.below(6)), x = 2 + int(rng.below(5));
        auto logits = testing::random_matrix(rng, b, x, -4, 4);
        std::vector<int> labels(b);
        for (auto& l : labels) l = int(rng.below(x));

        auto probs = softmax_rows(matrix(logits));
        const double loss = dfa_loss(probs, labels).value();
        CHECK(loss >= 0.0);

        std::vector<int> perm(b);
        for (int i = 0; i < b; ++i) perm[i] = i;
        rng.shuffle(perm);
        std::vector<std::vector<double>> plogits(b);
        std::vector<int> plabels(b);
        for (int i = 0; i < b; ++i) {
            plogits[i] = logits[perm[i]];
            plabels[i] = labels[perm[i]];
        }
        const double ploss = dfa_loss(softmax_rows(matrix(plogits)), plabels).value();
        CHECK(loss == ploss);  // exact, by sorted-order batch reduction
    }
}

TEST_CASE("dfa gradient") {
    Rng rng(101);
    for (int pt = 0; pt < 5; ++pt) {
        auto logits = matrix(testing::random_matrix(rng, 4, 5, -2, 2));
        std::vector<int> labels = {1, 0, 4, 2};
        auto f = [&labels](const Tensor<double>& x) {
            return dfa_loss(softmax_rows(x), labels);
        };
        CHECK(finite_diff_check(f, logits) < 1e-6);
    }
}

// ---------------------------------------------------------------------------
// dfacc
// ---------------------------------------------------------------------------

TEST_CASE("dfacc hand fixtures") {
    SUBCASE("samples sitting at their centers, one class") {
        auto vecs = matrix({{0.2, 0.8}, {0.2, 0.8}});
        auto centers = matrix({{0.2, 0.8}, {5.0, 5.0}});
        auto parts = dfacc_loss(vecs, std::vector<int>{0, 0}, centers, 0.5, 0.7);
        CHECK(parts.intra.value() == doctest::Approx(0.0));
        CHECK(parts.inter.value() == doctest::Approx(0.0));
        CHECK(parts.total.value() == doctest::Approx(0.0));
    }
    SUBCASE("distant centers repel: inter = -sqrt(2)") {
        auto vecs = matrix({{1.0, 0.0}, {0.0, 1.0}});
        auto centers = matrix({{1.0, 0.0}, {0.0, 1.0}});
        auto parts = dfacc_loss(vecs, std::vector<int>{0, 1}, centers, 0.5, 0.7);
        CHECK(parts.intra.value() == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(parts.inter.value() == doctest::Approx(-std::sqrt(2.0)).epsilon(1e-6));
        CHECK(parts.inter.value() == doctest::Approx(-1.414214).epsilon(1e-6));
        CHECK(parts.total.value() == doctest::Approx(-0.707107).epsilon(1e-6));
    }
    SUBCASE("close centers attract with margin slack 0.3") {
        // center distance 0.5 < 0.7, sample distance 1.0.
        auto vecs = matrix({{0.0, 0.0}, {1.0, 0.0}});
        auto centers = matrix({{0.0, 0.0}, {0.5, 0.0}});
        auto parts = dfacc_loss(vecs, std::vector<int>{0, 1}, centers, 0.5, 0.7);
        CHECK(parts.inter.value() == doctest::Approx(0.3).epsilon(1e-6));
    }
    SUBCASE("contract checks") {
        auto vecs = matrix({{1.0, 0.0}});
        auto centers = matrix({{0.0, 0.0}, {1.0, 1.0}});
        CHECK_THROWS_AS(dfacc_loss(vecs, std::vector<int>{0}, centers, 0.5, 0.7),
                        ContractError);
    }
}

TEST_CASE("dfacc equals the naive double-loop oracle within 1e-10") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const int b = 2 + int(rng.below(15));  // <= 16
        const int x = 2 + int(rng.below(7));   // <= 8
        auto vecs = testing::random_matrix(rng, b, x, -2, 2);
        auto centers = testing::random_matrix(rng, x, x, -1, 1);
        std::vector<int> labels(b);
        for (auto& l : labels) l = int(rng.below(x));
        const double lambda = rng.uniform(0, 1);
        const double margin = rng.uniform(0.2, 1.5);

        const auto oracle = testing::naive_dfacc(vecs, labels, centers, lambda, margin);
        const auto parts =
            dfacc_loss(matrix(vecs), labels, matrix(centers), lambda, margin);
        CHECK(std::abs(parts.intra.value() - oracle.intra) < 1e-10);
        CHECK(std::abs(parts.inter.value() - oracle.inter) < 1e-10);
        CHECK(std::abs(parts.total.value() - oracle.total) < 1e-10);
    }
}

TEST_CASE("dfacc batch-permutation invariance is exact") {
    Rng rng(321);
    for (int trial = 0; trial < 20; ++trial) {
        const int b = 3 + int(rng.below(8)), x = 3;
        auto vecs = testing::random_matrix(rng, b, x);
        auto centers = testing::random_matrix(rng, x, x);
        std::vector<int> labels(b);
        for (auto& l : labels) l = int(rng.below(x));
        const double base =
            dfacc_loss(matrix(vecs), labels, matrix(centers), 0.5, 0.7).total.value();

        std::vector<int> perm(b);
        for (int i = 0; i < b; ++i) perm[i] = i;
        rng.shuffle(perm);
        std::vector<std::vector<double>> pv(b);
        std::vector<int> pl(b);
        for (int i = 0; i < b; ++i) {
            pv[i] = vecs[perm[i]];
            pl[i] = labels[perm[i]];
        }
        CHECK(dfacc_loss(matrix(pv), pl, matrix(centers), 0.5, 0.7).total.value() == base);
    }
}

TEST_CASE("dfacc gradients (branch boundaries resampled)") {
    Rng rng(707);
    const double margin = 0.7;
    int done = 0;
    while (done < 5) {
        const int b = 4, x = 4;
        auto vecs = testing::random_matrix(rng, b, x, -1.2, 1.2);
        auto centers = testing::random_matrix(rng, x, x, -0.8, 0.8);
        std::vector<int> labels = {0, 1, 2, 3};

        // Points near the hinge at |distance - margin| or near the (detached)
        // center-distance gate are measure-zero kinks; resample them.
        bool near_boundary = false;
        for (int u = 0; u < b && !near_boundary; ++u)
            for (int v = u + 1; v < b && !near_boundary; ++v) {
                double dd2 = 0, cd2 = 0;
                for (int j = 0; j < x; ++j) {
                    dd2 += (vecs[u][j] - vecs[v][j]) * (vecs[u][j] - vecs[v][j]);
                    cd2 += (centers[labels[u]][j] - centers[labels[v]][j]) *
                           (centers[labels[u]][j] - centers[labels[v]][j]);
                }
                if (std::abs(std::sqrt(dd2) - margin) < 1e-3 ||
                    std::abs(std::sqrt(cd2) - margin) < 1e-3)
                    near_boundary = true;
            }
        if (near_boundary) continue;
        done++;

        auto centers_t = matrix(centers);
        auto f_vecs = [&](const Tensor<double>& v) {
            return dfacc_loss(v, labels, centers_t, 0.5, margin).total;
        };
        CHECK(finite_diff_check(f_vecs, matrix(vecs)) < 1e-6);

        auto vecs_t = matrix(vecs);
        auto f_centers = [&](const Tensor<double>& c) {
            return dfacc_loss(vecs_t, labels, c, 0.5, margin).total;
        };
        CHECK(finite_diff_check(f_centers, centers_t) < 1e-6);
    }
}

// ---------------------------------------------------------------------------
// dcpc
// ---------------------------------------------------------------------------

TEST_CASE("dcpc single-pair fixture: ln 2 at zero gate") {
    auto visual = matrix({{0.3, -0.7, 1.1}});
    auto parsing = matrix({{-0.2, 0.5, 0.9}});
    auto gate = Tensor<double>::zeros({1, 1});
    const double loss = dcpc_loss(visual, parsing, gate, log_tau_of(1.0)).value();
    CHECK(loss == doctest::Approx(0.693147).epsilon(1e-6));
    CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("dcpc decomposition identity within 1e-10") {
    Rng rng(555);
    for (int trial = 0; trial < 100; ++trial) {
        const int b = 1 + int(rng.below(12)), d = 2 + int(rng.below(7));
        auto visual = testing::random_matrix(rng, b, d);
        auto parsing = testing::random_matrix(rng, b, d);
        auto gate = testing::random_matrix(rng, b, b, -2, 2);
        const double tau = rng.uniform(0.3, 3.0);

        const double value =
            dcpc_loss(matrix(visual), matrix(parsing), matrix(gate), log_tau_of(tau)).value();
        const double decomposed = testing::dcpc_decomposed(visual, parsing, gate, tau);
        CHECK(std::abs(value - decomposed) < 1e-10);
    }
}

TEST_CASE("dcpc direction-swap symmetry") {
    Rng rng(556);
    for (int trial = 0; trial < 20; ++trial) {
        const int b = 2 + int(rng.below(7)), d = 4;
        auto visual = matrix(testing::random_matrix(rng, b, d));
        auto parsing = matrix(testing::random_matrix(rng, b, d));
        auto gate = matrix(testing::random_matrix(rng, b, b));
        auto tau = log_tau_of(0.9);
        const double forward = dcpc_loss(visual, parsing, gate, tau).value();
        const double swapped = dcpc_loss(parsing, visual, transpose(gate), tau).value();
        CHECK(forward == swapped);
    }
}

TEST_CASE("dcpc perfect-alignment limit") {
    // Strongly diagonal similarities and a wide-open diagonal gate drive the
    // loss toward zero.
    auto visual = matrix({{30.0, 0.0}, {0.0, 30.0}});
    auto parsing = matrix({{30.0, 0.0}, {0.0, 30.0}});
    auto gate = matrix({{30.0, 0.0}, {0.0, 30.0}});
    CHECK(dcpc_loss(visual, parsing, gate, log_tau_of(1.0)).value() < 1e-6);
}

TEST_CASE("dcpc uses the top-left block of a larger gate") {
    Rng rng(557);
    const int b = 3;
    auto visual = matrix(testing::random_matrix(rng, b, 4));
    auto parsing = matrix(testing::random_matrix(rng, b, 4));
    auto small_gate = testing::random_matrix(rng, b, b);
    auto big = testing::random_matrix(rng, 8, 8);
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < b; ++j) big[i][j] = small_gate[i][j];
    CHECK(dcpc_loss(visual, parsing, matrix(small_gate), log_tau_of(1.0)).value() ==
          dcpc_loss(visual, parsing, matrix(big), log_tau_of(1.0)).value());
}

TEST_CASE("dcpc rejects a non-finite temperature") {
    auto visual = matrix({{1.0, 0.0}});
    auto parsing = matrix({{1.0, 0.0}});
    auto gate = Tensor<double>::zeros({1, 1});
    CHECK_THROWS_AS(
        dcpc_loss(visual, parsing, gate,
                  Tensor<double>::scalar(std::numeric_limits<double>::infinity())),
        ContractError);
}

TEST_CASE("dcpc gradients") {
    Rng rng(558);
    for (int pt = 0; pt < 5; ++pt) {
        const int b = 4, d = 6;
        auto parsing = matrix(testing::random_matrix(rng, b, d));
        auto gate = matrix(testing::random_matrix(rng, b, b));
        auto tau = log_tau_of(0.8);

        auto f_visual = [&](const Tensor<double>& v) {
            return dcpc_loss(v, parsing, gate, tau);
        };
        CHECK(finite_diff_check(f_visual, matrix(testing::random_matrix(rng, b, d))) < 1e-6);

        auto visual = matrix(testing::random_matrix(rng, b, d));
        auto f_gate = [&](const Tensor<double>& g) {
            return dcpc_loss(visual, parsing, g, tau);
        };
        CHECK(finite_diff_check(f_gate, matrix(testing::random_matrix(rng, b, b))) < 1e-6);

        auto f_tau = [&](const Tensor<double>& t) {
            return dcpc_loss(visual, parsing, gate, t);
        };
        CHECK(finite_diff_check(f_tau, Tensor<double>::scalar(rng.uniform(-0.5, 0.5))) < 1e-6);
    }
}

// ---------------------------------------------------------------------------
// cmc
// ---------------------------------------------------------------------------

TEST_CASE("cmc fixtures") {
    SUBCASE("single positive, no negatives") {
        auto v = matrix({{0.6, 0.8}});
        auto l = matrix({{1.0, 0.0}});
        CHECK(cmc_loss(v, l, log_tau_of(0.07)).value() == doctest::Approx(0.0));
    }
    SUBCASE("orthonormal pairs, vanishing temperature") {
        auto v = matrix({{1.0, 0.0}, {0.0, 1.0}});
        CHECK(cmc_loss(v, v, log_tau_of(0.01)).value() < 1e-9);
    }
    SUBCASE("identity cosine matrix at tau 1") {
        auto v = matrix({{1.0, 0.0}, {0.0, 1.0}});
        const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
        CHECK(cmc_loss(v, v, log_tau_of(1.0)).value() ==
              doctest::Approx(expected).epsilon(1e-9));
        CHECK(cmc_loss(v, v, log_tau_of(1.0)).value() ==
              doctest::Approx(0.313262).epsilon(1e-6));
    }
    SUBCASE("zero-norm embedding is rejected") {
        auto v = matrix({{0.0, 0.0}, {1.0, 0.0}});
        auto l = matrix({{1.0, 0.0}, {0.0, 1.0}});
        CHECK_THROWS_AS(cmc_loss(v, l, log_tau_of(1.0)), ContractError);
    }
}

TEST_CASE("cmc is nonnegative, permutation invariant, differentiable") {
    Rng rng(901);
    for (int trial = 0; trial < 20; ++trial) {
        const int b = 2 + int(rng.below(7)), d = 3 + int(rng.below(5));
        auto v = testing::random_matrix(rng, b, d);
        auto l = testing::random_matrix(rng, b, d);
        const double loss = cmc_loss(matrix(v), matrix(l), log_tau_of(0.5)).value();
        CHECK(loss >= 0.0);

        std::vector<int> perm(b);
        for (int i = 0; i < b; ++i) perm[i] = i;
        rng.shuffle(perm);
        std::vector<std::vector<double>> pv(b), pl(b);
        for (int i = 0; i < b; ++i) {
            pv[i] = v[perm[i]];
            pl[i] = l[perm[i]];
        }
        CHECK(cmc_loss(matrix(pv), matrix(pl), log_tau_of(0.5)).value() == loss);
    }
    for (int pt = 0; pt < 5; ++pt) {
        auto l = matrix(testing::random_matrix(rng, 4, 5));
        auto f = [&](const Tensor<double>& v) { return cmc_loss(v, l, log_tau_of(0.7)); };
        CHECK(finite_diff_check(f, matrix(testing::random_matrix(rng, 4, 5))) < 1e-6);
        auto v = matrix(testing::random_matrix(rng, 4, 5));
        auto f_tau = [&](const Tensor<double>& t) { return cmc_loss(v, l, t); };
        CHECK(finite_diff_check(f_tau, Tensor<double>::scalar(rng.uniform(-1, 0.5))) < 1e-6);
    }
}

// ---------------------------------------------------------------------------
// kl
// ---------------------------------------------------------------------------

TEST_CASE("kl fixtures") {
    auto t = matrix({{0.4, -1.2, 0.9}});
    CHECK(kl_align_loss(t, t, 1.0).value() == doctest::Approx(0.0));

    // d=2, target logits (0,0) -> p=(1/2,1/2); predicted (ln 3, 0) -> q=(3/4,1/4).
    auto target = matrix({{0.0, 0.0}});
    auto predicted = matrix({{std::log(3.0), 0.0}});
    const double expected = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
    CHECK(kl_align_loss(predicted, target, 1.0).value() ==
          doctest::Approx(expected).epsilon(1e-9));
    CHECK(kl_align_loss(predicted, target, 1.0).value() ==
          doctest::Approx(0.143841).epsilon(1e-5));

    CHECK_THROWS_AS(kl_align_loss(predicted, target, 0.0), ContractError);
}

TEST_CASE("kl nonnegativity, detached target, gradient") {
    Rng rng(902);
    for (int trial = 0; trial < 30; ++trial) {
        const int b = 1 + int(rng.below(6)), d = 2 + int(rng.below(6));
        auto pred = matrix(testing::random_matrix(rng, b, d, -3, 3));
        auto target = matrix(testing::random_matrix(rng, b, d, -3, 3));
        CHECK(kl_align_loss(pred, target, 1.3).value() >= 0.0);
    }

    auto pred = matrix(testing::random_matrix(rng, 3, 4)).set_requires_grad();
    auto target = matrix(testing::random_matrix(rng, 3, 4)).set_requires_grad();
    {
        Tape<double> tape;
        tape.backward(kl_align_loss(pred, target, 1.0));
    }
    CHECK(pred.has_grad());
    CHECK(!target.has_grad());  // the target side is detached

    for (int pt = 0; pt < 5; ++pt) {
        auto tgt = matrix(testing::random_matrix(rng, 3, 4));
        auto f = [&](const Tensor<double>& p) { return kl_align_loss(p, tgt, 2.0); };
        CHECK(finite_diff_check(f, matrix(testing::random_matrix(rng, 3, 4))) < 1e-6);
    }
}

// ---------------------------------------------------------------------------
// total
// ---------------------------------------------------------------------------

TEST_CASE("total loss bookkeeping") {
    auto zero = Tensor<double>::scalar(0.0);
    DfaccParts<double> zero_parts{zero, zero, zero};
    auto all_zero = total_loss(zero, zero_parts, zero, zero, zero);
    CHECK(all_zero.total.value() == 0.0);

    Rng rng(903);
    auto t = [&rng] { return Tensor<double>::scalar(rng.uniform(0, 2)); };
    auto dfa = t(), cmc = t(), dcpc = t(), kl = t();
    DfaccParts<double> dfacc{t(), t(), t()};
    auto bundle = total_loss(dfa, dfacc, cmc, dcpc, kl);
    const LossReport report = bundle.report();
    CHECK(report.total ==
          dfa.value() + dfacc.total.value() + cmc.value() + dcpc.value() + kl.value());

    // Ablating a term (its tensor forced to 0) removes exactly its value.
    auto ablated = total_loss(dfa, dfacc, cmc, dcpc, Tensor<double>::scalar(0.0));
    CHECK(std::abs((report.total - ablated.report().total) - kl.value()) < 1e-12);
    CHECK(ablated.report().kl == 0.0);
}

TEST_CASE("loss report CSV") {
    LossReport r{1, 2, 3, 4, 5, 6, 7, 28};
    CHECK(LossReport::csv_header() == "step,dfa,intra,inter,dfacc,cmc,dcpc,kl,total");
    CHECK(r.csv_row(9) == "9,1,2,3,4,5,6,7,28");
    CHECK(r.finite());
    r.cmc = std::numeric_limits<double>::quiet_NaN();
    CHECK(!r.finite());
}
