#include <benchmark/benchmark.h>

#include "zsdfa/losses.hpp"
#include "zsdfa/model.hpp"
#include "zsdfa/preprocess.hpp"
#include "zsdfa/rng.hpp"
#include "zsdfa/synthetic.hpp"

using namespace zsdfa;

namespace {

Tensor<float> random_tensor(std::vector<int> shape, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<float> t = Tensor<float>::zeros(std::move(shape));
    for (auto& v : t.raw()) v = static_cast<float>(rng.uniform(-1, 1));
    return t;
}

const FaceSample& bench_sample() {
    static const FaceSample sample = [] {
        const FamilyCatalogue cat = FamilyCatalogue::builtin();
        return make_sample(cat.get("gridgan"), 5, 64, Vocabulary::build(cat), 16, 0);
    }();
    return sample;
}

const ModelParams<float>& bench_params() {
    static const ModelParams<float> params =
        ModelParams<float>::init(EncoderConfig::desk_default(), 7);
    return params;
}

} // namespace

static void BM_Matmul(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    auto a = random_tensor({n, n}, 1);
    auto b = random_tensor({n, n}, 2);
    for (auto _ : state) {
        auto c = matmul(a, b);
        benchmark::DoNotOptimize(c.data().data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * int64_t(n) * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

static void BM_Conv2d(benchmark::State& state) {
    auto x = random_tensor({3, 64, 64}, 3);
    auto k = random_tensor({32, 3, 3, 3}, 4);
    for (auto _ : state) {
        auto y = conv2d(x, k, 2);
        benchmark::DoNotOptimize(y.data().data());
    }
}
BENCHMARK(BM_Conv2d);

static void BM_SobelSrm(benchmark::State& state) {
    const Image& img = bench_sample().image;
    for (auto _ : state) {
        auto edges = sobel_edges<float>(img);
        auto [patch, origin] = richest_patch(img, 32);
        auto noise = srm_noise<float>(patch);
        benchmark::DoNotOptimize(edges.data().data());
        benchmark::DoNotOptimize(noise.data().data());
        benchmark::DoNotOptimize(origin);
    }
}
BENCHMARK(BM_SobelSrm);

static void BM_RenderSample(benchmark::State& state) {
    const FamilyCatalogue cat = FamilyCatalogue::builtin();
    const Vocabulary vocab = Vocabulary::build(cat);
    std::uint64_t seed = 0;
    for (auto _ : state) {
        auto s = make_sample(cat.get("mistdiff"), seed++, 64, vocab, 16, 0);
        benchmark::DoNotOptimize(s.image.px.data());
    }
}
BENCHMARK(BM_RenderSample);

static void BM_InferenceForward(benchmark::State& state) {
    const auto& params = bench_params();
    const auto& sample = bench_sample();
    ModuleSet modules;
    for (auto _ : state) {
        auto logits = forward_infer(params, sample.image, modules);
        benchmark::DoNotOptimize(logits.data().data());
    }
}
BENCHMARK(BM_InferenceForward);

static void BM_TrainStep(benchmark::State& state) {
    auto params = ModelParams<float>::init(EncoderConfig::desk_default(), 7);
    const FamilyCatalogue cat = FamilyCatalogue::builtin();
    const Vocabulary vocab = Vocabulary::build(cat);
    std::vector<FaceSample> samples;
    std::vector<const FaceSample*> batch;
    std::vector<int> labels;
    const std::vector<std::string> fams = {"gridgan", "meshgan", "huegan",
                                           "mistdiff", "dewdiff", "real"};
    for (int i = 0; i < 16; ++i)
        samples.push_back(
            make_sample(cat.get(fams[i % 6]), 100 + i, 64, vocab, 16, i % 6));
    for (const auto& s : samples) {
        batch.push_back(&s);
        labels.push_back(s.class_index);
    }
    ModuleSet modules;
    for (auto _ : state) {
        Tape<float> tape;
        auto fwd = forward_train<float>(params, batch, modules);
        auto dfa = dfa_loss(softmax_rows(fwd.logits), labels);
        auto dfacc = dfacc_loss(fwd.logits, labels, params.centers, 0.5f, 0.7f);
        auto dcpc = dcpc_loss(fwd.visual, fwd.parsing, params.pair_gate, params.log_tau);
        auto cmc = cmc_loss(fwd.visual, fwd.language, params.log_tau_cmc);
        auto kl = kl_align_loss(fwd.predicted_language, fwd.language, 1.0f);
        auto bundle = total_loss(dfa, dfacc, cmc, dcpc, kl);
        tape.backward(bundle.total);
        benchmark::DoNotOptimize(params.centers.grad_raw().data());
        for (auto& [name, t] : params.named_params()) t->drop_grad();
    }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
