#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "zsdfa/checkpoint.hpp"
#include "zsdfa/losses.hpp"
#include "zsdfa/dataset_io.hpp"
#include "zsdfa/model.hpp"
#include "zsdfa/preprocess.hpp"
#include "zsdfa/rng.hpp"
#include "zsdfa/train.hpp"

using namespace zsdfa;

namespace {

EncoderConfig tiny_config() {
    EncoderConfig c;
    c.image_size = 32;
    c.patch_size = 16;
    c.d = 16;
    c.heads = 4;
    c.blocks_appearance = 1;
    c.blocks_edge = 1;
    c.blocks_noise = 1;
    c.blocks_parsing = 1;
    c.blocks_language = 1;
    c.ffn_hidden = 32;
    c.backbone = {{8, 3, 2}, {12, 3, 2}, {16, 3, 2}};
    c.vocab_size = 40;
    c.prompt_len = 16;
    c.classes = 6;
    c.max_batch = 16;
    c.validate();
    return c;
}

std::vector<FaceSample> tiny_samples(int n, int size = 32) {
    const FamilyCatalogue cat = FamilyCatalogue::builtin();
    const Vocabulary vocab = Vocabulary::build(cat);
    std::vector<FaceSample> out;
    const std::vector<std::string> fams = {"gridgan", "meshgan", "huegan",
                                           "mistdiff", "dewdiff", "real"};
    for (int i = 0; i < n; ++i) {
        const auto& fam = cat.get(fams[i % fams.size()]);
        out.push_back(make_sample(fam, 1000 + i, size, vocab, 16, i % int(fams.size())));
    }
    return out;
}

template <typename T>
double l2_diff(const Tensor<T>& a, const Tensor<T>& b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a.data()[i]) - double(b.data()[i]);
        acc += d * d;
    }
    return std::sqrt(acc);
}

} // namespace

TEST_CASE("encoder config geometry") {
    const EncoderConfig desk = EncoderConfig::desk_default();
    CHECK(desk.image_size == 64);
    CHECK(desk.patch_size == 32);  // richest-patch side at the desk scale
    CHECK(desk.d == 64);
    auto [h, w] = desk.feature_hw(desk.image_size);
    CHECK(h == 7);
    CHECK(w == 7);

    const EncoderConfig full = EncoderConfig::full_scale();
    CHECK(full.d == 512);
    CHECK(full.blocks_parsing == 6);
    CHECK(full.blocks_language == 6);
    CHECK(full.blocks_appearance == 6);
    CHECK(full.blocks_edge == 3);
    CHECK(full.blocks_noise == 3);
    CHECK(full.feat_channels() == 512);
    auto [ph, pw] = full.feature_hw(224);
    CHECK(ph == 7);
    CHECK(pw == 7);
    CHECK(full.prompt_len == 308);
    CHECK(full.patch_size == 112);

    EncoderConfig bad = desk;
    bad.d = 30;  // not divisible by 4 heads
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("parameter count matches the closed-form formula") {
    for (const EncoderConfig& cfg : {tiny_config(), EncoderConfig::desk_default()}) {
        const auto params = ModelParams<float>::init(cfg, 3);
        CHECK(params.parameter_count() == expected_parameter_count(cfg));
        CHECK(cfg.head_dim() * cfg.heads == cfg.d);  // d_f = d / f exactly
    }
}

TEST_CASE("encode_view shape contract and stability") {
    const EncoderConfig cfg = tiny_config();
    const auto params = ModelParams<double>::init(cfg, 5);

    const auto samples = tiny_samples(2);
    const auto emb = encode_view(params, appearance_input<double>(samples[0].image),
                                 View::Appearance);
    CHECK(emb.cls.shape() == std::vector<int>{1, 16});
    CHECK(emb.patch.shape() == std::vector<int>{1, 16});

    const auto edge = encode_view(params, Tensor<double>::zeros({1, 32, 32}), View::Edge);
    CHECK(edge.cls.shape() == std::vector<int>{1, 16});
    for (double v : edge.cls.data()) CHECK(std::isfinite(v));  // zero input stays finite

    const auto noise = encode_view(params, Tensor<double>::zeros({3, 16, 16}), View::Noise);
    CHECK(noise.cls.shape() == std::vector<int>{1, 16});

    // Two different inputs must not collapse to the same embedding.
    const auto emb2 = encode_view(params, appearance_input<double>(samples[1].image),
                                  View::Appearance);
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < emb.cls.size(); ++i) {
        dot += emb.cls.data()[i] * emb2.cls.data()[i];
        na += emb.cls.data()[i] * emb.cls.data()[i];
        nb += emb2.cls.data()[i] * emb2.cls.data()[i];
    }
    CHECK(dot / std::sqrt(na * nb) < 0.999);

    CHECK_THROWS_AS(encode_view(params, Tensor<double>::zeros({3, 16, 16}), View::Appearance),
                    ShapeError);
}

TEST_CASE("cross attention against a hand-evaluated single-head fixture") {
    CrossAttentionParams<double> p;
    p.wq = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    p.wk = Tensor<double>::from({2, 2}, {0.5, 0, 0, 0.5});
    p.wv = Tensor<double>::from({2, 2}, {1, 1, 1, -1});
    p.out_proj = Tensor<double>::from({2, 2}, {1, 0, 0, 1});

    const auto query = Tensor<double>::from({1, 2}, {1, 0});
    const auto context = Tensor<double>::from({2, 2}, {1, 2, 3, 4});

    CrossAttentionTrace<double> trace;
    const auto out = cross_attend(p, query, context, 1, &trace);

    // Hand evaluation: Q=[1,0], K=[[0.5,1],[1.5,2]], V=[[3,-1],[7,-1]];
    // scores = [0.5, 1.5]/sqrt(2); w2 = 1/(1+exp((0.5-1.5)/sqrt(2))).
    const double s1 = 0.5 / std::sqrt(2.0), s2 = 1.5 / std::sqrt(2.0);
    const double w2 = 1.0 / (1.0 + std::exp(s1 - s2));
    const double w1 = 1.0 - w2;
    const double attended0 = w1 * 3.0 + w2 * 7.0;
    const double attended1 = w1 * -1.0 + w2 * -1.0;
    CHECK(trace.attended.data()[0] == doctest::Approx(attended0).epsilon(1e-6));
    CHECK(trace.attended.data()[1] == doctest::Approx(attended1).epsilon(1e-6));
    CHECK(out.data()[0] == doctest::Approx(1.0 + attended0).epsilon(1e-6));
    CHECK(out.data()[1] == doctest::Approx(0.0 + attended1).epsilon(1e-6));
    CHECK(trace.head_weights.size() == 1);
    CHECK(trace.head_weights[0].data()[0] == doctest::Approx(w1).epsilon(1e-9));
}

TEST_CASE("cross attention: identical context rows dominate any query") {
    CrossAttentionParams<double> p;
    Rng rng(11);
    for (auto* t : {&p.wq, &p.wk, &p.wv, &p.out_proj}) {
        *t = Tensor<double>::zeros({4, 4});
        for (auto& v : t->raw()) v = rng.uniform(-1, 1);
    }
    const auto context = Tensor<double>::from({2, 4}, {0.3, -1, 2, 0.5, 0.3, -1, 2, 0.5});
    const auto v_row = matmul(context, p.wv);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor<double> q = Tensor<double>::zeros({1, 4});
        for (auto& v : q.raw()) v = rng.uniform(-3, 3);
        CrossAttentionTrace<double> trace;
        cross_attend(p, q, context, 2, &trace);
        for (int j = 0; j < 4; ++j)
            CHECK(trace.attended.data()[j] == doctest::Approx(v_row.data()[j]).epsilon(1e-9));
    }
}

TEST_CASE("cross attention: zero query projection gives uniform weights") {
    CrossAttentionParams<double> p;
    Rng rng(13);
    p.wq = Tensor<double>::zeros({4, 4});
    for (auto* t : {&p.wk, &p.wv, &p.out_proj}) {
        *t = Tensor<double>::zeros({4, 4});
        for (auto& v : t->raw()) v = rng.uniform(-1, 1);
    }
    const auto q = Tensor<double>::from({1, 4}, {1, 2, 3, 4});
    const auto context = Tensor<double>::from({2, 4}, {0.1, -0.5, 1.2, 0.7, -2, 0.4, 0, 1});
    CrossAttentionTrace<double> trace;
    cross_attend(p, q, context, 2, &trace);
    for (const auto& w : trace.head_weights) {
        CHECK(w.data()[0] == doctest::Approx(0.5));
        CHECK(w.data()[1] == doctest::Approx(0.5));
        CHECK(w.data()[0] + w.data()[1] == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("attention weights are probability distributions") {
    const EncoderConfig cfg = tiny_config();
    const auto params = ModelParams<double>::init(cfg, 21);
    const auto samples = tiny_samples(1);
    const auto app = encode_view(params, appearance_input<double>(samples[0].image),
                                 View::Appearance);
    const auto noise = encode_view(
        params, srm_noise<double>(richest_patch(samples[0].image, 16).first), View::Noise);
    CrossAttentionTrace<double> trace;
    cross_attend(params.fuse_noise, app.cls,
                 concat_rows<double>(std::vector<Tensor<double>>{noise.cls, noise.patch}), cfg.heads, &trace);
    REQUIRE(trace.head_weights.size() == 4);
    for (const auto& w : trace.head_weights) {
        double sum = 0;
        for (double v : w.data()) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("fusion is an element-wise sum of branches") {
    auto z1 = Tensor<double>::zeros({1, 8});
    auto z2 = Tensor<double>::zeros({1, 8});
    auto fused_zero = add(z1, z2);
    for (double v : fused_zero.data()) CHECK(v == 0.0);

    Rng rng(17);
    auto b1 = Tensor<double>::zeros({1, 8});
    auto b2 = Tensor<double>::zeros({1, 8});
    for (auto& v : b1.raw()) v = rng.uniform(-1, 1);
    for (auto& v : b2.raw()) v = rng.uniform(-1, 1);
    auto ab = add(b1, b2);
    auto ba = add(b2, b1);  // swapping the branch results leaves the sum unchanged
    for (std::size_t i = 0; i < ab.size(); ++i) CHECK(ab.data()[i] == ba.data()[i]);
}

TEST_CASE("fusion gradient with respect to the query class token") {
    const EncoderConfig cfg = tiny_config();
    const auto params = ModelParams<double>::init(cfg, 23);
    Rng rng(29);
    auto ctx_noise = Tensor<double>::zeros({2, 16});
    auto ctx_edge = Tensor<double>::zeros({2, 16});
    for (auto& v : ctx_noise.raw()) v = rng.uniform(-1, 1);
    for (auto& v : ctx_edge.raw()) v = rng.uniform(-1, 1);

    auto f = [&](const Tensor<double>& cls) {
        auto branch_noise = cross_attend(params.fuse_noise, cls, ctx_noise, cfg.heads);
        auto branch_edge = cross_attend(params.fuse_edge, cls, ctx_edge, cfg.heads);
        return sum(add(branch_noise, branch_edge));
    };
    auto cls = Tensor<double>::zeros({1, 16});
    for (auto& v : cls.raw()) v = rng.uniform(-1, 1);
    CHECK(finite_diff_check(f, cls) < 1e-6);
}

TEST_CASE("parsing encoder") {
    const EncoderConfig cfg = tiny_config();
    const auto params = ModelParams<double>::init(cfg, 31);
    const auto samples = tiny_samples(1);

    const auto clean = encode_parsing(params, samples[0].parsing);
    CHECK(clean.shape() == std::vector<int>{1, 16});

    const auto again = encode_parsing(params, samples[0].parsing);
    for (std::size_t i = 0; i < clean.size(); ++i)
        CHECK(clean.data()[i] == again.data()[i]);  // bit-identical

    const ParsingMap degraded = degrade_parsing(samples[0].parsing, 0.8, 99);
    const auto rough = encode_parsing(params, degraded);
    CHECK(l2_diff(clean, rough) > 0.0);

    ParsingMap bad = samples[0].parsing;
    bad.labels[0] = 9;
    CHECK_THROWS_AS(encode_parsing(params, bad), DataError);
}

TEST_CASE("language encoder") {
    const EncoderConfig cfg = tiny_config();
    const auto params = ModelParams<double>::init(cfg, 37);
    const FamilyCatalogue cat = FamilyCatalogue::builtin();
    const Vocabulary vocab = Vocabulary::build(cat);

    const auto a = encode_language<double>(params, make_prompt(cat.get("gridgan"), vocab, 16));
    const auto b = encode_language<double>(params, make_prompt(cat.get("mistdiff"), vocab, 16));
    CHECK(a.shape() == std::vector<int>{1, 16});
    CHECK(l2_diff(a, b) > 0.0);

    const std::vector<int> padding(16, 0);
    const auto padded = encode_language<double>(params, padding);
    for (double v : padded.data()) CHECK(std::isfinite(v));

    std::vector<int> overflow(16, 0);
    overflow[3] = cfg.vocab_size;
    CHECK_THROWS_AS(encode_language<double>(params, overflow), DataError);
}

TEST_CASE("forward_train contract") {
    const EncoderConfig cfg = tiny_config();
    const auto params = ModelParams<float>::init(cfg, 41);
    const auto samples = tiny_samples(4);
    std::vector<const FaceSample*> batch;
    for (const auto& s : samples) batch.push_back(&s);

    ModuleSet modules;
    const auto fwd = forward_train<float>(params, batch, modules);
    CHECK(fwd.visual.shape() == std::vector<int>{4, 16});
    CHECK(fwd.parsing.shape() == std::vector<int>{4, 16});
    CHECK(fwd.language.shape() == std::vector<int>{4, 16});
    CHECK(fwd.predicted_language.shape() == std::vector<int>{4, 16});
    CHECK(fwd.logits.shape() == std::vector<int>{4, 6});

    std::vector<const FaceSample*> single = {&samples[0]};
    CHECK_THROWS_AS(forward_train<float>(params, single, modules), ConfigError);

    // Permuting the batch permutes the outputs identically.
    std::vector<const FaceSample*> permuted = {batch[2], batch[0], batch[3], batch[1]};
    const auto fwd_p = forward_train<float>(params, permuted, modules);
    const int perm[4] = {2, 0, 3, 1};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 16; ++j)
            CHECK(fwd_p.visual.data()[static_cast<std::size_t>(i) * 16 + j] ==
                  fwd.visual.data()[static_cast<std::size_t>(perm[i]) * 16 + j]);
}

TEST_CASE("inference path isolation") {
    const EncoderConfig cfg = tiny_config();
    auto params = ModelParams<float>::init(cfg, 43);
    const auto samples = tiny_samples(2);
    ModuleSet modules;

    const auto logits = forward_infer(params, samples[0].image, modules);
    CHECK(logits.shape() == std::vector<int>{1, 6});

    // Zeroing every parsing / language / predictor parameter cannot move the
    // inference output.
    for (auto& [name, t] : params.named_params()) {
        if (name.starts_with("parsing.") || name.starts_with("language.") ||
            name.starts_with("predictor.") || name.starts_with("pair_gate") ||
            name.starts_with("dcpc.") || name.starts_with("cmc.") ||
            name.starts_with("centers"))
            for (auto& v : t->raw()) v = 0.f;
    }
    const auto logits_zeroed = forward_infer(params, samples[0].image, modules);
    for (std::size_t i = 0; i < logits.size(); ++i)
        CHECK(logits.data()[i] == logits_zeroed.data()[i]);

    // And the training path produces the same logits for the same sample.
    std::vector<const FaceSample*> batch = {&samples[0], &samples[1]};
    const auto fwd = forward_train<float>(params, batch, modules);
    for (int j = 0; j < 6; ++j)
        CHECK(double(fwd.logits.data()[j]) ==
              doctest::Approx(double(logits.data()[j])).epsilon(1e-6));
}

TEST_CASE("gradient reaches at least 99% of parameter tensors") {
    const EncoderConfig cfg = tiny_config();
    auto params = ModelParams<float>::init(cfg, 47);
    const auto samples = tiny_samples(4);
    std::vector<const FaceSample*> batch;
    std::vector<int> labels;
    for (const auto& s : samples) {
        batch.push_back(&s);
        labels.push_back(s.class_index);
    }

    ModuleSet modules;
    {
        Tape<float> tape;
        const auto fwd = forward_train<float>(params, batch, modules);
        auto dfa = dfa_loss(softmax_rows(fwd.logits), labels);
        auto dfacc = dfacc_loss(fwd.logits, labels, params.centers, 0.5f, 0.7f);
        auto dcpc = dcpc_loss(fwd.visual, fwd.parsing, params.pair_gate, params.log_tau);
        auto cmc = cmc_loss(fwd.visual, fwd.language, params.log_tau_cmc);
        auto kl = kl_align_loss(fwd.predicted_language, fwd.language, 1.0f);
        auto bundle = total_loss(dfa, dfacc, cmc, dcpc, kl);
        tape.backward(bundle.total);
    }

    std::size_t with_grad = 0, total = 0;
    for (auto& [name, t] : params.named_params()) {
        total++;
        if (!t->has_grad()) continue;
        double norm = 0;
        for (float g : t->grad()) norm += double(g) * g;
        if (norm > 0) with_grad++;
    }
    CHECK(double(with_grad) >= 0.99 * double(total));
}

TEST_CASE("checkpoint round-trip and compatibility") {
    namespace fs = std::filesystem;
    const EncoderConfig cfg = tiny_config();
    const auto params = ModelParams<float>::init(cfg, 53);
    CheckpointMeta meta;
    meta.class_names = {"a", "b", "c", "d", "e", "f"};
    meta.seed = 53;
    meta.extra = {{"note", "test"}};

    const fs::path path = fs::temp_directory_path() / "zsdfa_ckpt_test.bin";
    save_checkpoint(path, params, meta);
    const LoadedCheckpoint loaded = load_checkpoint(path);
    CHECK(loaded.meta.class_names == meta.class_names);
    CHECK(loaded.meta.seed == 53);

    const auto orig = params.named_params();
    auto redux = loaded.params.named_params();
    REQUIRE(orig.size() == redux.size());
    for (std::size_t i = 0; i < orig.size(); ++i) {
        CHECK(orig[i].first == redux[i].first);
        REQUIRE(orig[i].second->size() == redux[i].second->size());
        for (std::size_t j = 0; j < orig[i].second->size(); ++j)
            CHECK(orig[i].second->data()[j] == redux[i].second->data()[j]);
    }

    CHECK_THROWS_AS(load_checkpoint(fs::temp_directory_path() / "missing.bin"), IoError);

    // A truncated container is rejected.
    auto bytes = read_file_bytes(path);
    write_file_bytes(path, bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    fs::remove(path);
}

TEST_CASE("clone_params produces an independent copy") {
    const EncoderConfig cfg = tiny_config();
    auto params = ModelParams<float>::init(cfg, 59);
    auto copy = clone_params(params);
    params.centers.raw()[0] = 123.f;
    CHECK(copy.centers.data()[0] == 0.f);
}
