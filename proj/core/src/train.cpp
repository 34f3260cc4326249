#include "zsdfa/train.hpp"

#include <cmath>
#include <cstdio>

#include "zsdfa/eval.hpp"
#include "zsdfa/rng.hpp"

namespace zsdfa {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch < 2) throw ConfigError("batch must be >= 2 (pairwise losses need pairs)");
    if (lr <= 0) throw ConfigError("learning rate must be > 0");
    if (weight_decay < 0) throw ConfigError("weight decay must be >= 0");
    if (lr_drop_every < 1 || lr_drop_factor < 1)
        throw ConfigError("invalid learning-rate schedule");
    losses.validate();
    if (!modules.any_visual())
        throw ConfigError("all visual encoders are disabled; nothing can be trained");
    if (losses.use_dcpc && !modules.parsing)
        throw ConfigError("the dcpc loss requires the parsing encoder: enable the parsing "
                          "module or drop dcpc from the loss set");
    if (losses.use_cmc && !modules.language)
        throw ConfigError("the cmc loss requires the language encoder: enable the language "
                          "module or drop cmc from the loss set");
    if (losses.use_kl && !modules.language)
        throw ConfigError("the kl loss aligns against language embeddings: enable the "
                          "language module or drop kl from the loss set");
    if (!losses.use_dfa && !losses.use_dfacc && !losses.use_cmc && !losses.use_dcpc &&
        !losses.use_kl)
        throw ConfigError("every loss term is disabled");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"epochs", epochs},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"lr_drop_every", lr_drop_every},
            {"lr_drop_factor", lr_drop_factor},
            {"batch", batch},
            {"seed", seed},
            {"modules",
             {{"appearance", modules.appearance},
              {"noise", modules.noise},
              {"edge", modules.edge},
              {"parsing", modules.parsing},
              {"language", modules.language},
              {"mmi", modules.mmi}}},
            {"losses",
             {{"lambda", losses.lambda},
              {"margin", losses.margin},
              {"tau_cmc_init", losses.tau_cmc_init},
              {"kl_temperature", losses.kl_temperature},
              {"dfa", losses.use_dfa},
              {"dfacc", losses.use_dfacc},
              {"cmc", losses.use_cmc},
              {"dcpc", losses.use_dcpc},
              {"kl", losses.use_kl}}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lr_drop_every = j.value("lr_drop_every", c.lr_drop_every);
    c.lr_drop_factor = j.value("lr_drop_factor", c.lr_drop_factor);
    c.batch = j.value("batch", c.batch);
    c.seed = j.value("seed", c.seed);
    if (j.contains("modules")) {
        const auto& m = j.at("modules");
        c.modules.appearance = m.value("appearance", true);
        c.modules.noise = m.value("noise", true);
        c.modules.edge = m.value("edge", true);
        c.modules.parsing = m.value("parsing", true);
        c.modules.language = m.value("language", true);
        c.modules.mmi = m.value("mmi", true);
    }
    if (j.contains("losses")) {
        const auto& l = j.at("losses");
        c.losses.lambda = l.value("lambda", c.losses.lambda);
        c.losses.margin = l.value("margin", c.losses.margin);
        c.losses.tau_cmc_init = l.value("tau_cmc_init", c.losses.tau_cmc_init);
        c.losses.kl_temperature = l.value("kl_temperature", c.losses.kl_temperature);
        c.losses.use_dfa = l.value("dfa", true);
        c.losses.use_dfacc = l.value("dfacc", true);
        c.losses.use_cmc = l.value("cmc", true);
        c.losses.use_dcpc = l.value("dcpc", true);
        c.losses.use_kl = l.value("kl", true);
    }
    return c;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

Adam::Adam(std::vector<std::pair<std::string, Tensor<float>*>> params, const TrainConfig& cfg)
    : lr_(cfg.lr), wd_(cfg.weight_decay), beta1_(cfg.beta1), beta2_(cfg.beta2),
      eps_(cfg.adam_eps) {
    slots_.reserve(params.size());
    for (auto& [name, t] : params) {
        (void)name;
        slots_.push_back({t, std::vector<float>(t->size(), 0.f),
                          std::vector<float>(t->size(), 0.f), 0});
    }
}

void Adam::step() {
    for (auto& s : slots_) {
        if (!s.param->has_grad()) continue;
        ++s.t;
        const auto g = s.param->grad();
        auto p = s.param->raw();
        const double bc1 = 1.0 - std::pow(beta1_, s.t);
        const double bc2 = 1.0 - std::pow(beta2_, s.t);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = double(g[i]) + wd_ * double(p[i]);
            s.m[i] = static_cast<float>(beta1_ * s.m[i] + (1.0 - beta1_) * gi);
            s.v[i] = static_cast<float>(beta2_ * s.v[i] + (1.0 - beta2_) * gi * gi);
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            p[i] = static_cast<float>(p[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

void Adam::zero_grad() {
    for (auto& s : slots_) s.param->drop_grad();
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

EncoderConfig resolve_model_config(EncoderConfig base, const DatasetSplit& split,
                                   int vocab_size, int num_classes) {
    base.image_size = split.image_size;
    base.prompt_len = split.prompt_len;
    base.vocab_size = vocab_size;
    base.classes = num_classes;
    base.validate();
    return base;
}

template <typename T>
ModelParams<T> clone_params(const ModelParams<T>& params) {
    ModelParams<T> copy = params;  // copies handles
    for (auto& [name, t] : copy.named_params()) {
        (void)name;
        const bool rg = t->requires_grad();
        *t = Tensor<T>::from(t->shape(), std::vector<T>(t->data().begin(), t->data().end()));
        t->set_requires_grad(rg);
    }
    return copy;
}

template ModelParams<float> clone_params(const ModelParams<float>&);
template ModelParams<double> clone_params(const ModelParams<double>&);

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

} // namespace

TrainResult train(const EncoderConfig& model_config, const ProtocolData& data,
                  const TrainConfig& cfg) {
    cfg.validate();
    model_config.validate();
    if (data.train.empty()) throw ConfigError("train: empty training set");
    if (cfg.batch > model_config.max_batch)
        throw ConfigError("batch " + std::to_string(cfg.batch) + " exceeds the gate size " +
                          std::to_string(model_config.max_batch));
    if (static_cast<int>(data.train.size()) < cfg.batch)
        throw ConfigError("training set smaller than one batch");

    TrainResult result{ModelParams<float>::init(model_config, cfg.seed),
                       ModelParams<float>(), -1, 0.0, 0, {}, "", ""};
    ModelParams<float>& params = result.params;

    Adam opt(params.named_params(), cfg);
    const bool with_parsing = cfg.losses.use_dcpc;
    const bool with_language = cfg.losses.use_cmc || cfg.losses.use_kl;
    params.log_tau_cmc.raw()[0] = static_cast<float>(std::log(cfg.losses.tau_cmc_init));

    std::vector<const FaceSample*> seen_test;
    for (const auto& s : data.test)
        if (s.class_index >= 0) seen_test.push_back(&s);

    result.step_csv = LossReport::csv_header() + "\n";
    result.epoch_csv =
        "epoch,dfa,intra,inter,dfacc,cmc,dcpc,kl,total,gate_diag_mean,seen_acc,lr\n";

    std::vector<std::size_t> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const std::size_t batches = data.train.size() / cfg.batch;
    long step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr / std::pow(cfg.lr_drop_factor, epoch / cfg.lr_drop_every);
        opt.set_lr(lr);
        Rng shuffle_rng(hash_seed(cfg.seed, 0xe90cULL, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        LossReport epoch_sum;
        for (std::size_t bi = 0; bi < batches; ++bi, ++step) {
            std::vector<const FaceSample*> batch(cfg.batch);
            std::vector<int> labels(cfg.batch);
            for (int i = 0; i < cfg.batch; ++i) {
                batch[i] = &data.train[order[bi * cfg.batch + i]];
                labels[i] = batch[i]->class_index;
            }

            LossReport report;
            {
                Tape<float> tape;
                TrainForward<float> fwd =
                    forward_train<float>(params, batch, cfg.modules, with_parsing, with_language);

                Tensor<float> zero = Tensor<float>::scalar(0.f);
                Tensor<float> dfa = zero, cmc = zero, dcpc = zero, kl = zero;
                DfaccParts<float> dfacc{zero, zero, zero};
                if (cfg.losses.use_dfa)
                    dfa = dfa_loss(softmax_rows(fwd.logits), labels);
                if (cfg.losses.use_dfacc)
                    dfacc = dfacc_loss(fwd.logits, labels, params.centers,
                                       static_cast<float>(cfg.losses.lambda),
                                       static_cast<float>(cfg.losses.margin));
                if (cfg.losses.use_dcpc)
                    dcpc = dcpc_loss(fwd.visual, fwd.parsing, params.pair_gate, params.log_tau);
                if (cfg.losses.use_cmc)
                    cmc = cmc_loss(fwd.visual, fwd.language, params.log_tau_cmc);
                if (cfg.losses.use_kl)
                    kl = kl_align_loss(fwd.predicted_language, fwd.language,
                                       static_cast<float>(cfg.losses.kl_temperature));

                LossBundle<float> bundle = total_loss(dfa, dfacc, cmc, dcpc, kl);
                report = bundle.report();
                if (!report.finite())
                    throw NumericError("non-finite loss at step " + std::to_string(step) +
                                       " (" + report.describe() + ")");
                tape.backward(bundle.total);
            }
            opt.step();
            opt.zero_grad();

            result.step_csv += report.csv_row(step) + "\n";
            epoch_sum.dfa += report.dfa;
            epoch_sum.intra += report.intra;
            epoch_sum.inter += report.inter;
            epoch_sum.dfacc += report.dfacc;
            epoch_sum.cmc += report.cmc;
            epoch_sum.dcpc += report.dcpc;
            epoch_sum.kl += report.kl;
            epoch_sum.total += report.total;
        }

        EpochSummary summary;
        summary.epoch = epoch;
        const double n = double(batches);
        summary.mean_losses = {epoch_sum.dfa / n,  epoch_sum.intra / n, epoch_sum.inter / n,
                               epoch_sum.dfacc / n, epoch_sum.cmc / n,  epoch_sum.dcpc / n,
                               epoch_sum.kl / n,    epoch_sum.total / n};
        double gate_diag = 0;
        for (int i = 0; i < cfg.batch; ++i)
            gate_diag += std::abs(double(
                params.pair_gate.at(static_cast<std::size_t>(i) * model_config.max_batch + i)));
        summary.gate_diag_mean = gate_diag / cfg.batch;
        summary.lr = lr;
        summary.seen_acc =
            seen_test.empty() ? 0.0 : seen_argmax_accuracy(params, seen_test, cfg.modules, cfg.threads);
        result.epochs.push_back(summary);

        result.epoch_csv += std::to_string(epoch) + "," + fmt(summary.mean_losses.dfa) + "," +
                            fmt(summary.mean_losses.intra) + "," + fmt(summary.mean_losses.inter) +
                            "," + fmt(summary.mean_losses.dfacc) + "," +
                            fmt(summary.mean_losses.cmc) + "," + fmt(summary.mean_losses.dcpc) +
                            "," + fmt(summary.mean_losses.kl) + "," +
                            fmt(summary.mean_losses.total) + "," + fmt(summary.gate_diag_mean) +
                            "," + fmt(summary.seen_acc) + "," + fmt(lr) + "\n";

        if (result.best_epoch < 0 || summary.seen_acc > result.best_seen_acc) {
            result.best_epoch = epoch;
            result.best_seen_acc = summary.seen_acc;
            result.best_params = clone_params(params);
        }
    }
    result.steps = step;
    return result;
}

} // namespace zsdfa
