// zsdfa: dataset building, training, open-set evaluation, ablation, and
// manifest verification for the synthetic attribution benchmark.
//
// Exit codes: 0 ok, 2 configuration, 3 I/O, 4 numeric failure,
// 5 incompatible artifacts.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "zsdfa/ablate.hpp"
#include "zsdfa/checkpoint.hpp"
#include "zsdfa/dataset_io.hpp"
#include "zsdfa/eval.hpp"
#include "zsdfa/manifest.hpp"
#include "zsdfa/parallel.hpp"
#include "zsdfa/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace zsdfa;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string out_dir;
    std::string data_dir;
    std::uint64_t seed = 1;
    bool seed_given = false;
    int threads = 0;
};

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
    try {
        return json::parse(read_file_bytes(path));
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
}

// Lightweight schema checks with JSON-pointer diagnostics.
void expect_int_at_least(const json& j, const std::string& pointer, int minimum) {
    const json& v = j.at(json::json_pointer(pointer));
    if (!v.is_number_integer() || v.get<int>() < minimum)
        throw ConfigError("config value at " + pointer + " must be an integer >= " +
                          std::to_string(minimum));
}

DatasetSplit split_from_config(const json& cfg) {
    DatasetSplit split;
    split.seen_families = {"gridgan", "meshgan", "huegan", "mistdiff", "dewdiff"};
    split.unseen_families = {"veildiff", "flickgan", "plaidflow"};
    if (!cfg.contains("dataset")) return split;
    const json& d = cfg.at("dataset");
    if (!d.contains("split")) return split;
    const json& s = d.at("split");
    if (s.contains("seen_families"))
        split.seen_families = s.at("seen_families").get<std::vector<std::string>>();
    if (s.contains("unseen_families"))
        split.unseen_families = s.at("unseen_families").get<std::vector<std::string>>();
    split.train_count = s.value("train_count", split.train_count);
    split.test_count = s.value("test_count", split.test_count);
    split.include_real = s.value("include_real", split.include_real);
    split.image_size = s.value("image_size", split.image_size);
    split.prompt_len = s.value("prompt_len", split.prompt_len);
    if (s.contains("train_count")) expect_int_at_least(cfg, "/dataset/split/train_count", 1);
    if (s.contains("test_count")) expect_int_at_least(cfg, "/dataset/split/test_count", 1);
    if (s.contains("image_size")) expect_int_at_least(cfg, "/dataset/split/image_size", 32);
    if (s.contains("prompt_len")) expect_int_at_least(cfg, "/dataset/split/prompt_len", 10);
    return split;
}

FamilyCatalogue catalogue_from_config(const json& cfg) {
    if (cfg.contains("dataset") && cfg.at("dataset").contains("families")) {
        std::vector<GeneratorFamily> fams;
        for (const auto& fj : cfg.at("dataset").at("families"))
            fams.push_back(family_from_json(fj));
        return FamilyCatalogue(std::move(fams));
    }
    return FamilyCatalogue::builtin();
}

EncoderConfig model_from_config(const json& cfg) {
    EncoderConfig base = EncoderConfig::desk_default();
    if (!cfg.contains("model")) return base;
    json merged = base.to_json();
    merged.update(cfg.at("model"));
    return EncoderConfig::from_json(merged);
}

TrainConfig train_from_config(const json& cfg, const GlobalArgs& args) {
    TrainConfig t = cfg.contains("train") ? TrainConfig::from_json(cfg.at("train"))
                                          : TrainConfig{};
    if (args.seed_given || !cfg.contains("train") || !cfg.at("train").contains("seed"))
        t.seed = args.seed;
    t.threads = effective_threads(args.threads);
    return t;
}

std::vector<double> thresholds_from_config(const json& cfg) {
    if (cfg.contains("eval") && cfg.at("eval").contains("thresholds"))
        return cfg.at("eval").at("thresholds").get<std::vector<double>>();
    return {0.7, 0.9};
}

CorruptionTables corruption_tables_from_config(const json& cfg) {
    CorruptionTables t;
    if (!cfg.contains("eval") || !cfg.at("eval").contains("corruptions")) return t;
    const json& c = cfg.at("eval").at("corruptions");
    auto load = [&c](const char* key, auto& table) {
        if (c.contains(key)) {
            table = c.at(key).get<std::decay_t<decltype(table)>>();
            if (table.size() != 6)
                throw ConfigError(std::string("/eval/corruptions/") + key +
                                  " must list exactly 6 severities");
        }
    };
    load("saturation", t.saturation);
    load("contrast", t.contrast);
    load("gaussian_sigma", t.gaussian_sigma);
    load("blur_sigma", t.blur_sigma);
    load("pixelate_block", t.pixelate_block);
    load("downscale_factor", t.downscale_factor);
    load("crop_fraction", t.crop_fraction);
    return t;
}

class PhaseTimer {
public:
    explicit PhaseTimer(RunManifest& manifest) : manifest_(manifest) {}
    template <typename F>
    auto run(const std::string& name, F&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(fn())>) {
            fn();
            manifest_.phase_seconds[name] = seconds_since(t0);
        } else {
            auto result = fn();
            manifest_.phase_seconds[name] = seconds_since(t0);
            return result;
        }
    }

private:
    static double seconds_since(std::chrono::steady_clock::time_point t0) {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    RunManifest& manifest_;
};

fs::path require_out_dir(const GlobalArgs& args) {
    if (args.out_dir.empty()) throw ConfigError("--out DIR is required");
    fs::create_directories(args.out_dir);
    return args.out_dir;
}

ModuleSet modules_for_eval(const json& checkpoint_extra) {
    ModuleSet m;
    if (checkpoint_extra.contains("modules")) {
        const json& j = checkpoint_extra.at("modules");
        m.appearance = j.value("appearance", true);
        m.noise = j.value("noise", true);
        m.edge = j.value("edge", true);
        m.parsing = j.value("parsing", true);
        m.language = j.value("language", true);
        m.mmi = j.value("mmi", true);
    }
    return m;
}

// ---------------------------------------------------------------------------
// build-data
// ---------------------------------------------------------------------------

int cmd_build_data(const GlobalArgs& args) {
    const auto t0 = std::chrono::steady_clock::now();
    const json cfg = load_config(args.config_path);
    const fs::path out = require_out_dir(args);

    const FamilyCatalogue catalogue = catalogue_from_config(cfg);
    const DatasetSplit split = split_from_config(cfg);
    const std::uint64_t seed =
        args.seed_given ? args.seed
                        : (cfg.contains("dataset") ? cfg.at("dataset").value("seed", args.seed)
                                                   : args.seed);

    RunManifest manifest;
    manifest.command = "build-data";
    manifest.seeds = {seed};
    PhaseTimer timer(manifest);

    DatasetMeta meta;
    meta.seed = seed;
    meta.split = split;
    meta.families = catalogue.families();
    meta.class_names = split.class_names();
    meta.vocab = Vocabulary::build(catalogue).words();
    meta.config_hash = hash_of_json(
        json{{"split", cfg.value("dataset", json::object())}, {"seed", seed}});
    manifest.config_hash = meta.config_hash;

    BuildStatus status = BuildStatus::Verified;
    if (fs::exists(out / "manifest.json")) {
        timer.run("verify", [&] { verify_dataset(out); });
    } else {
        const ProtocolData data = timer.run("generate", [&] {
            return build_protocol(catalogue, split, seed, effective_threads(args.threads));
        });
        status = timer.run("write", [&] { return write_dataset(out, data, meta); });
    }
    manifest.dataset_hash = dataset_manifest_hash(out);
    manifest.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    manifest.add_output(out, out / "manifest.json");
    manifest.write(out);

    std::cout << (status == BuildStatus::Written ? "written" : "verified") << " "
              << out.string() << " (" << manifest.dataset_hash.substr(0, 12) << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

void apply_ablate_preset(TrainConfig& cfg, const std::string& preset) {
    if (preset.empty() || preset == "full") return;
    if (preset == "dfa_only") {
        cfg.losses.use_dfacc = cfg.losses.use_cmc = cfg.losses.use_dcpc = cfg.losses.use_kl =
            false;
    } else if (preset == "no_dfacc") {
        cfg.losses.use_dfacc = false;
    } else if (preset == "no_cmc") {
        cfg.losses.use_cmc = false;
    } else if (preset == "no_dcpc") {
        cfg.losses.use_dcpc = false;
    } else if (preset == "no_kl") {
        cfg.losses.use_kl = false;
    } else {
        throw ConfigError("unknown --ablate preset '" + preset +
                          "' (expected full|dfa_only|no_dfacc|no_cmc|no_dcpc|no_kl)");
    }
}

int cmd_train(const GlobalArgs& args, const std::string& ablate_preset) {
    const auto t0 = std::chrono::steady_clock::now();
    const json cfg = load_config(args.config_path);
    if (args.data_dir.empty()) throw ConfigError("--data DIR is required");
    const fs::path out = require_out_dir(args);

    const LoadedDataset dataset = read_dataset(args.data_dir);
    TrainConfig train_cfg = train_from_config(cfg, args);
    apply_ablate_preset(train_cfg, ablate_preset);
    const EncoderConfig model_cfg = resolve_model_config(
        model_from_config(cfg), dataset.meta.split,
        static_cast<int>(dataset.meta.vocab.size()),
        static_cast<int>(dataset.meta.class_names.size()));

    RunManifest manifest;
    manifest.command = "train";
    manifest.seeds = {train_cfg.seed};
    manifest.dataset_hash = dataset_manifest_hash(args.data_dir);
    manifest.config_hash = hash_of_json(json{{"model", model_cfg.to_json()},
                                             {"train", train_cfg.to_json()},
                                             {"ablate", ablate_preset}});
    PhaseTimer timer(manifest);

    TrainResult result = timer.run("train", [&] {
        return train(model_cfg, dataset.data, train_cfg);
    });

    CheckpointMeta ckpt_meta;
    ckpt_meta.class_names = dataset.meta.class_names;
    ckpt_meta.seed = train_cfg.seed;
    ckpt_meta.extra = {{"modules", train_cfg.to_json().at("modules")},
                       {"dataset_hash", manifest.dataset_hash},
                       {"best_epoch", result.best_epoch},
                       {"best_seen_acc", result.best_seen_acc}};
    timer.run("write", [&] {
        save_checkpoint(out / "checkpoint.bin", result.params, ckpt_meta);
        save_checkpoint(out / "checkpoint_best.bin", result.best_params, ckpt_meta);
        write_file_bytes(out / "losses_steps.csv", result.step_csv);
        write_file_bytes(out / "losses_epochs.csv", result.epoch_csv);
    });

    manifest.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const char* f : {"checkpoint.bin", "checkpoint_best.bin", "losses_steps.csv",
                          "losses_epochs.csv"})
        manifest.add_output(out, out / f);
    manifest.write(out);

    std::cout << "trained " << result.steps << " steps; best seen ACC "
              << result.best_seen_acc << " at epoch " << result.best_epoch << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const GlobalArgs& args, const std::string& checkpoint_path, bool robustness,
             bool embed) {
    const auto t0 = std::chrono::steady_clock::now();
    const json cfg = load_config(args.config_path);
    if (checkpoint_path.empty()) throw ConfigError("--checkpoint PATH is required");
    if (!fs::exists(checkpoint_path))
        throw ConfigError("checkpoint not found: " + checkpoint_path);
    if (args.data_dir.empty()) throw ConfigError("--data DIR is required");
    const fs::path out = require_out_dir(args);

    const LoadedDataset dataset = read_dataset(args.data_dir);
    const LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
    if (ckpt.params.config.image_size != dataset.meta.split.image_size ||
        ckpt.params.config.prompt_len != dataset.meta.split.prompt_len ||
        ckpt.meta.class_names != dataset.meta.class_names)
        throw CompatError(
            "checkpoint geometry does not match the dataset: checkpoint expects " +
            std::to_string(ckpt.params.config.image_size) + "px images and classes [" +
            [&] {
                std::string s;
                for (const auto& c : ckpt.meta.class_names) s += c + " ";
                return s;
            }() +
            "], dataset provides " + std::to_string(dataset.meta.split.image_size) +
            "px and classes [" +
            [&] {
                std::string s;
                for (const auto& c : dataset.meta.class_names) s += c + " ";
                return s;
            }() +
            "]");

    const std::vector<double> thresholds = thresholds_from_config(cfg);
    const ModuleSet modules = modules_for_eval(ckpt.meta.extra);
    const int threads = effective_threads(args.threads);

    RunManifest manifest;
    manifest.command = "eval";
    manifest.seeds = {ckpt.meta.seed};
    manifest.dataset_hash = dataset_manifest_hash(args.data_dir);
    manifest.config_hash = hash_of_json(json{{"thresholds", thresholds},
                                             {"robustness", robustness},
                                             {"embed", embed}});
    PhaseTimer timer(manifest);

    const EvalReport report = timer.run("evaluate", [&] {
        return evaluate(ckpt.params, dataset.data.test, dataset.meta.class_names, thresholds,
                        modules, threads);
    });
    write_file_bytes(out / "eval_report.json", report.to_json().dump(2) + "\n");
    write_file_bytes(out / "eval_report.csv", report.to_csv());
    std::vector<std::string> output_files = {"eval_report.json", "eval_report.csv"};
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        char name[48];
        std::snprintf(name, sizeof name, "confusion_%.2f.csv", thresholds[t]);
        write_file_bytes(out / name, report.confusion_csv(t));
        output_files.push_back(name);
    }

    if (robustness) {
        const CorruptionTables tables = corruption_tables_from_config(cfg);
        const auto cells = timer.run("robustness", [&] {
            return robustness_sweep(ckpt.params, dataset.data.test, dataset.meta.class_names,
                                    thresholds, all_corruptions(), modules, threads, tables);
        });
        write_file_bytes(out / "robustness.csv", robustness_csv(cells, thresholds));
        output_files.push_back("robustness.csv");
    }
    if (embed) {
        const auto points = timer.run("embed", [&] {
            return pca_embedding_export(ckpt.params, dataset.data.test, modules, threads);
        });
        write_file_bytes(out / "embedding_pca.csv", embedding_csv(points));
        output_files.push_back("embedding_pca.csv");
    }

    manifest.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& f : output_files) manifest.add_output(out, out / f);
    manifest.write(out);

    std::cout << "seen ACC " << report.seen_acc;
    for (std::size_t t = 0; t < thresholds.size(); ++t)
        std::cout << "; unseen ACC@" << thresholds[t] << " " << report.unseen_acc[t];
    std::cout << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

int cmd_ablate(const GlobalArgs& args) {
    const auto t0 = std::chrono::steady_clock::now();
    const json cfg = load_config(args.config_path);
    if (args.data_dir.empty()) throw ConfigError("--data DIR is required");
    const fs::path out = require_out_dir(args);

    const LoadedDataset dataset = read_dataset(args.data_dir);
    TrainConfig base = train_from_config(cfg, args);
    const EncoderConfig model_cfg = resolve_model_config(
        model_from_config(cfg), dataset.meta.split,
        static_cast<int>(dataset.meta.vocab.size()),
        static_cast<int>(dataset.meta.class_names.size()));
    const std::vector<double> thresholds = thresholds_from_config(cfg);

    const json ab = cfg.value("ablation", json::object());
    const auto grids = ab.value("grids", std::vector<std::string>{});
    if (grids.empty())
        throw ConfigError("ablation config lists no grids (expected a non-empty "
                          "/ablation/grids array of modules|losses|lambda|margin)");
    std::vector<std::uint64_t> seeds =
        ab.value("seeds", std::vector<std::uint64_t>{1, 2, 3});

    std::vector<AblationRun> runs;
    for (const auto& g : grids) {
        std::vector<AblationRun> part;
        if (g == "modules") part = module_grid(base.losses);
        else if (g == "losses") part = loss_grid(base.losses);
        else if (g == "lambda") {
            const auto lambdas = ab.value("lambdas", std::vector<double>{0.0, 0.3, 0.5, 0.7});
            part = lambda_grid(base.losses, lambdas);
        } else if (g == "margin") {
            const auto margins = ab.value("margins", std::vector<double>{0.5, 0.7, 0.9});
            part = margin_grid(base.losses, margins);
        } else {
            throw ConfigError("unknown ablation grid '" + g + "'");
        }
        for (auto& r : part) {
            r.name = g + ":" + r.name;
            runs.push_back(std::move(r));
        }
    }

    RunManifest manifest;
    manifest.command = "ablate";
    manifest.seeds = seeds;
    manifest.dataset_hash = dataset_manifest_hash(args.data_dir);
    manifest.config_hash = hash_of_json(json{{"ablation", ab}, {"train", base.to_json()}});
    PhaseTimer timer(manifest);

    const AblationResults results = timer.run("ablate", [&] {
        return run_ablation(model_cfg, dataset.data, base, runs, seeds, thresholds,
                            effective_threads(args.threads));
    });
    write_file_bytes(out / "ablation_results.csv", results.csv());
    write_file_bytes(out / "ablation_summary.md", results.markdown());

    manifest.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    manifest.add_output(out, out / "ablation_results.csv");
    manifest.add_output(out, out / "ablation_summary.md");
    manifest.write(out);

    std::cout << "ablation complete: " << runs.size() << " configurations x " << seeds.size()
              << " seeds\n";
    return 0;
}

int cmd_verify(const GlobalArgs& args) {
    if (args.out_dir.empty()) throw ConfigError("--out DIR is required");
    RunManifest::verify(args.out_dir);
    std::cout << "verified " << args.out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"zero-shot deepfake attribution laboratory"};
    app.require_subcommand(1);

    GlobalArgs args;
    app.add_option("--config", args.config_path, "JSON config file")->capture_default_str();
    app.add_option("--seed", args.seed, "master seed")
        ->each([&args](const std::string&) { args.seed_given = true; });
    app.add_option("--out", args.out_dir, "output directory");
    app.add_option("--threads", args.threads, "worker threads (0 = all cores)");

    auto* build = app.add_subcommand("build-data", "render the synthetic dataset");
    build->fallthrough();
    auto* train_cmd = app.add_subcommand("train", "train an attribution model");
    train_cmd->fallthrough();
    std::string ablate_preset, checkpoint_path;
    train_cmd->add_option("--data", args.data_dir, "dataset directory");
    train_cmd->add_option("--ablate", ablate_preset,
                          "loss preset: full|dfa_only|no_dfacc|no_cmc|no_dcpc|no_kl");
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->fallthrough();
    eval_cmd->add_option("--data", args.data_dir, "dataset directory");
    eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file");
    bool robustness = false, embed = false;
    eval_cmd->add_flag("--robustness", robustness, "run the corruption sweep");
    eval_cmd->add_flag("--embed", embed, "export 2-d PCA of visual embeddings");
    auto* ablate_cmd = app.add_subcommand("ablate", "run the ablation grid");
    ablate_cmd->fallthrough();
    ablate_cmd->add_option("--data", args.data_dir, "dataset directory");
    auto* verify_cmd = app.add_subcommand("verify", "re-check run manifest checksums");
    verify_cmd->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        if (build->parsed()) return cmd_build_data(args);
        if (train_cmd->parsed()) return cmd_train(args, ablate_preset);
        if (eval_cmd->parsed()) return cmd_eval(args, checkpoint_path, robustness, embed);
        if (ablate_cmd->parsed()) return cmd_ablate(args);
        if (verify_cmd->parsed()) return cmd_verify(args);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ContractError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const CompatError& e) {
        std::cerr << "compatibility error: " << e.what() << "\n";
        return 5;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
