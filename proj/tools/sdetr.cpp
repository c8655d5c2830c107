// Command-line front end: dataset generation, training, evaluation,
// diversity reports and gradient checks.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "selfdetr/checkpoint.hpp"
#include "selfdetr/config.hpp"
#include "selfdetr/data.hpp"
#include "selfdetr/diversity.hpp"
#include "selfdetr/errors.hpp"
#include "selfdetr/eval.hpp"
#include "selfdetr/experiment.hpp"
#include "selfdetr/gradient_suite.hpp"

namespace fs = std::filesystem;
using namespace selfdetr;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kNumerical = 2;

// Relative output paths are placed under $SDETR_OUTPUT_ROOT when it is set.
fs::path output_path(const std::string& p) {
    fs::path path(p);
    if (path.is_absolute()) return path;
    if (const char* root = std::getenv("SDETR_OUTPUT_ROOT"); root && *root) return fs::path(root) / path;
    return path;
}

void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("cannot write " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

struct ConfigFlags {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::string feedback;  // "", "on", "off"
    bool no_encoder = false;
    bool no_decoder_sa = false;
    std::string dataset;
    std::string out;

    void add_base(CLI::App* app) {
        app->add_option("--config", config_path, "experiment config JSON");
        app->add_option("--set", overrides, "override a config key, e.g. --set model.num_queries=20");
        app->add_option("--seed", seed, "run seed");
    }
    void add_training(CLI::App* app) {
        app->add_option("--epochs", epochs, "number of training epochs");
        app->add_option("--feedback", feedback, "on: use configured lambdas; off: lambda_e = lambda_d = 0")
            ->check(CLI::IsMember({"on", "off"}));
        app->add_flag("--no-encoder", no_encoder, "drop the transformer encoder");
        app->add_flag("--no-decoder-sa", no_decoder_sa, "drop decoder self-attention");
    }

    ExperimentConfig resolve() const {
        json doc = config_path.empty() ? json(ExperimentConfig{}) : read_json(config_path);
        for (const auto& o : overrides) apply_override(doc, o);
        auto cfg = doc.get<ExperimentConfig>();
        if (seed) cfg.seed = *seed;
        if (epochs) cfg.epochs = *epochs;
        if (feedback == "off") cfg.loss.lambda_e = cfg.loss.lambda_d = 0.0;
        if (no_encoder) cfg.model.num_encoder_layers = 0;
        if (no_decoder_sa) cfg.model.decoder_self_attention = false;
        if (!dataset.empty()) cfg.dataset = dataset;
        if (!out.empty()) cfg.output_dir = out;
        cfg.validate();
        return cfg;
    }
};

void ensure_fresh_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw ValidationError(dir.string() + " exists and is not empty (use --force)");
    fs::create_directories(dir);
}

const std::vector<data::VideoSample>& split_of(const data::Dataset& ds, const std::string& split) {
    if (split == "train") return ds.train;
    if (split == "test") return ds.test;
    throw ConfigError("unknown split '" + split + "'");
}

void print_map(const eval::MapResult& m) {
    for (std::size_t i = 0; i < m.thresholds.size(); ++i) std::printf("  mAP@%.2f  %.4f\n", m.thresholds[i], m.map[i]);
    std::printf("  average   %.4f\n", m.average);
}

int cmd_gen_data(const ConfigFlags& flags, bool force) {
    const auto cfg = flags.resolve();
    auto synth = cfg.data;
    if (flags.seed) synth.seed = *flags.seed;
    const auto dir = output_path(flags.out.empty() ? "data" : flags.out);
    const auto ds = data::generate_synthetic(synth);
    data::write_dataset(dir, ds, {{"synth", synth}, {"config_hash", config_hash(cfg)}, {"seed", synth.seed}}, force);
    std::printf("wrote %zu train / %zu test videos to %s\n", ds.train.size(), ds.test.size(),
                (dir / "manifest.json").string().c_str());
    return kOk;
}

int cmd_train(ConfigFlags flags, const std::string& resume, bool force) {
    auto cfg = flags.resolve();
    const fs::path dir = output_path(cfg.output_dir);
    if (resume.empty()) ensure_fresh_dir(dir, force);
    fs::create_directories(dir / "checkpoints");
    const auto ds = resolve_dataset(cfg);
    Trainer trainer(cfg, ds.train);
    if (!resume.empty()) trainer.restore(load_checkpoint(resume));
    write_json(dir / "config.json", {{"config", cfg}, {"config_hash", trainer.hash()}, {"seed", cfg.seed}});

    const auto mode = resume.empty() ? std::ios::trunc : std::ios::app;
    std::ofstream metrics(dir / "metrics.jsonl", mode), steps(dir / "steps.jsonl", mode);
    std::printf("training %zu units, %zu epochs, config %s\n", trainer.unit_count(), cfg.epochs, trainer.hash().c_str());
    while (trainer.next_epoch() < cfg.epochs) {
        const auto rec = trainer.run(1, [&](std::size_t step, std::size_t epoch, const StepLosses& l) {
            json j = l;
            j["step"] = step;
            j["epoch"] = epoch;
            steps << j.dump() << '\n';
        })[0];
        metrics << rec.dump() << '\n' << std::flush;
        std::printf("epoch %3zu  L_total %.5f  L_DETR %.5f  L_fb_E %.5f  L_fb_D %.5f\n", rec["epoch"].get<std::size_t>(),
                    rec["L_total"].get<double>(), rec["L_DETR"].get<double>(), rec["L_fb_E"].get<double>(),
                    rec["L_fb_D"].get<double>());
        if (cfg.checkpoint_every && trainer.next_epoch() % cfg.checkpoint_every == 0 &&
            trainer.next_epoch() < cfg.epochs)
            save_checkpoint(dir / "checkpoints" / ("epoch_" + std::to_string(trainer.next_epoch()) + ".ckpt"),
                            trainer.checkpoint());
    }
    save_checkpoint(dir / "final.ckpt", trainer.checkpoint());
    std::printf("final checkpoint %s\n", (dir / "final.ckpt").string().c_str());
    return kOk;
}

struct LoadedRun {
    ExperimentConfig config;
    std::string hash;
    model::DetrModel model;
    data::Dataset dataset;
};

LoadedRun load_run(const std::string& checkpoint_path, const std::string& dataset_override,
                   const std::string& config_path) {
    const auto ck = load_checkpoint(checkpoint_path);
    ExperimentConfig cfg;
    auto m = model_from_checkpoint(ck, &cfg);
    if (!config_path.empty()) {
        const auto given = load_config(config_path);
        if (config_hash(given) != ck.config_hash)
            std::fprintf(stderr, "warning: config hash %s differs from checkpoint %s\n", config_hash(given).c_str(),
                         ck.config_hash.c_str());
        cfg.eval = given.eval;
        cfg.preprocess = given.preprocess;
    }
    if (!dataset_override.empty()) cfg.dataset = dataset_override;
    auto ds = resolve_dataset(cfg);
    if (ds.feature_dim != cfg.model.input_dim)
        throw ValidationError("dataset feature_dim " + std::to_string(ds.feature_dim) + " does not match model input_dim " +
                              std::to_string(cfg.model.input_dim));
    return {cfg, ck.config_hash, std::move(m), std::move(ds)};
}

int cmd_eval(const std::string& ckpt, const std::string& dataset, const std::string& config_path,
             const std::string& split, const std::vector<double>& thresholds, bool no_nms, const std::string& out,
             const std::string& results_out) {
    auto run = load_run(ckpt, dataset, config_path);
    if (!thresholds.empty()) run.config.eval.thresholds = thresholds;
    if (no_nms) run.config.eval.nms.enabled = false;
    const auto& videos = split_of(run.dataset, split);
    const auto ev = evaluate(run.model, videos, run.config);
    std::printf("%s split, %zu videos, config %s\n", split.c_str(), videos.size(), run.hash.c_str());
    print_map(ev.metrics);
    json metrics = ev.metrics;
    metrics["config_hash"] = run.hash;
    metrics["seed"] = run.config.seed;
    metrics["split"] = split;
    write_json(output_path(out), metrics);
    if (!results_out.empty()) write_json(output_path(results_out), eval::results_to_json(ev.results));
    return kOk;
}

int cmd_score(const std::string& results_path, const std::string& manifest, const std::string& split,
              const std::vector<double>& thresholds, const std::string& out) {
    const auto results = eval::results_from_json(read_json(results_path));
    const auto ds = data::load_dataset(manifest);
    const auto& videos = split_of(ds, split);
    const auto gts = ground_truths(videos);
    const auto m = thresholds.empty() ? eval::mean_ap(results, gts, ds.num_classes)
                                      : eval::mean_ap(results, gts, ds.num_classes, thresholds);
    print_map(m);
    if (!out.empty()) write_json(output_path(out), json(m));
    return kOk;
}

int cmd_diversity(const std::string& ckpt, const std::string& dataset, const std::string& split, std::size_t n,
                  std::uint64_t seed, const std::string& out, const std::string& export_dir) {
    auto run = load_run(ckpt, dataset, "");
    const auto& videos = split_of(run.dataset, split);
    const auto report = diversity::diversity_report(run.model, videos, n, seed, run.hash);
    json j = report;
    write_json(output_path(out), j);
    std::printf("diversity over %zu samples\n", report.sample_count);
    for (std::size_t l = 0; l < report.enc_self.size(); ++l) std::printf("  enc_self[%zu]  %.6f\n", l, report.enc_self[l]);
    for (std::size_t l = 0; l < report.dec_self.size(); ++l) std::printf("  dec_self[%zu]  %.6f\n", l, report.dec_self[l]);
    if (!export_dir.empty()) diversity::export_attention(run.model, videos.front(), output_path(export_dir));
    return kOk;
}

int cmd_grad_check(const std::string& scope, bool negative_control) {
    std::vector<gradcheck::CaseResult> rows;
    if (scope == "ops" || scope == "all") rows = gradcheck::check_operations();
    if (scope == "model" || scope == "all") rows.push_back(gradcheck::check_toy_model());
    bool ok = true;
    std::printf("%-28s %-12s %s\n", "case", "max_rel_err", "result");
    for (const auto& r : rows) {
        std::printf("%-28s %-12.3e %s\n", r.name.c_str(), r.max_rel_error, r.passed ? "pass" : "FAIL");
        ok = ok && r.passed;
    }
    if (negative_control) {
        const auto r = gradcheck::check_corrupted_adjoint();
        std::printf("%-28s %-12.3e %s (expected to fail)\n", r.name.c_str(), r.max_rel_error,
                    r.passed ? "pass" : "fail");
        ok = ok && !r.passed;
    }
    std::printf("%s\n", ok ? "all checks passed" : "gradient check FAILED");
    return ok ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-feedback DETR for temporal action detection on 1-D features"};
    app.require_subcommand(1);
    bool force = false;

    ConfigFlags gen_flags;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    gen_flags.add_base(gen);
    gen->add_option("--out", gen_flags.out, "output directory (default: data)");
    gen->add_flag("--force", force, "overwrite a non-empty output directory");

    ConfigFlags train_flags;
    std::string resume;
    auto* train = app.add_subcommand("train", "train a model");
    train_flags.add_base(train);
    train_flags.add_training(train);
    train->add_option("--data", train_flags.dataset, "dataset manifest (default: generate from config)");
    train->add_option("--out", train_flags.out, "run directory (overrides output_dir)");
    train->add_option("--resume", resume, "continue from a checkpoint");
    train->add_flag("--force", force, "reuse a non-empty run directory");

    std::string ckpt, dataset, config_path, split = "test", out = "metrics.json", results_out;
    std::vector<double> thresholds;
    bool no_nms = false;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--checkpoint", ckpt, "checkpoint file")->required();
    ev->add_option("--data", dataset, "dataset manifest (default: regenerate from checkpoint config)");
    ev->add_option("--config", config_path, "config whose eval/preprocess settings are used");
    ev->add_option("--split", split, "train or test");
    ev->add_option("--thresholds", thresholds, "tIoU thresholds");
    ev->add_flag("--no-nms", no_nms, "skip SoftNMS");
    ev->add_option("--out", out, "metrics JSON path");
    ev->add_option("--results", results_out, "also write per-video detections");

    std::string results_path, manifest, score_out;
    auto* score = app.add_subcommand("score", "score a results file against annotations");
    score->add_option("--results", results_path, "results JSON")->required();
    score->add_option("--data", manifest, "dataset manifest")->required();
    score->add_option("--split", split, "train or test");
    score->add_option("--thresholds", thresholds, "tIoU thresholds");
    score->add_option("--out", score_out, "metrics JSON path");

    std::size_t samples = 64;
    std::uint64_t div_seed = 0;
    std::string div_out = "diversity.json", export_dir;
    auto* div = app.add_subcommand("diversity", "per-layer self-attention diversity");
    div->add_option("--checkpoint", ckpt, "checkpoint file")->required();
    div->add_option("--data", dataset, "dataset manifest");
    div->add_option("--split", split, "train or test");
    div->add_option("-n,--samples", samples, "number of sampled videos");
    div->add_option("--seed", div_seed, "sampling seed");
    div->add_option("--out", div_out, "report JSON path");
    div->add_option("--export", export_dir, "write attention CSVs of the first video here");

    std::string scope = "all";
    bool negative = false;
    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient checks");
    gc->add_option("--scope", scope, "ops, model or all")->check(CLI::IsMember({"ops", "model", "all"}));
    gc->add_flag("--negative-control", negative, "also run a deliberately broken adjoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kValidation;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gen_flags, force);
        if (train->parsed()) return cmd_train(train_flags, resume, force);
        if (ev->parsed()) return cmd_eval(ckpt, dataset, config_path, split, thresholds, no_nms, out, results_out);
        if (score->parsed()) return cmd_score(results_path, manifest, split, thresholds, score_out);
        if (div->parsed()) return cmd_diversity(ckpt, dataset, split, samples, div_seed, div_out, export_dir);
        if (gc->parsed()) return cmd_grad_check(scope, negative);
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kNumerical;
    } catch (const DomainError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kNumerical;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kValidation;
    }
    return kValidation;
}
