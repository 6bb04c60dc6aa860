#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "miniprune/dataio.hpp"
#include "miniprune/error.hpp"
#include "miniprune/evalkit.hpp"
#include "miniprune/pruner.hpp"
#include "miniprune/recovery.hpp"
#include "run_config.hpp"

namespace miniprune::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
    std::string config_file;
    std::vector<std::string> overrides;
};

struct Io {
    std::ostream& out;
    std::ostream& err;
};

std::string num(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

Corpus open_corpus(const json& config) {
    const std::string path = config.at("data").at("corpus_path").get<std::string>();
    if (path.empty()) throw InputError("data.corpus_path is not set");
    if (!fs::is_regular_file(path)) throw InputError("corpus '" + path + "' does not exist");
    return load_corpus(path, config.at("data").at("split").get<double>());
}

void write_config_copy(const json& config, const fs::path& out_dir) {
    write_text_atomic(out_dir / "config.json", config.dump(2) + "\n");
}

void write_jsonl(const fs::path& file, const std::vector<json>& lines) {
    std::string text;
    for (const auto& l : lines) text += l.dump() + "\n";
    write_text_atomic(file, text);
}

int eval_context(const json& config, const ModelConfig& model) {
    const int ctx = config.at("eval").at("context_length").get<int>();
    if (ctx > model.max_seq_len)
        throw ConfigError("eval.context_length " + std::to_string(ctx) + " exceeds the model's max_seq_len " +
                          std::to_string(model.max_seq_len));
    return ctx;
}

PplResult validation_ppl(const ModelCheckpoint& ckpt, const Corpus& corpus, const json& config) {
    return perplexity(ckpt, corpus.validation(), eval_context(config, ckpt.config),
                      config.at("eval").at("max_windows").get<std::int64_t>());
}

struct Calibration {
    TokenBatch grad;
    TokenBatch act;
};

Calibration calibration(const Corpus& corpus, const json& config) {
    const json& p = config.at("prune");
    const SeedStreams s = derive_seed_streams(p.at("seed").get<std::uint64_t>());
    const int len = p.at("calib_len").get<int>();
    return {sample_windows(corpus.train(), p.at("grad_samples").get<int>(), len, s.calib_grad),
            sample_windows(corpus.train(), p.at("act_samples").get<int>(), len, s.calib_act)};
}

json structure_summary(const ModelConfig& c) {
    json layers = json::array();
    for (int l = 0; l < c.n_layers; ++l) layers.push_back({{"layer", l}, {"heads", c.heads(l)}, {"d_ff", c.ffn_dim(l)}});
    return layers;
}

int cmd_pretrain(const json& config, const fs::path& out_dir, Io io) {
    const Corpus corpus = open_corpus(config);
    const ModelConfig mc = model_config(config);
    if (mc.vocab_size < corpus.vocab_size)
        throw ConfigError("model.vocab_size " + std::to_string(mc.vocab_size) + " is smaller than the corpus vocabulary");
    const TrainConfig tc = pretrain_config(config);
    if (tc.seq_len + 1 > mc.max_seq_len)
        throw ConfigError("pretrain.seq_len + 1 exceeds model.max_seq_len");
    ModelCheckpoint ckpt = init_checkpoint(mc, config.at("model").at("init_seed").get<std::uint64_t>());
    const int log_every = std::max(1, config.at("pretrain").at("log_every").get<int>());
    std::vector<json> log;
    const auto t0 = std::chrono::steady_clock::now();
    const TrainLog result = train_full(ckpt, corpus.train(), tc, [&](std::int64_t step, double loss, double lr) {
        if (step % log_every == 0 || step + 1 == tc.max_steps) {
            log.push_back({{"step", step}, {"loss", loss}, {"lr", lr}});
            io.err << "step " << step << " loss " << num(loss) << " lr " << lr << "\n";
        }
    });
    const PplResult ppl = validation_ppl(ckpt, corpus, config);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_checkpoint(ckpt, out_dir);
    write_jsonl(out_dir / "train_log.jsonl", log);
    write_text_atomic(out_dir / "eval.json",
                      json{{"validation_ppl", ppl.perplexity}, {"validation_nll", ppl.mean_nll}, {"windows", ppl.windows},
                           {"steps", result.steps}, {"final_loss", result.loss.back()}, {"wall_time_s", secs}}
                              .dump(2) + "\n");
    write_config_copy(config, out_dir);
    io.out << "pretrained " << ckpt.param_count() << " parameters for " << result.steps << " steps; validation PPL "
           << num(ppl.perplexity) << "\n";
    return kExitOk;
}

int cmd_prune(const json& config, const fs::path& model_path, const fs::path& out_dir, bool dump_scores, Io io) {
    const ModelCheckpoint ckpt = load_checkpoint(model_path);
    const Corpus corpus = open_corpus(config);
    MiniLlmOptions opt = prune_options(config, ckpt.config);
    opt.keep_scores = dump_scores || config.at("prune").at("dump_scores").get<bool>();
    const Calibration cal = calibration(corpus, config);
    MiniLlmResult res = run_minillm(ckpt, cal.grad, cal.act, opt);

    const int ctx = eval_context(config, ckpt.config);
    const ParamMacCount before = count_params_macs(ckpt.config, ctx), after = count_params_macs(res.pruned.config, ctx);
    const PrunableCount pb = count_prunable(ckpt.config), pa = count_prunable(res.pruned.config);
    const double removed_all = 1.0 - static_cast<double>(after.params) / static_cast<double>(before.params);
    const double removed_prunable = 1.0 - static_cast<double>(pa.prunable) / static_cast<double>(pb.prunable);

    std::vector<json> log;
    for (const auto& line : res.log) log.push_back(json::parse(line));
    log.push_back({{"stage", "summary"},
                   {"params_before", before.params},
                   {"params_after", after.params},
                   {"macs_before", before.macs},
                   {"macs_after", after.macs},
                   {"removed_all", removed_all},
                   {"removed_prunable", removed_prunable},
                   {"layers", structure_summary(res.pruned.config)}});

    save_checkpoint(res.pruned, out_dir);
    save_plan(res.plan, out_dir / "plan.json");
    write_jsonl(out_dir / "prune_log.jsonl", log);
    if (res.scores) save_scores(*res.scores, out_dir);
    write_config_copy(config, out_dir);

    io.out << "criterion " << to_string(opt.criterion) << ", ratio " << opt.ratio << "\n";
    for (int l = 0; l < res.pruned.config.n_layers; ++l)
        io.out << "  layer " << l << ": heads " << res.pruned.config.heads(l) << "/" << ckpt.config.heads(l)
               << ", ffn " << res.pruned.config.ffn_dim(l) << "/" << ckpt.config.ffn_dim(l)
               << (res.plan.protected_layers.contains(l) ? " (protected)" : "") << "\n";
    io.out << "params " << before.params << " -> " << after.params << " (" << num(100.0 * removed_all, 2)
           << "% of all, " << num(100.0 * removed_prunable, 2) << "% of attention+FFN)\n";
    io.out << "MACs@" << ctx << " " << before.macs << " -> " << after.macs << "\n";
    return kExitOk;
}

int cmd_recover(const json& config, const fs::path& model_path, const fs::path& out_dir, Io io) {
    const ModelCheckpoint ckpt = load_checkpoint(model_path);
    const Corpus corpus = open_corpus(config);
    const TrainConfig tc = recover_config(config);
    if (tc.seq_len + 1 > ckpt.config.max_seq_len) throw ConfigError("recover.seq_len + 1 exceeds model.max_seq_len");
    std::vector<std::string> targets = config.at("recover").at("targets").get<std::vector<std::string>>();
    if (targets.empty()) targets = default_lora_targets(ckpt.config);
    AdapterSet adapters = attach_lora(ckpt, targets, lora_options(config));
    const PplResult before = validation_ppl(ckpt, corpus, config);
    std::vector<json> log;
    const std::int64_t total = planned_steps(tc, corpus.train());
    const TrainLog tl = train_recovery(ckpt, adapters, corpus.train(), tc, [&](std::int64_t step, double loss, double lr) {
        log.push_back({{"step", step}, {"loss", loss}, {"lr", lr}});
        if (step % 10 == 0 || step + 1 == total) io.err << "step " << step << " loss " << num(loss) << "\n";
    });
    const AdapterSet trained = adapters;
    const ModelCheckpoint merged = merge_lora(ckpt, adapters);
    const PplResult after = validation_ppl(merged, corpus, config);

    save_checkpoint(merged, out_dir);
    save_adapters(trained, out_dir / "adapters");
    write_jsonl(out_dir / "train_log.jsonl", log);
    write_text_atomic(out_dir / "recover.json", json{{"steps", tl.steps},
                                                     {"adapter_params", trained.param_count()},
                                                     {"ppl_before", before.perplexity},
                                                     {"ppl_after", after.perplexity},
                                                     {"nll_before", before.mean_nll},
                                                     {"nll_after", after.mean_nll}}
                                                        .dump(2) + "\n");
    write_config_copy(config, out_dir);
    io.out << "recovered with " << tl.steps << " " << to_string(tc.optimizer) << " steps; validation PPL "
           << num(before.perplexity) << " -> " << num(after.perplexity) << "\n";
    return kExitOk;
}

int cmd_eval(const json& config, const fs::path& model_path, const std::string& out_dir, Io io) {
    const ModelCheckpoint ckpt = load_checkpoint(model_path);
    const Corpus corpus = open_corpus(config);
    const EvalReport report =
        evaluate(ckpt, corpus.validation(), eval_context(config, ckpt.config),
                 config.at("eval").at("max_windows").get<std::int64_t>(), model_path.string(), corpus.source + ":validation");
    if (!out_dir.empty()) write_text_atomic(fs::path(out_dir) / "eval.json", report.to_json().dump(2) + "\n");
    io.out << report.to_json().dump(2) << "\n";
    return kExitOk;
}

int worker_threads() {
    const char* env = std::getenv("MINIPRUNE_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError(std::string("MINIPRUNE_THREADS must be a positive integer, got '") + env + "'");
    return static_cast<int>(v);
}

int cmd_compare(const json& config, const fs::path& model_path, const fs::path& out_dir, Io io) {
    const ModelCheckpoint ckpt = load_checkpoint(model_path);
    const Corpus corpus = open_corpus(config);
    CompareSpec spec = compare_spec(config, ckpt.config);
    spec.threads = worker_threads();
    eval_context(config, ckpt.config);
    const CompareReport report = compare_criteria(ckpt, corpus, spec);
    write_text_atomic(out_dir / "report.jsonl", report.to_jsonl());
    write_text_atomic(out_dir / "report.txt", report.to_text());
    write_config_copy(config, out_dir);
    io.out << report.to_text();
    return kExitOk;
}

struct SimilarityTotals {
    std::size_t common = 0;
    std::size_t reference = 0;
};

void print_plan(const PrunePlan& plan, const std::string& label, std::ostream& out) {
    out << label << ": ratio " << plan.ratio << ", scope " << plan.scope;
    if (plan.meta.contains("criterion")) out << ", criterion " << plan.meta.at("criterion");
    out << "\n";
    for (const auto& [key, e] : plan.layers)
        out << "  layer " << key.first << " " << to_string(key.second) << ": keep " << e.retained.size() << "/"
            << e.total << (plan.protected_layers.contains(key.first) ? " (protected)" : "") << "\n";
}

int cmd_inspect(const json& config, const std::vector<std::string>& plans, const std::string& model_path,
                const std::string& dump_dir, Io io) {
    if (plans.empty() && model_path.empty()) throw InputError("inspect needs --plan and/or --model");
    std::vector<PrunePlan> loaded;
    for (std::size_t i = 0; i < plans.size(); ++i) {
        loaded.push_back(load_plan(plans[i]));
        print_plan(loaded.back(), "plan " + plans[i], io.out);
    }
    if (loaded.size() == 2) {
        const PrunePlan& a = loaded[0];
        const PrunePlan& b = loaded[1];
        for (GroupKind kind : {GroupKind::kFfnChannel, GroupKind::kAttentionHead}) {
            SimilarityTotals pruned_tot, kept_tot;
            for (const auto& [key, ea] : a.layers) {
                if (key.second != kind) continue;
                auto it = b.layers.find(key);
                if (it == b.layers.end() || it->second.total != ea.total)
                    throw ConsistencyError("plans disagree on layer " + std::to_string(key.first) + " " + to_string(kind));
                const auto pa = a.pruned(key.first, kind), pb = b.pruned(key.first, kind);
                const std::set<int> sa(pa.begin(), pa.end()), sb(pb.begin(), pb.end());
                const std::set<int> ka(ea.retained.begin(), ea.retained.end());
                const std::set<int> kb(it->second.retained.begin(), it->second.retained.end());
                for (int x : sa) pruned_tot.common += sb.contains(x) ? 1 : 0;
                pruned_tot.reference += sa.size();
                for (int x : ka) kept_tot.common += kb.contains(x) ? 1 : 0;
                kept_tot.reference += ka.size();
                if (!sa.empty())
                    io.out << "  layer " << key.first << " " << to_string(kind) << " pruned-set similarity "
                           << num(channel_similarity(sa, sb), 2) << "%\n";
            }
            io.out << to_string(kind) << " similarity (pruned sets): "
                   << (pruned_tot.reference ? num(100.0 * pruned_tot.common / pruned_tot.reference, 2) + "%" : "n/a (nothing pruned)")
                   << "\n";
            io.out << to_string(kind) << " similarity (retained sets): "
                   << num(100.0 * kept_tot.common / std::max<std::size_t>(1, kept_tot.reference), 2) << "%\n";
        }
    } else if (loaded.size() > 2) {
        throw InputError("inspect compares at most two plans");
    }
    if (!model_path.empty()) {
        const ModelCheckpoint ckpt = load_checkpoint(model_path);
        const int ctx = std::min(config.at("eval").at("context_length").get<int>(), ckpt.config.max_seq_len);
        const ParamMacCount pm = count_params_macs(ckpt.config, ctx);
        const PrunableCount pc = count_prunable(ckpt.config);
        io.out << "model " << model_path << "\n  config " << config_to_json(ckpt.config).dump() << "\n  params "
               << pm.params << " (attention+FFN " << pc.prunable << "), MACs@" << ctx << " " << pm.macs << "\n";
        if (!dump_dir.empty()) {
            const Criterion crit = criterion_from_string(config.at("prune").at("criterion").get<std::string>());
            MiniLlmOptions opt = prune_options(config, ckpt.config);
            opt.keep_scores = true;
            opt.ratio = 0.0;
            TokenBatch grad, act;
            if (needs_bp_gradient(crit) || needs_zo_gradient(crit) || needs_activations(crit)) {
                const Corpus corpus = open_corpus(config);
                Calibration cal = calibration(corpus, config);
                grad = std::move(cal.grad);
                act = std::move(cal.act);
            }
            MiniLlmResult res = run_minillm(ckpt, grad, act, opt);
            save_scores(*res.scores, dump_dir);
            io.out << "wrote " << to_string(crit) << " scores to " << dump_dir << "\n";
        }
    } else if (!dump_dir.empty()) {
        throw InputError("--dump-scores requires --model");
    }
    return kExitOk;
}

int cmd_synth_corpus(const std::string& out_file, std::size_t bytes, std::uint64_t seed, Io io) {
    if (bytes == 0) throw ConfigError("--bytes must be positive");
    write_text_atomic(out_file, synthesize_corpus(seed, bytes));
    io.out << "wrote " << bytes << " bytes to " << out_file << "\n";
    return kExitOk;
}

void add_common(CLI::App* sub, Common& common) {
    sub->add_option("-c,--config", common.config_file, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--set", common.overrides, "Override a config key, e.g. --set prune.ratio=0.3");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Io io{out, err};
    CLI::App app{"Structured pruning toolkit for small decoder language models", "miniprune"};
    app.require_subcommand(1);
    Common common;
    std::string model, out_dir;
    bool dump_scores = false;
    std::vector<std::string> plans;
    std::string inspect_model, inspect_dump;
    std::size_t synth_bytes = 1u << 20;
    std::uint64_t synth_seed = 0;

    auto* pretrain = app.add_subcommand("pretrain", "Train a toy dense model on a byte corpus");
    add_common(pretrain, common);
    pretrain->add_option("-o,--out", out_dir, "Output directory")->required();

    auto* prune = app.add_subcommand("prune", "One-shot structured pruning of a checkpoint");
    add_common(prune, common);
    prune->add_option("-m,--model", model, "Input checkpoint (directory or model.json)")->required();
    prune->add_option("-o,--out", out_dir, "Output directory")->required();
    prune->add_flag("--dump-scores", dump_scores, "Also write the per-weight score dump");

    auto* recover = app.add_subcommand("recover", "LoRA recovery fine-tuning and merge");
    add_common(recover, common);
    recover->add_option("-m,--model", model, "Pruned checkpoint")->required();
    recover->add_option("-o,--out", out_dir, "Output directory")->required();

    auto* eval = app.add_subcommand("eval", "Validation perplexity of a checkpoint");
    add_common(eval, common);
    eval->add_option("-m,--model", model, "Checkpoint")->required();
    eval->add_option("-o,--out", out_dir, "Optional directory for eval.json");

    auto* compare = app.add_subcommand("compare", "Criterion x ratio x seed grid");
    add_common(compare, common);
    compare->add_option("-m,--model", model, "Dense base checkpoint")->required();
    compare->add_option("-o,--out", out_dir, "Output directory")->required();

    auto* inspect = app.add_subcommand("inspect", "Summaries of plans, models and score dumps");
    add_common(inspect, common);
    inspect->add_option("-p,--plan", plans, "plan.json (give two to compare them)");
    inspect->add_option("-m,--model", inspect_model, "Checkpoint to summarize");
    inspect->add_option("--dump-scores", inspect_dump, "Write prune.criterion scores of --model to this directory");

    auto* synth = app.add_subcommand("synth-corpus", "Write a deterministic synthetic English-like corpus");
    synth->add_option("-o,--out", out_dir, "Output file")->required();
    synth->add_option("--bytes", synth_bytes, "Corpus size in bytes");
    synth->add_option("--seed", synth_seed, "Generator seed");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (synth->parsed()) return cmd_synth_corpus(out_dir, synth_bytes, synth_seed, io);
        const json config = load_run_config(common.config_file, common.overrides);
        if (pretrain->parsed()) return cmd_pretrain(config, out_dir, io);
        if (prune->parsed()) return cmd_prune(config, model, out_dir, dump_scores, io);
        if (recover->parsed()) return cmd_recover(config, model, out_dir, io);
        if (eval->parsed()) return cmd_eval(config, model, out_dir, io);
        if (compare->parsed()) return cmd_compare(config, model, out_dir, io);
        if (inspect->parsed()) return cmd_inspect(config, plans, inspect_model, inspect_dump, io);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return e.numerical() ? kExitNumerical : kExitUsage;
    } catch (const json::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

}  // namespace miniprune::cli
