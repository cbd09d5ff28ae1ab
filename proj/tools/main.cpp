// circuitedit command line: world generation, entrenchment pretraining,
// circuit localization, fact editing, evaluation and reporting. Thin wrapper
// over the C API; every stage writes its artifacts under a run root.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "circuitedit/circuitedit.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string default_run_root() {
    const char* env = std::getenv("CIRCUITEDIT_RUN_ROOT");
    return env && *env ? env : "runs";
}

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream f(path);
    if (!f) {
        std::cerr << "error: cannot open config file " << path << "\n";
        std::exit(2);
    }
    try {
        json j;
        f >> j;
        if (!j.is_object()) throw std::runtime_error("config root must be an object");
        return j;
    } catch (const std::exception& e) {
        std::cerr << "error: malformed config " << path << ": " << e.what() << "\n";
        std::exit(2);
    }
}

// Later objects win; nested objects merge key-wise (flags are merged last).
void merge_into(json& base, const json& overlay) {
    for (const auto& [key, value] : overlay.items()) {
        if (value.is_object() && base.contains(key) && base[key].is_object()) {
            merge_into(base[key], value);
        } else {
            base[key] = value;
        }
    }
}

void write_effective_config(const std::string& run_root, const std::string& command,
                            const json& effective) {
    std::error_code ec;
    fs::create_directories(run_root, ec);
    std::ofstream f(run_root + "/last_" + command + "_config.json");
    f << effective.dump(2) << "\n";
}

int fail_with(ce_status st, const std::string& hint) {
    std::cerr << "error: " << ce_last_error() << "\n";
    if (st == CE_ERR_PREREQUISITE && !hint.empty()) {
        std::cerr << "hint: " << hint << "\n";
    }
    return 1;
}

std::string take_string(char* s) {
    std::string out = s ? s : "";
    ce_string_free(s);
    return out;
}

// Tracks flag values alongside CLI11 options so only flags the user actually
// passed override the config file.
struct OptionBag {
    CLI::App* app;
    std::map<std::string, std::pair<CLI::Option*, double*>> doubles;
    std::map<std::string, std::pair<CLI::Option*, int64_t*>> ints;
    std::map<std::string, std::pair<CLI::Option*, bool*>> bools;

    explicit OptionBag(CLI::App* a) : app(a) {}

    void add_double(const std::string& flag, const std::string& key, double def,
                    const std::string& desc) {
        auto* slot = new double(def);
        doubles[key] = {app->add_option(flag, *slot, desc), slot};
    }
    void add_int(const std::string& flag, const std::string& key, int64_t def,
                 const std::string& desc) {
        auto* slot = new int64_t(def);
        ints[key] = {app->add_option(flag, *slot, desc), slot};
    }
    void add_bool(const std::string& flag, const std::string& key, const std::string& desc) {
        auto* slot = new bool(false);
        bools[key] = {app->add_flag(flag, *slot, desc), slot};
    }

    // Flags explicitly set on the command line, as a JSON object.
    json set_values() const {
        json out = json::object();
        for (const auto& [key, entry] : doubles) {
            if (entry.first->count() > 0) out[key] = *entry.second;
        }
        for (const auto& [key, entry] : ints) {
            if (entry.first->count() > 0) out[key] = *entry.second;
        }
        for (const auto& [key, entry] : bools) {
            if (entry.first->count() > 0) out[key] = *entry.second;
        }
        return out;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"circuitedit: mechanistically informed knowledge editing on a toy transformer"};
    app.require_subcommand(1);

    std::string run_root = default_run_root();
    std::string config_path;
    app.add_option("--run-root", run_root,
                   "artifact root (env CIRCUITEDIT_RUN_ROOT, default ./runs)");
    app.add_option("--config", config_path, "JSON config file; command-line flags win");

    // genworld ------------------------------------------------------------
    auto* genworld = app.add_subcommand("genworld", "generate the synthetic fact world");
    OptionBag world_opts(genworld);
    world_opts.add_int("--seed", "seed", 7, "world seed");
    world_opts.add_int("--entities", "n_entities", 48, "entity count");
    world_opts.add_int("--relations", "n_relations", 6, "relation count");
    world_opts.add_int("--facts", "n_facts", 160, "fact count");
    std::string world_out;
    genworld->add_option("--out", world_out, "world file (default <run-root>/world.jsonl)");

    // pretrain ------------------------------------------------------------
    auto* pretrain = app.add_subcommand("pretrain", "train the base model to the entrenchment gate");
    std::string pre_world, pre_out, precision = "f32";
    pretrain->add_option("--world", pre_world, "world file");
    pretrain->add_option("--out", pre_out, "checkpoint dir (default <run-root>/base)");
    pretrain->add_option("--precision", precision, "f32 (f64 is reserved for gradient tests)");
    CLI::App* pre_model = pretrain;  // model flags live on the same subcommand
    OptionBag model_opts(pre_model);
    model_opts.add_int("--layers", "n_layers", 4, "transformer layers");
    model_opts.add_int("--d-model", "d_model", 64, "model width");
    model_opts.add_int("--heads", "n_heads", 4, "attention heads");
    model_opts.add_int("--d-ff", "d_ff", 256, "MLP width");
    model_opts.add_int("--max-seq", "max_seq", 64, "maximum sequence length");
    model_opts.add_int("--model-seed", "seed", 7, "weight init seed");
    OptionBag pre_opts(pretrain);
    pre_opts.add_int("--max-steps", "max_steps", 5000, "budget");
    pre_opts.add_int("--min-steps", "min_steps", 3000, "entrenchment floor");
    pre_opts.add_int("--batch", "batch", 16, "batch size");
    pre_opts.add_double("--lr", "lr", 3e-3, "learning rate");
    pre_opts.add_int("--eval-every", "eval_every", 250, "gate check cadence");
    pre_opts.add_int("--oversample", "oversample", 5, "edit-fact oversampling factor");
    pre_opts.add_int("--seed", "seed", 7, "training seed");

    // localize ------------------------------------------------------------
    auto* localize = app.add_subcommand("localize", "run the four analyses and converge targets");
    std::string loc_ckpt, loc_world, loc_out;
    localize->add_option("--checkpoint", loc_ckpt, "base checkpoint (default <run-root>/base)");
    localize->add_option("--world", loc_world, "world file");
    localize->add_option("--out", loc_out, "report path (default <run-root>/localization.json)");
    OptionBag loc_opts(localize);
    loc_opts.add_int("--pairs", "n_pairs", 5, "paraphrase pairs to average");
    loc_opts.add_bool("--single-prompt", "single_prompt", "single clean/corrupted pair");
    loc_opts.add_double("--top-fraction", "top_fraction", 0.10, "convergence top fraction");
    loc_opts.add_int("--min-metrics", "min_metrics", 2, "metrics a module must rank in");

    // edit ----------------------------------------------------------------
    auto* edit = app.add_subcommand("edit", "apply an editing strategy to the base");
    std::string edit_strategy, edit_ckpt, edit_world, edit_targets, edit_out;
    edit->add_option("--strategy", edit_strategy,
                     "direct-lora | direct-ia3 | unlearn-then-learn | all")
        ->required();
    edit->add_option("--checkpoint", edit_ckpt, "base checkpoint (default <run-root>/base)");
    edit->add_option("--world", edit_world, "world file");
    edit->add_option("--targets", edit_targets,
                     "localization report, or 'all' (default <run-root>/localization.json)");
    edit->add_option("--out", edit_out, "output dir (default <run-root>/<strategy>)");
    OptionBag edit_opts(edit);
    edit_opts.add_int("--steps", "steps", 1000, "optimizer steps per stage");
    edit_opts.add_int("--batch", "batch", 1, "batch size");
    edit_opts.add_double("--lr", "lr", 2e-3, "adapter learning rate");
    edit_opts.add_double("--stop-loss", "stop_loss", 0.08, "convergence stop (0 disables)");
    edit_opts.add_int("--seed", "seed", 7, "training seed");
    edit_opts.add_int("--lora-rank", "lora_rank", 4, "LoRA rank");
    edit_opts.add_double("--lora-alpha", "lora_alpha", 8.0, "LoRA alpha");
    edit_opts.add_bool("--merge-final", "merge_final", "merge the stage-2 adapter for export");
    edit_opts.add_bool("--paper-hparams", "paper_hparams",
                       "steps 1000, batch 1, lr 5e-5, no convergence stop");

    // eval ----------------------------------------------------------------
    auto* evalc = app.add_subcommand("eval", "evaluate a model directory");
    std::string eval_model, eval_world, eval_out, eval_decode;
    evalc->add_option("--model", eval_model, "model dir (checkpoint or composite)")->required();
    evalc->add_option("--world", eval_world, "world file");
    evalc->add_option("--out", eval_out, "metrics dir (default <model>/../eval)");
    evalc->add_option("--decode", eval_decode, "greedy | sample");
    OptionBag eval_opts(evalc);
    eval_opts.add_bool("--paper-protocol", "paper_protocol",
                       "200 queries (20 paraphrases x 10) with temperature sampling");
    eval_opts.add_int("--repeat", "repeat_factor", 1, "paraphrase repeat factor");
    eval_opts.add_double("--temperature", "temperature", 0.7, "sampling temperature");
    eval_opts.add_int("--seed", "seed", 7, "sampling seed");
    eval_opts.add_int("--max-new", "max_new", 8, "max generated tokens");

    // report ---------------------------------------------------------------
    auto* report = app.add_subcommand("report", "render the three-strategy comparison table");

    CLI11_PARSE(app, argc, argv);

    json file_cfg = load_config_file(config_path);
    auto stage_cfg = [&](const std::string& stage, const json& flag_values) {
        json effective = file_cfg.value(stage, json::object());
        merge_into(effective, flag_values);
        return effective;
    };

    const std::string world_default = run_root + "/world.jsonl";

    if (genworld->parsed()) {
        json cfg = stage_cfg("world", world_opts.set_values());
        ce_world* world = nullptr;
        ce_status st = ce_world_generate(cfg.dump().c_str(), &world);
        if (st != CE_OK) return fail_with(st, "");
        const std::string out = world_out.empty() ? world_default : world_out;
        st = ce_world_save(world, out.c_str());
        if (st != CE_OK) {
            ce_world_free(world);
            return fail_with(st, "");
        }
        char* info = nullptr;
        ce_world_info(world, &info);
        json j = json::parse(take_string(info));
        ce_world_free(world);
        write_effective_config(run_root, "genworld", cfg);
        std::cout << "world: " << out << " (" << j["n_facts"] << " facts, vocab "
                  << j["vocab_size"] << ", edit " << j["edit"]["subject"].get<std::string>()
                  << " " << j["edit"]["relation"].get<std::string>() << ": "
                  << j["edit"]["f1"].get<std::string>() << " -> "
                  << j["edit"]["f2"].get<std::string>() << ")\n";
        return 0;
    }

    if (pretrain->parsed()) {
        if (precision != "f32") {
            std::cerr << "error: precision '" << precision
                      << "' is not supported for pipeline runs; the 64-bit mode exists for "
                         "gradient tests and checkpoints are stored as f32\n";
            return 2;
        }
        json cfg;
        cfg["model"] = stage_cfg("model", model_opts.set_values());
        cfg["pretrain"] = stage_cfg("pretrain", pre_opts.set_values());
        const std::string world = pre_world.empty() ? world_default : pre_world;
        const std::string out = pre_out.empty() ? run_root + "/base" : pre_out;
        char* summary = nullptr;
        ce_status st = ce_pretrain(world.c_str(), out.c_str(), cfg.dump().c_str(), &summary);
        if (st != CE_OK) return fail_with(st, "run `circuitedit genworld` first");
        json s = json::parse(take_string(summary));
        write_effective_config(run_root, "pretrain", cfg);
        std::cout << "base: " << out << " (gate passed at step " << s["steps_run"]
                  << ", f1 " << s["f1_accuracy"] << ", control " << s["control_accuracy"]
                  << ", heldout ppl " << s["heldout_perplexity"] << ")\n";
        return 0;
    }

    if (localize->parsed()) {
        json cfg = stage_cfg("localize", loc_opts.set_values());
        const std::string ckpt = loc_ckpt.empty() ? run_root + "/base" : loc_ckpt;
        const std::string world = loc_world.empty() ? world_default : loc_world;
        const std::string out = loc_out.empty() ? run_root + "/localization.json" : loc_out;
        char* summary = nullptr;
        ce_status st = ce_localize(ckpt.c_str(), world.c_str(), out.c_str(), cfg.dump().c_str(),
                                   &summary);
        if (st != CE_OK) return fail_with(st, "run `circuitedit pretrain` first");
        json s = json::parse(take_string(summary));
        write_effective_config(run_root, "localize", cfg);
        if (s["localization_failed"].get<bool>()) {
            std::cout << "localization failed to converge; edit with --targets all\n";
            return 1;
        }
        std::cout << "localization: " << out << " (converged on " << s["converged"].size()
                  << " modules:";
        for (const auto& m : s["converged"]) std::cout << " " << m.get<std::string>();
        std::cout << ")\n";
        return 0;
    }

    if (edit->parsed()) {
        json cfg = stage_cfg("edit", edit_opts.set_values());
        const std::string ckpt = edit_ckpt.empty() ? run_root + "/base" : edit_ckpt;
        const std::string world = edit_world.empty() ? world_default : edit_world;
        const std::string targets =
            edit_targets.empty() ? run_root + "/localization.json" : edit_targets;
        char* summary = nullptr;
        if (edit_strategy == "all") {
            json cmp_cfg;
            cmp_cfg["edit"] = cfg;
            cmp_cfg["eval"] = stage_cfg("eval", json::object());
            const std::string out = edit_out.empty() ? run_root : edit_out;
            ce_status st = ce_compare(ckpt.c_str(), world.c_str(), targets.c_str(), out.c_str(),
                                      cmp_cfg.dump().c_str(), &summary);
            if (st != CE_OK) return fail_with(st, "run `circuitedit localize` first");
            write_effective_config(run_root, "edit", cmp_cfg);
            json cmp = json::parse(take_string(summary));
            std::cout << "comparison written under " << out << " ("
                      << cmp["rows"].size() << " strategies)\n";
            return 0;
        }
        const std::string out = edit_out.empty() ? run_root + "/" + edit_strategy : edit_out;
        ce_status st = ce_edit(ckpt.c_str(), world.c_str(), edit_strategy.c_str(),
                               targets.c_str(), out.c_str(), cfg.dump().c_str(), &summary);
        if (st != CE_OK) {
            return fail_with(st, "run `circuitedit pretrain` and `circuitedit localize` first");
        }
        json s = json::parse(take_string(summary));
        write_effective_config(run_root, "edit", cfg);
        std::cout << "edited model: " << s["model_dir"].get<std::string>() << " (strategy "
                  << edit_strategy << ")\n";
        return 0;
    }

    if (evalc->parsed()) {
        json cfg = stage_cfg("eval", eval_opts.set_values());
        if (!eval_decode.empty()) cfg["decode"] = eval_decode;
        const std::string world = eval_world.empty() ? world_default : eval_world;
        std::string out = eval_out;
        if (out.empty()) {
            out = (fs::path(eval_model).parent_path() / "eval").string();
            if (out == "/eval" || out == "eval") out = eval_model + "/eval";
        }
        char* summary = nullptr;
        ce_status st = ce_eval(eval_model.c_str(), world.c_str(), out.c_str(), cfg.dump().c_str(),
                               &summary);
        if (st != CE_OK) return fail_with(st, "run `circuitedit edit` first");
        json s = json::parse(take_string(summary));
        write_effective_config(run_root, "eval", cfg);
        std::cout << "metrics: " << out << "/metrics.json (f2 " << s["f2_accuracy"]
                  << ", forget " << s["f1_forget_rate"] << ", control "
                  << s["fcontrol_accuracy"] << ", ppl " << s["heldout_perplexity"] << ")\n";
        return 0;
    }

    if (report->parsed()) {
        char* table = nullptr;
        ce_status st = ce_report(run_root.c_str(), &table);
        if (st != CE_OK) {
            return fail_with(st, "run `circuitedit edit --strategy all` then `circuitedit eval` "
                                 "for each strategy first");
        }
        std::cout << take_string(table);
        return 0;
    }

    return 0;
}
