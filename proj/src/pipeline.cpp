#include "pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace cedit {

const char* const kStrategyDirectLoRA = "direct-lora";
const char* const kStrategyDirectIA3 = "direct-ia3";
const char* const kStrategyUnlearnThenLearn = "unlearn-then-learn";

json PretrainOptions::to_json() const {
    return json{{"max_steps", max_steps}, {"min_steps", min_steps},
                {"batch", batch},         {"lr", lr},
                {"eval_every", eval_every}, {"f1_gate", f1_gate},
                {"control_gate", control_gate}, {"oversample", oversample},
                {"seed", seed}};
}

json EditOptions::to_json() const {
    return json{{"steps", steps},         {"batch", batch},
                {"lr", lr},               {"stop_loss", stop_loss},
                {"stop_window", stop_window},
                {"seed", seed},           {"lora_rank", lora_rank},
                {"lora_alpha", lora_alpha}, {"merge_final", merge_final}};
}

json GateMetrics::to_json() const {
    return json{{"f1_accuracy", f1_accuracy},
                {"control_accuracy", control_accuracy},
                {"heldout_perplexity", heldout_ppl},
                {"steps_run", steps_run},
                {"passed", passed}};
}

GateMetrics gate_eval(const Transformer& model, const FactWorld& world) {
    EvalOptions opts;
    QueryBattery battery = QueryBattery::build(world, 1);
    const Tokenizer& tok = world.tokenizer();
    GateMetrics gm;
    int f1_hits = 0;
    for (const auto& [para_idx, prompt] : battery.edit_prompts) {
        std::vector<int> gen = decode_tokens(model, prompt, tok.end_tag, opts, false, nullptr);
        int answer = -1;
        for (int t : gen) {
            if (t != tok.end_tag) {
                answer = t;
                break;
            }
        }
        f1_hits += answer == world.edit().f1_object ? 1 : 0;
    }
    gm.f1_accuracy = double(f1_hits) / double(battery.edit_prompts.size());
    gm.control_accuracy = eval_control(model, world, battery, opts, nullptr);
    gm.heldout_ppl = heldout_perplexity(model, battery.heldout);
    return gm;
}

GateMetrics pretrain_base(const FactWorld& world, ModelConfig mcfg, const PretrainOptions& opts,
                          const std::string& world_path, const std::string& out_dir) {
    mcfg.vocab_size = world.tokenizer().size();
    Transformer model(mcfg);
    PretrainData data = build_pretrain_dataset(world, opts.oversample);

    TrainOptions topts;
    topts.steps = opts.max_steps;
    topts.batch = opts.batch;
    topts.lr = opts.lr;
    topts.seed = opts.seed;
    Trainer trainer(model, model.all_params(), data.train, topts);

    GateMetrics gm;
    while (trainer.steps_done() < opts.max_steps) {
        trainer.step();
        const int s = trainer.steps_done();
        const bool at_budget = s == opts.max_steps;
        if (s >= opts.min_steps && (s % opts.eval_every == 0 || at_budget)) {
            gm = gate_eval(model, world);
            gm.steps_run = s;
            gm.passed = gm.f1_accuracy >= opts.f1_gate && gm.control_accuracy >= opts.control_gate;
            if (gm.passed) break;
        }
    }
    if (gm.steps_run == 0) {
        gm = gate_eval(model, world);
        gm.steps_run = trainer.steps_done();
        gm.passed = gm.f1_accuracy >= opts.f1_gate && gm.control_accuracy >= opts.control_gate;
    }

    json lineage;
    lineage["world"] = {{"path", world_path}, {"sha256", world_path.empty() ? "" : sha256_file_hex(world_path)}};
    lineage["parent"] = nullptr;
    json meta;
    meta["role"] = "pretrained_base";
    meta["pretrain_options"] = opts.to_json();
    meta["gate"] = gm.to_json();
    meta["train_examples"] = data.train.size();
    meta["heldout_statements"] = data.heldout.size();
    save_checkpoint(model, out_dir, lineage, meta);
    save_loss_curve(out_dir + "/loss_curve.csv", trainer.result());
    write_text_file(out_dir + "/gate.json", gm.to_json().dump(2) + "\n");

    if (!gm.passed) {
        fail(ErrorKind::gate,
             "entrenchment gate unmet at budget: f1_accuracy=" + std::to_string(gm.f1_accuracy) +
                 " control_accuracy=" + std::to_string(gm.control_accuracy) + " after " +
                 std::to_string(gm.steps_run) + " steps (artifacts in " + out_dir + ")");
    }
    return gm;
}

// ---------------------------------------------------------------------------
// Model directories
// ---------------------------------------------------------------------------

namespace {

std::string rel_to(const std::string& target, const std::string& base_dir) {
    std::error_code ec;
    fs::path rel = fs::relative(fs::absolute(target), fs::absolute(base_dir), ec);
    if (ec || rel.empty()) return fs::absolute(target).string();
    return rel.string();
}

void save_composite_model(const std::string& dir, const std::string& base_dir,
                          const std::vector<std::string>& adapter_dirs) {
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = "circuitedit-model";
    manifest["version"] = 1;
    manifest["base"] = rel_to(base_dir, dir);
    manifest["base_hash"] = artifact_hash(base_dir);
    json adapters = json::array();
    for (const auto& adir : adapter_dirs) {
        adapters.push_back({{"path", rel_to(adir, dir)}, {"hash", artifact_hash(adir)}});
    }
    manifest["adapters"] = adapters;
    write_text_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

std::string resolve_rel(const std::string& dir, const std::string& maybe_rel) {
    fs::path p(maybe_rel);
    if (p.is_absolute()) return p.string();
    return (fs::path(dir) / p).lexically_normal().string();
}

}  // namespace

LoadedModel load_model_dir(const std::string& dir) {
    json manifest = read_manifest(dir);
    const std::string format = manifest.value("format", "");
    if (format == "circuitedit-checkpoint") {
        return LoadedModel{load_checkpoint(dir), manifest, dir, {}};
    }
    if (format != "circuitedit-model") {
        fail(ErrorKind::format, "not a model directory: " + dir);
    }
    const std::string base_path = resolve_rel(dir, manifest.at("base"));
    const std::string base_hash = manifest.at("base_hash");
    if (artifact_hash(base_path) != base_hash) {
        fail(ErrorKind::prerequisite, "base checkpoint hash mismatch for " + dir +
                                          " (expected parent at " + base_path + ")");
    }
    LoadedModel lm{load_checkpoint(base_path), manifest, dir, {}};
    for (const auto& entry : manifest.at("adapters")) {
        const std::string apath = resolve_rel(dir, entry.at("path"));
        if (artifact_hash(apath) != entry.at("hash")) {
            fail(ErrorKind::prerequisite, "adapter hash mismatch for " + apath);
        }
        lm.adapters.push_back(load_adapter(apath));
        inject(lm.model, lm.adapters.back());
    }
    return lm;
}

// ---------------------------------------------------------------------------
// Edit strategies
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> effective_targets(const Transformer& model,
                                           const std::vector<std::string>& targets) {
    if (targets.empty()) return model.module_names();
    for (const auto& t : targets) {
        if (!model.is_module(t)) {
            fail(ErrorKind::invalid_argument, "edit target is not an adapter module: " + t);
        }
    }
    return targets;
}

json training_meta(const EditOptions& opts, const TrainResult& tr, uint64_t seed) {
    return json{{"steps", opts.steps}, {"batch", opts.batch}, {"lr", opts.lr},
                {"seed", seed},        {"final_loss", tr.final_loss}};
}

// Ten probe prompts for the merge-equivalence certificate: five edit
// paraphrases and five control queries.
std::vector<std::vector<int>> certificate_prompts(const FactWorld& world) {
    std::vector<std::vector<int>> prompts;
    for (int p = 0; p < 5; ++p) prompts.push_back(world.edit_query(p));
    for (int c = 0; c < 5; ++c) prompts.push_back(world.control_query(c));
    return prompts;
}

double refusal_rate(const Transformer& model, const FactWorld& world) {
    EvalOptions opts;
    const Tokenizer& tok = world.tokenizer();
    const int n = static_cast<int>(world.edit().paraphrase_ids.size());
    int refusals = 0;
    for (int p = 0; p < n; ++p) {
        std::vector<int> gen =
            decode_tokens(model, world.edit_query(p), tok.end_tag, opts, false, nullptr);
        const bool f1 = std::find(gen.begin(), gen.end(), world.edit().f1_object) != gen.end();
        const bool f2 = std::find(gen.begin(), gen.end(), world.edit().f2_object) != gen.end();
        refusals += (!f1 && !f2) ? 1 : 0;
    }
    return double(refusals) / double(n);
}

}  // namespace

EditRunResult run_edit(const std::string& base_dir, const FactWorld& world,
                       const std::string& strategy, const std::vector<std::string>& targets,
                       const EditOptions& opts, const std::string& out_dir) {
    if (strategy != kStrategyDirectLoRA && strategy != kStrategyDirectIA3 &&
        strategy != kStrategyUnlearnThenLearn) {
        fail(ErrorKind::invalid_argument, "unknown strategy '" + strategy + "'");
    }
    LoadedModel base = load_model_dir(base_dir);
    if (!base.adapters.empty()) {
        fail(ErrorKind::invalid_argument, "edit expects a plain base checkpoint");
    }
    Transformer& model = base.model;
    const std::vector<std::string> mods = effective_targets(model, targets);
    const std::string base_hash = artifact_hash(base_dir);
    auto [unlearn_set, learn_set] = build_edit_datasets(world);

    fs::create_directories(out_dir);
    json config;
    config["strategy"] = strategy;
    config["edit_options"] = opts.to_json();
    config["targets"] = mods;
    config["lineage"] = {{"base", rel_to(base_dir, out_dir)}, {"base_hash", base_hash}};
    write_text_file(out_dir + "/config.json", config.dump(2) + "\n");

    json run;
    run["strategy"] = strategy;
    run["base_hash"] = base_hash;
    run["targets"] = mods;
    run["hyperparameters"] = opts.to_json();

    TrainOptions topts;
    topts.steps = opts.steps;
    topts.batch = opts.batch;
    topts.lr = opts.lr;
    topts.stop_loss = opts.stop_loss;
    topts.stop_window = opts.stop_window;

    EditRunResult result;
    result.strategy = strategy;

    if (strategy == kStrategyDirectLoRA || strategy == kStrategyDirectIA3) {
        AdapterVariant adapter =
            strategy == kStrategyDirectLoRA
                ? AdapterVariant(LoRAAdapter::init(model, mods, opts.lora_rank,
                                                   float(opts.lora_alpha), mix_seed(opts.seed, 4)))
                : AdapterVariant(IA3Adapter::init(model, mods));
        InjectedAdapter inj = inject(model, adapter);
        topts.seed = mix_seed(opts.seed, 3);
        TrainResult tr = train_adapter(model, inj, learn_set, topts);
        if (auto* ia3 = std::get_if<IA3Adapter>(&adapter)) ia3->trained = true;
        if (auto* lora = std::get_if<LoRAAdapter>(&adapter)) lora->trained = true;
        save_loss_curve(out_dir + "/loss.csv", tr);
        save_adapter(adapter, out_dir + "/adapter", {{"parent", base_hash}},
                     training_meta(opts, tr, topts.seed));
        save_composite_model(out_dir + "/model", base_dir, {out_dir + "/adapter"});
        run["stages"] = json::array({json{{"name", "direct"},
                                          {"status", "done"},
                                          {"final_loss", tr.final_loss},
                                          {"adapter_hash", artifact_hash(out_dir + "/adapter")}}});
    } else {
        // Stage 1: refusal adapter on the base, then merge-and-unload.
        IA3Adapter stage1 = IA3Adapter::init(model, mods);
        InjectedAdapter inj1 = inject(model, stage1);
        topts.seed = mix_seed(opts.seed, 1);
        TrainResult tr1 = train_adapter(model, inj1, unlearn_set, topts);
        stage1.trained = true;
        save_loss_curve(out_dir + "/loss_stage1.csv", tr1);
        save_adapter(AdapterVariant(stage1), out_dir + "/stage1_adapter", {{"parent", base_hash}},
                     training_meta(opts, tr1, topts.seed));

        const auto probes = certificate_prompts(world);
        std::vector<TensorF> adapted_logits;
        for (const auto& prompt : probes) adapted_logits.push_back(model.forward(prompt));

        merge_and_unload(model, stage1);

        double max_diff = 0.0;
        for (size_t i = 0; i < probes.size(); ++i) {
            TensorF merged_logits = model.forward(probes[i]);
            for (int64_t j = 0; j < merged_logits.numel(); ++j) {
                max_diff = std::max(max_diff,
                                    std::abs(double(merged_logits.data()[size_t(j)]) -
                                             double(adapted_logits[i].data()[size_t(j)])));
            }
        }
        const double stage1_refusal = refusal_rate(model, world);

        json merged_lineage;
        merged_lineage["parent"] = base_hash;
        merged_lineage["stage1_adapter_hash"] = artifact_hash(out_dir + "/stage1_adapter");
        json merged_meta;
        merged_meta["role"] = "stage1_merged";
        merged_meta["merge_certificate"] = {{"max_logit_diff", max_diff},
                                            {"n_prompts", probes.size()}};
        merged_meta["refusal_rate"] = stage1_refusal;
        save_checkpoint(model, out_dir + "/merged", merged_lineage, merged_meta);
        const std::string merged_hash = artifact_hash(out_dir + "/merged");

        // Stage 2: fresh adapter learns the replacement fact on the merged base.
        IA3Adapter stage2 = IA3Adapter::init(model, mods);
        InjectedAdapter inj2 = inject(model, stage2);
        topts.seed = mix_seed(opts.seed, 2);
        TrainResult tr2 = train_adapter(model, inj2, learn_set, topts);
        stage2.trained = true;
        save_loss_curve(out_dir + "/loss_stage2.csv", tr2);
        save_adapter(AdapterVariant(stage2), out_dir + "/stage2_adapter",
                     {{"parent", merged_hash}}, training_meta(opts, tr2, topts.seed));

        if (opts.merge_final) {
            remove_adapter(model, inj2);
            merge_and_unload(model, stage2);
            json final_lineage;
            final_lineage["parent"] = merged_hash;
            final_lineage["stage2_adapter_hash"] = artifact_hash(out_dir + "/stage2_adapter");
            save_checkpoint(model, out_dir + "/model", final_lineage,
                            {{"role", "final_merged_export"}});
        } else {
            save_composite_model(out_dir + "/model", out_dir + "/merged",
                                 {out_dir + "/stage2_adapter"});
        }

        run["stages"] = json::array(
            {json{{"name", "stage1_unlearn"},
                  {"status", "done"},
                  {"final_loss", tr1.final_loss},
                  {"refusal_rate", stage1_refusal},
                  {"merge_certificate",
                   json{{"max_logit_diff", max_diff}, {"n_prompts", probes.size()}}},
                  {"adapter_hash", artifact_hash(out_dir + "/stage1_adapter")}},
             json{{"name", "stage2_learn"},
                  {"status", "done"},
                  {"final_loss", tr2.final_loss},
                  {"merged_base_hash", merged_hash},
                  {"adapter_hash", artifact_hash(out_dir + "/stage2_adapter")}}});
    }

    result.model_dir = out_dir + "/model";
    run["model_hash"] = artifact_hash(result.model_dir);
    write_text_file(out_dir + "/run.json", run.dump(2) + "\n");
    result.run_record = run;
    return result;
}

EvalReport run_eval(const std::string& model_dir, const FactWorld& world,
                    const std::string& world_path, const EvalOptions& opts,
                    const std::string& out_dir) {
    LoadedModel lm = load_model_dir(model_dir);
    EvalReport report = evaluate(lm.model, world, opts);
    json lineage;
    lineage["model"] = {{"path", model_dir}, {"hash", artifact_hash(model_dir)}};
    lineage["world"] = {{"path", world_path},
                        {"sha256", world_path.empty() ? "" : sha256_file_hex(world_path)}};
    json snapshot;
    snapshot["paper_protocol"] = opts.paper_protocol;
    snapshot["repeat_factor"] = opts.paper_protocol ? std::max(opts.repeat_factor, 10)
                                                    : opts.repeat_factor;
    snapshot["decode"] = opts.paper_protocol ? "sample" : opts.decode;
    snapshot["temperature"] = opts.temperature;
    snapshot["seed"] = opts.seed;
    snapshot["max_new"] = opts.max_new;
    snapshot["latent_rank_fraction"] = opts.latent_rank_fraction;
    save_eval_report(report, out_dir, lineage, snapshot);
    return report;
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

namespace {

json comparison_row(const std::string& strategy, const json& metrics, double base_ppl) {
    const double ppl = metrics.at("heldout_perplexity");
    return json{{"strategy", strategy},
                {"f2_accuracy", metrics.at("f2_accuracy")},
                {"f1_forget_rate", metrics.at("f1_forget_rate")},
                {"fcontrol_accuracy", metrics.at("fcontrol_accuracy")},
                {"heldout_perplexity", ppl},
                {"ppl_ratio", base_ppl > 0 ? ppl / base_ppl : 0.0}};
}

void write_comparison_files(const json& comparison, const std::string& run_root) {
    write_text_file(run_root + "/comparison.json", comparison.dump(2) + "\n");
    std::ostringstream csv;
    csv << "strategy,f2_accuracy,f1_forget_rate,fcontrol_accuracy,heldout_perplexity,ppl_ratio\n";
    for (const auto& row : comparison.at("rows")) {
        csv << row.at("strategy").get<std::string>() << "," << row.at("f2_accuracy") << ","
            << row.at("f1_forget_rate") << "," << row.at("fcontrol_accuracy") << ","
            << row.at("heldout_perplexity") << "," << row.at("ppl_ratio") << "\n";
    }
    write_text_file(run_root + "/comparison.csv", csv.str());
    write_text_file(run_root + "/comparison.txt", render_comparison_text(comparison));
}

}  // namespace

json compare_strategies(const std::string& base_dir, const FactWorld& world,
                        const std::vector<std::string>& targets, const EditOptions& opts,
                        const EvalOptions& eval_opts, const std::string& run_root) {
    json base_gate;
    try {
        base_gate = json::parse(read_text_file(base_dir + "/gate.json"));
    } catch (...) {
        fail(ErrorKind::prerequisite, "base checkpoint has no gate.json; run pretrain first");
    }
    const double base_ppl = base_gate.at("heldout_perplexity");

    json comparison;
    comparison["base_checkpoint"] = base_dir;
    comparison["base_hash"] = artifact_hash(base_dir);
    comparison["base_perplexity"] = base_ppl;
    json rows = json::array();
    for (const std::string strategy :
         {kStrategyDirectLoRA, kStrategyDirectIA3, kStrategyUnlearnThenLearn}) {
        const std::string out_dir = run_root + "/" + strategy;
        EditRunResult res = run_edit(base_dir, world, strategy, targets, opts, out_dir);
        EvalReport er = run_eval(res.model_dir, world, "", eval_opts, out_dir + "/eval");
        rows.push_back(comparison_row(strategy, er.to_json(), base_ppl));
    }
    comparison["rows"] = rows;
    write_comparison_files(comparison, run_root);
    return comparison;
}

json collect_comparison(const std::string& run_root) {
    const std::string base_dir = run_root + "/base";
    json comparison;
    double base_ppl = 0.0;
    try {
        json base_gate = json::parse(read_text_file(base_dir + "/gate.json"));
        base_ppl = base_gate.at("heldout_perplexity");
        comparison["base_checkpoint"] = base_dir;
        comparison["base_hash"] = artifact_hash(base_dir);
        comparison["base_perplexity"] = base_ppl;
    } catch (const Error&) {
        fail(ErrorKind::prerequisite,
             "no base checkpoint under " + run_root + "/base; run pretrain first");
    } catch (const json::exception&) {
        fail(ErrorKind::format, "unreadable gate.json under " + base_dir);
    }
    json rows = json::array();
    for (const std::string strategy :
         {kStrategyDirectLoRA, kStrategyDirectIA3, kStrategyUnlearnThenLearn}) {
        const std::string metrics_path = run_root + "/" + strategy + "/eval/metrics.json";
        if (!fs::exists(metrics_path)) continue;
        try {
            json metrics = json::parse(read_text_file(metrics_path));
            rows.push_back(comparison_row(strategy, metrics, base_ppl));
        } catch (const json::exception& e) {
            fail(ErrorKind::format, "unreadable metrics at " + metrics_path + ": " + e.what());
        }
    }
    if (rows.empty()) {
        fail(ErrorKind::prerequisite,
             "no strategy metrics under " + run_root + "; run edit and eval first");
    }
    comparison["rows"] = rows;
    write_comparison_files(comparison, run_root);
    return comparison;
}

std::string render_comparison_text(const json& comparison) {
    std::ostringstream out;
    out << std::left << std::setw(22) << "method" << std::right << std::setw(14) << "f2_accuracy"
        << std::setw(17) << "f1_forget_rate" << std::setw(20) << "fcontrol_accuracy"
        << std::setw(12) << "ppl_ratio" << "\n";
    out << std::string(85, '-') << "\n";
    for (const auto& row : comparison.at("rows")) {
        out << std::left << std::setw(22) << row.at("strategy").get<std::string>() << std::right
            << std::fixed << std::setprecision(4) << std::setw(14)
            << row.at("f2_accuracy").get<double>() << std::setw(17)
            << row.at("f1_forget_rate").get<double>() << std::setw(20)
            << row.at("fcontrol_accuracy").get<double>() << std::setw(12)
            << row.at("ppl_ratio").get<double>() << "\n";
    }
    if (comparison.contains("base_perplexity")) {
        out << "\nbase heldout perplexity: " << std::fixed << std::setprecision(4)
            << comparison.at("base_perplexity").get<double>() << "\n";
    }
    return out.str();
}

}  // namespace cedit
