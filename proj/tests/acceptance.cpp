// Acceptance suite: one self-contained run of the full laboratory that checks
// every advertised behavior at its stated tolerance and prints one PASS/FAIL
// line per criterion. Exits nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "pipeline.hpp"

using namespace cedit;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Criterion {
    int index;
    std::string name;
    bool passed = false;
    double seconds = 0.0;
    std::vector<std::string> details;
};

std::vector<Criterion> g_results;

struct Timer {
    Clock::time_point start = Clock::now();
    double seconds() const {
        return std::chrono::duration<double>(Clock::now() - start).count();
    }
};

void report(Criterion c) {
    std::printf("[%d/9] %-4s %s [%.1fs]\n", c.index, c.passed ? "PASS" : "FAIL", c.name.c_str(),
                c.seconds);
    for (const auto& d : c.details) std::printf("      - %s\n", d.c_str());
    std::fflush(stdout);
    g_results.push_back(std::move(c));
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

bool check(Criterion& c, bool ok, const std::string& what) {
    c.details.push_back(std::string(ok ? "ok: " : "FAILED: ") + what);
    return ok;
}

// ---------------------------------------------------------------------------
// Shared run state: per-seed world + gated base + localization + comparison.
// ---------------------------------------------------------------------------

struct SeedRun {
    uint64_t seed;
    std::string root;
    FactWorld world;
    GateMetrics gate;
    double pretrain_seconds = 0.0;
    LocalizationReport localization;
    json comparison;  // filled by run_comparison
    std::map<std::string, double> strategy_seconds;

    explicit SeedRun(uint64_t s, const std::string& base_root)
        : seed(s),
          root(base_root + "/seed" + std::to_string(s)),
          world(FactWorld::generate(make_world_config(s))) {}

    static WorldConfig make_world_config(uint64_t seed) {
        WorldConfig w;
        w.seed = seed;
        return w;
    }

    void pretrain() {
        world.save(root + "/world.jsonl");
        ModelConfig mcfg;  // default: 4 layers, d_model 64
        mcfg.seed = seed;
        PretrainOptions popts;
        popts.seed = seed;
        Timer t;
        gate = pretrain_base(world, mcfg, popts, root + "/world.jsonl", root + "/base");
        pretrain_seconds = t.seconds();
    }

    void localize_base() {
        LoadedModel base = load_model_dir(root + "/base");
        localization = localize(base.model, world, LocalizeOptions{});
        save_localization(localization, root + "/localization.json",
                          {{"checkpoint_hash", artifact_hash(root + "/base")}});
    }

    void run_comparison() {
        const std::vector<std::string> targets =
            localization.localization_failed ? std::vector<std::string>{} : localization.converged;
        EditOptions eopts;
        eopts.seed = seed;
        EvalOptions evopts;
        json rows = json::array();
        json gate_json = json::parse(read_text_file(root + "/base/gate.json"));
        const double base_ppl = gate_json.at("heldout_perplexity");
        for (const std::string strategy :
             {kStrategyDirectLoRA, kStrategyDirectIA3, kStrategyUnlearnThenLearn}) {
            Timer t;
            const std::string out = root + "/" + strategy;
            EditRunResult res = run_edit(root + "/base", world, strategy, targets, eopts, out);
            EvalReport er = run_eval(res.model_dir, world, root + "/world.jsonl", evopts,
                                     out + "/eval");
            strategy_seconds[strategy] = t.seconds();
            json row = er.to_json();
            row["strategy"] = strategy;
            row["ppl_ratio"] = er.heldout_perplexity / base_ppl;
            rows.push_back(row);
        }
        comparison["rows"] = rows;
        comparison["base_perplexity"] = base_ppl;
    }

    json row(const std::string& strategy) const {
        for (const auto& r : comparison.at("rows")) {
            if (r.at("strategy") == strategy) return r;
        }
        fail(ErrorKind::internal, "no comparison row for " + strategy);
    }
};

// ---------------------------------------------------------------------------
// Criterion 1: finite-difference gradient checks, both precisions.
// ---------------------------------------------------------------------------

void criterion_numeric_core() {
    Criterion c{1, "numeric core: FD gradient checks (>=100 cases/op, f32 < 1e-3, f64 < 1e-6)"};
    Timer t;
    auto s32 = gradcheck::run_fd_suite<float>(100, gradcheck::tol_f32(), 20240);
    auto s64 = gradcheck::run_fd_suite<double>(100, gradcheck::tol_f64(), 20241);
    bool ok = true;
    ok &= check(c, s32.max_err < 1e-3,
                "32-bit max relative error " + fmt(s32.max_err) + " over " +
                    std::to_string(s32.elements) + " gradient elements");
    ok &= check(c, s64.max_err < 1e-6, "64-bit max relative error " + fmt(s64.max_err));
    c.seconds = t.seconds();
    ok &= check(c, c.seconds < 60.0, "runtime under 60s");
    c.passed = ok;
    report(std::move(c));
}

// ---------------------------------------------------------------------------
// Criterion 2: interpretability identities on the gated base.
// ---------------------------------------------------------------------------

void criterion_interpretability(SeedRun& run) {
    Criterion c{2, "interpretability identities: self-patch, observation neutrality, ablation sign"};
    Timer t;
    LoadedModel base = load_model_dir(run.root + "/base");
    std::vector<int> prompt = run.world.edit_query(0);

    TensorF plain = base.model.forward(prompt);
    auto [cached_logits, cache] = base.model.forward_with_cache(prompt, base.model.all_hooks());
    bool bitwise = true;
    for (int64_t i = 0; i < plain.numel(); ++i) {
        bitwise = bitwise && plain.data()[size_t(i)] == cached_logits.data()[size_t(i)];
    }
    bool ok = check(c, bitwise, "cache on/off logits bitwise equal");

    double worst_self_patch = 0.0;
    for (HookSite site : {HookSite::attn_v, HookSite::attn_z, HookSite::mlp_pre,
                          HookSite::mlp_post}) {
        for (const auto& hp : base.model.all_hooks()) {
            if (hp.site != site) continue;
            ActivationCache one;
            one.emplace(hp, cache.at(hp).clone());
            TensorF patched = base.model.forward_with_patch(prompt, one);
            for (int64_t i = 0; i < plain.numel(); ++i) {
                worst_self_patch = std::max(
                    worst_self_patch,
                    std::abs(double(plain.data()[size_t(i)]) - double(patched.data()[size_t(i)])));
            }
        }
    }
    ok &= check(c, worst_self_patch < 1e-6,
                "self-patch |logit drop| " + fmt(worst_self_patch) + " < 1e-6 at all four sites");

    // Zero-ablation sign check on the top-ranked positive-drop site.
    const auto& drops = run.localization.metrics.at(kMetricOutputPatch);
    const ComponentScore* top = nullptr;
    for (const auto& cs : drops) {
        if (cs.score > 0) {
            top = &cs;
            break;
        }
    }
    if (top) {
        HookPoint hp = HookPoint::parse(top->component);
        const int width = hp.is_attention() ? base.model.config().d_head()
                                            : base.model.config().d_ff;
        ActivationCache zeros;
        zeros.emplace(hp, TensorF::zeros({int(prompt.size()), width}));
        TensorF ablated = base.model.forward_with_patch(prompt, zeros);
        const int f1 = run.world.edit().f1_object;
        const int64_t last = int64_t(prompt.size()) - 1;
        ok &= check(c, double(ablated.at(last, f1)) < double(plain.at(last, f1)),
                    "zero-ablating " + top->component + " lowers the f1 logit (" +
                        fmt(double(plain.at(last, f1))) + " -> " +
                        fmt(double(ablated.at(last, f1))) + ")");
    } else {
        ok &= check(c, false, "no positive-drop site found for the ablation check");
    }
    c.seconds = t.seconds();
    ok &= check(c, c.seconds < 60.0, "runtime under 60s");
    c.passed = ok;
    report(std::move(c));
}

// ---------------------------------------------------------------------------
// Criterion 3: adapter identities.
// ---------------------------------------------------------------------------

void criterion_adapters(SeedRun& run) {
    Criterion c{3, "adapter identities: init identity, frozen base, merge equivalence"};
    Timer t;
    LoadedModel base = load_model_dir(run.root + "/base");
    Transformer& model = base.model;
    std::vector<int> prompt = run.world.edit_query(1);
    TensorF before = model.forward(prompt);

    IA3Adapter ones = IA3Adapter::init(model, model.module_names());
    InjectedAdapter inj = inject(model, ones);
    TensorF with_ones = model.forward(prompt);
    bool bitwise = true;
    for (int64_t i = 0; i < before.numel(); ++i) {
        bitwise = bitwise && before.data()[size_t(i)] == with_ones.data()[size_t(i)];
    }
    bool ok = check(c, bitwise, "ones-IA3 output is bitwise identical");
    remove_adapter(model, inj);

    LoRAAdapter zero_b = LoRAAdapter::init(model, model.module_names(), 4, 8.0f, 99);
    InjectedAdapter linj = inject(model, zero_b);
    TensorF with_lora = model.forward(prompt);
    double worst = 0;
    for (int64_t i = 0; i < before.numel(); ++i) {
        worst = std::max(worst, std::abs(double(before.data()[size_t(i)]) -
                                         double(with_lora.data()[size_t(i)])));
    }
    ok &= check(c, worst < 1e-6, "zero-B LoRA max |logit diff| " + fmt(worst) + " < 1e-6");
    remove_adapter(model, linj);

    // Frozen base across a real training run, then merge equivalence.
    auto [unlearn_set, learn_set] = build_edit_datasets(run.world);
    IA3Adapter adapter = IA3Adapter::init(model, run.localization.converged);
    InjectedAdapter ainj = inject(model, adapter);
    const std::string hash_before = model.weights_hash();
    TrainOptions topts;
    topts.steps = 200;
    topts.lr = 2e-3;
    topts.seed = run.seed;
    train_adapter(model, ainj, unlearn_set, topts);
    ok &= check(c, model.weights_hash() == hash_before,
                "base weights hash bitwise preserved across adapter training");

    std::vector<std::vector<int>> battery;
    for (int p = 0; p < 5; ++p) battery.push_back(run.world.edit_query(p));
    for (int i = 0; i < 5; ++i) battery.push_back(run.world.control_query(i));
    std::vector<TensorF> adapted;
    for (const auto& q : battery) adapted.push_back(model.forward(q));
    merge_and_unload(model, adapter);
    double merge_diff = 0;
    for (size_t q = 0; q < battery.size(); ++q) {
        TensorF merged = model.forward(battery[q]);
        for (int64_t i = 0; i < merged.numel(); ++i) {
            merge_diff = std::max(merge_diff, std::abs(double(merged.data()[size_t(i)]) -
                                                       double(adapted[q].data()[size_t(i)])));
        }
    }
    ok &= check(c, merge_diff < 1e-4,
                "IA3 merge equivalence max |logit diff| " + fmt(merge_diff) +
                    " < 1e-4 over 10 prompts");
    c.seconds = t.seconds();
    ok &= check(c, c.seconds < 120.0, "runtime under 120s");
    c.passed = ok;
    report(std::move(c));
}

// ---------------------------------------------------------------------------
// Criterion 4: entrenchment gate on the default configuration.
// ---------------------------------------------------------------------------

void criterion_gate(SeedRun& run) {
    Criterion c{4, "entrenchment gate: seed 7, 4 layers, d_model 64, default budget"};
    bool ok = check(c, run.gate.passed, "gate passed at step " + std::to_string(run.gate.steps_run));
    ok &= check(c, run.gate.f1_accuracy >= 0.95,
                "f1 accuracy " + fmt(run.gate.f1_accuracy) + " >= 0.95 on 20 paraphrases");
    ok &= check(c, run.gate.control_accuracy >= 0.90,
                "control accuracy " + fmt(run.gate.control_accuracy) + " >= 0.90 on 100 facts");
    ok &= check(c, run.pretrain_seconds < 900.0, "runtime under 15 min");
    c.seconds = run.pretrain_seconds;
    c.passed = ok;
    report(std::move(c));
}

// ---------------------------------------------------------------------------
// Criterion 5: directional Table-1 reproduction.
// ---------------------------------------------------------------------------

void criterion_directional(std::vector<SeedRun>& runs) {
    Criterion c{5, "directional reproduction: UTL success and F_control separation"};
    SeedRun& primary = runs.front();
    json utl = primary.row(kStrategyUnlearnThenLearn);
    json ia3 = primary.row(kStrategyDirectIA3);
    json lora = primary.row(kStrategyDirectLoRA);

    bool ok = check(c, utl.at("f2_accuracy").get<double>() >= 0.90,
                    "UTL f2_accuracy " + fmt(utl.at("f2_accuracy")) + " >= 0.90");
    ok &= check(c, utl.at("f1_forget_rate").get<double>() >= 0.90,
                "UTL f1_forget_rate " + fmt(utl.at("f1_forget_rate")) + " >= 0.90");

    const double fc_utl = utl.at("fcontrol_accuracy");
    const double fc_ia3 = ia3.at("fcontrol_accuracy");
    const double fc_lora = lora.at("fcontrol_accuracy");
    ok &= check(c, fc_utl >= fc_ia3 + 0.10,
                "F_control(UTL) " + fmt(fc_utl) + " >= F_control(direct-IA3) " + fmt(fc_ia3) +
                    " + 0.10");
    ok &= check(c, fc_utl >= fc_lora + 0.10,
                "F_control(UTL) " + fmt(fc_utl) + " >= F_control(direct-LoRA) " + fmt(fc_lora) +
                    " + 0.10");

    int ordering_hits = 0;
    for (SeedRun& run : runs) {
        const double u = run.row(kStrategyUnlearnThenLearn).at("fcontrol_accuracy");
        const double i = run.row(kStrategyDirectIA3).at("fcontrol_accuracy");
        const double l = run.row(kStrategyDirectLoRA).at("fcontrol_accuracy");
        const bool holds = u > i && i >= l;
        ordering_hits += holds ? 1 : 0;
        c.details.push_back("seed " + std::to_string(run.seed) + ": F_control UTL " + fmt(u) +
                            " / IA3 " + fmt(i) + " / LoRA " + fmt(l) +
                            (holds ? " (ordering holds)" : " (ordering violated)"));
    }
    ok &= check(c, ordering_hits >= 2,
                "ordering F_control(UTL) > IA3 >= LoRA on " + std::to_string(ordering_hits) +
                    "/3 seeds (need >= 2)");

    double worst_runtime = 0;
    for (SeedRun& run : runs) {
        for (const auto& [s, secs] : run.strategy_seconds) worst_runtime = std::max(worst_runtime, secs);
    }
    ok &= check(c, worst_runtime < 900.0,
                "slowest strategy run " + fmt(worst_runtime) + "s, under 15 min");
    c.seconds = 0.0;
    for (SeedRun& run : runs) {
        for (const auto& [s, secs] : run.strategy_seconds) c.seconds += secs;
    }
    c.passed = ok;
    report(std::move(c));
}

// ---------------------------------------------------------------------------
// Criterion 6: stage-1 refusal behavior.
// ---------------------------------------------------------------------------

void criterion_refusal(SeedRun& run) {
    Criterion c{6, "stage-1 refusal: neither f1 nor f2 on >= 90% of paraphrases"};
    Timer t;
    json record = json::parse(
        read_text_file(run.root + "/" + kStrategyUnlearnThenLearn + "/run.json"));
    const double rate = record.at("stages")[0].at("refusal_rate");
    c.passed = check(c, rate >= 0.90, "refusal rate after stage 1 = " + fmt(rate));
    c.seconds = t.seconds();
    report(std::move(c));
}

// ---------------------------------------------------------------------------
// Criterion 7: localization convergence stability.
// ---------------------------------------------------------------------------

// Independent re-implementation of the convergence rule, applied to the
// serialized per-metric tables.
std::vector<std::string> recompute_convergence(const json& report_json) {
    std::map<std::string, int> hits;
    for (const auto& [metric, rows] : report_json.at("metrics").items()) {
        std::vector<std::pair<double, std::string>> scored;
        for (const auto& row : rows) {
            scored.emplace_back(std::abs(row.at("score").get<double>()),
                                row.at("component").get<std::string>());
        }
        std::sort(scored.begin(), scored.end(),
                  [](const auto& a, const auto& b) { return a.first > b.first; });
        const size_t k = size_t(std::ceil(0.10 * double(scored.size())));
        if (scored.empty()) continue;
        const double boundary = scored[std::min(k, scored.size()) - 1].first;
        std::set<std::string> modules;
        for (const auto& [score, component] : scored) {
            if (score < boundary) break;
            const size_t dot = component.find('.', 7);
            const std::string layer = component.substr(0, dot);
            if (component.find("attn") != std::string::npos) {
                modules.insert(layer + ".self_attn.qkv_proj");
                modules.insert(layer + ".self_attn.o_proj");
            } else if (component.find("hook_pre") != std::string::npos ||
                       component.find("gate_up_proj") != std::string::npos) {
                modules.insert(layer + ".mlp.gate_up_proj");
            } else {
                modules.insert(layer + ".mlp.down_proj");
            }
        }
        for (const auto& m : modules) hits[m] += 1;
    }
    std::vector<std::string> out;
    for (const auto& [m, n] : hits) {
        if (n >= 2) out.push_back(m);
    }
    std::sort(out.begin(), out.end());
    return out;
}

void criterion_localization_stability(std::vector<SeedRun>& runs) {
    Criterion c{7, "localization stability: non-empty sets, Jaccard >= 0.5, rule recomputation"};
    Timer t;
    bool ok = true;
    std::vector<std::set<std::string>> sets;
    for (SeedRun& run : runs) {
        ok &= check(c, !run.localization.localization_failed && !run.localization.converged.empty(),
                    "seed " + std::to_string(run.seed) + " converged on " +
                        std::to_string(run.localization.converged.size()) + " modules");
        sets.emplace_back(run.localization.converged.begin(), run.localization.converged.end());

        json report_json = json::parse(read_text_file(run.root + "/localization.json"));
        std::vector<std::string> recomputed = recompute_convergence(report_json);
        std::vector<std::string> stored = run.localization.converged;
        std::sort(stored.begin(), stored.end());
        ok &= check(c, recomputed == stored,
                    "seed " + std::to_string(run.seed) +
                        ": independent recomputation matches the serialized converged set");
    }
    for (size_t a = 0; a < sets.size(); ++a) {
        for (size_t b = a + 1; b < sets.size(); ++b) {
            std::set<std::string> inter, uni;
            std::set_intersection(sets[a].begin(), sets[a].end(), sets[b].begin(), sets[b].end(),
                                  std::inserter(inter, inter.begin()));
            std::set_union(sets[a].begin(), sets[a].end(), sets[b].begin(), sets[b].end(),
                           std::inserter(uni, uni.begin()));
            const double jaccard = uni.empty() ? 0.0 : double(inter.size()) / double(uni.size());
            ok &= check(c, jaccard >= 0.5,
                        "Jaccard(seed " + std::to_string(runs[a].seed) + ", seed " +
                            std::to_string(runs[b].seed) + ") = " + fmt(jaccard));
        }
    }
    c.seconds = t.seconds();
    c.passed = ok;
    report(std::move(c));
}

// ---------------------------------------------------------------------------
// Criterion 8: general-capability preservation proxy.
// ---------------------------------------------------------------------------

void criterion_perplexity(SeedRun& run) {
    Criterion c{8, "capability proxy: UTL held-out perplexity <= 1.25x base"};
    Timer t;
    const double ratio_utl = run.row(kStrategyUnlearnThenLearn).at("ppl_ratio");
    const double ratio_lora = run.row(kStrategyDirectLoRA).at("ppl_ratio");
    bool ok = check(c, ratio_utl <= 1.25, "UTL ppl ratio " + fmt(ratio_utl) + " <= 1.25");
    // Reported, not gated: the paper-style expectation is that direct LoRA
    // breaches the bound.
    c.details.push_back("info: direct-LoRA ppl ratio " + fmt(ratio_lora) +
                        (ratio_lora > 1.25 ? " (exceeds the bound, as expected)"
                                           : " (stays within the bound on this run)"));
    c.seconds = t.seconds();
    c.passed = ok;
    report(std::move(c));
}

// ---------------------------------------------------------------------------
// Criterion 9: byte-for-byte determinism of the metrics files.
// ---------------------------------------------------------------------------

void criterion_determinism(const std::string& root) {
    Criterion c{9, "determinism: identical (config, seed) -> byte-identical metrics files"};
    Timer t;
    auto run_once = [&](const std::string& dir) {
        WorldConfig wcfg;
        wcfg.seed = 11;
        wcfg.n_entities = 36;
        wcfg.n_relations = 5;
        wcfg.n_facts = 124;
        FactWorld world = FactWorld::generate(wcfg);
        world.save(dir + "/world.jsonl");
        ModelConfig mcfg;
        mcfg.n_layers = 2;
        mcfg.d_model = 48;
        mcfg.n_heads = 4;
        mcfg.d_ff = 128;
        mcfg.max_seq = 48;
        mcfg.seed = 11;
        PretrainOptions popts;
        popts.min_steps = 400;
        popts.max_steps = 2500;
        popts.eval_every = 100;
        popts.seed = 11;
        pretrain_base(world, mcfg, popts, dir + "/world.jsonl", dir + "/base");
        EditOptions eopts;
        eopts.seed = 11;
        run_edit(dir + "/base", world, kStrategyUnlearnThenLearn, {}, eopts, dir + "/utl");
        run_eval(dir + "/utl/model", world, dir + "/world.jsonl", EvalOptions{}, dir + "/eval");
    };
    run_once(root + "/det1");
    run_once(root + "/det2");
    bool ok = true;
    ok &= check(c,
                sha256_file_hex(root + "/det1/world.jsonl") ==
                    sha256_file_hex(root + "/det2/world.jsonl"),
                "world files byte-identical");
    ok &= check(c,
                artifact_hash(root + "/det1/base") == artifact_hash(root + "/det2/base"),
                "base checkpoints identical");
    ok &= check(c,
                sha256_file_hex(root + "/det1/eval/metrics.json") ==
                    sha256_file_hex(root + "/det2/eval/metrics.json"),
                "metrics.json byte-identical across two consecutive runs");
    ok &= check(c,
                sha256_file_hex(root + "/det1/eval/records.csv") ==
                    sha256_file_hex(root + "/det2/eval/records.csv"),
                "records.csv byte-identical");
    c.seconds = t.seconds();
    c.passed = ok;
    report(std::move(c));
}

}  // namespace

int main() {
    const std::string root =
        (fs::temp_directory_path() / "circuitedit_acceptance").string();
    fs::remove_all(root);
    fs::create_directories(root);
    std::printf("acceptance artifacts under %s\n\n", root.c_str());

    criterion_numeric_core();

    std::vector<SeedRun> runs;
    for (uint64_t seed : {7ull, 8ull, 9ull}) {
        runs.emplace_back(seed, root);
        SeedRun& run = runs.back();
        std::printf("... seed %llu: pretraining (default world and model)\n",
                    (unsigned long long)seed);
        std::fflush(stdout);
        run.pretrain();
        run.localize_base();
        std::printf("... seed %llu: gate at step %d (f1 %.2f, control %.2f), editing\n",
                    (unsigned long long)seed, run.gate.steps_run, run.gate.f1_accuracy,
                    run.gate.control_accuracy);
        std::fflush(stdout);
        run.run_comparison();
    }
    std::printf("\n");

    criterion_interpretability(runs.front());
    criterion_adapters(runs.front());
    criterion_gate(runs.front());
    criterion_directional(runs);
    criterion_refusal(runs.front());
    criterion_localization_stability(runs);
    criterion_perplexity(runs.front());
    criterion_determinism(root);

    int failures = 0;
    for (const auto& c : g_results) failures += c.passed ? 0 : 1;
    std::printf("\nACCEPTANCE: %zu/%zu criteria passed\n", g_results.size() - size_t(failures),
                g_results.size());
    return failures == 0 ? 0 : 1;
}
