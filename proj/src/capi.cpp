#include "circuitedit/circuitedit.h"

#include <cstring>
#include <string>

#include "pipeline.hpp"

using namespace cedit;
using nlohmann::json;

namespace {

thread_local std::string g_last_error;

ce_status status_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::invalid_argument: return CE_ERR_INVALID_ARGUMENT;
        case ErrorKind::dimension:        return CE_ERR_DIMENSION;
        case ErrorKind::numeric:          return CE_ERR_NUMERIC;
        case ErrorKind::capacity:         return CE_ERR_CAPACITY;
        case ErrorKind::format:           return CE_ERR_FORMAT;
        case ErrorKind::io:               return CE_ERR_IO;
        case ErrorKind::prerequisite:     return CE_ERR_PREREQUISITE;
        case ErrorKind::divergence:       return CE_ERR_DIVERGENCE;
        case ErrorKind::localization:     return CE_ERR_LOCALIZATION;
        case ErrorKind::gate:             return CE_ERR_GATE;
        case ErrorKind::unsupported:      return CE_ERR_UNSUPPORTED;
        case ErrorKind::internal:         return CE_ERR_INTERNAL;
    }
    return CE_ERR_INTERNAL;
}

template <typename Fn>
ce_status guarded(Fn&& fn) {
    try {
        fn();
        g_last_error.clear();
        return CE_OK;
    } catch (const Error& e) {
        g_last_error = e.what();
        return status_for(e.kind());
    } catch (const json::exception& e) {
        g_last_error = std::string("malformed JSON: ") + e.what();
        return CE_ERR_FORMAT;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return CE_ERR_INTERNAL;
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out) std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

json parse_opts(const char* opts_json) {
    if (!opts_json || !*opts_json) return json::object();
    json j = json::parse(opts_json);
    if (!j.is_object()) fail(ErrorKind::format, "options must be a JSON object");
    return j;
}

void require(const void* p, const char* what) {
    if (!p) fail(ErrorKind::invalid_argument, std::string(what) + " must not be null");
}

WorldConfig world_config_from(const json& j) {
    WorldConfig cfg;
    cfg.seed = j.value("seed", cfg.seed);
    cfg.n_entities = j.value("n_entities", cfg.n_entities);
    cfg.n_relations = j.value("n_relations", cfg.n_relations);
    cfg.n_facts = j.value("n_facts", cfg.n_facts);
    cfg.n_control = j.value("n_control", cfg.n_control);
    cfg.n_paraphrases = j.value("n_paraphrases", cfg.n_paraphrases);
    cfg.min_edit_relation_subjects =
        j.value("min_edit_relation_subjects", cfg.min_edit_relation_subjects);
    return cfg;
}

ModelConfig model_config_from_opts(const json& j) {
    ModelConfig cfg;
    cfg.n_layers = j.value("n_layers", cfg.n_layers);
    cfg.d_model = j.value("d_model", cfg.d_model);
    cfg.n_heads = j.value("n_heads", cfg.n_heads);
    cfg.d_ff = j.value("d_ff", cfg.d_ff);
    cfg.max_seq = j.value("max_seq", cfg.max_seq);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.rms_eps = j.value("rms_eps", cfg.rms_eps);
    return cfg;
}

PretrainOptions pretrain_options_from(const json& j) {
    PretrainOptions o;
    o.max_steps = j.value("max_steps", o.max_steps);
    o.min_steps = j.value("min_steps", o.min_steps);
    o.batch = j.value("batch", o.batch);
    o.lr = j.value("lr", o.lr);
    o.eval_every = j.value("eval_every", o.eval_every);
    o.f1_gate = j.value("f1_gate", o.f1_gate);
    o.control_gate = j.value("control_gate", o.control_gate);
    o.oversample = j.value("oversample", o.oversample);
    o.seed = j.value("seed", o.seed);
    return o;
}

EditOptions edit_options_from(const json& j) {
    EditOptions o;
    if (j.value("paper_hparams", false)) o.apply_paper_hparams();
    o.steps = j.value("steps", o.steps);
    o.batch = j.value("batch", o.batch);
    o.lr = j.value("lr", o.lr);
    o.stop_loss = j.value("stop_loss", o.stop_loss);
    o.stop_window = j.value("stop_window", o.stop_window);
    o.seed = j.value("seed", o.seed);
    o.lora_rank = j.value("lora_rank", o.lora_rank);
    o.lora_alpha = j.value("lora_alpha", o.lora_alpha);
    o.merge_final = j.value("merge_final", o.merge_final);
    return o;
}

EvalOptions eval_options_from(const json& j) {
    EvalOptions o;
    o.paper_protocol = j.value("paper_protocol", o.paper_protocol);
    o.repeat_factor = j.value("repeat_factor", o.repeat_factor);
    o.decode = j.value("decode", o.decode);
    o.temperature = j.value("temperature", o.temperature);
    o.seed = j.value("seed", o.seed);
    o.max_new = j.value("max_new", o.max_new);
    o.latent_rank_fraction = j.value("latent_rank_fraction", o.latent_rank_fraction);
    if (o.decode != "greedy" && o.decode != "sample") {
        fail(ErrorKind::invalid_argument, "decode must be 'greedy' or 'sample'");
    }
    return o;
}

// Resolves the targets argument of ce_edit/ce_compare: "" or "all" means
// all-modules targeting, anything else is a localization report path.
std::vector<std::string> resolve_targets(const char* targets) {
    if (!targets || !*targets || std::string(targets) == "all") return {};
    LocalizationReport rep = load_localization(targets);
    if (rep.localization_failed || rep.converged.empty()) {
        fail(ErrorKind::localization,
             std::string("localization report at ") + targets +
                 " has no converged target set; pass \"all\" to target every module");
    }
    return rep.converged;
}

}  // namespace

struct ce_world {
    FactWorld world;
};

struct ce_model {
    LoadedModel loaded;
};

extern "C" {

const char* ce_version(void) {
    return "circuitedit 1.0.0";
}

const char* ce_last_error(void) {
    return g_last_error.c_str();
}

void ce_string_free(char* s) {
    std::free(s);
}

ce_status ce_world_generate(const char* config_json, ce_world** out) {
    return guarded([&] {
        require(out, "out");
        WorldConfig cfg = world_config_from(parse_opts(config_json));
        *out = new ce_world{FactWorld::generate(cfg)};
    });
}

ce_status ce_world_open(const char* path, ce_world** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = new ce_world{FactWorld::load(path)};
    });
}

ce_status ce_world_save(const ce_world* world, const char* path) {
    return guarded([&] {
        require(world, "world");
        require(path, "path");
        world->world.save(path);
    });
}

ce_status ce_world_info(const ce_world* world, char** json_out) {
    return guarded([&] {
        require(world, "world");
        require(json_out, "json_out");
        const FactWorld& w = world->world;
        const Tokenizer& tok = w.tokenizer();
        json j;
        j["seed"] = w.config().seed;
        j["n_entities"] = w.config().n_entities;
        j["n_relations"] = w.config().n_relations;
        j["n_facts"] = w.config().n_facts;
        j["n_control"] = static_cast<int>(w.control_fact_ids().size());
        j["vocab_size"] = tok.size();
        j["edit"] = {{"subject", tok.word(w.edit().subject)},
                     {"relation", w.relations()[size_t(w.edit().relation)].name},
                     {"f1", tok.word(w.edit().f1_object)},
                     {"f2", tok.word(w.edit().f2_object)},
                     {"paraphrases", w.edit().paraphrase_ids.size()}};
        *json_out = dup_string(j.dump(2));
    });
}

void ce_world_free(ce_world* world) {
    delete world;
}

ce_status ce_model_open(const char* model_dir, ce_model** out) {
    return guarded([&] {
        require(model_dir, "model_dir");
        require(out, "out");
        *out = new ce_model{load_model_dir(model_dir)};
    });
}

ce_status ce_model_info(const ce_model* model, char** json_out) {
    return guarded([&] {
        require(model, "model");
        require(json_out, "json_out");
        json j;
        j["dir"] = model->loaded.dir;
        j["format"] = model->loaded.manifest.value("format", "");
        j["model_config"] = model_config_to_json(model->loaded.model.config());
        j["adapters"] = model->loaded.adapters.size();
        j["weights_hash"] = model->loaded.model.weights_hash();
        *json_out = dup_string(j.dump(2));
    });
}

ce_status ce_model_answer(const ce_model* model, const ce_world* world, const char* query_text,
                          int max_new, char** text_out) {
    return guarded([&] {
        require(model, "model");
        require(world, "world");
        require(query_text, "query_text");
        require(text_out, "text_out");
        const Tokenizer& tok = world->world.tokenizer();
        std::vector<int> prompt{tok.user_tag};
        for (int id : tok.encode(query_text)) prompt.push_back(id);
        prompt.push_back(tok.end_tag);
        prompt.push_back(tok.assistant_tag);
        EvalOptions opts;
        opts.max_new = max_new > 0 ? max_new : 8;
        std::vector<int> gen =
            decode_tokens(model->loaded.model, prompt, tok.end_tag, opts, false, nullptr);
        *text_out = dup_string(world->world.text(gen));
    });
}

void ce_model_free(ce_model* model) {
    delete model;
}

ce_status ce_pretrain(const char* world_path, const char* out_dir, const char* opts_json,
                      char** summary_json_out) {
    return guarded([&] {
        require(world_path, "world_path");
        require(out_dir, "out_dir");
        json opts = parse_opts(opts_json);
        FactWorld world = FactWorld::load(world_path);
        ModelConfig mcfg = model_config_from_opts(opts.value("model", json::object()));
        PretrainOptions popts = pretrain_options_from(opts.value("pretrain", json::object()));
        GateMetrics gm = pretrain_base(world, mcfg, popts, world_path, out_dir);
        if (summary_json_out) {
            json s = gm.to_json();
            s["checkpoint"] = out_dir;
            s["checkpoint_hash"] = artifact_hash(out_dir);
            *summary_json_out = dup_string(s.dump(2));
        }
    });
}

ce_status ce_localize(const char* checkpoint_dir, const char* world_path, const char* out_path,
                      const char* opts_json, char** summary_json_out) {
    return guarded([&] {
        require(checkpoint_dir, "checkpoint_dir");
        require(world_path, "world_path");
        require(out_path, "out_path");
        json opts = parse_opts(opts_json);
        FactWorld world = FactWorld::load(world_path);
        LoadedModel base = load_model_dir(checkpoint_dir);
        LocalizeOptions lopts;
        lopts.n_pairs = opts.value("n_pairs", lopts.n_pairs);
        lopts.single_prompt = opts.value("single_prompt", lopts.single_prompt);
        lopts.top_fraction = opts.value("top_fraction", lopts.top_fraction);
        lopts.min_metrics = opts.value("min_metrics", lopts.min_metrics);
        LocalizationReport rep = localize(base.model, world, lopts);
        save_localization(rep, out_path,
                          {{"checkpoint", checkpoint_dir},
                           {"checkpoint_hash", artifact_hash(checkpoint_dir)},
                           {"world_sha256", sha256_file_hex(world_path)}});
        if (summary_json_out) {
            json s;
            s["report"] = out_path;
            s["converged"] = rep.converged;
            s["localization_failed"] = rep.localization_failed;
            *summary_json_out = dup_string(s.dump(2));
        }
    });
}

ce_status ce_edit(const char* checkpoint_dir, const char* world_path, const char* strategy,
                  const char* targets, const char* out_dir, const char* opts_json,
                  char** summary_json_out) {
    return guarded([&] {
        require(checkpoint_dir, "checkpoint_dir");
        require(world_path, "world_path");
        require(strategy, "strategy");
        require(out_dir, "out_dir");
        json opts = parse_opts(opts_json);
        FactWorld world = FactWorld::load(world_path);
        EditRunResult res = run_edit(checkpoint_dir, world, strategy, resolve_targets(targets),
                                     edit_options_from(opts), out_dir);
        if (summary_json_out) {
            json s = res.run_record;
            s["model_dir"] = res.model_dir;
            *summary_json_out = dup_string(s.dump(2));
        }
    });
}

ce_status ce_compare(const char* checkpoint_dir, const char* world_path, const char* targets,
                     const char* out_root, const char* opts_json, char** summary_json_out) {
    return guarded([&] {
        require(checkpoint_dir, "checkpoint_dir");
        require(world_path, "world_path");
        require(out_root, "out_root");
        json opts = parse_opts(opts_json);
        FactWorld world = FactWorld::load(world_path);
        json cmp = compare_strategies(checkpoint_dir, world, resolve_targets(targets),
                                      edit_options_from(opts.value("edit", json::object())),
                                      eval_options_from(opts.value("eval", json::object())),
                                      out_root);
        if (summary_json_out) *summary_json_out = dup_string(cmp.dump(2));
    });
}

ce_status ce_eval(const char* model_dir, const char* world_path, const char* out_dir,
                  const char* opts_json, char** summary_json_out) {
    return guarded([&] {
        require(model_dir, "model_dir");
        require(world_path, "world_path");
        require(out_dir, "out_dir");
        json opts = parse_opts(opts_json);
        FactWorld world = FactWorld::load(world_path);
        EvalReport report =
            run_eval(model_dir, world, world_path, eval_options_from(opts), out_dir);
        if (summary_json_out) *summary_json_out = dup_string(report.to_json().dump(2));
    });
}

ce_status ce_report(const char* run_root, char** table_text_out) {
    return guarded([&] {
        require(run_root, "run_root");
        require(table_text_out, "table_text_out");
        json cmp = collect_comparison(run_root);
        *table_text_out = dup_string(render_comparison_text(cmp));
    });
}

}  // extern "C"
