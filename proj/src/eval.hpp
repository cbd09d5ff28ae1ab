#pragma once

// Evaluation: F2 accuracy and F1 forget rate over the paraphrase battery,
// control-fact accuracy, held-out perplexity, and the latent-logit probe that
// reports how retrievable the suppressed fact remains.

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fact_world.hpp"
#include "transformer.hpp"

namespace cedit {

struct EvalOptions {
    bool paper_protocol = false;   // 20 paraphrases x 10 repeats, sampled decoding
    int repeat_factor = 1;
    std::string decode = "greedy";  // "greedy" | "sample"
    double temperature = 0.7;
    uint64_t seed = 7;
    int max_new = 8;
    double latent_rank_fraction = 0.10;
    std::map<int, float> logit_bias;  // decode-time offsets, test harness hook
};

struct QueryRecord {
    std::string kind;  // "edit" | "control"
    std::string query;
    std::string generation;
    bool f2_correct = false;
    bool f1_present = false;
    bool control_correct = false;
};

struct LatentStats {
    double rank_mean = 0.0;
    double prob_mean = 0.0;
    int f1_argmax_count = 0;
    bool latent = false;
};

struct EvalReport {
    double f2_accuracy = 0.0;
    double f1_forget_rate = 0.0;
    double fcontrol_accuracy = 0.0;
    double heldout_perplexity = 0.0;
    LatentStats latent_f1;
    int n_edit_queries = 0;
    int n_control = 0;
    int n_heldout = 0;
    std::vector<QueryRecord> records;

    nlohmann::json to_json() const;
    std::string records_csv() const;
};

struct QueryBattery {
    std::vector<std::pair<int, std::vector<int>>> edit_prompts;  // (paraphrase idx, prompt)
    std::vector<std::pair<int, std::vector<int>>> control_prompts;  // (fact id, prompt)
    std::vector<std::vector<int>> heldout;

    static QueryBattery build(const FactWorld& world, int repeat_factor);
};

// Decode with optional temperature sampling and logit offsets. rng may be
// null for greedy decoding.
std::vector<int> decode_tokens(const Transformer& model, const std::vector<int>& prompt,
                               int stop_token, const EvalOptions& opts, bool sample, Rng* rng);

struct FactModulationResult {
    double f2_accuracy = 0.0;
    double f1_forget_rate = 0.0;
    std::vector<QueryRecord> records;
};

FactModulationResult eval_fact_modulation(const Transformer& model, const FactWorld& world,
                                          const QueryBattery& battery, const EvalOptions& opts);
double eval_control(const Transformer& model, const FactWorld& world, const QueryBattery& battery,
                    const EvalOptions& opts, std::vector<QueryRecord>* records);
double heldout_perplexity(const Transformer& model, const std::vector<std::vector<int>>& split);
LatentStats latent_f1_probe(const Transformer& model, const FactWorld& world,
                            const EvalOptions& opts);

EvalReport evaluate(const Transformer& model, const FactWorld& world, const EvalOptions& opts);

// metrics.json (stable keys) + records.csv under out_dir.
void save_eval_report(const EvalReport& report, const std::string& out_dir,
                      const nlohmann::json& lineage, const nlohmann::json& options_snapshot);

}  // namespace cedit
