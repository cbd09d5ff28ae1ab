#include "eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

using nlohmann::json;

namespace cedit {

QueryBattery QueryBattery::build(const FactWorld& world, int repeat_factor) {
    if (repeat_factor < 1) fail(ErrorKind::invalid_argument, "repeat_factor must be >= 1");
    QueryBattery b;
    const int n_para = static_cast<int>(world.edit().paraphrase_ids.size());
    for (int r = 0; r < repeat_factor; ++r) {
        for (int p = 0; p < n_para; ++p) {
            b.edit_prompts.emplace_back(p, world.edit_query(p));
        }
    }
    const auto& controls = world.control_fact_ids();
    if (static_cast<int>(controls.size()) != world.config().n_control) {
        fail(ErrorKind::invalid_argument, "control set size mismatch");
    }
    for (size_t i = 0; i < controls.size(); ++i) {
        b.control_prompts.emplace_back(controls[i], world.control_query(static_cast<int>(i)));
    }
    b.heldout = build_pretrain_dataset(world, 1).heldout;
    return b;
}

namespace {

std::vector<double> biased_last_row(const Transformer& model, const std::vector<int>& seq,
                                    const std::map<int, float>& bias) {
    TensorF logits = model.forward(seq);
    const int64_t last = logits.rows() - 1;
    std::vector<double> row(static_cast<size_t>(logits.cols()));
    for (int j = 0; j < logits.cols(); ++j) row[size_t(j)] = double(logits.at(last, j));
    for (const auto& [tok, off] : bias) {
        if (tok >= 0 && tok < logits.cols()) row[size_t(tok)] += double(off);
    }
    return row;
}

int argmax(const std::vector<double>& row) {
    int best = 0;
    for (size_t j = 1; j < row.size(); ++j) {
        if (row[j] > row[size_t(best)]) best = static_cast<int>(j);
    }
    return best;
}

int sample_from(const std::vector<double>& row, double temperature, Rng& rng) {
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    std::vector<double> p(row.size());
    double sum = 0;
    for (size_t j = 0; j < row.size(); ++j) {
        p[j] = std::exp((row[j] - mx) / temperature);
        sum += p[j];
    }
    double u = rng.uniform() * sum;
    double acc = 0;
    for (size_t j = 0; j < p.size(); ++j) {
        acc += p[j];
        if (u < acc) return static_cast<int>(j);
    }
    return static_cast<int>(p.size()) - 1;
}

// First generated token that is not the END tag; -1 when the generation is
// empty after normalization.
int first_content_token(const std::vector<int>& generation, int end_tag) {
    for (int t : generation) {
        if (t != end_tag) return t;
    }
    return -1;
}

}  // namespace

std::vector<int> decode_tokens(const Transformer& model, const std::vector<int>& prompt,
                               int stop_token, const EvalOptions& opts, bool sample, Rng* rng) {
    if (prompt.empty()) fail(ErrorKind::invalid_argument, "decode: empty prompt");
    if (sample && !rng) fail(ErrorKind::invalid_argument, "decode: sampling needs an rng");
    std::vector<int> seq = prompt;
    std::vector<int> out;
    for (int step = 0; step < opts.max_new; ++step) {
        if (static_cast<int>(seq.size()) >= model.config().max_seq) break;
        std::vector<double> row = biased_last_row(model, seq, opts.logit_bias);
        const int next = sample ? sample_from(row, opts.temperature, *rng) : argmax(row);
        out.push_back(next);
        seq.push_back(next);
        if (next == stop_token) break;
    }
    return out;
}

FactModulationResult eval_fact_modulation(const Transformer& model, const FactWorld& world,
                                          const QueryBattery& battery, const EvalOptions& opts) {
    if (battery.edit_prompts.empty()) {
        fail(ErrorKind::invalid_argument, "eval_fact_modulation: empty battery");
    }
    const Tokenizer& tok = world.tokenizer();
    const bool sample = opts.paper_protocol || opts.decode == "sample";
    FactModulationResult res;
    int f2_hits = 0, f1_forgotten = 0;
    for (size_t q = 0; q < battery.edit_prompts.size(); ++q) {
        const auto& [para_idx, prompt] = battery.edit_prompts[q];
        Rng rng = Rng(opts.seed).fork(0xe5a1).fork(q);
        std::vector<int> gen = decode_tokens(model, prompt, tok.end_tag, opts, sample, &rng);
        const int answer = first_content_token(gen, tok.end_tag);
        const bool f2_ok = answer == world.edit().f2_object;
        const bool f1_seen =
            std::find(gen.begin(), gen.end(), world.edit().f1_object) != gen.end();
        f2_hits += f2_ok ? 1 : 0;
        f1_forgotten += f1_seen ? 0 : 1;
        QueryRecord rec;
        rec.kind = "edit";
        rec.query = world.text(prompt);
        rec.generation = world.text(gen);
        rec.f2_correct = f2_ok;
        rec.f1_present = f1_seen;
        res.records.push_back(std::move(rec));
    }
    res.f2_accuracy = double(f2_hits) / double(battery.edit_prompts.size());
    res.f1_forget_rate = double(f1_forgotten) / double(battery.edit_prompts.size());
    return res;
}

double eval_control(const Transformer& model, const FactWorld& world, const QueryBattery& battery,
                    const EvalOptions& opts, std::vector<QueryRecord>* records) {
    if (battery.control_prompts.empty()) {
        fail(ErrorKind::invalid_argument, "eval_control: empty control set");
    }
    const Tokenizer& tok = world.tokenizer();
    int hits = 0;
    for (const auto& [fact_id, prompt] : battery.control_prompts) {
        std::vector<int> gen = decode_tokens(model, prompt, tok.end_tag, opts, /*sample=*/false, nullptr);
        const int answer = first_content_token(gen, tok.end_tag);
        const bool ok = answer == world.fact(fact_id).object;
        hits += ok ? 1 : 0;
        if (records) {
            QueryRecord rec;
            rec.kind = "control";
            rec.query = world.text(prompt);
            rec.generation = world.text(gen);
            rec.control_correct = ok;
            records->push_back(std::move(rec));
        }
    }
    return double(hits) / double(battery.control_prompts.size());
}

double heldout_perplexity(const Transformer& model, const std::vector<std::vector<int>>& split) {
    if (split.empty()) fail(ErrorKind::invalid_argument, "heldout_perplexity: empty split");
    double nll_sum = 0.0;
    int64_t n_positions = 0;
    for (const auto& tokens : split) {
        if (tokens.size() < 2) continue;
        std::vector<int> inputs(tokens.begin(), tokens.end() - 1);
        TensorF logits = model.forward(inputs);
        for (size_t t = 0; t + 1 < tokens.size(); ++t) {
            double mx = -1e300;
            for (int j = 0; j < logits.cols(); ++j) mx = std::max(mx, double(logits.at(int64_t(t), j)));
            double sum = 0;
            for (int j = 0; j < logits.cols(); ++j) sum += std::exp(double(logits.at(int64_t(t), j)) - mx);
            const double logp =
                double(logits.at(int64_t(t), tokens[t + 1])) - mx - std::log(sum);
            nll_sum -= logp;
            ++n_positions;
        }
    }
    if (n_positions == 0) fail(ErrorKind::invalid_argument, "heldout_perplexity: no positions");
    return std::exp(nll_sum / double(n_positions));
}

LatentStats latent_f1_probe(const Transformer& model, const FactWorld& world,
                            const EvalOptions& opts) {
    const int f1 = world.edit().f1_object;
    const int vocab = model.config().vocab_size;
    const int n_para = static_cast<int>(world.edit().paraphrase_ids.size());
    LatentStats stats;
    double rank_sum = 0, prob_sum = 0;
    for (int p = 0; p < n_para; ++p) {
        std::vector<double> row = biased_last_row(model, world.edit_query(p), opts.logit_bias);
        int rank = 1;
        for (int j = 0; j < vocab; ++j) {
            if (j != f1 && row[size_t(j)] > row[size_t(f1)]) ++rank;
        }
        if (rank == 1) stats.f1_argmax_count += 1;
        double mx = row[size_t(argmax(row))];
        double sum = 0;
        for (int j = 0; j < vocab; ++j) sum += std::exp(row[size_t(j)] - mx);
        rank_sum += rank;
        prob_sum += std::exp(row[size_t(f1)] - mx) / sum;
    }
    stats.rank_mean = rank_sum / n_para;
    stats.prob_mean = prob_sum / n_para;
    const double threshold = std::ceil(opts.latent_rank_fraction * vocab);
    stats.latent = stats.f1_argmax_count == 0 && stats.rank_mean <= threshold;
    return stats;
}

EvalReport evaluate(const Transformer& model, const FactWorld& world, const EvalOptions& opts) {
    EvalOptions effective = opts;
    if (opts.paper_protocol) {
        effective.repeat_factor = std::max(opts.repeat_factor, 10);
        effective.decode = "sample";
    }
    QueryBattery battery = QueryBattery::build(world, effective.repeat_factor);
    EvalReport report;
    FactModulationResult mod = eval_fact_modulation(model, world, battery, effective);
    report.f2_accuracy = mod.f2_accuracy;
    report.f1_forget_rate = mod.f1_forget_rate;
    report.records = std::move(mod.records);
    report.fcontrol_accuracy = eval_control(model, world, battery, effective, &report.records);
    report.heldout_perplexity = heldout_perplexity(model, battery.heldout);
    report.latent_f1 = latent_f1_probe(model, world, effective);
    report.n_edit_queries = static_cast<int>(battery.edit_prompts.size());
    report.n_control = static_cast<int>(battery.control_prompts.size());
    report.n_heldout = static_cast<int>(battery.heldout.size());
    return report;
}

json EvalReport::to_json() const {
    json j;
    j["f2_accuracy"] = f2_accuracy;
    j["f1_forget_rate"] = f1_forget_rate;
    j["fcontrol_accuracy"] = fcontrol_accuracy;
    j["heldout_perplexity"] = heldout_perplexity;
    j["latent_f1_rank_mean"] = latent_f1.rank_mean;
    j["latent_f1_prob_mean"] = latent_f1.prob_mean;
    j["latent_f1_is_latent"] = latent_f1.latent;
    j["latent_f1_argmax_count"] = latent_f1.f1_argmax_count;
    j["n_edit_queries"] = n_edit_queries;
    j["n_control"] = n_control;
    j["n_heldout"] = n_heldout;
    return j;
}

std::string EvalReport::records_csv() const {
    std::ostringstream out;
    out << "kind,query,generation,f2_correct,f1_present,control_correct\n";
    for (const auto& r : records) {
        out << r.kind << ",\"" << r.query << "\",\"" << r.generation << "\"," << (r.f2_correct ? 1 : 0)
            << "," << (r.f1_present ? 1 : 0) << "," << (r.control_correct ? 1 : 0) << "\n";
    }
    return out.str();
}

void save_eval_report(const EvalReport& report, const std::string& out_dir, const json& lineage,
                      const json& options_snapshot) {
    std::filesystem::create_directories(out_dir);
    json j = report.to_json();
    j["lineage"] = lineage;
    j["options"] = options_snapshot;
    j["records_file"] = "records.csv";
    write_text_file(out_dir + "/metrics.json", j.dump(2) + "\n");
    write_text_file(out_dir + "/records.csv", report.records_csv());
}

}  // namespace cedit
