#include "localizer.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using nlohmann::json;

namespace cedit {

const char* const kMetricActivationMagnitude = "activation_magnitude";
const char* const kMetricOutputPatch = "output_patch";
const char* const kMetricRefinedPatch = "refined_patch";
const char* const kMetricGradNorm = "grad_norm";

std::vector<std::string> component_modules(const std::string& component) {
    const size_t dot = component.find('.', 7);
    if (component.rfind("layers.", 0) != 0 || dot == std::string::npos) return {};
    const std::string layer = component.substr(0, dot);  // "layers.N"
    if (component.find(".attn.") != std::string::npos ||
        component.find(".self_attn.") != std::string::npos) {
        return {layer + ".self_attn.qkv_proj", layer + ".self_attn.o_proj"};
    }
    if (component.find("mlp.hook_pre") != std::string::npos ||
        component.find("mlp.gate_up_proj") != std::string::npos) {
        return {layer + ".mlp.gate_up_proj"};
    }
    if (component.find("mlp.hook_post") != std::string::npos ||
        component.find("mlp.down_proj") != std::string::npos) {
        return {layer + ".mlp.down_proj"};
    }
    return {};
}

namespace {

void sort_by_abs_desc(std::vector<ComponentScore>& table) {
    std::stable_sort(table.begin(), table.end(), [](const ComponentScore& a, const ComponentScore& b) {
        return std::abs(a.score) > std::abs(b.score);
    });
}

int module_sort_key(const std::string& name) {
    if (name.find("self_attn.qkv_proj") != std::string::npos) return 0;
    if (name.find("self_attn.o_proj") != std::string::npos) return 1;
    if (name.find("mlp.gate_up_proj") != std::string::npos) return 2;
    return 3;
}

int module_layer(const std::string& name) {
    return std::stoi(name.substr(7, name.find('.', 7) - 7));
}

}  // namespace

std::vector<std::string> converge(const MetricTables& metrics, double top_fraction,
                                  int min_metrics) {
    if (top_fraction <= 0.0 || top_fraction > 1.0 || min_metrics < 1) {
        fail(ErrorKind::invalid_argument, "converge: bad convergence rule parameters");
    }
    std::map<std::string, int> hits;
    for (const auto& [metric, table_in] : metrics) {
        if (table_in.empty()) continue;
        std::vector<ComponentScore> table = table_in;
        sort_by_abs_desc(table);
        const size_t k = static_cast<size_t>(
            std::ceil(top_fraction * static_cast<double>(table.size())));
        const double boundary = std::abs(table[std::min(k, table.size()) - 1].score);
        std::set<std::string> modules;
        for (const auto& cs : table) {
            if (std::abs(cs.score) < boundary) break;  // ties at the boundary stay in
            for (const auto& mod : component_modules(cs.component)) modules.insert(mod);
        }
        for (const auto& mod : modules) hits[mod] += 1;
    }
    std::vector<std::string> selected;
    for (const auto& [mod, count] : hits) {
        if (count >= min_metrics) selected.push_back(mod);
    }
    if (selected.empty()) {
        fail(ErrorKind::localization,
             "localization failed: no module ranked in the top fraction of >= " +
                 std::to_string(min_metrics) + " metrics");
    }
    std::sort(selected.begin(), selected.end(), [](const std::string& a, const std::string& b) {
        if (module_layer(a) != module_layer(b)) return module_layer(a) < module_layer(b);
        return module_sort_key(a) < module_sort_key(b);
    });
    return selected;
}

LocalizationReport localize(Transformer& model, const FactWorld& world,
                            const LocalizeOptions& opts) {
    const EditSpec& edit = world.edit();
    const int want_pairs = opts.single_prompt ? 1 : opts.n_pairs;
    if (want_pairs < 1) fail(ErrorKind::invalid_argument, "localize: need at least one pair");
    if (want_pairs > static_cast<int>(edit.paraphrase_ids.size())) {
        fail(ErrorKind::invalid_argument, "localize: more pairs than paraphrases");
    }

    // Corruption subjects: other subjects holding the edit relation, so the
    // corrupted prompt is an unrelated query of identical token length.
    std::vector<int> corruption_subjects;
    for (const auto& f : world.facts()) {
        if (f.relation == edit.relation && f.subject != edit.subject) {
            corruption_subjects.push_back(f.subject);
        }
    }
    if (corruption_subjects.empty()) {
        fail(ErrorKind::invalid_argument, "localize: no corruption subjects available");
    }

    LocalizationReport report;
    report.target_token = edit.f1_object;
    report.target_word = world.tokenizer().word(edit.f1_object);
    report.top_fraction = opts.top_fraction;
    report.min_metrics = opts.min_metrics;

    std::vector<std::vector<int>> cleans, correcteds;
    for (int i = 0; i < want_pairs; ++i) {
        std::vector<int> clean = world.edit_query(i);
        const int tmpl = edit.paraphrase_ids[static_cast<size_t>(i)];
        const int subj = corruption_subjects[static_cast<size_t>(i) % corruption_subjects.size()];
        std::vector<int> corrupted = world.render_query(edit.relation, tmpl, subj);
        report.clean_prompts.push_back(world.text(clean));
        report.corrupted_prompts.push_back(world.text(corrupted));
        cleans.push_back(std::move(clean));
        correcteds.push_back(std::move(corrupted));
    }

    auto average_tables = [](std::vector<std::vector<ComponentScore>> per_pair) {
        std::vector<ComponentScore> avg = per_pair.at(0);
        for (size_t p = 1; p < per_pair.size(); ++p) {
            for (size_t i = 0; i < avg.size(); ++i) avg[i].score += per_pair[p][i].score;
        }
        for (auto& cs : avg) cs.score /= static_cast<double>(per_pair.size());
        return avg;
    };

    report.metrics[kMetricActivationMagnitude] = activation_magnitude(model, cleans);
    {
        std::vector<std::vector<ComponentScore>> o, r, g;
        for (int i = 0; i < want_pairs; ++i) {
            o.push_back(output_patch(model, cleans[size_t(i)], correcteds[size_t(i)],
                                     edit.f1_object));
            r.push_back(refined_patch(model, cleans[size_t(i)], correcteds[size_t(i)],
                                      edit.f1_object));
            g.push_back(gradient_norms(model, cleans[size_t(i)], edit.f1_object,
                                       model.module_names()));
        }
        report.metrics[kMetricOutputPatch] = average_tables(std::move(o));
        report.metrics[kMetricRefinedPatch] = average_tables(std::move(r));
        report.metrics[kMetricGradNorm] = average_tables(std::move(g));
    }
    for (auto& [name, table] : report.metrics) sort_by_abs_desc(table);

    try {
        report.converged = converge(report.metrics, opts.top_fraction, opts.min_metrics);
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::localization) throw;
        report.localization_failed = true;
    }
    return report;
}

json LocalizationReport::to_json() const {
    json j;
    j["format"] = "circuitedit-localization";
    j["version"] = 1;
    j["clean_prompts"] = clean_prompts;
    j["corrupted_prompts"] = corrupted_prompts;
    j["target_token"] = target_token;
    j["target_word"] = target_word;
    json m;
    for (const auto& [name, table] : metrics) {
        json rows = json::array();
        for (const auto& cs : table) rows.push_back({{"component", cs.component}, {"score", cs.score}});
        m[name] = rows;
    }
    j["metrics"] = m;
    j["convergence"] = {{"top_fraction", top_fraction},
                        {"min_metrics", min_metrics},
                        {"converged", converged},
                        {"failed", localization_failed}};
    return j;
}

LocalizationReport LocalizationReport::from_json(const json& j) {
    LocalizationReport r;
    try {
        if (j.at("format") != "circuitedit-localization") {
            fail(ErrorKind::format, "not a localization report");
        }
        r.clean_prompts = j.at("clean_prompts").get<std::vector<std::string>>();
        r.corrupted_prompts = j.at("corrupted_prompts").get<std::vector<std::string>>();
        r.target_token = j.at("target_token");
        r.target_word = j.at("target_word");
        for (const auto& [name, rows] : j.at("metrics").items()) {
            std::vector<ComponentScore> table;
            for (const auto& row : rows) {
                table.push_back({row.at("component"), row.at("score")});
            }
            r.metrics[name] = std::move(table);
        }
        r.top_fraction = j.at("convergence").at("top_fraction");
        r.min_metrics = j.at("convergence").at("min_metrics");
        r.converged = j.at("convergence").at("converged").get<std::vector<std::string>>();
        r.localization_failed = j.at("convergence").at("failed");
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("malformed localization report: ") + e.what());
    }
    return r;
}

void save_localization(const LocalizationReport& report, const std::string& path,
                       const json& lineage) {
    json j = report.to_json();
    j["lineage"] = lineage;
    write_text_file(path, j.dump(2) + "\n");
}

LocalizationReport load_localization(const std::string& path) {
    try {
        return LocalizationReport::from_json(json::parse(read_text_file(path)));
    } catch (const json::exception& e) {
        fail(ErrorKind::format, "malformed localization report " + path + ": " + e.what());
    }
}

}  // namespace cedit
