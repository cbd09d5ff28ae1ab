#pragma once

// Circuit localization: four analyses score model components for their role
// in recalling the target fact, and a convergence rule maps the top-ranked
// components onto adapter-targetable modules.
//   activation_magnitude  mean |hook_z| per head, |hook_post| per MLP layer
//   output_patch          logit drop when patching hook_z / hook_post
//   refined_patch         logit drop when patching hook_v / hook_pre
//   grad_norm             L2 norm of d(target logit)/d(weight matrix)

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fact_world.hpp"
#include "transformer.hpp"

namespace cedit {

struct ComponentScore {
    std::string component;
    double score = 0.0;
};

using MetricTables = std::map<std::string, std::vector<ComponentScore>>;

extern const char* const kMetricActivationMagnitude;
extern const char* const kMetricOutputPatch;
extern const char* const kMetricRefinedPatch;
extern const char* const kMetricGradNorm;

struct LocalizationReport {
    std::vector<std::string> clean_prompts;
    std::vector<std::string> corrupted_prompts;
    int target_token = -1;
    std::string target_word;
    MetricTables metrics;  // each table sorted by descending |score|
    double top_fraction = 0.10;
    int min_metrics = 2;
    std::vector<std::string> converged;
    bool localization_failed = false;

    nlohmann::json to_json() const;
    static LocalizationReport from_json(const nlohmann::json& j);
};

struct LocalizeOptions {
    int n_pairs = 5;            // paraphrase pairs averaged per metric
    bool single_prompt = false; // exact single-pair protocol
    double top_fraction = 0.10;
    int min_metrics = 2;
};

// Canonical modules a component implicates: attention components map to that
// layer's qkv_proj and o_proj, gate-side components to gate_up_proj,
// output-side MLP components to down_proj.
std::vector<std::string> component_modules(const std::string& component);

// Top-fraction / min-metrics convergence over serialized score tables.
// Boundary ties are included. Throws a localization error when empty.
std::vector<std::string> converge(const MetricTables& metrics, double top_fraction,
                                  int min_metrics);

LocalizationReport localize(Transformer& model, const FactWorld& world,
                            const LocalizeOptions& opts);

void save_localization(const LocalizationReport& report, const std::string& path,
                       const nlohmann::json& lineage);
LocalizationReport load_localization(const std::string& path);

// ---------------------------------------------------------------------------
// Per-metric analyses (templated so gradient checks can run in double).
// ---------------------------------------------------------------------------

template <typename T>
std::vector<ComponentScore> activation_magnitude(const TransformerT<T>& model,
                                                 const std::vector<std::vector<int>>& prompts) {
    if (prompts.empty()) fail(ErrorKind::invalid_argument, "activation_magnitude: no prompts");
    const auto& cfg = model.config();
    std::vector<HookPoint> hooks;
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int h = 0; h < cfg.n_heads; ++h) hooks.push_back({l, HookSite::attn_z, h});
        hooks.push_back({l, HookSite::mlp_post, -1});
    }
    std::map<HookPoint, double> sums;
    for (const auto& prompt : prompts) {
        auto [logits, cache] = model.forward_with_cache(prompt, hooks);
        const int64_t last = static_cast<int64_t>(prompt.size()) - 1;
        for (const auto& hp : hooks) {
            const TensorT<T>& act = cache.at(hp);
            double acc = 0;
            for (int j = 0; j < act.cols(); ++j) {
                acc += std::abs(static_cast<double>(act.at(last, j)));
            }
            sums[hp] += acc / act.cols();
        }
    }
    std::vector<ComponentScore> out;
    for (const auto& hp : hooks) {
        out.push_back({hp.str(), sums[hp] / static_cast<double>(prompts.size())});
    }
    return out;
}

namespace detail {

template <typename T>
double target_logit(const TensorT<T>& logits, int target) {
    return static_cast<double>(logits.at(logits.rows() - 1, target));
}

}  // namespace detail

// Logit drops at one patch granularity. `sites` pairs attention hooks with an
// MLP site; clean/corrupted prompts must tokenize to the same length.
template <typename T>
std::vector<ComponentScore> patch_drops(const TransformerT<T>& model,
                                        const std::vector<int>& clean_prompt,
                                        const std::vector<int>& corrupted_prompt, int target_token,
                                        HookSite attn_site, HookSite mlp_site) {
    if (clean_prompt.size() != corrupted_prompt.size()) {
        fail(ErrorKind::invalid_argument,
             "patching requires equal-length clean and corrupted prompts");
    }
    const auto& cfg = model.config();
    std::vector<HookPoint> hooks;
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int h = 0; h < cfg.n_heads; ++h) hooks.push_back({l, attn_site, h});
        hooks.push_back({l, mlp_site, -1});
    }
    auto [corr_logits, corr_cache] = model.forward_with_cache(corrupted_prompt, hooks);
    const double clean_logit = detail::target_logit(model.forward(clean_prompt), target_token);
    std::vector<ComponentScore> out;
    for (const auto& hp : hooks) {
        ActivationCacheT<T> patch;
        patch.emplace(hp, corr_cache.at(hp).clone());
        TensorT<T> patched = model.forward_with_patch(clean_prompt, patch);
        out.push_back({hp.str(), clean_logit - detail::target_logit(patched, target_token)});
    }
    return out;
}

template <typename T>
std::vector<ComponentScore> output_patch(const TransformerT<T>& model,
                                         const std::vector<int>& clean_prompt,
                                         const std::vector<int>& corrupted_prompt,
                                         int target_token) {
    return patch_drops(model, clean_prompt, corrupted_prompt, target_token, HookSite::attn_z,
                       HookSite::mlp_post);
}

template <typename T>
std::vector<ComponentScore> refined_patch(const TransformerT<T>& model,
                                          const std::vector<int>& clean_prompt,
                                          const std::vector<int>& corrupted_prompt,
                                          int target_token) {
    return patch_drops(model, clean_prompt, corrupted_prompt, target_token, HookSite::attn_v,
                       HookSite::mlp_pre);
}

// L2 norms of the target-logit gradient w.r.t. named matrices; fused matrices
// also report per-slice norms (qkv -> W_Q/W_K/W_V, gate_up -> W_gate/W_in).
template <typename T>
std::vector<ComponentScore> gradient_norms(TransformerT<T>& model, const std::vector<int>& prompt,
                                           int target_token,
                                           const std::vector<std::string>& param_names) {
    for (const auto& name : param_names) {
        if (!model.has_param(name)) {
            fail(ErrorKind::invalid_argument, "gradient_norms: unknown parameter " + name);
        }
    }
    model.zero_grads();
    TapeT<T> tape;
    TensorT<T> logits = model.forward(prompt, &tape);
    const int last = static_cast<int>(prompt.size()) - 1;
    TensorT<T> objective = slice_cols(slice_rows(logits, last, last + 1, &tape), target_token,
                                      target_token + 1, &tape);
    tape.backward(objective);

    auto col_range_norm = [](const std::vector<T>& grad, int rows, int cols, int c0, int c1) {
        double acc = 0;
        for (int i = 0; i < rows; ++i) {
            for (int j = c0; j < c1; ++j) {
                const double g = static_cast<double>(grad[static_cast<size_t>(i) * cols + j]);
                acc += g * g;
            }
        }
        return std::sqrt(acc);
    };

    std::vector<ComponentScore> out;
    for (const auto& name : param_names) {
        const TensorT<T>& p = model.param(name);
        const std::vector<T>* grad = p.grad();
        if (!grad) {
            out.push_back({name, 0.0});
            continue;
        }
        const int rows = p.ndim() == 2 ? p.dim(0) : 1;
        const int cols = p.cols();
        out.push_back({name, col_range_norm(*grad, rows, cols, 0, cols)});
        if (name.find("self_attn.qkv_proj") != std::string::npos) {
            const int d = cols / 3;
            out.push_back({name + ":W_Q", col_range_norm(*grad, rows, cols, 0, d)});
            out.push_back({name + ":W_K", col_range_norm(*grad, rows, cols, d, 2 * d)});
            out.push_back({name + ":W_V", col_range_norm(*grad, rows, cols, 2 * d, 3 * d)});
        } else if (name.find("mlp.gate_up_proj") != std::string::npos) {
            const int dff = cols / 2;
            out.push_back({name + ":W_gate", col_range_norm(*grad, rows, cols, 0, dff)});
            out.push_back({name + ":W_in", col_range_norm(*grad, rows, cols, dff, 2 * dff)});
        }
    }
    model.zero_grads();
    return out;
}

}  // namespace cedit
