#pragma once

// Decoder-only transformer with fused projections (qkv_proj, gate_up_proj),
// SwiGLU MLP, pre-norm RMS blocks, learned absolute positions and an untied
// lm_head. Exposes named activation sites for caching and patching:
//   attn.hook_v  per-head value vectors          [T x d_head]
//   attn.hook_z  per-head attention outputs      [T x d_head] (pre o_proj)
//   mlp.hook_pre gate pre-activation             [T x d_ff]
//   mlp.hook_post post-nonlinearity MLP state    [T x d_ff]  (down_proj input)

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tensor.hpp"
#include "util.hpp"

namespace cedit {

struct ModelConfig {
    int n_layers = 4;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 0;
    int max_seq = 64;
    uint64_t seed = 7;
    float rms_eps = 1e-5f;

    int d_head() const { return d_model / n_heads; }
    void validate() const {
        if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_ff <= 0 || vocab_size <= 0 ||
            max_seq <= 0) {
            fail(ErrorKind::invalid_argument, "model config dims must be positive");
        }
        if (d_model % n_heads != 0) {
            fail(ErrorKind::invalid_argument, "d_model must be divisible by n_heads");
        }
    }
};

enum class HookSite { attn_v, attn_z, mlp_pre, mlp_post };

struct HookPoint {
    int layer = 0;
    HookSite site = HookSite::attn_z;
    int head = -1;  // required for attention sites, -1 for MLP sites

    bool operator<(const HookPoint& o) const {
        if (layer != o.layer) return layer < o.layer;
        if (site != o.site) return site < o.site;
        return head < o.head;
    }
    bool operator==(const HookPoint& o) const {
        return layer == o.layer && site == o.site && head == o.head;
    }

    bool is_attention() const { return site == HookSite::attn_v || site == HookSite::attn_z; }

    std::string str() const {
        std::string s = "layers." + std::to_string(layer) + ".";
        switch (site) {
            case HookSite::attn_v: s += "attn.hook_v"; break;
            case HookSite::attn_z: s += "attn.hook_z"; break;
            case HookSite::mlp_pre: s += "mlp.hook_pre"; break;
            case HookSite::mlp_post: s += "mlp.hook_post"; break;
        }
        if (is_attention()) s += ".h" + std::to_string(head);
        return s;
    }

    static HookPoint parse(const std::string& s);
};

inline HookPoint HookPoint::parse(const std::string& s) {
    HookPoint hp;
    if (s.rfind("layers.", 0) != 0) fail(ErrorKind::format, "bad hook name: " + s);
    size_t p = 7;
    size_t dot = s.find('.', p);
    if (dot == std::string::npos) fail(ErrorKind::format, "bad hook name: " + s);
    hp.layer = std::stoi(s.substr(p, dot - p));
    std::string rest = s.substr(dot + 1);
    auto take_head = [&](const std::string& prefix) -> bool {
        if (rest.rfind(prefix, 0) != 0) return false;
        std::string tail = rest.substr(prefix.size());
        if (tail.empty() || tail[0] != '.' || tail[1] != 'h') {
            fail(ErrorKind::format, "attention hook needs a head suffix: " + s);
        }
        hp.head = std::stoi(tail.substr(2));
        return true;
    };
    if (take_head("attn.hook_v")) hp.site = HookSite::attn_v;
    else if (take_head("attn.hook_z")) hp.site = HookSite::attn_z;
    else if (rest == "mlp.hook_pre") { hp.site = HookSite::mlp_pre; hp.head = -1; }
    else if (rest == "mlp.hook_post") { hp.site = HookSite::mlp_post; hp.head = -1; }
    else fail(ErrorKind::format, "bad hook name: " + s);
    return hp;
}

template <typename T>
using ActivationCacheT = std::map<HookPoint, TensorT<T>>;

template <typename T>
class TransformerT {
public:
    // Output transform for a named projection module (adapter injection
    // point): receives the module output y and its input x.
    using ModuleTap =
        std::function<TensorT<T>(const TensorT<T>& y, const TensorT<T>& x, TapeT<T>* tape)>;

    explicit TransformerT(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        const T s = T(0.02);
        auto mat = [&](const std::string& name, int in, int out) {
            add_param(name, TensorT<T>::randn({in, out}, rng, s));
        };
        add_param("embed", TensorT<T>::randn({cfg_.vocab_size, cfg_.d_model}, rng, s));
        add_param("pos_embed", TensorT<T>::randn({cfg_.max_seq, cfg_.d_model}, rng, s));
        for (int i = 0; i < cfg_.n_layers; ++i) {
            const std::string L = "layers." + std::to_string(i) + ".";
            add_param(L + "input_layernorm.weight", TensorT<T>::full({cfg_.d_model}, T(1)));
            mat(L + "self_attn.qkv_proj", cfg_.d_model, 3 * cfg_.d_model);
            mat(L + "self_attn.o_proj", cfg_.d_model, cfg_.d_model);
            add_param(L + "post_attention_layernorm.weight", TensorT<T>::full({cfg_.d_model}, T(1)));
            mat(L + "mlp.gate_up_proj", cfg_.d_model, 2 * cfg_.d_ff);
            mat(L + "mlp.down_proj", cfg_.d_ff, cfg_.d_model);
        }
        add_param("norm.weight", TensorT<T>::full({cfg_.d_model}, T(1)));
        mat("lm_head", cfg_.d_model, cfg_.vocab_size);
        set_trainable(true);
    }

    const ModelConfig& config() const { return cfg_; }

    const std::vector<std::string>& param_names() const { return order_; }

    TensorT<T>& param(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) fail(ErrorKind::invalid_argument, "unknown parameter: " + name);
        return it->second;
    }
    const TensorT<T>& param(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) fail(ErrorKind::invalid_argument, "unknown parameter: " + name);
        return it->second;
    }
    bool has_param(const std::string& name) const { return params_.count(name) != 0; }

    std::vector<TensorT<T>*> all_params() {
        std::vector<TensorT<T>*> out;
        for (const auto& n : order_) out.push_back(&params_.at(n));
        return out;
    }

    void set_trainable(bool v) {
        for (auto& [name, p] : params_) p.set_requires_grad(v);
    }
    void zero_grads() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    // Names of the four adapter-targetable projection modules, per layer.
    std::vector<std::string> module_names() const {
        std::vector<std::string> out;
        for (int i = 0; i < cfg_.n_layers; ++i) {
            const std::string L = "layers." + std::to_string(i) + ".";
            out.push_back(L + "self_attn.qkv_proj");
            out.push_back(L + "self_attn.o_proj");
            out.push_back(L + "mlp.gate_up_proj");
            out.push_back(L + "mlp.down_proj");
        }
        return out;
    }

    bool is_module(const std::string& name) const {
        if (!params_.count(name)) return false;
        return name.find("self_attn.qkv_proj") != std::string::npos ||
               name.find("self_attn.o_proj") != std::string::npos ||
               name.find("mlp.gate_up_proj") != std::string::npos ||
               name.find("mlp.down_proj") != std::string::npos;
    }

    void set_module_tap(const std::string& name, ModuleTap tap) {
        if (!is_module(name)) {
            fail(ErrorKind::invalid_argument, "not an adapter-targetable module: " + name);
        }
        taps_[name] = std::move(tap);
    }
    void clear_module_tap(const std::string& name) { taps_.erase(name); }
    void clear_module_taps() { taps_.clear(); }
    bool has_module_tap(const std::string& name) const { return taps_.count(name) != 0; }

    void validate_hook(const HookPoint& hp) const {
        const bool layer_ok = hp.layer >= 0 && hp.layer < cfg_.n_layers;
        const bool head_ok = hp.is_attention() ? (hp.head >= 0 && hp.head < cfg_.n_heads)
                                               : hp.head == -1;
        if (!layer_ok || !head_ok) {
            fail(ErrorKind::invalid_argument, "unknown hook point: " + hp.str());
        }
    }

    std::vector<HookPoint> all_hooks() const {
        std::vector<HookPoint> out;
        for (int l = 0; l < cfg_.n_layers; ++l) {
            for (int h = 0; h < cfg_.n_heads; ++h) out.push_back({l, HookSite::attn_v, h});
            for (int h = 0; h < cfg_.n_heads; ++h) out.push_back({l, HookSite::attn_z, h});
            out.push_back({l, HookSite::mlp_pre, -1});
            out.push_back({l, HookSite::mlp_post, -1});
        }
        return out;
    }

    TensorT<T> forward(std::span<const int> tokens, TapeT<T>* tape = nullptr) const {
        return forward_impl(tokens, tape, nullptr);
    }

    std::pair<TensorT<T>, ActivationCacheT<T>> forward_with_cache(
        std::span<const int> tokens, const std::vector<HookPoint>& hooks) const {
        HookContext ctx;
        std::set<HookPoint> filter;
        for (const auto& hp : hooks) {
            validate_hook(hp);
            filter.insert(hp);
        }
        ActivationCacheT<T> cache;
        ctx.cache_filter = &filter;
        ctx.cache_out = &cache;
        TensorT<T> logits = forward_impl(tokens, nullptr, &ctx);
        return {std::move(logits), std::move(cache)};
    }

    TensorT<T> forward_with_patch(std::span<const int> tokens,
                                  const ActivationCacheT<T>& patches) const {
        for (const auto& [hp, value] : patches) validate_hook(hp);
        HookContext ctx;
        ctx.patches = &patches;
        return forward_impl(tokens, nullptr, &ctx);
    }

    std::vector<int> generate_greedy(std::span<const int> prompt, int max_new,
                                     int stop_token) const {
        if (prompt.empty()) fail(ErrorKind::invalid_argument, "generate: empty prompt");
        std::vector<int> seq(prompt.begin(), prompt.end());
        std::vector<int> out;
        for (int step = 0; step < max_new; ++step) {
            if (static_cast<int>(seq.size()) >= cfg_.max_seq) break;
            TensorT<T> logits = forward(seq);
            const int64_t last = logits.rows() - 1;
            int best = 0;
            T best_v = logits.at(last, 0);
            for (int j = 1; j < cfg_.vocab_size; ++j) {
                if (logits.at(last, j) > best_v) {
                    best_v = logits.at(last, j);
                    best = j;
                }
            }
            out.push_back(best);
            seq.push_back(best);
            if (best == stop_token) break;
        }
        return out;
    }

    // Stable digest of every parameter tensor, in registry order.
    std::string weights_hash() const {
        std::string acc;
        for (const auto& name : order_) {
            const auto& p = params_.at(name);
            acc += name;
            acc += ':';
            acc += sha256_hex(p.ptr(), sizeof(T) * static_cast<size_t>(p.numel()));
            acc += '\n';
        }
        return sha256_hex(acc);
    }

private:
    struct HookContext {
        const ActivationCacheT<T>* patches = nullptr;
        const std::set<HookPoint>* cache_filter = nullptr;
        ActivationCacheT<T>* cache_out = nullptr;
    };

    void add_param(const std::string& name, TensorT<T> t) {
        params_.emplace(name, std::move(t));
        order_.push_back(name);
    }

    TensorT<T> linear(const std::string& name, const TensorT<T>& x, TapeT<T>* tape) const {
        TensorT<T> y = matmul(x, params_.at(name), tape);
        auto it = taps_.find(name);
        if (it != taps_.end()) y = it->second(y, x, tape);
        return y;
    }

    TensorT<T> apply_site(const HookPoint& hp, TensorT<T> value, const HookContext* ctx) const {
        if (!ctx) return value;
        if (ctx->patches) {
            auto it = ctx->patches->find(hp);
            if (it != ctx->patches->end()) {
                if (it->second.shape() != value.shape()) {
                    fail(ErrorKind::dimension,
                         "patch shape " + detail::shape_str(it->second.shape()) +
                             " does not match activation " + detail::shape_str(value.shape()) +
                             " at " + hp.str());
                }
                value = it->second.clone();
            }
        }
        if (ctx->cache_filter && ctx->cache_filter->count(hp) && ctx->cache_out) {
            ctx->cache_out->emplace(hp, value.clone());
        }
        return value;
    }

    TensorT<T> forward_impl(std::span<const int> tokens, TapeT<T>* tape,
                            const HookContext* ctx) const {
        if (tokens.empty()) fail(ErrorKind::invalid_argument, "forward: empty token sequence");
        const int n = static_cast<int>(tokens.size());
        if (n > cfg_.max_seq) {
            fail(ErrorKind::invalid_argument, "sequence length " + std::to_string(n) +
                                                  " exceeds max_seq " + std::to_string(cfg_.max_seq));
        }
        std::vector<int> ids(tokens.begin(), tokens.end());
        for (int id : ids) {
            if (id < 0 || id >= cfg_.vocab_size) {
                fail(ErrorKind::invalid_argument, "token id out of vocabulary");
            }
        }
        const int dh = cfg_.d_head();
        const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

        TensorT<T> x = embed_rows(params_.at("embed"), ids, tape);
        x = add(x, slice_rows(params_.at("pos_embed"), 0, n, tape), tape);

        TensorT<T> mask = causal_mask(n);
        for (int layer = 0; layer < cfg_.n_layers; ++layer) {
            const std::string L = "layers." + std::to_string(layer) + ".";
            TensorT<T> h = rms_norm(x, params_.at(L + "input_layernorm.weight"),
                                    static_cast<T>(cfg_.rms_eps), tape);
            TensorT<T> qkv = linear(L + "self_attn.qkv_proj", h, tape);
            std::vector<TensorT<T>> heads;
            heads.reserve(static_cast<size_t>(cfg_.n_heads));
            for (int head = 0; head < cfg_.n_heads; ++head) {
                const int q0 = head * dh;
                const int k0 = cfg_.d_model + head * dh;
                const int v0 = 2 * cfg_.d_model + head * dh;
                TensorT<T> q = slice_cols(qkv, q0, q0 + dh, tape);
                TensorT<T> k = slice_cols(qkv, k0, k0 + dh, tape);
                TensorT<T> v = slice_cols(qkv, v0, v0 + dh, tape);
                v = apply_site({layer, HookSite::attn_v, head}, std::move(v), ctx);
                TensorT<T> scores =
                    scale_const(matmul(q, transpose2d(k, tape), tape), inv_sqrt_dh, tape);
                scores = add(scores, mask, tape);
                TensorT<T> probs = softmax_rows(scores, tape);
                TensorT<T> z = matmul(probs, v, tape);
                z = apply_site({layer, HookSite::attn_z, head}, std::move(z), ctx);
                heads.push_back(std::move(z));
            }
            TensorT<T> z_all = concat_cols(heads, tape);
            TensorT<T> attn_out = linear(L + "self_attn.o_proj", z_all, tape);
            x = add(x, attn_out, tape);

            TensorT<T> h2 = rms_norm(x, params_.at(L + "post_attention_layernorm.weight"),
                                     static_cast<T>(cfg_.rms_eps), tape);
            TensorT<T> gate_up = linear(L + "mlp.gate_up_proj", h2, tape);
            TensorT<T> gate = slice_cols(gate_up, 0, cfg_.d_ff, tape);
            TensorT<T> up = slice_cols(gate_up, cfg_.d_ff, 2 * cfg_.d_ff, tape);
            gate = apply_site({layer, HookSite::mlp_pre, -1}, std::move(gate), ctx);
            TensorT<T> act = mul(silu(gate, tape), up, tape);
            act = apply_site({layer, HookSite::mlp_post, -1}, std::move(act), ctx);
            TensorT<T> mlp_out = linear(L + "mlp.down_proj", act, tape);
            x = add(x, mlp_out, tape);
        }
        x = rms_norm(x, params_.at("norm.weight"), static_cast<T>(cfg_.rms_eps), tape);
        return matmul(x, params_.at("lm_head"), tape);
    }

    TensorT<T> causal_mask(int n) const {
        TensorT<T> mask = TensorT<T>::zeros({n, n});
        T* p = mask.mutable_ptr();
        for (int i = 0; i < n; ++i) {
            for (int j = i + 1; j < n; ++j) p[i * n + j] = T(-1e9);
        }
        return mask;
    }

    ModelConfig cfg_;
    std::map<std::string, TensorT<T>> params_;
    std::vector<std::string> order_;
    std::map<std::string, ModuleTap> taps_;
};

using Transformer = TransformerT<float>;
using ActivationCache = ActivationCacheT<float>;

}  // namespace cedit
