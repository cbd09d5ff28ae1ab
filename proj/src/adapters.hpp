#pragma once

// IA3 and LoRA adapters over frozen base weights. IA3 rescales each targeted
// module's output (y = l .* Wx, l initialized to ones), which merges exactly
// into the weight matrix as column scaling. LoRA adds (alpha/r) * B A x with
// zero-initialized B, so both adapters are output-identities at init.

#include <map>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "fact_world.hpp"
#include "transformer.hpp"

namespace cedit {

template <typename T>
struct IA3AdapterT {
    std::map<std::string, TensorT<T>> scales;  // module -> vector [out_dim]
    bool trained = false;

    static IA3AdapterT init(const TransformerT<T>& model, const std::vector<std::string>& targets) {
        IA3AdapterT a;
        for (const auto& name : targets) {
            if (!model.is_module(name)) {
                fail(ErrorKind::invalid_argument, "ia3: not an adapter-targetable module: " + name);
            }
            const int out_dim = model.param(name).dim(1);
            a.scales.emplace(name, TensorT<T>::full({out_dim}, T(1)));
        }
        return a;
    }
};

template <typename T>
struct LoRAAdapterT {
    struct Module {
        TensorT<T> a;  // [rank, d_in]
        TensorT<T> b;  // [d_out, rank], zero at init
        int rank = 4;
        T alpha = T(8);
    };
    std::map<std::string, Module> modules;
    bool trained = false;

    static LoRAAdapterT init(const TransformerT<T>& model, const std::vector<std::string>& targets,
                             int rank, T alpha, uint64_t seed) {
        if (rank < 1) fail(ErrorKind::invalid_argument, "lora rank must be >= 1");
        LoRAAdapterT a;
        Rng rng(seed);
        for (const auto& name : targets) {
            if (!model.is_module(name)) {
                fail(ErrorKind::invalid_argument, "lora: not an adapter-targetable module: " + name);
            }
            const auto& w = model.param(name);
            Module m;
            m.rank = rank;
            m.alpha = alpha;
            m.a = TensorT<T>::randn({rank, w.dim(0)}, rng, T(0.02));
            m.b = TensorT<T>::zeros({w.dim(1), rank});
            a.modules.emplace(name, std::move(m));
        }
        return a;
    }
};

using IA3Adapter = IA3AdapterT<float>;
using LoRAAdapter = LoRAAdapterT<float>;
using AdapterVariant = std::variant<IA3Adapter, LoRAAdapter>;

// Handle to an adapter installed on a model: target names plus the trainable
// parameter tensors (shared storage with the adapter struct).
struct InjectedAdapter {
    std::vector<std::string> targets;
    std::vector<TensorF*> params;
};

template <typename T>
void validate_adapter_dims(const TransformerT<T>& model, const std::string& name,
                           int in_dim, int out_dim) {
    if (!model.has_param(name) || !model.is_module(name)) {
        fail(ErrorKind::invalid_argument, "adapter target missing from registry: " + name);
    }
    const auto& w = model.param(name);
    if ((in_dim >= 0 && w.dim(0) != in_dim) || (out_dim >= 0 && w.dim(1) != out_dim)) {
        fail(ErrorKind::dimension, "adapter dims do not match module " + name);
    }
}

template <typename T>
std::vector<std::string> inject_ia3_taps(TransformerT<T>& model, IA3AdapterT<T>& adapter) {
    std::vector<std::string> targets;
    for (auto& [name, l] : adapter.scales) {
        validate_adapter_dims(model, name, -1, l.dim(0));
        // Grad slot must exist before the tap captures its copy, so that the
        // captured tensor and the adapter struct share gradient storage.
        l.set_requires_grad(true);
        model.set_module_tap(name, [l](const TensorT<T>& y, const TensorT<T>& x, TapeT<T>* tape) {
            (void)x;
            return scale_by_vector(y, l, tape);
        });
        targets.push_back(name);
    }
    return targets;
}

template <typename T>
std::vector<std::string> inject_lora_taps(TransformerT<T>& model, LoRAAdapterT<T>& adapter) {
    std::vector<std::string> targets;
    for (auto& [name, mod] : adapter.modules) {
        validate_adapter_dims(model, name, mod.a.dim(1), mod.b.dim(0));
        if (mod.a.dim(0) != mod.rank || mod.b.dim(1) != mod.rank) {
            fail(ErrorKind::dimension, "lora factor ranks do not match for " + name);
        }
        mod.a.set_requires_grad(true);
        mod.b.set_requires_grad(true);
        const T scale = mod.alpha / static_cast<T>(mod.rank);
        model.set_module_tap(
            name, [a = mod.a, b = mod.b, scale](const TensorT<T>& y, const TensorT<T>& x,
                                                TapeT<T>* tape) {
                TensorT<T> down = matmul(x, transpose2d(a, tape), tape);
                TensorT<T> delta = matmul(down, transpose2d(b, tape), tape);
                return add(y, scale_const(delta, scale, tape), tape);
            });
        targets.push_back(name);
    }
    return targets;
}

InjectedAdapter inject(Transformer& model, IA3Adapter& adapter);
InjectedAdapter inject(Transformer& model, LoRAAdapter& adapter);
InjectedAdapter inject(Transformer& model, AdapterVariant& adapter);
void remove_adapter(Transformer& model, const InjectedAdapter& injected);

// Folds IA3 scaling into the target weights (column scaling) and removes the
// taps; the resulting model carries no adapter state.
template <typename T>
void merge_and_unload(TransformerT<T>& model, const IA3AdapterT<T>& adapter) {
    for (const auto& [name, l] : adapter.scales) {
        validate_adapter_dims(model, name, -1, l.dim(0));
        TensorT<T>& w = model.param(name);
        const int in_dim = w.dim(0), out_dim = w.dim(1);
        T* pw = w.mutable_ptr();
        const T* pl = l.ptr();
        for (int i = 0; i < in_dim; ++i) {
            for (int j = 0; j < out_dim; ++j) pw[i * out_dim + j] *= pl[j];
        }
        model.clear_module_tap(name);
    }
}

void merge_and_unload(Transformer& model, const AdapterVariant& adapter);

// LoRA folding, provided separately: W += (alpha/r) * A^T B^T.
template <typename T>
void merge_lora(TransformerT<T>& model, const LoRAAdapterT<T>& adapter) {
    for (const auto& [name, mod] : adapter.modules) {
        validate_adapter_dims(model, name, mod.a.dim(1), mod.b.dim(0));
        TensorT<T>& w = model.param(name);
        const int in_dim = w.dim(0), out_dim = w.dim(1);
        const T scale = mod.alpha / static_cast<T>(mod.rank);
        T* pw = w.mutable_ptr();
        for (int i = 0; i < in_dim; ++i) {
            for (int o = 0; o < out_dim; ++o) {
                T acc = 0;
                for (int r = 0; r < mod.rank; ++r) {
                    acc += mod.a.at(r, i) * mod.b.at(o, r);
                }
                pw[i * out_dim + o] += scale * acc;
            }
        }
        model.clear_module_tap(name);
    }
}

// Adapter directory: manifest.json + tensors.bin, bitwise round-trip.
void save_adapter(const AdapterVariant& adapter, const std::string& dir,
                  const nlohmann::json& lineage, const nlohmann::json& training_meta);
AdapterVariant load_adapter(const std::string& dir);
const char* adapter_kind(const AdapterVariant& adapter);

}  // namespace cedit
