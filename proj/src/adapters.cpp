#include "adapters.hpp"

#include <filesystem>

#include "serialize.hpp"

using nlohmann::json;

namespace cedit {

InjectedAdapter inject(Transformer& model, IA3Adapter& adapter) {
    InjectedAdapter out;
    out.targets = inject_ia3_taps(model, adapter);
    for (auto& [name, l] : adapter.scales) out.params.push_back(&l);
    return out;
}

InjectedAdapter inject(Transformer& model, LoRAAdapter& adapter) {
    InjectedAdapter out;
    out.targets = inject_lora_taps(model, adapter);
    for (auto& [name, mod] : adapter.modules) {
        out.params.push_back(&mod.a);
        out.params.push_back(&mod.b);
    }
    return out;
}

InjectedAdapter inject(Transformer& model, AdapterVariant& adapter) {
    if (auto* ia3 = std::get_if<IA3Adapter>(&adapter)) return inject(model, *ia3);
    return inject(model, std::get<LoRAAdapter>(adapter));
}

void remove_adapter(Transformer& model, const InjectedAdapter& injected) {
    for (const auto& name : injected.targets) model.clear_module_tap(name);
}

void merge_and_unload(Transformer& model, const AdapterVariant& adapter) {
    if (const auto* ia3 = std::get_if<IA3Adapter>(&adapter)) {
        merge_and_unload(model, *ia3);
        return;
    }
    fail(ErrorKind::unsupported,
         "merge_and_unload supports IA3 adapters only; use merge_lora for LoRA");
}

const char* adapter_kind(const AdapterVariant& adapter) {
    return std::holds_alternative<IA3Adapter>(adapter) ? "ia3" : "lora";
}

void save_adapter(const AdapterVariant& adapter, const std::string& dir, const json& lineage,
                  const json& training_meta) {
    std::filesystem::create_directories(dir);
    std::vector<std::pair<std::string, const TensorF*>> tensors;
    json targets = json::array();
    json hyper;
    if (const auto* ia3 = std::get_if<IA3Adapter>(&adapter)) {
        for (const auto& [name, l] : ia3->scales) {
            tensors.emplace_back(name + ".l", &l);
            targets.push_back({{"module", name}, {"out_dim", l.dim(0)}});
        }
    } else {
        const auto& lora = std::get<LoRAAdapter>(adapter);
        for (const auto& [name, mod] : lora.modules) {
            tensors.emplace_back(name + ".a", &mod.a);
            tensors.emplace_back(name + ".b", &mod.b);
            targets.push_back({{"module", name},
                               {"in_dim", mod.a.dim(1)},
                               {"out_dim", mod.b.dim(0)},
                               {"rank", mod.rank},
                               {"alpha", mod.alpha}});
            hyper = {{"rank", mod.rank}, {"alpha", mod.alpha}};
        }
    }
    json index = write_tensor_blob(dir + "/tensors.bin", tensors);
    json manifest;
    manifest["format"] = "circuitedit-adapter";
    manifest["version"] = 1;
    manifest["kind"] = adapter_kind(adapter);
    manifest["targets"] = targets;
    manifest["hyperparameters"] = hyper;
    manifest["training"] = training_meta;
    manifest["lineage"] = lineage;
    manifest["tensors"] = index;
    bool trained = std::holds_alternative<IA3Adapter>(adapter)
                       ? std::get<IA3Adapter>(adapter).trained
                       : std::get<LoRAAdapter>(adapter).trained;
    manifest["trained"] = trained;
    write_text_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

AdapterVariant load_adapter(const std::string& dir) {
    json manifest = read_manifest(dir);
    try {
        if (manifest.at("format") != "circuitedit-adapter") {
            fail(ErrorKind::format, "not an adapter manifest: " + dir);
        }
        auto tensors = read_tensor_blob(dir + "/tensors.bin", manifest.at("tensors"));
        const std::string kind = manifest.at("kind");
        if (kind == "ia3") {
            IA3Adapter a;
            a.trained = manifest.value("trained", false);
            for (const auto& t : manifest.at("targets")) {
                const std::string name = t.at("module");
                a.scales.emplace(name, tensors.at(name + ".l"));
            }
            return a;
        }
        if (kind == "lora") {
            LoRAAdapter a;
            a.trained = manifest.value("trained", false);
            for (const auto& t : manifest.at("targets")) {
                const std::string name = t.at("module");
                LoRAAdapter::Module mod;
                mod.rank = t.at("rank");
                mod.alpha = t.at("alpha");
                mod.a = tensors.at(name + ".a");
                mod.b = tensors.at(name + ".b");
                a.modules.emplace(name, std::move(mod));
            }
            return a;
        }
        fail(ErrorKind::format, "unknown adapter kind '" + kind + "' in " + dir);
    } catch (const json::exception& e) {
        fail(ErrorKind::format, "malformed adapter manifest in " + dir + ": " + e.what());
    } catch (const std::out_of_range&) {
        fail(ErrorKind::format, "adapter manifest/tensor mismatch in " + dir);
    }
}

}  // namespace cedit
