#include "serialize.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "tensor blobs are little-endian; big-endian hosts are unsupported");

namespace cedit {

json write_tensor_blob(const std::string& path,
                       const std::vector<std::pair<std::string, const TensorF*>>& tensors) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(p.parent_path(), ec);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::io, "cannot write tensor blob: " + path);
    json index = json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const uint64_t nbytes = sizeof(float) * static_cast<uint64_t>(t->numel());
        f.write(reinterpret_cast<const char*>(t->ptr()), static_cast<std::streamsize>(nbytes));
        index.push_back({{"name", name},
                         {"dtype", "f32"},
                         {"shape", t->shape()},
                         {"offset", offset},
                         {"nbytes", nbytes}});
        offset += nbytes;
    }
    if (!f) fail(ErrorKind::io, "tensor blob write failed: " + path);
    return index;
}

std::map<std::string, TensorF> read_tensor_blob(const std::string& path, const json& index) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::io, "cannot read tensor blob: " + path);
    std::map<std::string, TensorF> out;
    try {
        for (const auto& entry : index) {
            const std::string name = entry.at("name");
            const std::string dtype = entry.at("dtype");
            if (dtype != "f32") fail(ErrorKind::format, "unsupported dtype '" + dtype + "'");
            const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
            const uint64_t offset = entry.at("offset");
            const uint64_t nbytes = entry.at("nbytes");
            int64_t numel = 1;
            for (int d : shape) numel *= d;
            if (nbytes != sizeof(float) * static_cast<uint64_t>(numel)) {
                fail(ErrorKind::format, "tensor '" + name + "' byte count does not match shape");
            }
            std::vector<float> data(static_cast<size_t>(numel));
            f.seekg(static_cast<std::streamoff>(offset));
            f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(nbytes));
            if (!f) fail(ErrorKind::format, "tensor blob truncated at '" + name + "'");
            out.emplace(name, TensorF::from_data(shape, std::move(data)));
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("malformed tensor index: ") + e.what());
    }
    return out;
}

json model_config_to_json(const ModelConfig& cfg) {
    return json{{"n_layers", cfg.n_layers}, {"d_model", cfg.d_model},
                {"n_heads", cfg.n_heads},   {"d_ff", cfg.d_ff},
                {"vocab_size", cfg.vocab_size}, {"max_seq", cfg.max_seq},
                {"seed", cfg.seed},         {"rms_eps", cfg.rms_eps}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig cfg;
    try {
        cfg.n_layers = j.at("n_layers");
        cfg.d_model = j.at("d_model");
        cfg.n_heads = j.at("n_heads");
        cfg.d_ff = j.at("d_ff");
        cfg.vocab_size = j.at("vocab_size");
        cfg.max_seq = j.at("max_seq");
        cfg.seed = j.at("seed");
        cfg.rms_eps = j.at("rms_eps");
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("malformed model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

void save_checkpoint(const Transformer& model, const std::string& dir, const json& lineage,
                     const json& meta) {
    std::filesystem::create_directories(dir);
    std::vector<std::pair<std::string, const TensorF*>> tensors;
    for (const auto& name : model.param_names()) tensors.emplace_back(name, &model.param(name));
    json index = write_tensor_blob(dir + "/tensors.bin", tensors);
    json manifest;
    manifest["format"] = "circuitedit-checkpoint";
    manifest["version"] = 1;
    manifest["model_config"] = model_config_to_json(model.config());
    manifest["tensors"] = index;
    manifest["lineage"] = lineage;
    manifest["meta"] = meta;
    manifest["weights_hash"] = model.weights_hash();
    write_text_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

json read_manifest(const std::string& dir) {
    const std::string path = dir + "/manifest.json";
    if (!std::filesystem::exists(path)) {
        fail(ErrorKind::prerequisite, "no manifest at " + path);
    }
    try {
        return json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        fail(ErrorKind::format, "malformed manifest " + path + ": " + e.what());
    }
}

Transformer load_checkpoint(const std::string& dir) {
    json manifest = read_manifest(dir);
    try {
        if (manifest.at("format") != "circuitedit-checkpoint") {
            fail(ErrorKind::format, "not a checkpoint manifest: " + dir);
        }
        ModelConfig cfg = model_config_from_json(manifest.at("model_config"));
        Transformer model(cfg);
        auto tensors = read_tensor_blob(dir + "/tensors.bin", manifest.at("tensors"));
        for (const auto& name : model.param_names()) {
            auto it = tensors.find(name);
            if (it == tensors.end()) fail(ErrorKind::format, "checkpoint missing tensor " + name);
            TensorF& dst = model.param(name);
            if (it->second.shape() != dst.shape()) {
                fail(ErrorKind::format, "checkpoint tensor " + name + " has wrong shape");
            }
            dst.mutable_data() = it->second.data();
        }
        const std::string expect = manifest.value("weights_hash", "");
        if (!expect.empty() && expect != model.weights_hash()) {
            fail(ErrorKind::format, "checkpoint weights hash mismatch in " + dir);
        }
        return model;
    } catch (const json::exception& e) {
        fail(ErrorKind::format, "malformed checkpoint manifest in " + dir + ": " + e.what());
    }
}

std::string artifact_hash(const std::string& dir) {
    std::string acc = sha256_file_hex(dir + "/manifest.json");
    if (std::filesystem::exists(dir + "/tensors.bin")) {
        acc += sha256_file_hex(dir + "/tensors.bin");
    }
    return sha256_hex(acc);
}

}  // namespace cedit
