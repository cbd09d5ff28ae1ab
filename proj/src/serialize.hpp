#pragma once

// Artifact files: a JSON manifest next to a raw tensor blob (little-endian
// f32, row-major). Checkpoints, adapters and composite models all share this
// layout; every manifest embeds its config snapshot and parent hashes.

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "transformer.hpp"

namespace cedit {

// Writes tensors back to back; returns the manifest index [{name, dtype,
// shape, offset, nbytes}, ...].
nlohmann::json write_tensor_blob(const std::string& path,
                                 const std::vector<std::pair<std::string, const TensorF*>>& tensors);

std::map<std::string, TensorF> read_tensor_blob(const std::string& path,
                                                const nlohmann::json& index);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Checkpoint directory: manifest.json + tensors.bin.
void save_checkpoint(const Transformer& model, const std::string& dir,
                     const nlohmann::json& lineage, const nlohmann::json& meta);
Transformer load_checkpoint(const std::string& dir);
nlohmann::json read_manifest(const std::string& dir);

// Content hash of a manifest + blob artifact directory.
std::string artifact_hash(const std::string& dir);

}  // namespace cedit
