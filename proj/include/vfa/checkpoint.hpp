#pragma once

// Model checkpoints.
//
// Layout: the line "VFACKPT 1", one line of JSON, then the payload. The
// JSON object holds "config" (model configuration), "dims", "tensors" (list
// of {"name", "shape"} in payload order) and "metadata" (string map). The
// payload is every tensor in that order as little-endian f32.

#include <filesystem>
#include <map>
#include <string>

#include "vfa/model.hpp"

namespace vfa {

using Metadata = std::map<std::string, std::string>;

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const VfaModel<T>& model, const Metadata& metadata = {});

template <typename T>
VfaModel<T> load_checkpoint(const std::filesystem::path& path, Metadata* metadata = nullptr);

std::string model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace vfa
