#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "trojanscope/diffnet.hpp"

namespace trojanscope {

// Model file layout (all integers little-endian):
//
//   offset 0   4 bytes   magic "TSMF"
//   offset 4   u32       format version (kModelFormatVersion)
//   offset 8   u32       header length L
//   offset 12  L bytes   JSON header: {"graphs": [...], "metadata": {...}}
//                        each graph: name, input_shape, layers, and the
//                        ordered list of parameter tensors with their shapes
//   ...        float32   parameter blocks, in header order
//   end - 4    u32       CRC-32 of every preceding byte
//
// A file may carry several named graphs (the detector uses this); a plain
// model file holds one graph named "model".
inline constexpr std::uint32_t kModelFormatVersion = 1;

struct ModelBundle {
    std::vector<std::pair<std::string, ModelGraph>> graphs;
    nlohmann::json metadata = nlohmann::json::object();

    const ModelGraph& graph(const std::string& name) const;
};

std::vector<std::uint8_t> serialize_bundle(const ModelBundle& bundle);
ModelBundle deserialize_bundle(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> serialize(const ModelGraph& model);
ModelGraph deserialize(std::span<const std::uint8_t> bytes);

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

void save_model(const std::filesystem::path& path, const ModelGraph& model);
ModelGraph load_model(const std::filesystem::path& path);

nlohmann::json layer_to_json(const LayerSpec& layer);
LayerSpec layer_from_json(const nlohmann::json& j);

}  // namespace trojanscope
