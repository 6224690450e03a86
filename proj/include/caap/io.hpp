#pragma once

// File formats: VITW1 tensor containers, PNG / P2 images and masks,
// attribution map documents and small text exports.

#include <json.hpp>

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "caap/caap.hpp"
#include "caap/image.hpp"
#include "caap/tensor.hpp"
#include "caap/vit.hpp"

namespace caap {

using Json = nlohmann::ordered_json;
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// VITW1 layout:
///   "VITW1\n" | u64 LE header length | UTF-8 JSON header | f32 LE payloads | u64 LE FNV-1a(payload)
/// The header is {"tensors": [{"name", "dtype": "f32", "shape"}...], "metadata": {...}}.
struct TensorContainer {
  NamedTensors tensors;
  Json metadata = Json::object();
};

inline constexpr std::string_view kContainerMagic = "VITW1\n";

std::string encode_container(const TensorContainer& container);
/// `origin` names the source in error messages.
TensorContainer decode_container(std::string_view bytes, const std::string& origin = "<memory>");

void write_container(const std::string& path, const TensorContainer& container);
TensorContainer read_container(const std::string& path);

Json config_to_json(const ViTConfig& config);
ViTConfig config_from_json(const Json& j);

/// The model config travels in the container metadata under "config";
/// other keys of `extra_metadata` are stored beside it.
void save_model(const std::string& path, const ModelBundle& model, const Json& extra_metadata = Json::object());
ModelBundle load_model(const std::string& path);

/// 8-bit gray or RGB PNG, or a P2 graymap; v -> v/255.
Image load_image(const std::string& path);
Image decode_pgm(std::string_view text, const std::string& origin = "<memory>");
Image decode_png(std::string_view bytes, const std::string& origin = "<memory>");

/// Format from extension: ".png" or ".pgm" (P2, gray only). Values are
/// clamped to [0,1] and rounded to 8 bits. Comments become "# " lines in P2
/// and tEXt "Comment" chunks in PNG.
void save_image(const std::string& path, const Image& img, const std::vector<std::string>& comments = {});
std::string encode_pgm(const Image& img, const std::vector<std::string>& comments = {});

/// Nonzero in any channel is foreground.
SegMask load_mask(const std::string& path);
SegMask mask_from_image(const Image& img);

/// Patch-constant P2 rendering of a min-max normalized map.
std::string render_heatmap(const AttributionMap& map, int patch_px, const std::vector<std::string>& comments = {});

Json blank_to_json(const BlankSpec& blank);
Json map_to_json(const AttributionMap& map);
AttributionMap map_from_json(const Json& j);

/// A map document: the map fields plus a "run_config" echo.
struct MapFile {
  AttributionMap map;
  Json run_config = Json::object();
};

void write_map_file(const std::string& path, const MapFile& file);
MapFile read_map_file(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);

/// JSON value parsed from a file; parse errors carry the path.
Json read_json_file(const std::string& path);

std::string to_hex(std::uint64_t v);
std::uint64_t from_hex(const std::string& text);

}  // namespace caap
