#include "caap/io.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "caap/error.hpp"
#include "caap/hash.hpp"
#include "caap/metrics.hpp"

namespace caap {

namespace {

template <typename T>
void put_le(std::string& out, T value) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.append(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(const char* p) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

std::string ends_with_ext(const std::string& path) {
  const auto dot = path.rfind('.');
  if (dot == std::string::npos) return "";
  std::string ext = path.substr(dot);
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

}  // namespace

std::string to_hex(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t from_hex(const std::string& text) {
  if (text.empty() || text.size() > 16 || !std::all_of(text.begin(), text.end(), ::isxdigit)) {
    throw Error(ErrorKind::kFormat, "bad hex value '" + text + "'");
  }
  return std::stoull(text, nullptr, 16);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path + "' for reading");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::kIo, "read failed for '" + path + "'");
  return data;
}

void write_file(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot open '" + path + "' for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error(ErrorKind::kIo, "write failed for '" + path + "'");
}

Json read_json_file(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::kFormat, path + ": " + e.what());
  }
}

// ---------------------------------------------------------------- VITW1

std::string encode_container(const TensorContainer& container) {
  Json header = Json::object();
  header["tensors"] = Json::array();
  std::vector<std::string> seen;
  for (const auto& [name, tensor] : container.tensors) {
    if (std::find(seen.begin(), seen.end(), name) != seen.end()) {
      throw Error(ErrorKind::kConfig, "duplicate tensor name '" + name + "'");
    }
    seen.push_back(name);
    if (tensor.data.size() != static_cast<std::size_t>(Tensor::element_count(tensor.shape))) {
      throw Error(ErrorKind::kShape, "tensor '" + name + "' data does not match shape " + tensor.shape_string());
    }
    header["tensors"].push_back({{"name", name}, {"dtype", "f32"}, {"shape", tensor.shape}});
  }
  header["metadata"] = container.metadata.is_null() ? Json::object() : container.metadata;
  const std::string header_text = header.dump();

  std::string out(kContainerMagic);
  put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  const std::size_t payload_start = out.size();
  for (const auto& entry : container.tensors) {
    for (float v : entry.second.data) put_le<float>(out, v);
  }
  Fnv1a64 h;
  h.update(out.data() + payload_start, out.size() - payload_start);
  put_le<std::uint64_t>(out, h.digest());
  return out;
}

TensorContainer decode_container(std::string_view bytes, const std::string& origin) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const std::string& what) {
    if (bytes.size() - pos < n) {
      throw Error(ErrorKind::kFormat, origin + ": truncated at offset " + std::to_string(pos) + " reading " +
                                          what + " (need " + std::to_string(n) + " bytes, have " +
                                          std::to_string(bytes.size() - pos) + ")");
    }
  };
  need(kContainerMagic.size(), "magic");
  if (bytes.substr(0, kContainerMagic.size()) != kContainerMagic) {
    throw Error(ErrorKind::kFormat, origin + ": bad magic at offset 0 (not a VITW1 container)");
  }
  pos += kContainerMagic.size();
  need(8, "header length");
  const auto header_len = get_le<std::uint64_t>(bytes.data() + pos);
  pos += 8;
  need(header_len, "header");
  Json header;
  try {
    header = Json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::kFormat, origin + ": header at offset " + std::to_string(pos) + " is not JSON: " + e.what());
  }
  const std::size_t header_pos = pos;
  pos += header_len;
  if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_array()) {
    throw Error(ErrorKind::kFormat, origin + ": header at offset " + std::to_string(header_pos) +
                                        " lacks a \"tensors\" list");
  }

  TensorContainer out;
  if (header.contains("metadata")) out.metadata = header["metadata"];
  const std::size_t payload_start = pos;
  for (const auto& entry : header["tensors"]) {
    if (!entry.is_object() || !entry.contains("name") || !entry.contains("dtype") || !entry.contains("shape") ||
        !entry["name"].is_string() || !entry["dtype"].is_string() || !entry["shape"].is_array()) {
      throw Error(ErrorKind::kFormat, origin + ": malformed tensor entry " + entry.dump());
    }
    const std::string name = entry["name"].get<std::string>();
    const std::string dtype = entry["dtype"].get<std::string>();
    if (dtype != "f32") {
      throw Error(ErrorKind::kFormat, origin + ": tensor '" + name + "' has unknown dtype '" + dtype + "'");
    }
    for (const auto& [other, unused] : out.tensors) {
      if (other == name) throw Error(ErrorKind::kFormat, origin + ": duplicate tensor name '" + name + "'");
    }
    std::vector<std::int64_t> shape;
    for (const auto& dim : entry["shape"]) {
      if (!dim.is_number_integer() || dim.get<std::int64_t>() <= 0) {
        throw Error(ErrorKind::kFormat, origin + ": tensor '" + name + "' has invalid shape " + entry["shape"].dump());
      }
      shape.push_back(dim.get<std::int64_t>());
    }
    const auto count = static_cast<std::size_t>(Tensor::element_count(shape));
    need(count * 4, "payload of tensor '" + name + "'");
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) data[i] = get_le<float>(bytes.data() + pos + 4 * i);
    pos += count * 4;
    out.tensors.emplace_back(name, Tensor(std::move(shape), std::move(data)));
  }
  need(8, "checksum");
  Fnv1a64 h;
  h.update(bytes.data() + payload_start, pos - payload_start);
  const auto stored = get_le<std::uint64_t>(bytes.data() + pos);
  if (stored != h.digest()) {
    throw Error(ErrorKind::kFormat, origin + ": checksum mismatch at offset " + std::to_string(pos) +
                                        " (stored " + to_hex(stored) + ", payload " + to_hex(h.digest()) +
                                        " over bytes " + std::to_string(payload_start) + ".." +
                                        std::to_string(pos) + ")");
  }
  pos += 8;
  if (pos != bytes.size()) {
    throw Error(ErrorKind::kFormat, origin + ": " + std::to_string(bytes.size() - pos) +
                                        " trailing bytes at offset " + std::to_string(pos));
  }
  return out;
}

void write_container(const std::string& path, const TensorContainer& container) {
  write_file(path, encode_container(container));
}

TensorContainer read_container(const std::string& path) { return decode_container(read_file(path), path); }

Json config_to_json(const ViTConfig& c) {
  return Json{{"layers", c.layers},     {"dim", c.dim},         {"heads", c.heads},
              {"grid", c.grid},         {"patch_px", c.patch_px}, {"classes", c.classes},
              {"channels", c.channels}, {"mlp_ratio", c.mlp_ratio}, {"ln_eps", c.ln_eps}};
}

ViTConfig config_from_json(const Json& j) {
  if (!j.is_object()) throw Error(ErrorKind::kFormat, "model config is not an object");
  ViTConfig c;
  auto get_int = [&](const char* key, int& field) {
    if (!j.contains(key)) throw Error(ErrorKind::kFormat, std::string("model config lacks \"") + key + "\"");
    if (!j[key].is_number_integer()) throw Error(ErrorKind::kFormat, std::string("model config \"") + key + "\" is not an integer");
    field = j[key].get<int>();
  };
  auto get_float = [&](const char* key, float& field) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) throw Error(ErrorKind::kFormat, std::string("model config \"") + key + "\" is not a number");
    field = j[key].get<float>();
  };
  get_int("layers", c.layers);
  get_int("dim", c.dim);
  get_int("heads", c.heads);
  get_int("grid", c.grid);
  get_int("patch_px", c.patch_px);
  get_int("classes", c.classes);
  if (j.contains("channels")) get_int("channels", c.channels);
  get_float("mlp_ratio", c.mlp_ratio);
  get_float("ln_eps", c.ln_eps);
  c.validate();
  return c;
}

void save_model(const std::string& path, const ModelBundle& model, const Json& extra_metadata) {
  model.validate();
  TensorContainer container;
  container.tensors = model.to_tensors();
  container.metadata = Json{{"config", config_to_json(model.config)}};
  for (const auto& [key, value] : extra_metadata.items()) {
    if (key != "config") container.metadata[key] = value;
  }
  write_container(path, container);
}

ModelBundle load_model(const std::string& path) {
  const TensorContainer container = read_container(path);
  if (!container.metadata.is_object() || !container.metadata.contains("config")) {
    throw Error(ErrorKind::kFormat, path + ": container metadata lacks \"config\"");
  }
  const ViTConfig config = config_from_json(container.metadata["config"]);
  return ModelBundle::from_tensors(config, container.tensors);
}

// ---------------------------------------------------------------- images

Image decode_pgm(std::string_view text, const std::string& origin) {
  std::vector<std::string> tokens;
  std::vector<int> lines;
  int line = 1;
  std::size_t i = 0;
  while (i < text.size()) {
    const char ch = text[i];
    if (ch == '#') {
      while (i < text.size() && text[i] != '\n') ++i;
    } else if (std::isspace(static_cast<unsigned char>(ch))) {
      if (ch == '\n') ++line;
      ++i;
    } else {
      std::size_t j = i;
      while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])) && text[j] != '#') ++j;
      tokens.emplace_back(text.substr(i, j - i));
      lines.push_back(line);
      i = j;
    }
  }
  auto number = [&](std::size_t k, const char* what) {
    if (k >= tokens.size()) {
      throw Error(ErrorKind::kFormat, origin + ": truncated graymap, missing " + std::string(what) + " (token " +
                                          std::to_string(k + 1) + ")");
    }
    const std::string& t = tokens[k];
    if (!std::all_of(t.begin(), t.end(), ::isdigit) || t.size() > 9) {
      throw Error(ErrorKind::kFormat, origin + ": line " + std::to_string(lines[k]) + ": bad " + what + " '" + t + "'");
    }
    return std::stoi(t);
  };
  if (tokens.empty() || tokens[0] != "P2") throw Error(ErrorKind::kFormat, origin + ": not a P2 graymap");
  const int w = number(1, "width");
  const int h = number(2, "height");
  const int maxval = number(3, "maxval");
  if (w <= 0 || h <= 0) throw Error(ErrorKind::kFormat, origin + ": empty graymap");
  if (maxval != 255) {
    throw Error(ErrorKind::kFormat, origin + ": unsupported bit depth (maxval " + std::to_string(maxval) +
                                        ", expected 255)");
  }
  Image img(h, w, 1);
  for (std::size_t k = 0; k < img.data.size(); ++k) {
    const int v = number(4 + k, "pixel");
    if (v > maxval) {
      throw Error(ErrorKind::kFormat, origin + ": line " + std::to_string(lines[4 + k]) + ": pixel " +
                                          std::to_string(v) + " exceeds maxval");
    }
    img.data[k] = static_cast<float>(v) / 255.0f;
  }
  if (tokens.size() > 4 + img.data.size()) {
    throw Error(ErrorKind::kFormat, origin + ": line " + std::to_string(lines[4 + img.data.size()]) +
                                        ": trailing data after " + std::to_string(img.data.size()) + " pixels");
  }
  return img;
}

Image decode_png(std::string_view bytes, const std::string& origin) {
  static constexpr unsigned char kSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (bytes.size() < 33 || std::memcmp(bytes.data(), kSig, 8) != 0 || bytes.substr(12, 4) != "IHDR") {
    throw Error(ErrorKind::kFormat, origin + ": not a PNG file or truncated before offset 33");
  }
  const int bit_depth = static_cast<unsigned char>(bytes[24]);
  const int color_type = static_cast<unsigned char>(bytes[25]);
  if (bit_depth != 8) {
    throw Error(ErrorKind::kFormat, origin + ": unsupported bit depth " + std::to_string(bit_depth) +
                                        " at offset 24 (only 8-bit PNG)");
  }
  if (color_type != PNG_COLOR_TYPE_GRAY && color_type != PNG_COLOR_TYPE_RGB) {
    throw Error(ErrorKind::kFormat, origin + ": unsupported PNG color type " + std::to_string(color_type) +
                                        " at offset 25 (gray or RGB only)");
  }
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorKind::kFormat, origin + ": " + msg);
  }
  const bool rgb = color_type == PNG_COLOR_TYPE_RGB;
  image.format = rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int channels = rgb ? 3 : 1;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorKind::kFormat, origin + ": " + msg);
  }
  Image img(static_cast<int>(image.height), static_cast<int>(image.width), channels);
  for (std::size_t k = 0; k < img.data.size(); ++k) img.data[k] = static_cast<float>(buffer[k]) / 255.0f;
  return img;
}

Image load_image(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '2') return decode_pgm(bytes, path);
  return decode_png(bytes, path);
}

namespace {

std::uint8_t quantize(float v) {
  const float c = std::clamp(std::isfinite(v) ? v : 0.0f, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

std::string encode_pgm(const Image& img, const std::vector<std::string>& comments) {
  if (img.channels != 1) throw Error(ErrorKind::kConfig, "P2 graymaps hold one channel, image has " + std::to_string(img.channels));
  std::string out = "P2\n";
  for (const auto& c : comments) out += "# " + c + "\n";
  out += std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      out += std::to_string(quantize(img.at(y, x, 0)));
      out += x + 1 < img.width ? " " : "\n";
    }
  }
  return out;
}

namespace {

// tEXt chunks go right after IHDR (8-byte signature + 25-byte IHDR chunk).
std::string with_text_chunks(std::string png, const std::vector<std::string>& comments) {
  std::string chunks;
  for (const auto& c : comments) {
    const std::string body = std::string("tEXtComment") + '\0' + c;
    const auto len = static_cast<std::uint32_t>(body.size() - 4);
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
    for (int k = 3; k >= 0; --k) chunks += static_cast<char>((len >> (8 * k)) & 0xff);
    chunks += body;
    for (int k = 3; k >= 0; --k) chunks += static_cast<char>((crc >> (8 * k)) & 0xff);
  }
  png.insert(33, chunks);
  return png;
}

}  // namespace

void save_image(const std::string& path, const Image& img, const std::vector<std::string>& comments) {
  const std::string ext = ends_with_ext(path);
  if (ext == ".pgm") {
    write_file(path, encode_pgm(img, comments));
    return;
  }
  if (ext != ".png") throw Error(ErrorKind::kConfig, "cannot infer image format from '" + path + "'");
  if (img.channels != 1 && img.channels != 3) {
    throw Error(ErrorKind::kConfig, "PNG output needs 1 or 3 channels, image has " + std::to_string(img.channels));
  }
  std::vector<png_byte> buffer(img.data.size());
  for (std::size_t k = 0; k < buffer.size(); ++k) buffer[k] = quantize(img.data[k]);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, buffer.data(), 0, nullptr)) {
    throw Error(ErrorKind::kIo, path + ": " + image.message);
  }
  std::string encoded(size, '\0');
  if (!png_image_write_to_memory(&image, encoded.data(), &size, 0, buffer.data(), 0, nullptr)) {
    throw Error(ErrorKind::kIo, path + ": " + image.message);
  }
  encoded.resize(size);
  write_file(path, with_text_chunks(std::move(encoded), comments));
}

SegMask mask_from_image(const Image& img) {
  SegMask mask(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      bool on = false;
      for (int c = 0; c < img.channels; ++c) on = on || img.at(y, x, c) != 0.0f;
      mask.set(y, x, on);
    }
  }
  return mask;
}

SegMask load_mask(const std::string& path) { return mask_from_image(load_image(path)); }

std::string render_heatmap(const AttributionMap& map, int patch_px, const std::vector<std::string>& comments) {
  if (patch_px <= 0 || map.scores.size() != static_cast<Eigen::Index>(map.grid) * map.grid) {
    throw Error(ErrorKind::kShape, "heatmap needs a complete g x g map and positive patch size");
  }
  const std::vector<double> norm =
      minmax_normalize(std::span<const float>(map.scores.data(), static_cast<std::size_t>(map.scores.size())));
  const int side = map.grid * patch_px;
  Image img(side, side, 1);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      img.at(y, x, 0) = static_cast<float>(norm[static_cast<std::size_t>((y / patch_px) * map.grid + x / patch_px)]);
    }
  }
  return encode_pgm(img, comments);
}

// ---------------------------------------------------------------- map files

namespace {

Json blank_json(const BlankSpec& b) {
  return Json{{"kind", b.name()},
              {"mean", {b.mean[0], b.mean[1], b.mean[2]}},
              {"seed", b.seed},
              {"sigma", b.sigma},
              {"kernel", b.kernel}};
}

BlankSpec blank_from_json(const Json& j) {
  BlankSpec b;
  b.kind = BlankSpec::parse_kind(j.at("kind").get<std::string>());
  const auto& mean = j.at("mean");
  if (!mean.is_array() || mean.size() != 3) throw Error(ErrorKind::kFormat, "blank mean must hold three values");
  for (std::size_t c = 0; c < 3; ++c) b.mean[c] = mean[c].get<float>();
  b.seed = j.at("seed").get<std::uint64_t>();
  b.sigma = j.at("sigma").get<float>();
  b.kernel = j.at("kernel").get<int>();
  return b;
}

}  // namespace

Json blank_to_json(const BlankSpec& blank) { return blank_json(blank); }

Json map_to_json(const AttributionMap& map) {
  if (map.scores.size() != static_cast<Eigen::Index>(map.grid) * map.grid) {
    throw Error(ErrorKind::kShape, "map holds " + std::to_string(map.scores.size()) + " scores for grid " +
                                       std::to_string(map.grid));
  }
  Json grid = Json::array();
  for (int y = 0; y < map.grid; ++y) {
    Json row = Json::array();
    for (int x = 0; x < map.grid; ++x) {
      const float v = map.scores(y * map.grid + x);
      if (!std::isfinite(v)) throw Error(ErrorKind::kRange, "non-finite attribution score at patch " + std::to_string(y * map.grid + x));
      row.push_back(v);
    }
    grid.push_back(std::move(row));
  }
  return Json{{"format", "caap-map/1"},
              {"grid", map.grid},
              {"class_id", map.class_id},
              {"mode", to_string(map.mode)},
              {"blank", blank_json(map.blank)},
              {"select", map.select.name()},
              {"layers", {map.range.start, map.range.end}},
              {"model_fingerprint", to_hex(map.model_fingerprint)},
              {"scores", std::move(grid)}};
}

AttributionMap map_from_json(const Json& j) {
  try {
    if (j.at("format").get<std::string>() != "caap-map/1") {
      throw Error(ErrorKind::kFormat, "unknown map format '" + j.at("format").get<std::string>() + "'");
    }
    AttributionMap m;
    m.grid = j.at("grid").get<int>();
    if (m.grid <= 0) throw Error(ErrorKind::kFormat, "map grid must be positive");
    m.class_id = j.at("class_id").get<int>();
    m.mode = parse_mode(j.at("mode").get<std::string>());
    m.blank = blank_from_json(j.at("blank"));
    m.select = SelectionOp::parse(j.at("select").get<std::string>());
    const auto& layers = j.at("layers");
    if (!layers.is_array() || layers.size() != 2) throw Error(ErrorKind::kFormat, "map layers must be [start, end]");
    m.range = {layers[0].get<int>(), layers[1].get<int>()};
    m.model_fingerprint = from_hex(j.at("model_fingerprint").get<std::string>());
    const auto& rows = j.at("scores");
    if (!rows.is_array() || rows.size() != static_cast<std::size_t>(m.grid)) {
      throw Error(ErrorKind::kFormat, "map scores must have " + std::to_string(m.grid) + " rows");
    }
    m.scores.resize(static_cast<Eigen::Index>(m.grid) * m.grid);
    for (int y = 0; y < m.grid; ++y) {
      const auto& row = rows[static_cast<std::size_t>(y)];
      if (!row.is_array() || row.size() != static_cast<std::size_t>(m.grid)) {
        throw Error(ErrorKind::kFormat, "map score row " + std::to_string(y) + " must have " +
                                            std::to_string(m.grid) + " values");
      }
      for (int x = 0; x < m.grid; ++x) m.scores(y * m.grid + x) = row[static_cast<std::size_t>(x)].get<float>();
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("malformed map document: ") + e.what());
  }
}

void write_map_file(const std::string& path, const MapFile& file) {
  Json doc = map_to_json(file.map);
  doc["run_config"] = file.run_config;
  write_file(path, doc.dump(2) + "\n");
}

MapFile read_map_file(const std::string& path) {
  const Json doc = read_json_file(path);
  MapFile out;
  try {
    out.map = map_from_json(doc);
  } catch (const Error& e) {
    throw Error(e.kind(), path + ": " + e.what());
  }
  if (doc.contains("run_config")) out.run_config = doc["run_config"];
  return out;
}

}  // namespace caap
