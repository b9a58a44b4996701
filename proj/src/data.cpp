#include "cre/data.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "cre/binary_io.hpp"
#include "cre/errors.hpp"
#include "cre/rng.hpp"

namespace fs = std::filesystem;

namespace cre {

std::string to_string(Split split) {
  switch (split) {
    case Split::kPretrain:
      return "pretrain";
    case Split::kTest:
      return "test";
    case Split::kUnassigned:
      break;
  }
  return "unassigned";
}

Split parse_split(const std::string& text) {
  if (text == "pretrain") return Split::kPretrain;
  if (text == "test") return Split::kTest;
  throw ParseError("unknown split '" + text + "' (expected pretrain or test)");
}

fs::path DatasetManifest::resolve(const ImageRecord& record) const {
  const fs::path p(record.path);
  return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
}

std::size_t DatasetManifest::intern(const std::string& name) {
  const auto it = std::find(class_names.begin(), class_names.end(), name);
  if (it != class_names.end()) return static_cast<std::size_t>(it - class_names.begin());
  class_names.push_back(name);
  return class_names.size() - 1;
}

void DatasetManifest::validate() const {
  std::unordered_set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.path).second) throw ValidationError("duplicate manifest path: " + r.path);
    if (r.label >= class_names.size()) {
      throw ValidationError("record " + r.path + " has label index " + std::to_string(r.label) +
                            " but only " + std::to_string(class_names.size()) + " classes");
    }
  }
}

std::size_t DatasetManifest::count(Split split) const {
  return static_cast<std::size_t>(std::count_if(
      records.begin(), records.end(), [&](const auto& r) { return r.split == split; }));
}

DatasetManifest parse_manifest(const std::string& text, const std::string& source) {
  DatasetManifest m;
  std::unordered_set<std::string> paths;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto where = source + ":" + std::to_string(line_no) + ": ";
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ParseError(where + "expected a JSON object");
    auto field = [&](const char* key, bool required) -> std::optional<std::string> {
      const auto it = j.find(key);
      if (it == j.end() || it->is_null()) {
        if (required) throw ParseError(where + "missing field '" + key + "'");
        return std::nullopt;
      }
      if (!it->is_string()) throw ParseError(where + "field '" + key + "' must be a string");
      return it->get<std::string>();
    };
    for (const auto& [key, value] : j.items()) {
      if (key != "path" && key != "label" && key != "split" && key != "base_class") {
        throw ParseError(where + "unknown field '" + key + "'");
      }
    }
    ImageRecord r;
    r.path = *field("path", true);
    if (r.path.empty()) throw ParseError(where + "empty path");
    const auto label = *field("label", true);
    if (const auto split = field("split", false)) {
      try {
        r.split = parse_split(*split);
      } catch (const ParseError& e) {
        throw ParseError(where + e.what());
      }
    }
    if (const auto base = field("base_class", false)) {
      const auto [it, inserted] = m.base_class.emplace(label, *base);
      if (!inserted && it->second != *base) {
        throw ValidationError(where + "class '" + label + "' assigned to base classes '" +
                              it->second + "' and '" + *base + "'");
      }
    }
    if (!paths.insert(r.path).second) {
      throw ValidationError(where + "duplicate manifest path: " + r.path);
    }
    r.label = m.intern(label);
    m.records.push_back(std::move(r));
  }
  return m;
}

DatasetManifest load_manifest(const fs::path& path) {
  const auto bytes = bin::read_file(path);
  auto m = parse_manifest(std::string(bytes.begin(), bytes.end()), path.string());
  m.base_dir = path.parent_path();
  return m;
}

void save_manifest(const fs::path& path, const DatasetManifest& manifest) {
  manifest.validate();
  const auto dir = fs::absolute(path).parent_path();
  std::string out;
  for (const auto& r : manifest.records) {
    auto p = fs::absolute(manifest.resolve(r)).lexically_normal();
    const auto rel = p.lexically_relative(dir);
    nlohmann::ordered_json j;
    j["path"] = (!rel.empty() && *rel.begin() != "..") ? rel.generic_string() : p.generic_string();
    const auto& label = manifest.class_names[r.label];
    j["label"] = label;
    if (r.split != Split::kUnassigned) j["split"] = to_string(r.split);
    if (const auto it = manifest.base_class.find(label); it != manifest.base_class.end()) {
      j["base_class"] = it->second;
    }
    out += j.dump();
    out += '\n';
  }
  bin::write_file(path, std::vector<char>(out.begin(), out.end()));
}

DatasetManifest split_by_class(const DatasetManifest& manifest, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw ValidationError("split ratio must lie in (0, 1], got " + std::to_string(ratio));
  }
  DatasetManifest out = manifest;
  std::vector<std::vector<std::size_t>> by_class(manifest.num_classes());
  for (std::size_t i = 0; i < out.records.size(); ++i) by_class[out.records[i].label].push_back(i);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    Rng rng(derive_seed({seed, 0x73706c74u, c}));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const auto n = idx.size();
    const auto keep = std::min(
        n, static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9)));
    for (std::size_t k = 0; k < n; ++k) {
      out.records[idx[k]].split = (k < keep || n == 1) ? Split::kPretrain : Split::kTest;
    }
  }
  return out;
}

namespace {

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".ppm" || ext == ".pgm";
}

}  // namespace

DatasetManifest make_manifest_from_directory(const fs::path& root) {
  if (!fs::is_directory(root)) throw ValidationError(root.string() + " is not a directory");
  std::vector<fs::path> classes;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) classes.push_back(entry.path());
  }
  std::sort(classes.begin(), classes.end());
  DatasetManifest m;
  m.base_dir = root;
  for (const auto& dir : classes) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    }
    if (files.empty()) continue;
    std::sort(files.begin(), files.end());
    const auto label = m.intern(dir.filename().string());
    for (const auto& f : files) {
      m.records.push_back({f.lexically_relative(root).generic_string(), label, Split::kUnassigned});
    }
  }
  return m;
}

namespace {

struct PnmCursor {
  const std::vector<char>& data;
  std::size_t pos = 0;
  const std::string& source;

  void skip_space() {
    while (pos < data.size()) {
      const char c = data[pos];
      if (c == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos;
      } else {
        break;
      }
    }
  }
  std::size_t number() {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < data.size() && std::isdigit(static_cast<unsigned char>(data[pos]))) {
      v = v * 10 + static_cast<std::size_t>(data[pos] - '0');
      if (++digits > 9) throw DecodeError(source + ": PNM header value too large");
      ++pos;
    }
    if (digits == 0) throw DecodeError(source + ": malformed PNM header");
    return v;
  }
};

Image decode_pnm(const std::vector<char>& data, const std::string& source) {
  if (data.size() < 2 || data[0] != 'P' || (data[1] != '5' && data[1] != '6')) {
    throw DecodeError(source + ": only binary PGM (P5) and PPM (P6) are supported");
  }
  const std::size_t channels = data[1] == '6' ? 3 : 1;
  PnmCursor cur{data, 2, source};
  const auto width = cur.number(), height = cur.number(), maxval = cur.number();
  if (width == 0 || height == 0) throw DecodeError(source + ": empty image");
  if (maxval == 0 || maxval > 255) throw DecodeError(source + ": only 8-bit PNM is supported");
  if (cur.pos >= data.size() || !std::isspace(static_cast<unsigned char>(data[cur.pos]))) {
    throw DecodeError(source + ": malformed PNM header");
  }
  ++cur.pos;
  const auto n = width * height * channels;
  if (data.size() - cur.pos < n) throw DecodeError(source + ": truncated PNM payload");
  Image img = Image::zeros(height, width, 3);
  for (std::size_t i = 0; i < width * height; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const auto byte = static_cast<unsigned char>(data[cur.pos + i * channels + (channels == 3 ? c : 0)]);
      img.pixels[i * 3 + c] =
          static_cast<float>(static_cast<double>(std::min<std::size_t>(byte, maxval)) /
                             static_cast<double>(maxval));
    }
  }
  return img;
}

Image decode_png(const std::vector<char>& data, const std::string& source) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, data.data(), data.size())) {
    throw DecodeError(source + ": " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw DecodeError(source + ": " + msg);
  }
  const std::size_t h = png.height, w = png.width, channels = color ? 3 : 1;
  Image img = Image::zeros(h, w, 3);
  for (std::size_t i = 0; i < h * w; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      img.pixels[i * 3 + c] = static_cast<float>(buf[i * channels + (color ? c : 0)] / 255.0);
    }
  }
  return img;
}

}  // namespace

Image decode_image(const fs::path& path) {
  std::vector<char> data;
  try {
    data = bin::read_file(path);
  } catch (const Error& e) {
    throw DecodeError(e.what());
  }
  static constexpr unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (data.size() >= 8 && std::equal(kPngSig, kPngSig + 8, reinterpret_cast<const unsigned char*>(data.data()))) {
    return decode_png(data, path.string());
  }
  return decode_pnm(data, path.string());
}

Image load_image(const fs::path& path, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ContractError("target image size must be positive");
  const auto img = decode_image(path);
  if (img.height == height && img.width == width) return img;
  return resize_bilinear(img, height, width);
}

void write_ppm(const fs::path& path, const Image& image) {
  if (image.channels != 3) throw ContractError("write_ppm expects a 3-channel image");
  std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<char> out(header.begin(), header.end());
  out.reserve(out.size() + image.pixels.size());
  for (const auto v : image.pixels) {
    const auto q = std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(q)));
  }
  bin::write_file(path, out);
}

double LoadedImages::failure_rate() const {
  const auto total = images.size() + failures.size();
  return total == 0 ? 0.0 : static_cast<double>(failures.size()) / static_cast<double>(total);
}

LoadedImages load_split(const DatasetManifest& manifest, std::optional<Split> split,
                        std::size_t height, std::size_t width) {
  LoadedImages out;
  for (const auto& r : manifest.records) {
    if (split && r.split != *split) continue;
    try {
      out.images.push_back(load_image(manifest.resolve(r), height, width));
      out.labels.push_back(r.label);
    } catch (const DecodeError& e) {
      out.failures.push_back(e.what());
    }
  }
  return out;
}

}  // namespace cre
