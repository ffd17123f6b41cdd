#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "scl_lle/common.hpp"
#include "scl_lle/tensor.hpp"

namespace scl_lle {

// Single-file archive: 8-byte magic, u64 little-endian manifest length, JSON
// manifest, then the raw little-endian array payload. Arrays are written in
// name order so save -> load -> save is byte-identical.
//
//   manifest = { "format_version": 1, "meta": {...},
//                "arrays": [ {name, dtype: "f4"|"f8", shape, offset, nbytes} ] }
//
// Offsets are relative to the start of the payload section.

inline constexpr char kArchiveMagic[8] = {'S', 'C', 'L', 'L', 'C', 'K', 'P', 'T'};
inline constexpr int kArchiveVersion = 1;

enum class Dtype : std::uint8_t { F32, F64 };

inline std::string to_string(Dtype d) { return d == Dtype::F32 ? "f4" : "f8"; }

struct ArchiveArray {
  Tensor t;
  Dtype dtype = Dtype::F32;
};

struct Archive {
  nlohmann::json meta;  // free-form; "kind" identifies the payload
  std::map<std::string, ArchiveArray> arrays;

  const Tensor& require(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw FormatError("archive: missing array '" + name + "'");
    return it->second.t;
  }
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

template <typename T>
void append_array_le(std::string& out, const Tensor& t) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  for (double x : t.v) {
    T val = static_cast<T>(x);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &val, sizeof(T));
    // this code assumes a little-endian host for float byte order, which
    // holds for every platform this builds on; the integer fields are
    // serialized explicitly either way
    out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
  }
}

}  // namespace detail

inline std::string serialize_archive(const Archive& a) {
  nlohmann::json manifest;
  manifest["format_version"] = kArchiveVersion;
  manifest["meta"] = a.meta;
  nlohmann::json arr_index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, arr] : a.arrays) {
    std::size_t elem = arr.dtype == Dtype::F32 ? 4 : 8;
    std::uint64_t nbytes = arr.t.size() * elem;
    arr_index.push_back({{"name", name},
                         {"dtype", to_string(arr.dtype)},
                         {"shape", arr.t.shape},
                         {"offset", offset},
                         {"nbytes", nbytes}});
    offset += nbytes;
  }
  manifest["arrays"] = arr_index;
  std::string json_bytes = manifest.dump();

  std::string out;
  out.reserve(16 + json_bytes.size() + offset);
  out.append(kArchiveMagic, 8);
  detail::put_u64_le(out, json_bytes.size());
  out += json_bytes;
  for (const auto& [name, arr] : a.arrays) {
    (void)name;
    if (arr.dtype == Dtype::F32)
      detail::append_array_le<float>(out, arr.t);
    else
      detail::append_array_le<double>(out, arr.t);
  }
  return out;
}

inline void save_archive(const Archive& a, const std::filesystem::path& path) {
  std::string bytes = serialize_archive(a);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_archive: cannot open " + tmp.string());
    f.write(bytes.data(), std::streamsize(bytes.size()));
    if (!f) throw IoError("save_archive: short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);  // atomic publish
}

inline Archive parse_archive(const std::string& bytes, const std::string& origin) {
  auto fail = [&origin](std::size_t offset, const std::string& why) -> FormatError {
    return FormatError("archive " + origin + ": " + why + " (at byte offset " +
                       std::to_string(offset) + ")");
  };
  if (bytes.size() < 16) throw fail(bytes.size(), "truncated header");
  if (std::memcmp(bytes.data(), kArchiveMagic, 8) != 0) throw fail(0, "bad magic");
  std::uint64_t json_len =
      detail::get_u64_le(reinterpret_cast<const unsigned char*>(bytes.data()) + 8);
  if (16 + json_len > bytes.size()) throw fail(8, "manifest length exceeds file size");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, json_len));
  } catch (const nlohmann::json::exception& e) {
    throw fail(16, std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.contains("format_version") || manifest["format_version"] != kArchiveVersion)
    throw fail(16, "unsupported format_version");

  Archive a;
  a.meta = manifest.value("meta", nlohmann::json::object());
  const std::size_t payload_start = 16 + json_len;
  for (const auto& e : manifest.value("arrays", nlohmann::json::array())) {
    std::string name = e.at("name").get<std::string>();
    std::string dt = e.at("dtype").get<std::string>();
    std::vector<std::size_t> shape = e.at("shape").get<std::vector<std::size_t>>();
    std::uint64_t offset = e.at("offset").get<std::uint64_t>();
    std::uint64_t nbytes = e.at("nbytes").get<std::uint64_t>();
    Dtype dtype;
    if (dt == "f4")
      dtype = Dtype::F32;
    else if (dt == "f8")
      dtype = Dtype::F64;
    else
      throw fail(payload_start + offset, "array '" + name + "' has unknown dtype '" + dt + "'");
    std::size_t elem = dtype == Dtype::F32 ? 4 : 8;
    std::size_t n = Tensor::count(shape);
    if (nbytes != n * elem)
      throw fail(payload_start + offset, "array '" + name + "' nbytes does not match shape");
    if (payload_start + offset + nbytes > bytes.size())
      throw fail(payload_start + offset, "array '" + name + "' exceeds file size");
    ArchiveArray arr;
    arr.dtype = dtype;
    arr.t = Tensor(shape);
    const char* src = bytes.data() + payload_start + offset;
    if (dtype == Dtype::F32) {
      for (std::size_t i = 0; i < n; ++i) {
        float f;
        std::memcpy(&f, src + i * 4, 4);
        arr.t.v[i] = double(f);
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        double d;
        std::memcpy(&d, src + i * 8, 8);
        arr.t.v[i] = d;
      }
    }
    a.arrays.emplace(std::move(name), std::move(arr));
  }
  return a;
}

inline Archive load_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_archive: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_archive(bytes, path.filename().string());
}

inline std::string sha1_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("sha1_file: cannot open " + path.string());
  Sha1 h;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof(buf));
    h.update(buf, std::size_t(f.gcount()));
  }
  return h.hex_digest();
}

}  // namespace scl_lle
