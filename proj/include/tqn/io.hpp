#pragma once

// Self-describing binary container: an 8-byte magic, a little-endian u64
// header length, a JSON header (free-form metadata plus an array table) and
// raw little-endian payloads. Used for checkpoints, bank snapshots and
// datasets.

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little, "payloads are written in native little-endian order");

namespace tqn {

using json = nlohmann::json;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kContainerMagic[8] = {'T', 'Q', 'N', 'B', 'I', 'N', '0', '1'};

// Writes via a sibling temporary file and rename, so readers never see a
// partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + ": " + ec.message());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class ContainerWriter {
 public:
  json& meta() { return meta_; }

  void add(const std::string& name, const std::vector<std::size_t>& shape, std::span<const double> values) {
    add_raw(name, shape, "f64", values.data(), values.size() * sizeof(double));
  }
  void add_u64(const std::string& name, std::span<const std::uint64_t> values) {
    add_raw(name, {values.size()}, "u64", values.data(), values.size() * sizeof(std::uint64_t));
  }

  std::string bytes() const {
    json header;
    header["meta"] = meta_;
    header["arrays"] = arrays_;
    const std::string text = header.dump();
    std::string out(kContainerMagic, sizeof(kContainerMagic));
    const std::uint64_t len = text.size();
    out.append(reinterpret_cast<const char*>(&len), sizeof(len));
    out += text;
    out += payload_;
    return out;
  }

  void write(const std::filesystem::path& path) const { write_file_atomic(path, bytes()); }

 private:
  void add_raw(const std::string& name, const std::vector<std::size_t>& shape, const char* dtype, const void* data,
               std::size_t nbytes) {
    for (const auto& a : arrays_) {
      if (a["name"] == name) throw IoError("container: duplicate array " + name);
    }
    arrays_.push_back({{"name", name}, {"shape", shape}, {"dtype", dtype}, {"offset", payload_.size()}, {"bytes", nbytes}});
    payload_.append(static_cast<const char*>(data), nbytes);
  }

  json meta_ = json::object();
  json arrays_ = json::array();
  std::string payload_;
};

class ContainerReader {
 public:
  static ContainerReader load(const std::filesystem::path& path) { return parse(read_file_bytes(path), path.string()); }

  static ContainerReader parse(std::string bytes, const std::string& label = "container") {
    ContainerReader r;
    constexpr std::size_t prefix = sizeof(kContainerMagic) + sizeof(std::uint64_t);
    if (bytes.size() < prefix || std::memcmp(bytes.data(), kContainerMagic, sizeof(kContainerMagic)) != 0) {
      throw IoError(label + ": not a container file");
    }
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + sizeof(kContainerMagic), sizeof(len));
    if (len > bytes.size() - prefix) throw IoError(label + ": truncated header");
    json header;
    try {
      header = json::parse(bytes.substr(prefix, len));
    } catch (const json::exception& e) {
      throw IoError(label + ": bad header: " + e.what());
    }
    r.meta_ = header.value("meta", json::object());
    r.payload_ = bytes.substr(prefix + len);
    for (const auto& a : header.at("arrays")) {
      Entry e{a.at("shape").get<std::vector<std::size_t>>(), a.at("dtype").get<std::string>(),
              a.at("offset").get<std::size_t>(), a.at("bytes").get<std::size_t>()};
      if (e.offset + e.bytes > r.payload_.size()) throw IoError(label + ": array " + a.at("name").get<std::string>() + " truncated");
      r.entries_.emplace(a.at("name").get<std::string>(), std::move(e));
    }
    r.label_ = label;
    return r;
  }

  const json& meta() const { return meta_; }
  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  const std::vector<std::size_t>& shape(const std::string& name) const { return entry(name).shape; }

  std::vector<double> f64(const std::string& name) const { return typed<double>(name, "f64"); }
  std::vector<std::uint64_t> u64(const std::string& name) const { return typed<std::uint64_t>(name, "u64"); }

 private:
  struct Entry {
    std::vector<std::size_t> shape;
    std::string dtype;
    std::size_t offset = 0;
    std::size_t bytes = 0;
  };

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IoError(label_ + ": missing array " + name);
    return it->second;
  }

  template <class T>
  std::vector<T> typed(const std::string& name, const char* dtype) const {
    const auto& e = entry(name);
    if (e.dtype != dtype) throw IoError(label_ + ": array " + name + " has dtype " + e.dtype);
    if (e.bytes % sizeof(T) != 0) throw IoError(label_ + ": array " + name + " has ragged size");
    std::vector<T> out(e.bytes / sizeof(T));
    std::memcpy(out.data(), payload_.data() + e.offset, e.bytes);
    return out;
  }

  json meta_;
  std::string payload_;
  std::map<std::string, Entry> entries_;
  std::string label_;
};

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file_bytes(path)); }

}  // namespace tqn
