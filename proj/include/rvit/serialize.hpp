#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rvit/tensor.hpp"

namespace rvit {

// ---- .npy (format version 1.0) ----
// Supported descrs: <f4 <f8 <i4 <i8 |u1. Arrays are little-endian C order,
// which matches this library's row-major layout.

struct NpyArray {
  std::string descr;
  std::vector<int> shape;
  std::vector<char> raw;

  size_t numel() const {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
  }
};

inline size_t npy_itemsize(const std::string& descr) {
  if (descr == "<f4" || descr == "<i4") return 4;
  if (descr == "<f8" || descr == "<i8") return 8;
  if (descr == "|u1") return 1;
  throw std::invalid_argument("unsupported npy descr: " + descr);
}

inline void write_npy(const std::string& path, const std::string& descr,
                      const std::vector<int>& shape, const void* data, size_t nbytes) {
  std::string shape_s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    shape_s += std::to_string(shape[i]);
    if (shape.size() == 1 || i + 1 < shape.size()) shape_s += ",";
    if (i + 1 < shape.size()) shape_s += " ";
  }
  shape_s += ")";
  std::string header = "{'descr': '" + descr + "', 'fortran_order': False, 'shape': " + shape_s +
                       ", }";
  // Pad so magic+version+len+header is a multiple of 64, newline-terminated.
  size_t unpadded = 6 + 2 + 2 + header.size() + 1;
  size_t pad = (64 - unpadded % 64) % 64;
  header.append(pad, ' ');
  header.push_back('\n');
  if (header.size() > 65535) throw std::length_error("npy header too large");

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write("\x93NUMPY", 6);
  f.put(1);
  f.put(0);
  const uint16_t hlen = static_cast<uint16_t>(header.size());
  f.put(static_cast<char>(hlen & 0xff));
  f.put(static_cast<char>(hlen >> 8));
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(nbytes));
  if (!f) throw std::runtime_error("write failed: " + path);
}

template <typename S>
void write_npy(const std::string& path, const Tensor<S>& t) {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
  const std::string descr = std::is_same_v<S, float> ? "<f4" : "<f8";
  write_npy(path, descr, t.shape(), t.data(), t.numel() * sizeof(S));
}

inline void write_npy_u8(const std::string& path, const std::vector<int>& shape,
                         const std::vector<uint8_t>& data) {
  write_npy(path, "|u1", shape, data.data(), data.size());
}

inline NpyArray read_npy(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  char magic[6];
  f.read(magic, 6);
  if (!f || std::memcmp(magic, "\x93NUMPY", 6) != 0) {
    throw std::runtime_error("not an npy file: " + path);
  }
  const int major = f.get();
  const int minor = f.get();
  (void)minor;
  size_t hlen = 0;
  if (major == 1) {
    const int lo = f.get();
    const int hi = f.get();
    hlen = static_cast<size_t>(lo) | (static_cast<size_t>(hi) << 8);
  } else if (major == 2 || major == 3) {
    uint8_t b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    hlen = static_cast<size_t>(b[0]) | (static_cast<size_t>(b[1]) << 8) |
           (static_cast<size_t>(b[2]) << 16) | (static_cast<size_t>(b[3]) << 24);
  } else {
    throw std::runtime_error("unsupported npy version");
  }
  std::string header(hlen, '\0');
  f.read(header.data(), static_cast<std::streamsize>(hlen));

  auto find_value = [&](const std::string& key) -> std::string {
    const size_t k = header.find("'" + key + "'");
    if (k == std::string::npos) throw std::runtime_error("npy header missing " + key);
    size_t c = header.find(':', k);
    return header.substr(c + 1);
  };

  NpyArray arr;
  {
    std::string v = find_value("descr");
    const size_t q1 = v.find('\'');
    const size_t q2 = v.find('\'', q1 + 1);
    arr.descr = v.substr(q1 + 1, q2 - q1 - 1);
  }
  {
    std::string v = find_value("fortran_order");
    if (v.find("True") != std::string::npos && v.find("True") < v.find(',')) {
      throw std::runtime_error("fortran_order npy not supported");
    }
  }
  {
    std::string v = find_value("shape");
    const size_t p1 = v.find('(');
    const size_t p2 = v.find(')', p1);
    std::string inner = v.substr(p1 + 1, p2 - p1 - 1);
    size_t pos = 0;
    while (pos < inner.size()) {
      while (pos < inner.size() && (inner[pos] == ' ' || inner[pos] == ',')) ++pos;
      if (pos >= inner.size()) break;
      size_t end = pos;
      while (end < inner.size() && inner[end] != ',' && inner[end] != ' ') ++end;
      arr.shape.push_back(std::stoi(inner.substr(pos, end - pos)));
      pos = end;
    }
  }
  const size_t nbytes = arr.numel() * npy_itemsize(arr.descr);
  arr.raw.resize(nbytes);
  f.read(arr.raw.data(), static_cast<std::streamsize>(nbytes));
  if (!f) throw std::runtime_error("npy truncated: " + path);
  return arr;
}

template <typename S>
Tensor<S> npy_to_tensor(const NpyArray& arr) {
  Tensor<S> t(arr.shape);
  const size_t n = t.numel();
  if (arr.descr == "<f4") {
    const float* p = reinterpret_cast<const float*>(arr.raw.data());
    for (size_t i = 0; i < n; ++i) t.data()[i] = static_cast<S>(p[i]);
  } else if (arr.descr == "<f8") {
    const double* p = reinterpret_cast<const double*>(arr.raw.data());
    for (size_t i = 0; i < n; ++i) t.data()[i] = static_cast<S>(p[i]);
  } else if (arr.descr == "|u1") {
    const uint8_t* p = reinterpret_cast<const uint8_t*>(arr.raw.data());
    for (size_t i = 0; i < n; ++i) t.data()[i] = static_cast<S>(p[i]);
  } else {
    throw std::runtime_error("npy_to_tensor: unsupported descr " + arr.descr);
  }
  return t;
}

// ---- checkpoint container ----
// Single file: 8-byte magic, u64 little-endian JSON length, JSON index,
// then a contiguous data section. The index records per-tensor name, descr,
// shape and byte offset into the data section; `meta` is free-form JSON.

inline constexpr char kCheckpointMagic[8] = {'R', 'V', 'C', 'K', 'P', 'T', '0', '1'};

class CheckpointWriter {
 public:
  void put_raw(const std::string& name, const std::string& descr, const std::vector<int>& shape,
               const void* data, size_t nbytes) {
    nlohmann::json rec;
    rec["name"] = name;
    rec["descr"] = descr;
    rec["shape"] = shape;
    rec["offset"] = blob_.size();
    rec["nbytes"] = nbytes;
    index_.push_back(rec);
    const char* p = static_cast<const char*>(data);
    blob_.insert(blob_.end(), p, p + nbytes);
  }

  template <typename S>
  void put(const std::string& name, const Tensor<S>& t) {
    static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
    const std::string descr = std::is_same_v<S, float> ? "<f4" : "<f8";
    put_raw(name, descr, t.shape(), t.data(), t.numel() * sizeof(S));
  }

  nlohmann::json& meta() { return meta_; }

  void save(const std::string& path) const {
    nlohmann::json top;
    top["meta"] = meta_;
    top["tensors"] = index_;
    const std::string js = top.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f.write(kCheckpointMagic, 8);
    const uint64_t len = js.size();
    char lenb[8];
    for (int i = 0; i < 8; ++i) lenb[i] = static_cast<char>((len >> (8 * i)) & 0xff);
    f.write(lenb, 8);
    f.write(js.data(), static_cast<std::streamsize>(js.size()));
    f.write(blob_.data(), static_cast<std::streamsize>(blob_.size()));
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
  }

 private:
  nlohmann::json meta_ = nlohmann::json::object();
  nlohmann::json index_ = nlohmann::json::array();
  std::vector<char> blob_;
};

class Checkpoint {
 public:
  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
      throw std::runtime_error("not a checkpoint file: " + path);
    }
    char lenb[8];
    f.read(lenb, 8);
    uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<uint64_t>(static_cast<uint8_t>(lenb[i])) << (8 * i);
    std::string js(len, '\0');
    f.read(js.data(), static_cast<std::streamsize>(len));
    Checkpoint ck;
    nlohmann::json top = nlohmann::json::parse(js);
    ck.meta_ = top.at("meta");
    for (const auto& rec : top.at("tensors")) {
      Entry e;
      e.descr = rec.at("descr").get<std::string>();
      e.shape = rec.at("shape").get<std::vector<int>>();
      e.offset = rec.at("offset").get<size_t>();
      e.nbytes = rec.at("nbytes").get<size_t>();
      ck.order_.push_back(rec.at("name").get<std::string>());
      ck.entries_[ck.order_.back()] = e;
    }
    f.seekg(0, std::ios::end);
    const auto end = f.tellg();
    const std::streamoff data_start = 16 + static_cast<std::streamoff>(len);
    ck.blob_.resize(static_cast<size_t>(end - data_start));
    f.seekg(data_start);
    f.read(ck.blob_.data(), static_cast<std::streamsize>(ck.blob_.size()));
    if (!f) throw std::runtime_error("checkpoint truncated: " + path);
    return ck;
  }

  const nlohmann::json& meta() const { return meta_; }
  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  const std::vector<std::string>& names() const { return order_; }

  template <typename S>
  Tensor<S> tensor(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("checkpoint missing tensor: " + name);
    const Entry& e = it->second;
    NpyArray arr;
    arr.descr = e.descr;
    arr.shape = e.shape;
    arr.raw.assign(blob_.begin() + static_cast<std::ptrdiff_t>(e.offset),
                   blob_.begin() + static_cast<std::ptrdiff_t>(e.offset + e.nbytes));
    return npy_to_tensor<S>(arr);
  }

 private:
  struct Entry {
    std::string descr;
    std::vector<int> shape;
    size_t offset = 0;
    size_t nbytes = 0;
  };
  nlohmann::json meta_;
  std::vector<std::string> order_;
  std::unordered_map<std::string, Entry> entries_;
  std::vector<char> blob_;
};

}  // namespace rvit
