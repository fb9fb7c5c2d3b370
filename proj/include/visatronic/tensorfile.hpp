#pragma once

// Repository tensor-file format.
//
//   offset 0   4 bytes  magic "VTNS"
//   offset 4   u32 LE   format version (1)
//   offset 8   u32 LE   header length H
//   offset 12  H bytes  UTF-8 JSON {"dtype": "i32"|"f32"|"f64", "shape": [...], "attrs": {...}}
//   then       payload, product(shape) little-endian elements, row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "visatronic/error.hpp"

namespace visatronic {

using Json = nlohmann::json;

enum class DType { kI32, kF32, kF64 };

inline std::string dtype_name(DType d) {
  switch (d) {
    case DType::kI32: return "i32";
    case DType::kF32: return "f32";
    case DType::kF64: return "f64";
  }
  return "?";
}

inline DType parse_dtype(const std::string& s) {
  if (s == "i32") return DType::kI32;
  if (s == "f32") return DType::kF32;
  if (s == "f64") return DType::kF64;
  fail(ErrorKind::kFormat, "unknown dtype '" + s + "'");
}

inline std::size_t dtype_size(DType d) { return d == DType::kF64 ? 8 : 4; }

namespace le {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_value(std::string& out, DType dtype, double v) {
  switch (dtype) {
    case DType::kI32: put_u32(out, static_cast<std::uint32_t>(static_cast<std::int32_t>(v))); break;
    case DType::kF32: put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); break;
    case DType::kF64: put_u64(out, std::bit_cast<std::uint64_t>(v)); break;
  }
}

inline double get_value(const unsigned char* p, DType dtype) {
  switch (dtype) {
    case DType::kI32: return static_cast<double>(static_cast<std::int32_t>(get_u32(p)));
    case DType::kF32: return static_cast<double>(std::bit_cast<float>(get_u32(p)));
    case DType::kF64: return std::bit_cast<double>(get_u64(p));
  }
  return 0.0;
}

}  // namespace le

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::kIo, "short write to " + path.string());
}

// A decoded tensor file. Integer payloads are held in `values` as exact
// doubles; every i32 is representable.
struct TensorFile {
  DType dtype = DType::kF32;
  std::vector<std::size_t> shape;
  Json attrs = Json::object();
  std::vector<double> values;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

inline constexpr char kTensorMagic[4] = {'V', 'T', 'N', 'S'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

inline std::string encode_tensor_file(const TensorFile& tf) {
  require(tf.values.size() == tf.numel(), ErrorKind::kShape, "tensor payload does not match shape");
  const Json header = {{"dtype", dtype_name(tf.dtype)}, {"shape", tf.shape}, {"attrs", tf.attrs}};
  const std::string text = header.dump();
  std::string out(kTensorMagic, 4);
  le::put_u32(out, kTensorFormatVersion);
  le::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out.reserve(out.size() + tf.values.size() * dtype_size(tf.dtype));
  for (double v : tf.values) le::put_value(out, tf.dtype, v);
  return out;
}

inline TensorFile decode_tensor_file(const std::string& bytes, const std::string& what = "tensor file") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  require(bytes.size() >= 12 && std::memcmp(bytes.data(), kTensorMagic, 4) == 0, ErrorKind::kFormat,
          what + ": bad magic");
  require(le::get_u32(p + 4) == kTensorFormatVersion, ErrorKind::kFormat, what + ": unsupported version");
  const std::size_t header_len = le::get_u32(p + 8);
  require(bytes.size() >= 12 + header_len, ErrorKind::kFormat, what + ": truncated header");
  TensorFile tf;
  try {
    const Json header = Json::parse(bytes.substr(12, header_len));
    tf.dtype = parse_dtype(header.at("dtype").get<std::string>());
    tf.shape = header.at("shape").get<std::vector<std::size_t>>();
    if (header.contains("attrs")) tf.attrs = header.at("attrs");
  } catch (const Json::exception& e) {
    fail(ErrorKind::kFormat, what + ": bad header: " + e.what());
  }
  const std::size_t n = tf.numel();
  const std::size_t esize = dtype_size(tf.dtype);
  require(bytes.size() == 12 + header_len + n * esize, ErrorKind::kFormat,
          what + ": payload length does not match header");
  tf.values.resize(n);
  const unsigned char* payload = p + 12 + header_len;
  for (std::size_t i = 0; i < n; ++i) tf.values[i] = le::get_value(payload + i * esize, tf.dtype);
  return tf;
}

inline void write_tensor_file(const std::filesystem::path& path, const TensorFile& tf) {
  write_file_bytes(path, encode_tensor_file(tf));
}

inline TensorFile read_tensor_file(const std::filesystem::path& path) {
  return decode_tensor_file(read_file_bytes(path), path.string());
}

}  // namespace visatronic
