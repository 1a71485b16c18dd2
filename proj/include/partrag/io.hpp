#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "partrag/tensor.hpp"

namespace partrag {

using Fingerprint = std::array<std::uint8_t, 32>;

Fingerprint sha256(std::string_view bytes);
std::string hex(const Fingerprint& fp);

/// Little-endian byte stream builder.
class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void bytes(std::string_view s);
  /// u32 length followed by the bytes.
  void str(std::string_view s);
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

/// Bounds-checked reader; any overrun throws FormatError.
class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string_view bytes(std::size_t n);
  std::string str();
  bool done() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

/// "PRTW" checkpoint: magic, version, parameter count, table of
/// (name, rank, dims, payload offset), then little-endian f64 payload.
std::string serialize_params(const ParameterSet& ps);
ParameterSet deserialize_params(std::string_view bytes);
void save_params(const std::filesystem::path& path, const ParameterSet& ps);
ParameterSet load_params(const std::filesystem::path& path);
/// SHA-256 of serialize_params(ps).
Fingerprint params_fingerprint(const ParameterSet& ps);

/// Subset of a set whose names start with `prefix`, with the prefix removed.
ParameterSet extract_prefix(const ParameterSet& ps, const std::string& prefix);

}  // namespace partrag
