#include "partrag/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "partrag/errors.hpp"

namespace partrag {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

Fingerprint sha256(std::string_view bytes) {
  Fingerprint fp{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), fp.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != fp.size())
    throw Error("internal", "sha256: digest failed");
  return fp;
}

std::string hex(const Fingerprint& fp) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s;
  for (auto b : fp) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 15]);
  }
  return s;
}

void ByteWriter::u32(std::uint32_t v) { buf_.append(reinterpret_cast<const char*>(&v), 4); }
void ByteWriter::u64(std::uint64_t v) { buf_.append(reinterpret_cast<const char*>(&v), 8); }
void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
void ByteWriter::bytes(std::string_view s) { buf_.append(s); }
void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s);
}

std::string_view ByteReader::bytes(std::size_t n) {
  if (n > remaining())
    throw FormatError("truncated input: need " + std::to_string(n) + " bytes at offset " +
                      std::to_string(pos_) + ", have " + std::to_string(remaining()));
  auto s = data_.substr(pos_, n);
  pos_ += n;
  return s;
}

std::uint32_t ByteReader::u32() {
  std::uint32_t v;
  std::memcpy(&v, bytes(4).data(), 4);
  return v;
}

std::uint64_t ByteReader::u64() {
  std::uint64_t v;
  std::memcpy(&v, bytes(8).data(), 8);
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }
std::string ByteReader::str() { return std::string(bytes(u32())); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("io", "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("io", "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string serialize_params(const ParameterSet& ps) {
  ByteWriter w;
  w.bytes("PRTW");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ps.size()));
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Parameter& p = ps.at(i);
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) w.u64(d);
    w.u64(offset);
    offset += p.value.size();
  }
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (double v : ps.at(i).value.data()) w.f64(v);
  return w.data();
}

ParameterSet deserialize_params(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.bytes(4) != "PRTW") throw FormatError("checkpoint: bad magic");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(v));
  const std::uint32_t n = r.u32();
  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::uint64_t offset;
  };
  std::vector<Entry> table;
  std::uint64_t total = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    Entry e;
    e.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank < 1 || rank > 2) throw FormatError("checkpoint: bad rank for " + e.name);
    std::uint64_t count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.shape.push_back(static_cast<std::size_t>(r.u64()));
      count *= e.shape.back();
    }
    e.offset = r.u64();
    if (e.offset != total) throw FormatError("checkpoint: inconsistent offset for " + e.name);
    total += count;
    table.push_back(std::move(e));
  }
  if (r.remaining() != total * 8)
    throw FormatError("checkpoint: payload holds " + std::to_string(r.remaining()) +
                      " bytes, table needs " + std::to_string(total * 8));
  ParameterSet ps;
  for (auto& e : table) {
    std::size_t count = 1;
    for (auto d : e.shape) count *= d;
    std::vector<double> data(count);
    for (auto& v : data) v = r.f64();
    ps.add(e.name, Tensor(e.shape, std::move(data)));
  }
  return ps;
}

void save_params(const std::filesystem::path& path, const ParameterSet& ps) {
  write_file_atomic(path, serialize_params(ps));
}

ParameterSet load_params(const std::filesystem::path& path) {
  return deserialize_params(read_file(path));
}

Fingerprint params_fingerprint(const ParameterSet& ps) { return sha256(serialize_params(ps)); }

ParameterSet extract_prefix(const ParameterSet& ps, const std::string& prefix) {
  ParameterSet out;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Parameter& p = ps.at(i);
    if (p.name.rfind(prefix, 0) == 0) out.add(p.name.substr(prefix.size()), p.value);
  }
  return out;
}

}  // namespace partrag
