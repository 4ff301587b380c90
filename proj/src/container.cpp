#include "adn/container.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "adn/error.hpp"

namespace adn {
namespace {

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

}  // namespace

const char* to_string(Errc code) {
  switch (code) {
    case Errc::InvalidArgument: return "invalid argument";
    case Errc::ShapeMismatch: return "shape mismatch";
    case Errc::BadMagic: return "bad magic";
    case Errc::UnknownVersion: return "unknown version";
    case Errc::Checksum: return "checksum error";
    case Errc::SizeMismatch: return "size mismatch";
    case Errc::Corrupt: return "corrupt file";
    case Errc::NonBinaryLabel: return "non-binary label";
    case Errc::InconsistentSpec: return "inconsistent network";
    case Errc::Unsupported: return "unsupported";
    case Errc::ClassAbsent: return "class absent";
    case Errc::Divergence: return "divergence";
    case Errc::GridMismatch: return "grid mismatch";
    case Errc::Io: return "i/o error";
  }
  return "error";
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded chunks.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
    std::size_t n = std::min(kChunk, bytes.size() - off);
    crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(n));
  }
  return static_cast<std::uint32_t>(crc);
}

std::string hex32(std::uint32_t value) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", value);
  return buf;
}

std::string content_hash(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Bytes write_container(std::string_view magic, const nlohmann::json& header,
                      std::span<const std::uint8_t> payload) {
  const std::string text = header.dump();
  Bytes out;
  out.reserve(magic.size() + 8 + text.size() + payload.size());
  out.insert(out.end(), magic.begin(), magic.end());
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  put_u32(out, crc32(out));
  return out;
}

ContainerView read_container(std::span<const std::uint8_t> bytes,
                             std::string_view magic, ChecksumPolicy policy,
                             std::string_view what) {
  const std::string name(what);
  if (bytes.size() < magic.size() ||
      std::memcmp(bytes.data(), magic.data(), magic.size()) != 0) {
    fail(Errc::BadMagic, name + ": expected magic \"" + std::string(magic) + "\"");
  }
  const std::size_t fixed = magic.size() + 4;
  ContainerView view;
  if (bytes.size() >= fixed + 4) {
    view.checksum_ok =
        crc32(bytes.first(bytes.size() - 4)) == get_u32(bytes.data() + bytes.size() - 4);
  }
  if (policy == ChecksumPolicy::Early && !view.checksum_ok) {
    fail(Errc::Checksum, name + ": CRC32 mismatch (file truncated or corrupt)");
  }
  if (bytes.size() < fixed + 4) fail(Errc::SizeMismatch, name + ": file too short");
  const std::size_t header_len = get_u32(bytes.data() + magic.size());
  if (fixed + header_len + 4 > bytes.size()) {
    fail(Errc::SizeMismatch, name + ": header length exceeds file size");
  }
  auto text = bytes.subspan(fixed, header_len);
  view.header = nlohmann::json::parse(text.begin(), text.end(), nullptr, false);
  if (view.header.is_discarded() || !view.header.is_object()) {
    fail(Errc::Corrupt, name + ": header is not a JSON object");
  }
  view.payload = bytes.subspan(fixed + header_len, bytes.size() - fixed - header_len - 4);
  return view;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::Io, "cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::Io, "write failed for " + path.string());
}

void append_f32_le(Bytes& out, std::span<const float> values) {
  static_assert(sizeof(float) == 4);
  const std::size_t base = out.size();
  out.resize(base + values.size() * 4);
  if constexpr (std::endian::native == std::endian::little) {
    if (!values.empty()) std::memcpy(out.data() + base, values.data(), values.size() * 4);
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      auto bits = std::bit_cast<std::uint32_t>(values[i]);
      for (int b = 0; b < 4; ++b) out[base + 4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
  }
}

std::vector<float> decode_f32_le(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % 4 != 0) fail(Errc::SizeMismatch, "float payload not a multiple of 4 bytes");
  std::vector<float> values(bytes.size() / 4);
  if constexpr (std::endian::native == std::endian::little) {
    if (!values.empty()) std::memcpy(values.data(), bytes.data(), bytes.size());
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] = std::bit_cast<float>(get_u32(bytes.data() + 4 * i));
    }
  }
  return values;
}

}  // namespace adn
