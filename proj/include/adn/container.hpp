#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace adn {

using Bytes = std::vector<std::uint8_t>;

// Binary container shared by every file format in the project:
//
//   8-byte ASCII magic
//   u32 little-endian header length N
//   N bytes of UTF-8 JSON header
//   payload (little-endian raw data)
//   u32 little-endian CRC32 of every preceding byte
struct ContainerView {
  nlohmann::json header;
  std::span<const std::uint8_t> payload;
  bool checksum_ok = false;
};

enum class ChecksumPolicy {
  Early,     // verify the CRC before looking at the structure
  Deferred,  // caller checks `checksum_ok` after its own size validation
};

Bytes write_container(std::string_view magic, const nlohmann::json& header,
                      std::span<const std::uint8_t> payload);

ContainerView read_container(std::span<const std::uint8_t> bytes,
                             std::string_view magic, ChecksumPolicy policy,
                             std::string_view what);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

// Stable 64-bit FNV-1a digest, hex encoded.
std::string content_hash(std::span<const std::uint8_t> bytes);

std::string hex32(std::uint32_t value);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

void append_f32_le(Bytes& out, std::span<const float> values);
std::vector<float> decode_f32_le(std::span<const std::uint8_t> bytes);

}  // namespace adn
