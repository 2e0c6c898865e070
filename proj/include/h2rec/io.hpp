#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace h2rec {

/// All recoverable failures (bad input files, invalid configs, contract
/// violations) surface as this exception type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

std::ofstream open_out(const std::filesystem::path& path, bool binary = false);
std::ifstream open_in(const std::filesystem::path& path, bool binary = false);

// Little-endian primitives. The host is assumed little-endian; a static
// check in io.cpp enforces it.
void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f32(std::ostream& os, float v);
void write_f32s(std::ostream& os, const float* data, std::size_t n);
void write_bytes(std::ostream& os, std::string_view bytes);

std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
float read_f32(std::istream& is);
void read_f32s(std::istream& is, float* data, std::size_t n);
std::string read_bytes(std::istream& is, std::size_t n);

std::vector<std::string_view> split(std::string_view line, char sep);
std::int64_t parse_int(std::string_view s);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);
/// FNV-1a checksum of a whole file, hex encoded.
std::string file_checksum(const std::filesystem::path& path);

}  // namespace io
}  // namespace h2rec
