#include "h2rec/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <iomanip>
#include <sstream>

namespace h2rec::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::ofstream open_out(const std::filesystem::path& path, bool binary) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
  if (!os) throw Error("cannot open for writing: " + path.string());
  return os;
}

std::ifstream open_in(const std::filesystem::path& path, bool binary) {
  std::ifstream is(path, binary ? std::ios::binary : std::ios::in);
  if (!is) throw Error("cannot open: " + path.string());
  return is;
}

namespace {
template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(T))) throw Error("unexpected end of file");
  return v;
}
}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { put(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { put(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put(os, v); }
void write_f32(std::ostream& os, float v) { put(os, v); }
void write_f32s(std::ostream& os, const float* data, std::size_t n) {
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
}
void write_bytes(std::ostream& os, std::string_view bytes) {
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::uint8_t read_u8(std::istream& is) { return get<std::uint8_t>(is); }
std::uint32_t read_u32(std::istream& is) { return get<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return get<std::uint64_t>(is); }
float read_f32(std::istream& is) { return get<float>(is); }
void read_f32s(std::istream& is, float* data, std::size_t n) {
  const auto bytes = static_cast<std::streamsize>(n * sizeof(float));
  is.read(reinterpret_cast<char*>(data), bytes);
  if (is.gcount() != bytes) throw Error("unexpected end of file");
}
std::string read_bytes(std::istream& is, std::size_t n) {
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n)) throw Error("unexpected end of file");
  return s;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::int64_t parse_int(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw Error("not an integer: '" + std::string(s) + "'");
  }
  return v;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string file_checksum(const std::filesystem::path& path) {
  auto is = open_in(path, true);
  std::ostringstream ss;
  ss << is.rdbuf();
  return hex64(fnv1a64(ss.str()));
}

}  // namespace h2rec::io
