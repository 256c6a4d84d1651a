#include "grc/binary_io.hpp"

#include <bit>
#include <cstring>

#include "grc/error.hpp"

namespace grc::io {

namespace {

void put_le(std::ostream& os, std::uint64_t v, int bytes) {
  char buf[8];
  for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(buf, bytes);
  if (!os) throw IoError("write failed");
}

std::uint64_t get_le(std::istream& is, int bytes) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), bytes);
  if (is.gcount() != bytes) throw IoError("unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { put_le(os, v, 1); }
void write_u32(std::ostream& os, std::uint32_t v) { put_le(os, v, 4); }
void write_u64(std::ostream& os, std::uint64_t v) { put_le(os, v, 8); }
void write_f64(std::ostream& os, double v) { put_le(os, std::bit_cast<std::uint64_t>(v), 8); }

void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!os) throw IoError("write failed");
}

void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!os) throw IoError("write failed");
}

std::uint8_t read_u8(std::istream& is) { return static_cast<std::uint8_t>(get_le(is, 1)); }
std::uint32_t read_u32(std::istream& is) { return static_cast<std::uint32_t>(get_le(is, 4)); }
std::uint64_t read_u64(std::istream& is) { return get_le(is, 8); }
double read_f64(std::istream& is) { return std::bit_cast<double>(get_le(is, 8)); }

std::string read_string(std::istream& is) {
  const std::uint64_t n = read_u64(is);
  if (n > (1ull << 32)) throw IoError("implausible string length in file");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::uint64_t>(is.gcount()) != n) throw IoError("unexpected end of file");
  return s;
}

void expect_magic(std::istream& is, std::string_view magic, std::string_view what) {
  std::string got(magic.size(), '\0');
  is.read(got.data(), static_cast<std::streamsize>(magic.size()));
  if (static_cast<std::size_t>(is.gcount()) != magic.size() || got != magic) {
    throw IoError("bad magic bytes: not a " + std::string(what));
  }
}

template <typename T>
void write_values(std::ostream& os, std::span<const T> values) {
  for (T v : values) {
    if constexpr (sizeof(T) == 4) {
      put_le(os, std::bit_cast<std::uint32_t>(v), 4);
    } else {
      put_le(os, std::bit_cast<std::uint64_t>(v), 8);
    }
  }
}

template <typename T>
void read_values(std::istream& is, std::span<T> values) {
  for (T& v : values) {
    if constexpr (sizeof(T) == 4) {
      v = std::bit_cast<T>(static_cast<std::uint32_t>(get_le(is, 4)));
    } else {
      v = std::bit_cast<T>(get_le(is, 8));
    }
  }
}

template void write_values<float>(std::ostream&, std::span<const float>);
template void write_values<double>(std::ostream&, std::span<const double>);
template void read_values<float>(std::istream&, std::span<float>);
template void read_values<double>(std::istream&, std::span<double>);

}  // namespace grc::io
