#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Fixed-width little-endian primitives for the checkpoint and cache layouts.
// Short reads throw IoError.

namespace grc::io {

void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, const std::string& s);
void write_magic(std::ostream& os, std::string_view magic);

std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is);
/// Throws IoError naming `what` when the next bytes differ from `magic`.
void expect_magic(std::istream& is, std::string_view magic, std::string_view what);

/// Values are stored at their own width (4 bytes for float, 8 for double).
template <typename T>
void write_values(std::ostream& os, std::span<const T> values);
template <typename T>
void read_values(std::istream& is, std::span<T> values);

}  // namespace grc::io
