#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "asen/tensor.hpp"

namespace asen {

// Binary tensor record, little-endian:
//   "ATT1" | u32 rank | rank x u32 extents | u8 width (4 or 8) | row-major floats
enum class FloatWidth : std::uint8_t { f32 = 4, f64 = 8 };

void write_tensor(std::ostream& out, const Tensor& tensor, FloatWidth width = FloatWidth::f64);

/// Reads one record. `offset` is the stream position of the record start and is advanced
/// past it; format errors report the absolute byte offset where parsing failed.
Tensor read_tensor(std::istream& in, std::uint64_t& offset);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor,
                 FloatWidth width = FloatWidth::f64);
Tensor load_tensor(const std::filesystem::path& path);

// Little-endian primitives shared by the checkpoint format.
void write_u32(std::ostream& out, std::uint32_t v);
std::uint32_t read_u32(std::istream& in, std::uint64_t& offset);

}  // namespace asen
