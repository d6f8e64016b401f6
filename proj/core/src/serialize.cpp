#include "asen/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "asen/error.hpp"

namespace asen {

namespace {

constexpr std::array<char, 4> kMagic = {'A', 'T', 'T', '1'};

[[noreturn]] void format_error(std::uint64_t offset, const std::string& what) {
  throw FormatError("tensor record at byte " + std::to_string(offset) + ": " + what);
}

void read_exact(std::istream& in, char* dst, std::size_t n, std::uint64_t& offset,
                const char* what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    format_error(offset + static_cast<std::uint64_t>(in.gcount()),
                 std::string("truncated ") + what);
  }
  offset += n;
}

template <typename U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(const char* bytes) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  }
  return v;
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) { put_le(out, v); }

std::uint32_t read_u32(std::istream& in, std::uint64_t& offset) {
  std::array<char, 4> b{};
  read_exact(in, b.data(), 4, offset, "u32");
  return get_le<std::uint32_t>(b.data());
}

void write_tensor(std::ostream& out, const Tensor& tensor, FloatWidth width) {
  out.write(kMagic.data(), kMagic.size());
  write_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t e : tensor.shape()) write_u32(out, static_cast<std::uint32_t>(e));
  out.put(static_cast<char>(width));
  for (Real v : tensor.data()) {
    if (width == FloatWidth::f64) {
      put_le(out, std::bit_cast<std::uint64_t>(v));
    } else {
      put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
}

Tensor read_tensor(std::istream& in, std::uint64_t& offset) {
  std::array<char, 4> magic{};
  const std::uint64_t start = offset;
  read_exact(in, magic.data(), 4, offset, "magic");
  if (magic != kMagic) format_error(start, "bad magic");

  const std::uint64_t rank_at = offset;
  const std::uint32_t rank = read_u32(in, offset);
  if (rank > kMaxRank) format_error(rank_at, "rank " + std::to_string(rank) + " exceeds 4");
  Shape shape(rank);
  for (auto& e : shape) e = read_u32(in, offset);

  char flag = 0;
  const std::uint64_t flag_at = offset;
  read_exact(in, &flag, 1, offset, "width flag");
  const auto width = static_cast<std::uint8_t>(flag);
  if (width != 4 && width != 8) {
    format_error(flag_at, "width flag " + std::to_string(width) + " is neither 4 nor 8");
  }

  const std::size_t count = shape_size(shape);
  std::vector<char> raw(count * width);
  read_exact(in, raw.data(), raw.size(), offset, "payload");
  std::vector<Real> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    const char* p = raw.data() + i * width;
    data[i] = width == 8 ? std::bit_cast<double>(get_le<std::uint64_t>(p))
                         : static_cast<Real>(std::bit_cast<float>(get_le<std::uint32_t>(p)));
  }
  return Tensor(std::move(shape), std::move(data));
}

Tensor read_tensor(std::istream& in) {
  std::uint64_t offset = 0;
  return read_tensor(in, offset);
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor, FloatWidth width) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(out, tensor, width);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_tensor(in);
}

}  // namespace asen
