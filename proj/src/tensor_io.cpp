#include "rfamoe/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

namespace rfamoe {

namespace {

constexpr std::array<char, 4> kMagic = {'T', 'S', 'B', '1'};
// Guards against absurd allocations when a header is corrupt.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 34;

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b.data(), b.size());
}

std::string hex_bytes(const char* bytes, std::size_t n) {
  std::ostringstream os;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) os << ' ';
    os << "0x" << std::hex << std::setw(2) << std::setfill('0')
       << (static_cast<unsigned>(static_cast<unsigned char>(bytes[i])));
  }
  return os.str();
}

}  // namespace

namespace detail {

void put_u16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
  out.write(b, 2);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b.data(), b.size());
}

std::uint16_t get_u16(std::istream& in, const char* what) {
  unsigned char b[2];
  if (!in.read(reinterpret_cast<char*>(b), 2)) {
    throw DataError(std::string("truncated stream reading ") + what);
  }
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  const auto offset = static_cast<long long>(in.tellg());
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw DataError(std::string("truncated stream reading ") + what + " at offset " +
                    std::to_string(offset));
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

void write_tsb1(std::ostream& out, const Tensor& tensor) {
  out.write(kMagic.data(), kMagic.size());
  detail::put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (auto d : tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  if (!out) throw DataError("failed writing TSB1 stream");
}

Tensor read_tsb1(std::istream& in) {
  std::array<char, 4> magic{};
  const auto start = static_cast<long long>(in.tellg());
  if (!in.read(magic.data(), magic.size())) {
    throw DataError("truncated TSB1 stream: missing magic at offset " + std::to_string(start));
  }
  if (magic != kMagic) {
    throw DataError("bad TSB1 magic at offset " + std::to_string(start) + ": found " +
                    hex_bytes(magic.data(), magic.size()) + ", expected 0x54 0x53 0x42 0x31");
  }
  const std::uint32_t rank = detail::get_u32(in, "TSB1 rank");
  if (rank == 0 || rank > 16) throw DataError("TSB1 rank out of range: " + std::to_string(rank));
  Shape shape(rank);
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = detail::get_u32(in, "TSB1 dimension");
    if (shape[i] == 0) throw DataError("TSB1 dimension " + std::to_string(i) + " is zero");
    count *= shape[i];
    if (count > kMaxElements) throw DataError("TSB1 element count too large");
  }
  std::vector<double> data(count);
  std::vector<unsigned char> raw(count * 8);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw DataError("truncated TSB1 payload: expected " + std::to_string(count) + " values");
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(raw[i * 8 + b]) << (8 * b);
    data[i] = std::bit_cast<double>(bits);
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tsb1(const std::filesystem::path& path, const Tensor& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_tsb1(out, tensor);
}

Tensor load_tsb1(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return read_tsb1(in);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace rfamoe
