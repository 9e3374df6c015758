#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "rfamoe/tensor.hpp"

namespace rfamoe {

// TSB1 layout: "TSB1", u32 rank, rank x u32 dims, f64 payload. All little-endian.
void write_tsb1(std::ostream& out, const Tensor& tensor);
Tensor read_tsb1(std::istream& in);

void save_tsb1(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_tsb1(const std::filesystem::path& path);

namespace detail {
void put_u16(std::ostream& out, std::uint16_t v);
void put_u32(std::ostream& out, std::uint32_t v);
std::uint16_t get_u16(std::istream& in, const char* what);
std::uint32_t get_u32(std::istream& in, const char* what);
}  // namespace detail

}  // namespace rfamoe
