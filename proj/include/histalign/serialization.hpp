#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "histalign/numerics.hpp"

namespace histalign::io {

/// Malformed, truncated or version-mismatched binary input.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct NamedTensor {
    std::string name;
    numerics::Tensor tensor;
};

// Little-endian primitives. Readers throw FormatError on a short read.
void write_u8(std::ostream& out, std::uint8_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
void write_magic(std::ostream& out, std::string_view magic);

std::uint8_t read_u8(std::istream& in);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
double read_f64(std::istream& in);
void expect_magic(std::istream& in, std::string_view magic);

/// (name length u32, name bytes, rank u32, dims u32..., row-major f64 data)
void write_tensor(std::ostream& out, const NamedTensor& t);
NamedTensor read_tensor(std::istream& in);

/// u32 count followed by that many tensors.
void write_tensor_list(std::ostream& out, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensor_list(std::istream& in);

/// Writes through a sibling temporary file and renames it into place, so a
/// failed write never leaves a partial file at `path`.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);

std::string read_file(const std::filesystem::path& path);

}  // namespace histalign::io
