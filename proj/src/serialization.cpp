#include "histalign/serialization.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace histalign::io {

namespace {

constexpr std::uint32_t kMaxNameLength = 1u << 16;
constexpr std::uint32_t kMaxRank = 8;

template <typename T>
void write_le(std::ostream& out, T v) {
    std::array<char, sizeof(T)> bytes{};
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    }
    out.write(bytes.data(), bytes.size());
}

template <typename T>
T read_le(std::istream& in) {
    std::array<unsigned char, sizeof(T)> bytes{};
    in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
        throw FormatError("unexpected end of file");
    }
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        v |= static_cast<T>(bytes[i]) << (8 * i);
    }
    return v;
}

}  // namespace

void write_u8(std::ostream& out, std::uint8_t v) { out.put(static_cast<char>(v)); }
void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_le(out, v); }
void write_f64(std::ostream& out, double v) { write_le(out, std::bit_cast<std::uint64_t>(v)); }

void write_magic(std::ostream& out, std::string_view magic) {
    out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

std::uint8_t read_u8(std::istream& in) { return read_le<std::uint8_t>(in); }
std::uint32_t read_u32(std::istream& in) { return read_le<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream& in) { return read_le<std::uint64_t>(in); }
double read_f64(std::istream& in) { return std::bit_cast<double>(read_le<std::uint64_t>(in)); }

void expect_magic(std::istream& in, std::string_view magic) {
    std::string got(magic.size(), '\0');
    in.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (in.gcount() != static_cast<std::streamsize>(magic.size()) || got != magic) {
        throw FormatError("bad magic bytes: expected \"" + std::string(magic) + "\"");
    }
}

void write_tensor(std::ostream& out, const NamedTensor& t) {
    if (!t.tensor.valid()) {
        throw std::invalid_argument("tensor '" + t.name + "' has inconsistent shape and data");
    }
    write_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_u32(out, static_cast<std::uint32_t>(t.tensor.shape.size()));
    for (std::size_t dim : t.tensor.shape) {
        write_u32(out, static_cast<std::uint32_t>(dim));
    }
    for (double v : t.tensor.data) {
        write_f64(out, v);
    }
}

NamedTensor read_tensor(std::istream& in) {
    NamedTensor t;
    const std::uint32_t name_len = read_u32(in);
    if (name_len > kMaxNameLength) {
        throw FormatError("tensor name length out of range");
    }
    t.name.resize(name_len);
    in.read(t.name.data(), name_len);
    if (in.gcount() != static_cast<std::streamsize>(name_len)) {
        throw FormatError("unexpected end of file in tensor name");
    }
    const std::uint32_t rank = read_u32(in);
    if (rank > kMaxRank) {
        throw FormatError("tensor '" + t.name + "' has unsupported rank");
    }
    t.tensor.shape.resize(rank);
    for (auto& dim : t.tensor.shape) {
        dim = read_u32(in);
    }
    const std::size_t count = t.tensor.element_count();
    if (count > (std::size_t{1} << 32)) {
        throw FormatError("tensor '" + t.name + "' is implausibly large");
    }
    t.tensor.data.resize(count);
    for (auto& v : t.tensor.data) {
        v = read_f64(in);
    }
    return t;
}

void write_tensor_list(std::ostream& out, const std::vector<NamedTensor>& tensors) {
    write_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        write_tensor(out, t);
    }
}

std::vector<NamedTensor> read_tensor_list(std::istream& in) {
    const std::uint32_t count = read_u32(in);
    std::vector<NamedTensor> tensors;
    tensors.reserve(std::min<std::uint32_t>(count, 4096));
    for (std::uint32_t i = 0; i < count; ++i) {
        tensors.push_back(read_tensor(in));
    }
    return tensors;
}

void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            std::filesystem::remove(tmp);
            throw std::runtime_error("failed writing " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::invalid_argument("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace histalign::io
