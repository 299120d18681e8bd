#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <string>

#include "musr/common.hpp"

namespace musr {

// Little-endian binary primitives for the checkpoint and embedding formats.
namespace bin {

template <typename U>
void write_le(std::ostream& os, U value) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i)
        buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

inline void write_f32(std::ostream& os, float value) {
    std::uint32_t bits;
    static_assert(sizeof(bits) == sizeof(value));
    __builtin_memcpy(&bits, &value, sizeof(bits));
    write_le(os, bits);
}

template <typename U>
U read_le(std::istream& is) {
    unsigned char buf[sizeof(U)];
    is.read(reinterpret_cast<char*>(buf), sizeof(U));
    if (!is) throw InputError("unexpected end of binary stream");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
        v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return static_cast<U>(v);
}

inline float read_f32(std::istream& is) {
    const std::uint32_t bits = read_le<std::uint32_t>(is);
    float value;
    __builtin_memcpy(&value, &bits, sizeof(value));
    return value;
}

inline void write_string(std::ostream& os, const std::string& s) {
    if (s.size() > 0xffff) throw InputError("string too long for u16 length prefix");
    write_le<std::uint16_t>(os, static_cast<std::uint16_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    const std::uint16_t len = read_le<std::uint16_t>(is);
    std::string s(len, '\0');
    is.read(s.data(), len);
    if (!is) throw InputError("unexpected end of binary stream");
    return s;
}

}  // namespace bin

// Writes via a temp file and renames into place, so failures never leave a
// partial output behind.
inline void atomic_write(const std::string& path,
                         const std::function<void(std::ostream&)>& writer,
                         bool binary = true) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, binary ? std::ios::binary : std::ios::out);
        if (!os) throw InputError("cannot write file: " + tmp);
        writer(os);
        os.flush();
        if (!os) throw InputError("write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw InputError("cannot move " + tmp + " into place: " + ec.message());
    }
}

// FNV-1a 64-bit over a file's bytes; identifies inputs in run manifests.
inline std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot read file for hashing: " + path);
    std::uint64_t h = 1469598103934665603ULL;
    char buf[1 << 16];
    while (is) {
        is.read(buf, sizeof(buf));
        const std::streamsize got = is.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ULL;
        }
    }
    return h;
}

}  // namespace musr
