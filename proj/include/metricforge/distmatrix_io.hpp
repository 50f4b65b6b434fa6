#pragma once

// Binary dump format for distance matrices, used to hand rankings between
// CLI invocations. Layout: 4-byte magic "MFDM", then version, rows, cols as
// little-endian uint32, then rows*cols float64 values in row-major order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "metricforge/errors.hpp"
#include "metricforge/matrix.hpp"

namespace metricforge {

namespace detail {

inline constexpr char kDistMagic[4] = {'M', 'F', 'D', 'M'};
inline constexpr std::uint32_t kDistVersion = 1;

inline void put_u32_le(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {
        static_cast<unsigned char>(v & 0xff),
        static_cast<unsigned char>((v >> 8) & 0xff),
        static_cast<unsigned char>((v >> 16) & 0xff),
        static_cast<unsigned char>((v >> 24) & 0xff),
    };
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32_le(std::istream& in, const std::string& what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw ParseError("distance matrix: truncated while reading " + what);
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64_le(std::ostream& out, double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) {
        bits = __builtin_bswap64(bits);
    }
    out.write(reinterpret_cast<const char*>(&bits), 8);
}

inline double get_f64_le(std::istream& in, const std::string& what) {
    std::uint64_t bits = 0;
    if (!in.read(reinterpret_cast<char*>(&bits), 8)) {
        throw ParseError("distance matrix: truncated while reading " + what);
    }
    if constexpr (std::endian::native == std::endian::big) {
        bits = __builtin_bswap64(bits);
    }
    return std::bit_cast<double>(bits);
}

}  // namespace detail

inline void write_dist_matrix(std::ostream& out, const Matrix& m) {
    out.write(detail::kDistMagic, 4);
    detail::put_u32_le(out, detail::kDistVersion);
    detail::put_u32_le(out, static_cast<std::uint32_t>(m.rows));
    detail::put_u32_le(out, static_cast<std::uint32_t>(m.cols));
    for (double v : m.data) {
        detail::put_f64_le(out, v);
    }
    if (!out) {
        throw Error("distance matrix: write failed");
    }
}

inline void save_dist_matrix(const std::string& path, const Matrix& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot open for writing: " + path);
    }
    write_dist_matrix(out, m);
}

inline Matrix read_dist_matrix(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4)) {
        throw ParseError("distance matrix: truncated while reading magic");
    }
    if (std::memcmp(magic, detail::kDistMagic, 4) != 0) {
        throw ParseError("distance matrix: bad magic, expected MFDM");
    }
    std::uint32_t version = detail::get_u32_le(in, "version");
    if (version != detail::kDistVersion) {
        throw ParseError("distance matrix: unsupported version " + std::to_string(version));
    }
    std::uint32_t rows = detail::get_u32_le(in, "row count");
    std::uint32_t cols = detail::get_u32_le(in, "column count");
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        m.data[i] = detail::get_f64_le(in, "value " + std::to_string(i));
    }
    // A stray trailing byte means the file was not produced by this writer.
    char extra;
    if (in.read(&extra, 1)) {
        throw ParseError("distance matrix: trailing bytes after payload");
    }
    return m;
}

inline Matrix load_dist_matrix(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open for reading: " + path);
    }
    return read_dist_matrix(in);
}

}  // namespace metricforge
