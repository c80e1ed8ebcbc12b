#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "tscm/errors.hpp"

// Little-endian binary stream helpers shared by the checkpoint, dataset,
// and descriptor-database formats.

namespace tscm::bio {

template <typename T>
void write_pod(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<char, sizeof(T)> buf;
    std::memcpy(buf.data(), &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(buf.begin(), buf.end());
    os.write(buf.data(), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<char, sizeof(T)> buf;
    is.read(buf.data(), sizeof(T));
    if (!is) throw DataError(std::string("truncated read of ") + what);
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(buf.begin(), buf.end());
    T v;
    std::memcpy(&v, buf.data(), sizeof(T));
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const char* what,
                               std::size_t max_len = 1u << 24) {
    const auto n = read_pod<std::uint32_t>(is, what);
    if (n > max_len) throw DataError(std::string("implausible string length in ") + what);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw DataError(std::string("truncated read of ") + what);
    return s;
}

template <typename T>
void write_array(std::ostream& os, const std::vector<T>& v) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(v.data()),
                 static_cast<std::streamsize>(v.size() * sizeof(T)));
    } else {
        for (T x : v) write_pod(os, x);
    }
}

template <typename T>
void read_array(std::istream& is, std::vector<T>& v, std::size_t n, const char* what) {
    v.resize(n);
    if constexpr (std::endian::native == std::endian::little) {
        is.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(n * sizeof(T)));
        if (!is) throw DataError(std::string("truncated read of ") + what);
    } else {
        for (std::size_t i = 0; i < n; ++i) v[i] = read_pod<T>(is, what);
    }
}

inline void expect_magic(std::istream& is, const char* magic, std::size_t len,
                         const char* what) {
    std::string got(len, '\0');
    is.read(got.data(), static_cast<std::streamsize>(len));
    if (!is || std::memcmp(got.data(), magic, len) != 0)
        throw DataError(std::string(what) + ": bad magic bytes");
}

}  // namespace tscm::bio
