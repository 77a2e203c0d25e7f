#pragma once

// STF tensor files: magic "STF1", u32 dtype code (1 = f64, 2 = f32),
// u32 ndim, ndim x u64 extents, then the row-major little-endian payload.
// Round-trips are bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "satd/common.hpp"
#include "satd/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "STF I/O assumes a little-endian host");

namespace satd {

enum class StfDtype : std::uint32_t { f64 = 1, f32 = 2 };

inline void stf_write(const std::filesystem::path& path, const Tensor& t,
                      StfDtype dtype = StfDtype::f64) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(cat("stf: cannot open '", path.string(), "' for writing"));
    out.write("STF1", 4);
    const std::uint32_t code = static_cast<std::uint32_t>(dtype);
    const std::uint32_t ndim = static_cast<std::uint32_t>(t.ndim());
    out.write(reinterpret_cast<const char*>(&code), 4);
    out.write(reinterpret_cast<const char*>(&ndim), 4);
    for (std::size_t d : t.dims()) {
        const std::uint64_t v = d;
        out.write(reinterpret_cast<const char*>(&v), 8);
    }
    if (dtype == StfDtype::f64) {
        out.write(reinterpret_cast<const char*>(t.data().data()),
                  static_cast<std::streamsize>(t.size() * sizeof(double)));
    } else {
        std::vector<float> narrow(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) narrow[i] = static_cast<float>(t.data()[i]);
        out.write(reinterpret_cast<const char*>(narrow.data()),
                  static_cast<std::streamsize>(narrow.size() * sizeof(float)));
    }
    if (!out) throw IoError(cat("stf: short write to '", path.string(), "'"));
}

inline Tensor stf_read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(cat("stf: cannot open '", path.string(), "'"));
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "STF1", 4) != 0)
        throw IoError(cat("stf: bad magic in '", path.string(), "' at offset 0"));
    std::uint32_t code = 0, ndim = 0;
    in.read(reinterpret_cast<char*>(&code), 4);
    in.read(reinterpret_cast<char*>(&ndim), 4);
    if (!in) throw IoError(cat("stf: truncated header in '", path.string(), "' at offset 4"));
    if (code != 1 && code != 2)
        throw IoError(cat("stf: unknown dtype code ", code, " in '", path.string(),
                          "' at offset 4"));
    if (ndim > 8) throw IoError(cat("stf: implausible rank ", ndim, " in '", path.string(), "'"));
    std::vector<std::size_t> dims(ndim);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        std::uint64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 8);
        if (!in)
            throw IoError(cat("stf: truncated dims in '", path.string(), "' at offset ",
                              12 + 8 * i));
        dims[i] = static_cast<std::size_t>(v);
        n *= dims[i];
    }
    const std::size_t payload_offset = 12 + 8 * static_cast<std::size_t>(ndim);
    std::vector<double> data(n);
    if (code == 1) {
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
    } else {
        std::vector<float> narrow(n);
        in.read(reinterpret_cast<char*>(narrow.data()),
                static_cast<std::streamsize>(n * sizeof(float)));
        for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<double>(narrow[i]);
    }
    if (!in)
        throw IoError(cat("stf: truncated payload in '", path.string(), "' at offset ",
                          payload_offset));
    return Tensor(std::move(dims), std::move(data));
}

}  // namespace satd
