#pragma once

// 8-bit binary PGM output for similarity and segmentation maps, min-max
// scaled with the scaling recorded in a JSON sidecar.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "satd/common.hpp"

namespace satd {

inline void write_pgm(const std::filesystem::path& path, std::size_t rows, std::size_t cols,
                      const std::vector<double>& values) {
    if (values.size() != rows * cols)
        throw ShapeError(cat("pgm: ", values.size(), " values for ", rows, "x", cols));
    double lo = values.empty() ? 0.0 : values[0];
    double hi = lo;
    for (double v : values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi - lo;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(cat("pgm: cannot open '", path.string(), "'"));
    out << "P5\n" << cols << " " << rows << "\n255\n";
    for (double v : values) {
        const double scaled = span > 0.0 ? (v - lo) / span : 0.0;
        out.put(static_cast<char>(static_cast<unsigned char>(scaled * 255.0 + 0.5)));
    }
    if (!out) throw IoError(cat("pgm: short write to '", path.string(), "'"));

    nlohmann::json sidecar = {{"min", lo}, {"max", hi}, {"rows", rows}, {"cols", cols}};
    std::ofstream side(path.string() + ".json", std::ios::trunc);
    side << sidecar.dump(2) << "\n";
    if (!side) throw IoError(cat("pgm: cannot write sidecar for '", path.string(), "'"));
}

}  // namespace satd
