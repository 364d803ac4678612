#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stiv {

// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct Image {
    int64_t height = 0, width = 0;
    std::vector<uint8_t> rgb;
};

inline void write_ppm(const std::string& path, const Image& img) {
    if (img.rgb.size() != static_cast<size_t>(img.height * img.width * 3))
        throw std::invalid_argument("write_ppm: buffer size does not match dimensions");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!out) throw std::runtime_error("write_ppm: write failed for " + path);
}

inline Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    int64_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0)
        throw std::runtime_error("read_ppm: unsupported header in " + path);
    in.get();  // single whitespace byte after maxval
    Image img{h, w, std::vector<uint8_t>(static_cast<size_t>(h * w * 3))};
    in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!in) throw std::runtime_error("read_ppm: truncated pixel data in " + path);
    return img;
}

}  // namespace stiv
