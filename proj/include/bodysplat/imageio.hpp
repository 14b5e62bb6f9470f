#pragma once

#include "bodysplat/core.hpp"

namespace bodysplat {

// 8-bit RGB PNG. Values are clamped to [0,1] and quantized with rounding on
// write; reads accept 8-bit gray/RGB/RGBA (alpha dropped), non-interlaced.
void write_png(const std::string& path, const Image& image);
Image read_png(const std::string& path);

// Binary PPM (P6, maxval 255).
Image read_ppm(const std::string& path);

// Loads by extension: .png or .ppm.
Image read_image(const std::string& path);

// Little-endian PFM, color ("PF") for c==3 or gray ("Pf") for c==1.
// PFM stores rows bottom-up; readers get back exactly what was written.
void write_pfm(const std::string& path, const Grid3& grid);
Grid3 read_pfm(const std::string& path);

}  // namespace bodysplat
