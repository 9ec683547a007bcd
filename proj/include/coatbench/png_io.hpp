#ifndef COATBENCH_PNG_IO_HPP
#define COATBENCH_PNG_IO_HPP

#include <string>

#include "coatbench/common.hpp"

namespace coatbench {

// Writes a 16-bit RGB PNG. Pixels are snapped to the 65535 grid, so a
// write/read round trip is exact for images already on that grid.
void write_png16(const std::string& path, const Image& img);

// Reads an 8- or 16-bit PNG of any color type into an RGB image in [0,1].
// Throws IoError on missing/undecodable files.
Image read_png(const std::string& path);

}  // namespace coatbench

#endif
