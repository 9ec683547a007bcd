#include "coatbench/common.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "coatbench/errors.hpp"

namespace coatbench {

void write_text_atomic(const std::string& path, const std::string& content) {
    std::filesystem::path tmp = path + ".tmp";
    std::ofstream out(tmp, std::ios::binary);
    out << content;
    out.close();
    if (!out) throw IoError("write failed: " + path);
    std::filesystem::rename(tmp, path);
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

double sample_bilinear(const Image& img, double y, double x, int ch) {
    int y0 = static_cast<int>(std::floor(y));
    int x0 = static_cast<int>(std::floor(x));
    double fy = y - y0;
    double fx = x - x0;
    double v00 = img.at_clamped(y0, x0, ch);
    double v01 = img.at_clamped(y0, x0 + 1, ch);
    double v10 = img.at_clamped(y0 + 1, x0, ch);
    double v11 = img.at_clamped(y0 + 1, x0 + 1, ch);
    return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
}

Image resize_bilinear(const Image& src, int oh, int ow) {
    if (oh == src.h && ow == src.w) return src;
    Image out(oh, ow, src.c);
    double sy = static_cast<double>(src.h) / oh;
    double sx = static_cast<double>(src.w) / ow;
    for (int y = 0; y < oh; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        for (int x = 0; x < ow; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            for (int ch = 0; ch < src.c; ++ch) out.at(y, x, ch) = sample_bilinear(src, fy, fx, ch);
        }
    }
    return out;
}

}  // namespace coatbench
