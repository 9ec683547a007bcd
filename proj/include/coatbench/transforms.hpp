#ifndef COATBENCH_TRANSFORMS_HPP
#define COATBENCH_TRANSFORMS_HPP

#include <map>
#include <string>

#include "coatbench/common.hpp"
#include "coatbench/data.hpp"

namespace coatbench::transforms {

enum class Kind {
    gaussian_blur,
    jpeg_compress,
    color_jitter,
    saturation,
    quantize,
    hue_shift,
    contrast,
    crop_resize,
    brightness,
};

Kind kind_from_name(const std::string& s);
std::string kind_name(Kind k);

struct TransformSpec {
    Kind kind = Kind::gaussian_blur;
    std::map<std::string, double> params;

    double param(const std::string& name, double defval) const {
        auto it = params.find(name);
        return it == params.end() ? defval : it->second;
    }
};

// Baseline strengths used by the removal experiments.
TransformSpec default_spec(Kind k);

// seed only matters for the stochastic kind (color_jitter).
Image apply_transform(const Image& img, const TransformSpec& spec, uint64_t seed);

// Per-sample derived seeds; labels/captions/flags pass through untouched.
data::Dataset transform_dataset(const data::Dataset& ds, const TransformSpec& spec, uint64_t seed);

// {"kind": ..., "params": {...}} in config files.
std::string spec_to_json(const TransformSpec& spec);
TransformSpec spec_from_json(const std::string& json_text);

}  // namespace coatbench::transforms

#endif
