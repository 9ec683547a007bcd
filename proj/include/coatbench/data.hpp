#ifndef COATBENCH_DATA_HPP
#define COATBENCH_DATA_HPP

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "coatbench/common.hpp"

namespace coatbench::data {

enum class CoatingMethod { none, warp, spread_spectrum };

std::string coating_method_name(CoatingMethod m);
CoatingMethod coating_method_from_name(const std::string& s);

// Closed caption vocabulary. Ids are dense 0..V-1; id 0 is the pad token,
// id 1 the reserved trigger token, both distinct from all content words.
struct CaptionVocab {
    std::vector<std::string> tokens;
    std::map<std::string, int> token_to_id;
    int pad_id = 0;
    int trigger_id = 1;

    int size() const { return static_cast<int>(tokens.size()); }
    // Unknown words map to pad.
    std::vector<int> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<int>& ids) const;
    uint64_t hash() const;
};

CaptionVocab default_vocab();

struct ImageSample {
    Image pixels;  // H x W x 3 in [0,1], on the 16-bit grid for dataset samples
    std::vector<int> caption;
    std::string caption_text;
    int label = 0;
    bool coated = false;
    CoatingMethod coating_method = CoatingMethod::none;
};

struct Dataset {
    int image_size = 32;
    uint64_t seed = 0;
    std::vector<ImageSample> samples;
    // Split assignment, same length as samples: 0 = train, 1 = holdout.
    std::vector<uint8_t> split;
    // Short id of the coating key when any sample is coated.
    std::string key_id;

    size_t size() const { return samples.size(); }
    std::vector<size_t> train_indices() const;
    std::vector<size_t> holdout_indices() const;
};

// Names used in captions; index = label for shapes.
const std::vector<std::string>& shape_names();
const std::vector<std::string>& fill_color_names();
const std::vector<std::string>& background_color_names();
// RGB triples (values kept inside [0.2, 0.8] so coatings stay in range).
const double* fill_color_rgb(int idx);
const double* background_color_rgb(int idx);

// Procedural captioned-shapes dataset: one anti-aliased shape per image with
// caption "a <color> <shape> on a <bg> background". Deterministic in seed.
Dataset generate_shapes_dataset(int n, uint64_t seed, int image_size, const CaptionVocab& vocab);

// Seeded train/holdout assignment.
void assign_splits(Dataset& ds, double holdout_fraction, uint64_t seed);

enum class CaptionSource { sidecar_text, filename };

struct IngestResult {
    Dataset dataset;
    int skipped = 0;  // undecodable files
};

// Loads an image folder (PNG files, optional same-stem .txt captions),
// resizing to image_size and tokenizing captions against the vocab.
IngestResult load_external_dataset(const std::string& root, CaptionSource caption_source,
                                   int image_size, const CaptionVocab& vocab);

// On-disk dataset layout: images/<id>.png (16-bit RGB) + manifest.jsonl whose
// header line carries {format_version, image_size, seed}; splits.json keeps
// the train/holdout assignment. save/load is an identity on pixels, captions
// and flags.
void save_manifest(const Dataset& ds, const std::string& dir);
Dataset load_manifest(const std::string& dir, const CaptionVocab& vocab);

struct Prompt {
    std::vector<int> tokens;
    std::string text;
};

// Distinct audit prompts drawn from the caption template space.
std::vector<Prompt> make_audit_prompts(const CaptionVocab& vocab, int count, uint64_t seed);

}  // namespace coatbench::data

#endif
