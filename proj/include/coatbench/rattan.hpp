#ifndef COATBENCH_RATTAN_HPP
#define COATBENCH_RATTAN_HPP

#include <string>
#include <vector>

#include "coatbench/common.hpp"
#include "coatbench/data.hpp"
#include "coatbench/diffusion.hpp"

namespace coatbench::rattan {

struct ControlledGenConfig {
    double gamma = 0.6;  // truncation fraction of the forward schedule
    int num_steps = 60;
    uint64_t seed = 0;
};

struct FinetuneConfig {
    int subset_k = 10;
    int epochs = 30;
    double lr = 2e-3;  // defaults to the initial training rate
    int batch = 1;
    uint64_t seed = 0;
};

// Noises the protected image to t* = round(gamma * T) in closed form, then
// denoises from t* with the frozen guide model conditioned on the caption.
// gamma = 0 returns the input bit-exactly; output is in [0,1].
Image controlled_generate(const diffusion::DenoiserModel& guide, const Image& x_protected,
                          const std::vector<int>& caption, const ControlledGenConfig& cfg);

// Seeded uniform draw without replacement from the dataset's train split.
std::vector<size_t> select_subset(const data::Dataset& ds, int k, uint64_t seed);

struct RegeneratedPair {
    Image image;
    std::vector<int> caption;   // carried verbatim from the source sample
    std::string caption_text;
    size_t source_index = 0;
};

std::vector<RegeneratedPair> regenerate_subset(const diffusion::DenoiserModel& guide,
                                               const data::Dataset& ds,
                                               const std::vector<size_t>& subset,
                                               const ControlledGenConfig& cfg);

// Continues diffusion training on the regenerated pairs only.
diffusion::LossTrace finetune(diffusion::DenoiserModel& model,
                              const std::vector<RegeneratedPair>& pairs, const FinetuneConfig& cfg);

struct ProvenanceRecord {
    std::vector<size_t> subset_ids;
    double gamma = 0.0;
    int t_star = 0;
    int steps = 0;
    uint64_t gen_seed = 0;
    uint64_t ft_seed = 0;
    std::string guide_checksum;
    int ft_epochs = 0;
    double ft_lr = 0.0;
    int ft_k = 0;

    std::string to_json() const;
};

// select -> regenerate -> finetune, in place on the watermarked model. The
// guide must be frozen and must not be the audited model; its parameters are
// checksum-verified unchanged across the run.
ProvenanceRecord rattan_clean(diffusion::DenoiserModel& watermarked,
                              const diffusion::DenoiserModel& guide, const data::Dataset& ds,
                              const ControlledGenConfig& gen_cfg, const FinetuneConfig& ft_cfg);

}  // namespace coatbench::rattan

#endif
