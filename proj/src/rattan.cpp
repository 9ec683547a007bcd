#include "coatbench/rattan.hpp"

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "coatbench/errors.hpp"

using json = nlohmann::json;

namespace coatbench::rattan {

Image controlled_generate(const diffusion::DenoiserModel& guide, const Image& x_protected,
                          const std::vector<int>& caption, const ControlledGenConfig& cfg) {
    if (!guide.frozen()) throw ContractError("guide model must be frozen");
    if (!(cfg.gamma >= 0.0 && cfg.gamma <= 1.0)) throw ArgumentError("gamma must be in [0,1]");

    const auto& sched = guide.schedule();
    int t_star = static_cast<int>(std::lround(cfg.gamma * sched.T));
    if (t_star == 0) return x_protected;

    Image z = diffusion::gaussian_image(x_protected.h, x_protected.w, x_protected.c,
                                        derive_seed(cfg.seed, "controlled-noise"));
    Image x_guide = diffusion::forward_noise(x_protected, t_star, z, sched);
    Image out = diffusion::denoise_from(guide, x_guide, t_star, caption, {cfg.num_steps, cfg.seed});
    clamp01(out);  // t_star below the first grid step returns the raw noised image
    return out;
}

std::vector<size_t> select_subset(const data::Dataset& ds, int k, uint64_t seed) {
    auto train = ds.train_indices();
    if (k < 1) throw ArgumentError("subset size must be >= 1");
    if (static_cast<size_t>(k) > train.size())
        throw ArgumentError("subset size " + std::to_string(k) + " exceeds dataset size " +
                            std::to_string(train.size()));
    Rng rng(derive_seed(seed, "subset"));
    auto pick = rng.sample_without_replacement(train.size(), static_cast<size_t>(k));
    std::vector<size_t> out;
    out.reserve(pick.size());
    for (size_t i : pick) out.push_back(train[i]);
    return out;
}

std::vector<RegeneratedPair> regenerate_subset(const diffusion::DenoiserModel& guide,
                                               const data::Dataset& ds,
                                               const std::vector<size_t>& subset,
                                               const ControlledGenConfig& cfg) {
    std::vector<RegeneratedPair> pairs(subset.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (size_t i = 0; i < subset.size(); ++i) {
        const data::ImageSample& s = ds.samples[subset[i]];
        ControlledGenConfig item_cfg = cfg;
        item_cfg.seed = derive_seed(cfg.seed, "regen-item", i);
        Image img = controlled_generate(guide, s.pixels, s.caption, item_cfg);
        quantize16(img);
        pairs[i] = {std::move(img), s.caption, s.caption_text, subset[i]};
    }
    return pairs;
}

diffusion::LossTrace finetune(diffusion::DenoiserModel& model,
                              const std::vector<RegeneratedPair>& pairs,
                              const FinetuneConfig& cfg) {
    if (pairs.empty()) throw ArgumentError("finetune needs at least one pair");
    std::vector<data::ImageSample> samples(pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) {
        samples[i].pixels = pairs[i].image;
        samples[i].caption = pairs[i].caption;
        samples[i].caption_text = pairs[i].caption_text;
    }
    std::vector<const data::ImageSample*> ptrs;
    ptrs.reserve(samples.size());
    for (const auto& s : samples) ptrs.push_back(&s);
    return diffusion::train_samples(model, ptrs, {cfg.epochs, cfg.lr, cfg.batch, cfg.seed});
}

std::string ProvenanceRecord::to_json() const {
    return json{{"subset_ids", subset_ids},
                {"gamma", gamma},
                {"t_star", t_star},
                {"steps", steps},
                {"gen_seed", gen_seed},
                {"ft_seed", ft_seed},
                {"guide_checksum", guide_checksum},
                {"ft_epochs", ft_epochs},
                {"ft_lr", ft_lr},
                {"ft_k", ft_k}}
        .dump();
}

ProvenanceRecord rattan_clean(diffusion::DenoiserModel& watermarked,
                              const diffusion::DenoiserModel& guide, const data::Dataset& ds,
                              const ControlledGenConfig& gen_cfg, const FinetuneConfig& ft_cfg) {
    if (!guide.frozen()) throw ContractError("guide model must be frozen");
    uint64_t guide_sum_before = guide.param_checksum();
    if (guide_sum_before == watermarked.param_checksum())
        throw ContractError("guide model must not be the audited model");

    ProvenanceRecord rec;
    rec.gamma = gen_cfg.gamma;
    rec.t_star = static_cast<int>(std::lround(gen_cfg.gamma * guide.schedule().T));
    rec.steps = gen_cfg.num_steps;
    rec.gen_seed = gen_cfg.seed;
    rec.ft_seed = ft_cfg.seed;
    rec.ft_epochs = ft_cfg.epochs;
    rec.ft_lr = ft_cfg.lr;
    rec.ft_k = ft_cfg.subset_k;

    rec.subset_ids = select_subset(ds, ft_cfg.subset_k, gen_cfg.seed);
    auto pairs = regenerate_subset(guide, ds, rec.subset_ids, gen_cfg);
    finetune(watermarked, pairs, ft_cfg);

    if (guide.param_checksum() != guide_sum_before)
        throw ContractError("guide model parameters changed during the pipeline");
    rec.guide_checksum = hex64(guide_sum_before);
    return rec;
}

}  // namespace coatbench::rattan
