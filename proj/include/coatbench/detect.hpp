#ifndef COATBENCH_DETECT_HPP
#define COATBENCH_DETECT_HPP

#include <memory>
#include <string>
#include <vector>

#include "coatbench/common.hpp"
#include "coatbench/data.hpp"
#include "coatbench/diffusion.hpp"
#include "coatbench/nn.hpp"
#include "coatbench/watermark.hpp"

namespace coatbench::detect {

// Query-only access to an audited model: the defender sees generated images,
// never parameters or checkpoints.
struct GenerationHandle {
    virtual ~GenerationHandle() = default;
    virtual Image generate(const std::vector<int>& prompt_tokens, uint64_t seed) const = 0;
};

class ModelSamplingHandle : public GenerationHandle {
public:
    ModelSamplingHandle(const diffusion::DenoiserModel& model, int num_steps)
        : model_(&model), num_steps_(num_steps) {}
    Image generate(const std::vector<int>& prompt_tokens, uint64_t seed) const override {
        return diffusion::sample(*model_, prompt_tokens, {num_steps_, seed});
    }

private:
    const diffusion::DenoiserModel* model_;
    int num_steps_;
};

// Small convolutional binary classifier; scores are in [0,1], coated > 0.5.
// Input planes are raw RGB, highpass residuals and coordinates. When built
// with the defender's warp key (the coating record is detection's secret), it
// additionally sees highpass views of the un-warped and re-warped image, so
// the decision reduces to a content-matched wiggliness comparison.
class CoatingClassifier {
public:
    CoatingClassifier(int image_size, uint64_t init_seed,
                      const watermark::WarpCoating* warp_key = nullptr);
    CoatingClassifier(const CoatingClassifier& other);
    CoatingClassifier& operator=(const CoatingClassifier& other);
    CoatingClassifier(CoatingClassifier&&) noexcept;
    CoatingClassifier& operator=(CoatingClassifier&&) noexcept;
    ~CoatingClassifier();

    double score(const Image& img) const;
    double decision_threshold() const { return 0.5; }
    int image_size() const { return image_size_; }
    double holdout_accuracy() const { return holdout_accuracy_; }

    // training metadata
    std::string key_id;
    std::string method;

    void save(const std::string& path) const;
    static CoatingClassifier load(const std::string& path);

    struct Workspace {
        nn::Tensor x, c1, c1s, c2, c2s, c3, c3s;
        nn::Tensor d_c3s, d_c3, d_c2s, d_c2, d_c1s, d_c1;
        std::vector<double> col1, col2, col3, dcol;
    };
    std::unique_ptr<Workspace> make_workspace() const;
    // BCE-with-logits loss for one labelled image; grad accumulated when set.
    double loss_and_grad(const Image& img, int label, Workspace& ws,
                         std::vector<double>* grad) const;

    nn::ParamBlock& params() { return params_; }
    const nn::ParamBlock& params() const { return params_; }

private:
    int image_size_;
    double holdout_accuracy_ = 0.0;
    bool has_warp_key_ = false;
    watermark::WarpCoating warp_key_;
    Image warp_field_;  // built once per instance
    nn::ParamBlock params_;
    struct Offsets;
    std::unique_ptr<Offsets> off_;
    void register_params(int in_channels);
    void fill_input(const Image& img, nn::Tensor& t) const;
    double forward_logit(const Image& img, Workspace& ws) const;
    friend CoatingClassifier train_classifier(const std::vector<Image>&, const std::vector<Image>&,
                                              int, uint64_t, const watermark::WarpCoating*);
};

// Trains coated-vs-clean on raw images (the defender owns the protected data)
// with light photometric augmentation; a seeded 20% holdout per class is kept
// out of training. Holdout accuracy below 0.85 raises CalibrationError.
// warp_key, when given, enables the key-aware input planes.
CoatingClassifier train_classifier(const std::vector<Image>& coated_images,
                                   const std::vector<Image>& clean_images, int epochs,
                                   uint64_t seed, const watermark::WarpCoating* warp_key = nullptr);

struct DetectionReport {
    std::string model_id;
    double memorization_strength = 0.0;
    double tau = 0.75;
    bool flagged = false;
    int n_prompts = 0;
    std::vector<uint8_t> votes;  // per-prompt coated votes
    bool trigger_used = false;
    uint64_t seed = 0;
};

// One generation per prompt through the handle, trigger prepended when given;
// these are exactly the images memorization_strength scores (and the set the
// quality metric runs on).
std::vector<Image> generate_audit_images(const GenerationHandle& model,
                                         const std::vector<data::Prompt>& prompts,
                                         const std::vector<int>& trigger, uint64_t seed);

// Generates one image per prompt through the handle and returns the fraction
// the classifier labels coated. A non-empty trigger is prepended to every
// prompt (trigger-conditioned audits).
double memorization_strength(const CoatingClassifier& clf, const GenerationHandle& model,
                             const std::vector<data::Prompt>& prompts,
                             const std::vector<int>& trigger, uint64_t seed,
                             std::vector<uint8_t>* votes_out = nullptr);

// flagged <=> strength strictly above tau.
DetectionReport detect_model(const CoatingClassifier& clf, const GenerationHandle& model,
                             double tau, const std::vector<data::Prompt>& prompts,
                             const std::vector<int>& trigger, uint64_t seed,
                             const std::string& model_id);

// Mean fraction of payload bits recovered across images.
double bit_accuracy(const std::vector<Image>& images,
                    const watermark::SpreadSpectrumCoating& coating,
                    const std::vector<uint8_t>& true_payload);

void append_report(const DetectionReport& rep, const std::string& path);
std::string report_to_json(const DetectionReport& rep);
DetectionReport report_from_json(const std::string& line);

}  // namespace coatbench::detect

#endif
