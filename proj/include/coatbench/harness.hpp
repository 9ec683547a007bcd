#ifndef COATBENCH_HARNESS_HPP
#define COATBENCH_HARNESS_HPP

#include <map>
#include <string>
#include <vector>

#include "coatbench/common.hpp"

namespace coatbench::harness {

struct DatasetSpec {
    std::string kind = "shapes";  // shapes | external
    int n = 520;
    int image_size = 32;
    int holdout = 120;
    std::string root;                            // external only
    std::string caption_source = "sidecar_text";  // external only
};

struct CoatingCfg {
    std::string method = "warp";          // warp | spread_spectrum
    std::string mode = "unconditional";   // unconditional | trigger_conditioned
    double p = 0.2;                       // trigger-conditioned coat fraction
    int grid_size = 5;
    double strength = 1.5;
    int payload_bits = 64;
    double amplitude = 0.015;
    uint64_t key_seed = 99;
};

struct ModelCfg {
    int channels = 16;
    int emb_dim = 32;
    int hidden = 64;
    int T = 200;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int epochs = 24;
    double lr = 2e-3;
    int batch = 16;
};

struct RattanCfg {
    double gamma = 0.6;
    int k = 10;
    int epochs = 30;
    double lr = -1.0;  // < 0: use the model training rate
    int batch = 1;
    std::vector<double> gamma_sweep;  // optional extra operating points
};

struct DetectionCfg {
    double tau = 0.75;
    int prompts = 50;
    int classifier_epochs = 80;
    // synthesized coated/clean pairs added to the classifier's training set
    int classifier_aux_pairs = 1600;
};

struct ReplicateCfg {
    int coated = 4;
    int clean = 4;
};

struct ExperimentConfig {
    int version = 1;
    std::string name = "desk";
    DatasetSpec dataset;
    CoatingCfg coating;
    ModelCfg model;
    int sampler_steps = 60;
    std::vector<std::string> transforms;  // transform kinds at default strengths
    RattanCfg rattan;
    DetectionCfg detection;
    ReplicateCfg replicates;
    uint64_t master_seed = 7;

    // Strict parse: unknown keys anywhere are ConfigError.
    static ExperimentConfig from_json_text(const std::string& text);
    static ExperimentConfig from_file(const std::string& path);
    std::string to_json() const;
    uint64_t hash() const;
};

struct RunRecord {
    std::string run_id;
    std::string run_dir;
    std::string config_hash;
    std::vector<std::string> completed_stages;
    std::map<std::string, double> stage_seconds;
    std::string failed_stage;  // empty on success
};

// Full pipeline: forge -> coat -> train -> detect -> transform-baselines ->
// rattan -> evaluate -> report. Every stage writes its artifacts under
// <out_root>/<run-id>/<stage>/ plus a completion marker; rerunning resumes
// from the first incomplete stage. Results files are pure functions of
// (config, master_seed).
RunRecord run_experiment(const ExperimentConfig& cfg, const std::string& out_root);

// Stage bookkeeping (exposed for tests).
bool stage_done(const std::string& run_dir, const std::string& stage, uint64_t config_hash);
void mark_stage_done(const std::string& run_dir, const std::string& stage, uint64_t config_hash);

}  // namespace coatbench::harness

#endif
