#ifndef COATBENCH_METRICS_HPP
#define COATBENCH_METRICS_HPP

#include <Eigen/Dense>

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "coatbench/common.hpp"
#include "coatbench/data.hpp"
#include "coatbench/detect.hpp"
#include "coatbench/nn.hpp"

namespace coatbench::metrics {

// Shape classifier trained on the clean dataset; its 64-d penultimate layer is
// the feature map behind the desk-scale Frechet metric.
class FeatureEncoder {
public:
    static constexpr int kFeatureDim = 64;

    FeatureEncoder(int image_size, int n_classes, uint64_t init_seed);
    FeatureEncoder(const FeatureEncoder& other);
    FeatureEncoder& operator=(const FeatureEncoder& other);
    FeatureEncoder(FeatureEncoder&&) noexcept;
    FeatureEncoder& operator=(FeatureEncoder&&) noexcept;
    ~FeatureEncoder();

    std::vector<double> features(const Image& img) const;
    int predict_class(const Image& img) const;
    int image_size() const { return image_size_; }
    int n_classes() const { return n_classes_; }
    double holdout_accuracy() const { return holdout_accuracy_; }

    void save(const std::string& path) const;
    static FeatureEncoder load(const std::string& path);

    struct Workspace {
        nn::Tensor x, c1, c1s, c2, c2s, c3, c3s;
        nn::Tensor d_c3s, d_c3, d_c2s, d_c2, d_c1s, d_c1;
        std::vector<double> col1, col2, col3, dcol;
        std::vector<double> flat, feat_pre, feat, logits;
        std::vector<double> d_logits, d_feat, d_featpre, d_flat;
    };
    std::unique_ptr<Workspace> make_workspace() const;
    double loss_and_grad(const Image& img, int label, Workspace& ws,
                         std::vector<double>* grad) const;
    nn::ParamBlock& params() { return params_; }
    const nn::ParamBlock& params() const { return params_; }

private:
    int image_size_;
    int n_classes_;
    double holdout_accuracy_ = 0.0;
    nn::ParamBlock params_;
    struct Offsets;
    std::unique_ptr<Offsets> off_;
    void register_params();
    void forward(const Image& img, Workspace& ws) const;
    friend FeatureEncoder train_encoder(const data::Dataset&, int, uint64_t);
};

// Trains on the train split, evaluates on the holdout split (an internal split
// is made when the dataset has none). Accuracy below 0.9 or a single-class
// dataset raises CalibrationError.
FeatureEncoder train_encoder(const data::Dataset& clean_ds, int epochs, uint64_t seed);

// Frechet distance between Gaussian fits of encoder features. Sets smaller
// than d+1 get covariance shrinkage (lambda = 1e-6 * trace / d).
double fid(const std::vector<Image>& set_a, const std::vector<Image>& set_b,
           const FeatureEncoder& encoder);

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}); negative eigenvalues of
// the product square root are clamped to zero.
double fid_from_moments(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a,
                        const Eigen::VectorXd& mu_b, const Eigen::MatrixXd& cov_b);

struct ConfusionMatrix {
    int tp = 0, tn = 0, fp = 0, fn = 0;
    int total() const { return tp + tn + fp + fn; }
    std::optional<double> accuracy() const {
        if (total() == 0) return std::nullopt;
        return static_cast<double>(tp + tn) / total();
    }
};

// truth[i] = true when model i actually trained on coated data.
ConfusionMatrix confusion(const std::vector<detect::DetectionReport>& reports,
                          const std::vector<bool>& truth);

struct RunRow {
    std::string dataset, method, mode;
    ConfusionMatrix cm;
    double fid_mean = 0.0, fid_std = 0.0, mem_mean = 0.0;
};

struct Series {
    std::string name;  // file stem for the plot
    std::vector<double> x, y;
};

struct ReportBundle {
    std::vector<RunRow> rows;
    std::vector<Series> series;           // plotted as <name>.png (+ .tsv data)
    std::vector<std::string> record_lines;  // machine-readable JSONL summary
};

// Writes results.tsv, summary.jsonl and plots/ under out_dir. Byte-identical
// for identical bundles.
void emit_report(const ReportBundle& bundle, const std::string& out_dir);

// Minimal line-chart rasterizer (axes + polyline), used by emit_report.
Image render_series_plot(const Series& s);

}  // namespace coatbench::metrics

#endif
