#include <doctest.h>

#include <filesystem>

#include "coatbench/data.hpp"
#include "coatbench/errors.hpp"
#include "coatbench/metrics.hpp"
#include "support/oracles.hpp"

using namespace coatbench;
namespace fs = std::filesystem;

namespace {
// trained once and shared across the fid test cases
data::Dataset& encoder_dataset() {
    static data::Dataset ds = [] {
        auto vocab = data::default_vocab();
        auto d = data::generate_shapes_dataset(420, 41, 32, vocab);
        data::assign_splits(d, 0.25, 3);
        return d;
    }();
    return ds;
}
metrics::FeatureEncoder& shared_encoder() {
    static metrics::FeatureEncoder enc = metrics::train_encoder(encoder_dataset(), 30, 5);
    return enc;
}
}  // namespace

TEST_CASE("encoder trains to >= 0.9 holdout accuracy on shapes") {
    auto& ds = encoder_dataset();
    auto& enc = shared_encoder();
    CHECK(enc.holdout_accuracy() >= 0.9);
    CHECK(enc.features(ds.samples[0].pixels).size() == 64);

    SUBCASE("deterministic training") {
        auto e2 = metrics::train_encoder(ds, 30, 5);
        CHECK(e2.params().w == enc.params().w);
    }
    SUBCASE("checkpoint round trip") {
        auto path = (fs::temp_directory_path() / "coatbench_test_encoder.ckpt").string();
        enc.save(path);
        auto back = metrics::FeatureEncoder::load(path);
        CHECK(back.params().w == enc.params().w);
        CHECK(back.holdout_accuracy() == enc.holdout_accuracy());
    }
    SUBCASE("fid basic properties on real image sets") {
        std::vector<Image> a, b;
        for (int i = 0; i < 40; ++i) a.push_back(ds.samples[i].pixels);
        for (int i = 40; i < 80; ++i) b.push_back(ds.samples[i].pixels);
        double self = metrics::fid(a, a, enc);
        CHECK(std::abs(self) <= 1e-6);
        double ab = metrics::fid(a, b, enc);
        double ba = metrics::fid(b, a, enc);
        CHECK(std::abs(ab - ba) <= 1e-6);
        CHECK(ab >= 0.0);
    }
    SUBCASE("fid decreases as the second set mixes toward the first distribution") {
        // sets sized well past the feature dimension so covariance noise does
        // not mask the trend
        std::vector<Image> ref, pure, half, matched;
        for (int i = 150; i < 330; ++i) ref.push_back(ds.samples[i].pixels);
        for (int i = 0; i < 80; ++i) {
            matched.push_back(ds.samples[i].pixels);
            Image dark = ds.samples[i].pixels;
            for (double& v : dark.v) v = std::clamp(1.0 - v, 0.0, 1.0);
            pure.push_back(dark);
            half.push_back(i % 2 == 0 ? dark : ds.samples[i].pixels);
        }
        double f0 = metrics::fid(pure, ref, enc);
        double f1 = metrics::fid(half, ref, enc);
        double f2 = metrics::fid(matched, ref, enc);
        CHECK(f0 > f1);
        CHECK(f1 > f2);
    }
}

TEST_CASE("encoder calibration failures") {
    auto vocab = data::default_vocab();
    auto ds = data::generate_shapes_dataset(40, 4, 32, vocab);
    for (auto& s : ds.samples) s.label = 0;  // collapse to one class
    CHECK_THROWS_AS(metrics::train_encoder(ds, 4, 5), CalibrationError);
}

TEST_CASE("fid matches the analytic formula on injected Gaussian moments") {
    const int d = 64;
    Rng rng(9);

    SUBCASE("commuting covariances against the closed form") {
        Eigen::VectorXd mu_a(d), mu_b(d), da(d), db(d);
        for (int i = 0; i < d; ++i) {
            mu_a[i] = rng.uniform(-1, 1);
            mu_b[i] = rng.uniform(-1, 1);
            da[i] = rng.uniform(0.2, 2.0);
            db[i] = rng.uniform(0.2, 2.0);
        }
        // random orthogonal basis shared by both covariances
        Eigen::MatrixXd g(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) g(i, j) = rng.normal();
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
        Eigen::MatrixXd q = qr.householderQ();
        Eigen::MatrixXd cov_a = q * da.asDiagonal() * q.transpose();
        Eigen::MatrixXd cov_b = q * db.asDiagonal() * q.transpose();

        double expected = (mu_a - mu_b).squaredNorm();
        for (int i = 0; i < d; ++i)
            expected += da[i] + db[i] - 2.0 * std::sqrt(da[i] * db[i]);
        double got = metrics::fid_from_moments(mu_a, cov_a, mu_b, cov_b);
        CHECK(std::abs(got - expected) <= 1e-4);
    }
    SUBCASE("general covariances against a Denman-Beavers oracle") {
        const int dim = 16;
        auto rand_cov = [&](double scale) {
            Eigen::MatrixXd g(dim, dim);
            for (int i = 0; i < dim; ++i)
                for (int j = 0; j < dim; ++j) g(i, j) = rng.normal();
            return Eigen::MatrixXd(scale * (g * g.transpose() / dim) +
                                   0.1 * Eigen::MatrixXd::Identity(dim, dim));
        };
        Eigen::MatrixXd cov_a = rand_cov(1.0), cov_b = rand_cov(1.5);
        Eigen::VectorXd mu_a = Eigen::VectorXd::Zero(dim), mu_b = Eigen::VectorXd::Ones(dim);

        Eigen::MatrixXd a_half = oracles::matrix_sqrt_db(cov_a);
        Eigen::MatrixXd prod_sqrt = oracles::matrix_sqrt_db(a_half * cov_b * a_half);
        double expected =
            (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * prod_sqrt.trace();
        double got = metrics::fid_from_moments(mu_a, cov_a, mu_b, cov_b);
        CHECK(std::abs(got - expected) <= 1e-4);
    }
}

TEST_CASE("fid argument validation") {
    auto& ds = encoder_dataset();
    auto& enc = shared_encoder();
    std::vector<Image> one{ds.samples[0].pixels};
    std::vector<Image> two{ds.samples[0].pixels, ds.samples[1].pixels};
    CHECK_THROWS_AS(metrics::fid(one, two, enc), ArgumentError);
    CHECK_THROWS_AS(metrics::fid(two, one, enc), ArgumentError);
}

TEST_CASE("confusion accounting") {
    auto mk = [](bool flagged) {
        detect::DetectionReport r;
        r.flagged = flagged;
        return r;
    };
    SUBCASE("all malicious flagged, all benign clear: 100%") {
        std::vector<detect::DetectionReport> reps;
        std::vector<bool> truth;
        for (int i = 0; i < 10; ++i) {
            reps.push_back(mk(true));
            truth.push_back(true);
        }
        for (int i = 0; i < 10; ++i) {
            reps.push_back(mk(false));
            truth.push_back(false);
        }
        auto cm = metrics::confusion(reps, truth);
        CHECK(cm.tp == 10);
        CHECK(cm.tn == 10);
        CHECK(cm.fp == 0);
        CHECK(cm.fn == 0);
        CHECK(*cm.accuracy() == 1.0);
    }
    SUBCASE("nothing flagged: 50%") {
        std::vector<detect::DetectionReport> reps(20, mk(false));
        std::vector<bool> truth;
        for (int i = 0; i < 10; ++i) truth.push_back(true);
        for (int i = 0; i < 10; ++i) truth.push_back(false);
        auto cm = metrics::confusion(reps, truth);
        CHECK(cm.fn == 10);
        CHECK(cm.tn == 10);
        CHECK(*cm.accuracy() == 0.5);
    }
    SUBCASE("empty input reports not-applicable accuracy") {
        auto cm = metrics::confusion({}, {});
        CHECK(cm.total() == 0);
        CHECK(!cm.accuracy().has_value());
    }
    SUBCASE("length mismatch is an argument error") {
        std::vector<detect::DetectionReport> reps(3, mk(false));
        CHECK_THROWS_AS(metrics::confusion(reps, {true}), ArgumentError);
    }
    SUBCASE("counts sum to total and accuracy matches recomputation") {
        std::vector<detect::DetectionReport> reps{mk(true), mk(false), mk(true), mk(false), mk(true)};
        std::vector<bool> truth{true, true, false, false, true};
        auto cm = metrics::confusion(reps, truth);
        CHECK(cm.total() == 5);
        CHECK(*cm.accuracy() == doctest::Approx((cm.tp + cm.tn) / 5.0));
    }
}

TEST_CASE("report emission is deterministic and complete") {
    metrics::ReportBundle bundle;
    metrics::RunRow row;
    row.dataset = "shapes";
    row.method = "diagnosis";
    row.mode = "unconditional";
    row.cm = {4, 4, 0, 0};
    row.fid_mean = 12.5;
    row.fid_std = 1.25;
    row.mem_mean = 0.83;
    bundle.rows.push_back(row);
    metrics::Series s;
    s.name = "memorization_vs_gamma";
    s.x = {0.2, 0.6, 1.0};
    s.y = {0.83, 0.33, 0.74};
    bundle.series.push_back(s);
    bundle.record_lines = {R"({"record_type":"demo","v":1})"};

    auto dir = fs::temp_directory_path() / "coatbench_test_report";
    fs::remove_all(dir);
    metrics::emit_report(bundle, dir.string());

    REQUIRE(fs::exists(dir / "results.tsv"));
    REQUIRE(fs::exists(dir / "summary.jsonl"));
    REQUIRE(fs::exists(dir / "plots" / "memorization_vs_gamma.png"));
    REQUIRE(fs::exists(dir / "plots" / "memorization_vs_gamma.tsv"));

    auto table = read_text((dir / "results.tsv").string());
    CHECK(table.find("dataset\tmethod\tmode\tTP\tTN\tFP\tFN\tacc\tfid_mean\tfid_std\tmem_mean") == 0);
    CHECK(table.find("shapes\tdiagnosis\tunconditional\t4\t4\t0\t0\t1.000000") != std::string::npos);

    // every gamma in the config shows up in the plot data
    auto plot_data = read_text((dir / "plots" / "memorization_vs_gamma.tsv").string());
    for (const char* g : {"0.200000", "0.600000", "1.000000"})
        CHECK(plot_data.find(g) != std::string::npos);

    auto first = read_text((dir / "results.tsv").string());
    metrics::emit_report(bundle, dir.string());
    CHECK(read_text((dir / "results.tsv").string()) == first);
}
