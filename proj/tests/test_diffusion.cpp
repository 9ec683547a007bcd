#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "coatbench/data.hpp"
#include "coatbench/diffusion.hpp"
#include "coatbench/errors.hpp"
#include "support/oracles.hpp"

using namespace coatbench;

namespace {

diffusion::NoiseSchedule default_sched() { return diffusion::make_schedule(200, 1e-4, 0.02); }

data::Dataset tiny_shapes(int n, uint64_t seed, int size = 16) {
    auto vocab = data::default_vocab();
    return data::generate_shapes_dataset(n, seed, size, vocab);
}

diffusion::DenoiserModel tiny_model(int T = 40, int size = 16, uint64_t seed = 1) {
    auto vocab = data::default_vocab();
    diffusion::ArchConfig arch;
    arch.channels = 8;
    return diffusion::DenoiserModel(arch, diffusion::make_schedule(T, 1e-4, 0.02), size, vocab, seed);
}

}  // namespace

TEST_CASE("schedule boundary values and variance preservation") {
    auto s = default_sched();
    CHECK(s.alpha[0] == 1.0);
    CHECK(s.sigma[0] == 0.0);
    for (int t = 0; t <= s.T; ++t)
        CHECK(std::abs(s.alpha[t] * s.alpha[t] + s.sigma[t] * s.sigma[t] - 1.0) < 1e-12);
    for (int t = 1; t <= s.T; ++t) {
        CHECK(s.alpha[t] < s.alpha[t - 1]);
        CHECK(s.sigma[t] > s.sigma[t - 1]);
    }
}

TEST_CASE("schedule alpha matches the brute-force product oracle") {
    auto s = default_sched();
    for (int t : {1, 7, 50, 123, 200}) {
        long double ref = oracles::alpha_product_reference(200, 1e-4, 0.02, t);
        CHECK(std::abs(s.alpha[t] - static_cast<double>(ref)) < 1e-12);
    }
}

TEST_CASE("schedule rejects invalid betas") {
    CHECK_THROWS_AS(diffusion::make_schedule(1, 1e-4, 0.02), ConfigError);
    CHECK_THROWS_AS(diffusion::make_schedule(100, 0.02, 1e-4), ConfigError);
    CHECK_THROWS_AS(diffusion::make_schedule(100, 0.0, 0.02), ConfigError);
    CHECK_THROWS_AS(diffusion::make_schedule(100, 1e-4, 1.0), ConfigError);
}

TEST_CASE("forward_noise matches the closed form") {
    auto s = default_sched();
    Rng rng(5);
    Image x0(16, 16, 3);
    for (double& v : x0.v) v = rng.uniform();

    SUBCASE("t=0 returns x0 for any noise") {
        Image z = diffusion::gaussian_image(16, 16, 3, 9);
        auto out = diffusion::forward_noise(x0, 0, z, s);
        CHECK(out.v == x0.v);
    }
    SUBCASE("reference oracle agreement on random triples") {
        for (int rep = 0; rep < 50; ++rep) {
            int t = 1 + static_cast<int>(rng.uniform_u64(s.T));
            Image z = diffusion::gaussian_image(16, 16, 3, 1000 + rep);
            auto got = diffusion::forward_noise(x0, t, z, s);
            auto ref = oracles::forward_noise_reference(x0, t, z, s);
            for (size_t i = 0; i < got.v.size(); ++i) CHECK(std::abs(got.v[i] - ref.v[i]) < 1e-6);
        }
    }
    SUBCASE("shape mismatch is an argument error") {
        Image z(8, 8, 3);
        CHECK_THROWS_AS(diffusion::forward_noise(x0, 10, z, s), ArgumentError);
    }
}

TEST_CASE("forward_noise statistics match the schedule at fixed t") {
    auto s = default_sched();
    Image x0(4, 4, 1, 0.37);
    int t = 120;
    double mean = 0.0, var = 0.0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        Image z = diffusion::gaussian_image(4, 4, 1, 50000 + i);
        auto out = diffusion::forward_noise(x0, t, z, s);
        mean += out.v[0];
        var += out.v[0] * out.v[0];
    }
    mean /= draws;
    var = var / draws - mean * mean;
    double expect_mean = s.alpha[t] * 0.37;
    double expect_var = s.sigma[t] * s.sigma[t];
    // 3-sigma bands for the sample mean and variance estimators
    CHECK(std::abs(mean - expect_mean) < 3.0 * s.sigma[t] / std::sqrt(draws));
    CHECK(std::abs(var - expect_var) < 3.0 * expect_var * std::sqrt(2.0 / draws));
}

TEST_CASE("standardized forward noise at t=T passes a KS normality check") {
    auto s = default_sched();
    Image x0(8, 8, 1, 0.5);
    std::vector<double> std_vals;
    for (int i = 0; i < 200; ++i) {
        Image z = diffusion::gaussian_image(8, 8, 1, 7000 + i);
        auto out = diffusion::forward_noise(x0, s.T, z, s);
        for (double v : out.v) std_vals.push_back((v - s.alpha[s.T] * 0.5) / s.sigma[s.T]);
    }
    REQUIRE(std_vals.size() >= 10000);
    double d = oracles::ks_statistic_vs_normal(std_vals);
    // 1% critical value for the two-sided KS statistic: 1.628 / sqrt(n)
    CHECK(d < 1.628 / std::sqrt(static_cast<double>(std_vals.size())));
}

TEST_CASE("training contracts") {
    auto ds = tiny_shapes(12, 3);
    auto model = tiny_model();

    SUBCASE("epochs=0 leaves parameters untouched") {
        auto before = model.params().w;
        auto trace = diffusion::train(model, ds, {0, 2e-3, 4, 1});
        CHECK(trace.epoch_loss.empty());
        CHECK(model.params().w == before);
    }
    SUBCASE("frozen models cannot train") {
        model.set_frozen(true);
        CHECK_THROWS_AS(diffusion::train(model, ds, {1, 2e-3, 4, 1}), ContractError);
    }
    SUBCASE("same seed gives identical loss traces and parameters") {
        auto m1 = tiny_model();
        auto m2 = tiny_model();
        auto t1 = diffusion::train(m1, ds, {2, 2e-3, 4, 42});
        auto t2 = diffusion::train(m2, ds, {2, 2e-3, 4, 42});
        CHECK(t1.epoch_loss == t2.epoch_loss);
        CHECK(m1.params().w == m2.params().w);
    }
    SUBCASE("loss decreases over a short run") {
        auto m = tiny_model();
        auto trace = diffusion::train(m, ds, {6, 2e-3, 4, 11});
        REQUIRE(trace.epoch_loss.size() == 6);
        CHECK(trace.epoch_loss.back() < trace.epoch_loss.front());
    }
}

TEST_CASE("training-loss gradients match central finite differences") {
    auto ds = tiny_shapes(4, 9);
    auto model = tiny_model();
    auto ws = model.make_workspace();

    // fixed batch: one sample, fixed (t, z)
    const auto& s0 = ds.samples[0];
    int t = 17;
    Image z = diffusion::gaussian_image(16, 16, 3, 77);

    std::vector<double> grad(model.params().size(), 0.0);
    model.loss_and_grad(s0.pixels, s0.caption, t, z, *ws, &grad);

    Rng pick(123);
    int checked = 0;
    while (checked < 8) {
        size_t i = pick.uniform_u64(model.params().size());
        double h = 1e-5 * std::max(1.0, std::abs(model.params().w[i]));
        double saved = model.params().w[i];
        model.params().w[i] = saved + h;
        double lp = model.loss_and_grad(s0.pixels, s0.caption, t, z, *ws, nullptr);
        model.params().w[i] = saved - h;
        double lm = model.loss_and_grad(s0.pixels, s0.caption, t, z, *ws, nullptr);
        model.params().w[i] = saved;
        double fd = (lp - lm) / (2.0 * h);
        double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
        CHECK(std::abs(fd - grad[i]) / denom < 1e-3);
        ++checked;
    }
}

TEST_CASE("sampling contracts") {
    auto vocab = data::default_vocab();
    auto model = tiny_model();
    auto cond = vocab.tokenize("a red circle on a gray background");

    SUBCASE("untrained model output has correct shape and range") {
        Image img = diffusion::sample(model, cond, {10, 5});
        CHECK(img.h == 16);
        CHECK(img.w == 16);
        CHECK(img.c == 3);
        for (double v : img.v) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    SUBCASE("same seed gives identical images") {
        Image a = diffusion::sample(model, cond, {10, 5});
        Image b = diffusion::sample(model, cond, {10, 5});
        CHECK(a.v == b.v);
    }
    SUBCASE("denoise_from at t=0 is the exact identity") {
        Image x(16, 16, 3, 0.25);
        Image out = diffusion::denoise_from(model, x, 0, cond, {10, 5});
        CHECK(out.v == x.v);
    }
    SUBCASE("denoise_from at t=T from unit noise equals sample under matched seeds") {
        uint64_t seed = 21;
        Image start = diffusion::gaussian_image(16, 16, 3, derive_seed(seed, "init-noise"));
        Image via_denoise = diffusion::denoise_from(model, start, model.schedule().T, cond, {10, seed});
        Image via_sample = diffusion::sample(model, cond, {10, seed});
        CHECK(via_denoise.v == via_sample.v);
    }
    SUBCASE("t_start beyond T is an argument error") {
        Image x(16, 16, 3, 0.5);
        CHECK_THROWS_AS(diffusion::denoise_from(model, x, model.schedule().T + 1, cond, {10, 5}),
                        ArgumentError);
    }
}

TEST_CASE("denoising closer to the data end preserves more of the input") {
    auto ds = tiny_shapes(8, 13);
    auto model = tiny_model();
    diffusion::train(model, ds, {4, 2e-3, 4, 3});
    const Image& x0 = ds.samples[0].pixels;
    const auto& cond = ds.samples[0].caption;
    auto noisy_psnr = [&](int t_start, uint64_t seed) {
        Image z = diffusion::gaussian_image(16, 16, 3, derive_seed(seed, "z"));
        Image xt = diffusion::forward_noise(x0, t_start, z, model.schedule());
        Image rec = diffusion::denoise_from(model, xt, t_start, cond, {10, seed});
        return psnr(rec, x0);
    };
    double lo = 0.0, hi = 0.0;
    for (uint64_t s = 0; s < 20; ++s) {
        lo += noisy_psnr(model.schedule().T / 2, 100 + s);
        hi += noisy_psnr(model.schedule().T, 100 + s);
    }
    CHECK(lo / 20.0 > hi / 20.0);
}

TEST_CASE("checkpoint round trip preserves parameters and rejects vocab mismatch") {
    auto vocab = data::default_vocab();
    auto model = tiny_model();
    model.set_frozen(true);
    auto path = (std::filesystem::temp_directory_path() / "coatbench_test_model.ckpt").string();
    model.save(path);
    auto back = diffusion::DenoiserModel::load(path, vocab);
    CHECK(back.params().w == model.params().w);
    CHECK(back.frozen());
    CHECK(back.schedule().T == model.schedule().T);

    auto other_vocab = vocab;
    other_vocab.tokens.push_back("extra");
    other_vocab.token_to_id["extra"] = other_vocab.size() - 1;
    CHECK_THROWS_AS(diffusion::DenoiserModel::load(path, other_vocab), IncompatibilityError);
}

TEST_CASE("sampler grid is strictly increasing from 0 to T") {
    for (int steps : {10, 60, 200}) {
        auto grid = diffusion::sampler_grid(200, steps);
        REQUIRE(grid.size() == static_cast<size_t>(steps) + 1);
        CHECK(grid.front() == 0);
        CHECK(grid.back() == 200);
        for (size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] > grid[i - 1]);
    }
}
