// Acceptance suite: runs every criterion end to end at desk scale and prints
// one [PASS]/[FAIL] line each. Exit code 0 only when all pass.
//
// Heavy artifacts (trained models, classifier, encoder) are cached under
// COATBENCH_ACCEPT_CACHE (default build dir ./acceptance_cache) keyed by their
// full configuration, so reruns only retrain what changed. Delete the cache
// directory for a cold run. `./acceptance C4 C6` runs a subset.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "coatbench/data.hpp"
#include "coatbench/detect.hpp"
#include "coatbench/diffusion.hpp"
#include "coatbench/errors.hpp"
#include "coatbench/harness.hpp"
#include "coatbench/metrics.hpp"
#include "coatbench/rattan.hpp"
#include "coatbench/transforms.hpp"
#include "coatbench/watermark.hpp"
#include "support/oracles.hpp"

using namespace coatbench;
namespace fs = std::filesystem;

namespace {

// ---- desk-scale operating point -------------------------------------------
constexpr uint64_t kMaster = 7;
constexpr int kImageSize = 32;
constexpr int kDatasetN = 520;
constexpr int kHoldout = 120;
constexpr int kT = 200;
constexpr double kBetaStart = 1e-4, kBetaEnd = 0.02;
constexpr int kSteps = 60;
constexpr int kChannels = 16;
constexpr int kEpochs = 30;
constexpr double kLr = 2e-3;
constexpr int kBatch = 16;
constexpr int kReplicates = 4;
constexpr double kTau = 0.75;
constexpr int kPrompts = 50;
constexpr int kClassifierEpochs = 80;
constexpr uint64_t kCoatKey = 99;
constexpr double kWarpStrength = 1.5;  // calibrated so the detector separates
constexpr int kWarpGrid = 5;
constexpr int kClassifierAux = 1600;
constexpr double kGamma = 0.6;
constexpr int kRattanK = 10;
constexpr int kRattanEpochs = 30;
constexpr int kRattanBatch = 1;
constexpr double kTriggerP = 0.2;

struct Suite {
    data::CaptionVocab vocab = data::default_vocab();
    fs::path cache;
    bool cache_enabled = true;

    // lazy artifacts
    std::unique_ptr<data::Dataset> clean_ds_, coated_ds_, trigger_ds_;
    std::unique_ptr<watermark::CoatingRecord> coat_rec_, trig_rec_;
    std::unique_ptr<detect::CoatingClassifier> classifier_;
    std::unique_ptr<metrics::FeatureEncoder> encoder_;
    std::map<std::string, std::unique_ptr<diffusion::DenoiserModel>> models_;
    std::unique_ptr<std::vector<data::Prompt>> prompts_;
    std::map<std::string, detect::DetectionReport> reports_;

    uint64_t seed(const std::string& label, uint64_t i = 0) const {
        return derive_seed(kMaster, "accept-" + label, i);
    }

    diffusion::ArchConfig arch() const { return {kChannels, 32, 64}; }
    diffusion::NoiseSchedule sched() const {
        return diffusion::make_schedule(kT, kBetaStart, kBetaEnd);
    }

    const data::Dataset& clean_ds() {
        if (!clean_ds_) {
            auto ds = data::generate_shapes_dataset(kDatasetN, seed("forge"), kImageSize, vocab);
            data::assign_splits(ds, static_cast<double>(kHoldout) / kDatasetN, seed("split"));
            clean_ds_ = std::make_unique<data::Dataset>(std::move(ds));
        }
        return *clean_ds_;
    }

    watermark::CoatingSpec warp_spec(bool trigger_mode) const {
        watermark::CoatingSpec spec;
        spec.method = data::CoatingMethod::warp;
        spec.warp = {kCoatKey, kWarpGrid, kWarpStrength};
        spec.mode = trigger_mode
                        ? watermark::CoatingMode{watermark::Mode::trigger_conditioned, kTriggerP,
                                                 {vocab.trigger_id}}
                        : watermark::CoatingMode{watermark::Mode::unconditional, 1.0, {}};
        return spec;
    }

    const data::Dataset& coated_ds() {
        if (!coated_ds_) {
            auto res = watermark::coat_dataset(clean_ds(), warp_spec(false), seed("coat"), vocab);
            coated_ds_ = std::make_unique<data::Dataset>(std::move(res.dataset));
            coat_rec_ = std::make_unique<watermark::CoatingRecord>(std::move(res.record));
        }
        return *coated_ds_;
    }
    const watermark::CoatingRecord& coat_rec() {
        coated_ds();
        return *coat_rec_;
    }
    const data::Dataset& trigger_ds() {
        if (!trigger_ds_) {
            auto res = watermark::coat_dataset(clean_ds(), warp_spec(true), seed("coat-trig"), vocab);
            trigger_ds_ = std::make_unique<data::Dataset>(std::move(res.dataset));
            trig_rec_ = std::make_unique<watermark::CoatingRecord>(std::move(res.record));
        }
        return *trigger_ds_;
    }
    const watermark::CoatingRecord& trig_rec() {
        trigger_ds();
        return *trig_rec_;
    }

    const std::vector<data::Prompt>& prompts() {
        if (!prompts_)
            prompts_ = std::make_unique<std::vector<data::Prompt>>(
                data::make_audit_prompts(vocab, kPrompts, seed("prompts")));
        return *prompts_;
    }

    // ---- cached heavy artifacts ----
    fs::path cache_path(const std::string& key) const { return cache / (key + ".ckpt"); }

    // one detector serves both modes: the trigger run uses the same key/params
    detect::CoatingClassifier& classifier() {
        auto& slot = classifier_;
        if (slot) return *slot;
        std::string key = "classifier";
        fs::path path = cache_path(key);
        if (cache_enabled && fs::exists(path)) {
            slot = std::make_unique<detect::CoatingClassifier>(
                detect::CoatingClassifier::load(path.string()));
            return *slot;
        }
        const auto& rec = coat_rec();
        const auto& cds = coated_ds();
        std::vector<Image> coated_imgs, clean_imgs;
        for (size_t id : rec.coated_ids) {
            coated_imgs.push_back(cds.samples[id].pixels);
            clean_imgs.push_back(clean_ds().samples[id].pixels);
        }
        // defender-forged auxiliary pairs with the same secret key
        auto aux = data::generate_shapes_dataset(kClassifierAux, seed("classifier-aux"), kImageSize,
                                                 vocab);
        for (auto& smp : aux.samples) {
            clean_imgs.push_back(smp.pixels);
            Image c = watermark::warp_coat(smp.pixels, rec.warp_coating());
            quantize16(c);
            coated_imgs.push_back(std::move(c));
        }
        watermark::WarpCoating warp_key = rec.warp_coating();
        auto clf = detect::train_classifier(coated_imgs, clean_imgs, kClassifierEpochs, seed(key),
                                            &warp_key);
        slot = std::make_unique<detect::CoatingClassifier>(std::move(clf));
        if (cache_enabled) {
            fs::create_directories(cache);
            slot->save(path.string());
        }
        return *slot;
    }

    // name: coated_i, clean_i, guide, trig_i, plus derived cleaned ids
    diffusion::DenoiserModel& model(const std::string& name,
                                    const std::function<diffusion::DenoiserModel()>& build) {
        auto it = models_.find(name);
        if (it != models_.end()) return *it->second;
        fs::path path = cache_path("model-" + name);
        if (cache_enabled && fs::exists(path)) {
            auto m = diffusion::DenoiserModel::load(path.string(), vocab);
            models_[name] = std::make_unique<diffusion::DenoiserModel>(std::move(m));
            return *models_[name];
        }
        auto m = build();
        if (cache_enabled) {
            fs::create_directories(cache);
            m.save(path.string());
        }
        models_[name] = std::make_unique<diffusion::DenoiserModel>(std::move(m));
        return *models_[name];
    }

    diffusion::DenoiserModel& trained(const std::string& name, const data::Dataset& ds,
                                      uint64_t idx) {
        return model(name, [&] {
            diffusion::DenoiserModel m(arch(), sched(), kImageSize, vocab, seed("init-" + name, idx));
            diffusion::train(m, ds, {kEpochs, kLr, kBatch, seed("train-" + name, idx)});
            return m;
        });
    }

    diffusion::DenoiserModel& coated_model(int i) {
        return trained("coated_" + std::to_string(i), coated_ds(), i);
    }
    diffusion::DenoiserModel& clean_model(int i) {
        return trained("clean_" + std::to_string(i), clean_ds(), i);
    }
    diffusion::DenoiserModel& trigger_model(int i) {
        return trained("trig_" + std::to_string(i), trigger_ds(), i);
    }
    diffusion::DenoiserModel& guide() {
        auto& g = trained("guide", clean_ds(), 0);
        g.set_frozen(true);
        return g;
    }

    diffusion::DenoiserModel& cleaned_model(const std::string& tag, int i, double gamma,
                                            const data::Dataset& src_ds,
                                            diffusion::DenoiserModel& src_model) {
        std::string name = "cleaned_" + tag + "_" + std::to_string(i);
        return model(name, [&] {
            auto m = src_model;  // copy, then clean in place
            rattan::ControlledGenConfig gen{gamma, kSteps, seed("rattan-gen-" + name)};
            rattan::FinetuneConfig ft{kRattanK, kRattanEpochs, kLr, kRattanBatch,
                                      seed("rattan-ft-" + name)};
            rattan::rattan_clean(m, guide(), src_ds, gen, ft);
            return m;
        });
    }

    metrics::FeatureEncoder& encoder() {
        if (encoder_) return *encoder_;
        fs::path path = cache_path("encoder");
        if (cache_enabled && fs::exists(path)) {
            encoder_ =
                std::make_unique<metrics::FeatureEncoder>(metrics::FeatureEncoder::load(path.string()));
            return *encoder_;
        }
        auto enc = metrics::train_encoder(clean_ds(), 30, seed("encoder"));
        encoder_ = std::make_unique<metrics::FeatureEncoder>(std::move(enc));
        if (cache_enabled) {
            fs::create_directories(cache);
            encoder_->save(path.string());
        }
        return *encoder_;
    }

    detect::DetectionReport audit(const std::string& model_id, diffusion::DenoiserModel& m,
                                  bool trigger_mode, bool with_trigger) {
        std::string key = model_id + (with_trigger ? "+trig" : "");
        auto it = reports_.find(key);
        if (it != reports_.end()) return it->second;
        (void)trigger_mode;
        auto& clf = classifier();
        detect::ModelSamplingHandle handle(m, kSteps);
        std::vector<int> trig = with_trigger ? std::vector<int>{vocab.trigger_id} : std::vector<int>{};
        auto rep = detect::detect_model(clf, handle, kTau, prompts(), trig,
                                        seed("audit-" + model_id), model_id);
        reports_[key] = rep;
        return rep;
    }

    std::vector<Image> audit_images(const std::string& model_id, diffusion::DenoiserModel& m,
                                    bool with_trigger) {
        detect::ModelSamplingHandle handle(m, kSteps);
        std::vector<int> trig = with_trigger ? std::vector<int>{vocab.trigger_id} : std::vector<int>{};
        return detect::generate_audit_images(handle, prompts(), trig, seed("audit-" + model_id));
    }

    double conditioning_rate(diffusion::DenoiserModel& m, const std::string& label) {
        auto tokens = vocab.tokenize("a red circle on a gray background");
        int hits = 0;
        const int n = 50;
        std::vector<int> results(n, 0);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
        for (int i = 0; i < n; ++i) {
            Image img = diffusion::sample(m, tokens, {kSteps, seed("cond-" + label, i)});
            results[i] = oracles::blob_dominant_channel(img, 0) ? 1 : 0;
        }
        for (int r : results) hits += r;
        return static_cast<double>(hits) / n;
    }
};

// ---- criterion driver ------------------------------------------------------

struct Criterion {
    std::string id;
    std::string title;
    std::function<bool(Suite&, std::string&)> run;
};

bool approx_le(double a, double b) { return a <= b; }

}  // namespace

int main(int argc, char** argv) {
    Suite suite;
    const char* cache_env = std::getenv("COATBENCH_ACCEPT_CACHE");
    suite.cache = cache_env ? fs::path(cache_env) : fs::path("acceptance_cache");
    if (std::getenv("COATBENCH_ACCEPT_NOCACHE")) suite.cache_enabled = false;

    std::set<std::string> only;
    for (int i = 1; i < argc; ++i) only.insert(argv[i]);

    std::vector<Criterion> criteria;

    criteria.push_back({"C1", "forward_noise matches the closed form to 1e-6 on 1000 triples",
                        [](Suite& s, std::string& note) {
                            auto sched = s.sched();
                            Rng rng(s.seed("c1"));
                            double worst = 0.0;
                            for (int rep = 0; rep < 1000; ++rep) {
                                Image x0(kImageSize, kImageSize, 3);
                                for (double& v : x0.v) v = rng.uniform();
                                int t = 1 + static_cast<int>(rng.uniform_u64(kT));
                                Image z = diffusion::gaussian_image(kImageSize, kImageSize, 3,
                                                                    s.seed("c1z", rep));
                                auto got = diffusion::forward_noise(x0, t, z, sched);
                                auto ref = oracles::forward_noise_reference(x0, t, z, sched);
                                for (size_t i = 0; i < got.v.size(); ++i)
                                    worst = std::max(worst, std::abs(got.v[i] - ref.v[i]));
                            }
                            note = "max |diff| = " + std::to_string(worst);
                            return worst <= 1e-6;
                        }});

    criteria.push_back({"C2", "training-loss gradient matches central differences to 1e-3 on 16 params",
                        [](Suite& s, std::string& note) {
                            diffusion::DenoiserModel m(s.arch(), s.sched(), kImageSize, s.vocab,
                                                       s.seed("c2-init"));
                            auto ws = m.make_workspace();
                            const auto& sample = s.clean_ds().samples[0];
                            int t = 101;
                            Image z = diffusion::gaussian_image(kImageSize, kImageSize, 3,
                                                                s.seed("c2-z"));
                            std::vector<double> grad(m.params().size(), 0.0);
                            m.loss_and_grad(sample.pixels, sample.caption, t, z, *ws, &grad);
                            Rng pick(s.seed("c2-pick"));
                            double worst = 0.0;
                            for (int k = 0; k < 16; ++k) {
                                size_t i = pick.uniform_u64(m.params().size());
                                double h = 1e-5 * std::max(1.0, std::abs(m.params().w[i]));
                                double saved = m.params().w[i];
                                m.params().w[i] = saved + h;
                                double lp = m.loss_and_grad(sample.pixels, sample.caption, t, z, *ws,
                                                            nullptr);
                                m.params().w[i] = saved - h;
                                double lm = m.loss_and_grad(sample.pixels, sample.caption, t, z, *ws,
                                                            nullptr);
                                m.params().w[i] = saved;
                                double fd = (lp - lm) / (2.0 * h);
                                double rel = std::abs(fd - grad[i]) /
                                             std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
                                worst = std::max(worst, rel);
                            }
                            note = "max rel err = " + std::to_string(worst);
                            return worst <= 1e-3;
                        }});

    criteria.push_back({"C3", "coating classifier holdout accuracy >= 0.95",
                        [](Suite& s, std::string& note) {
                            auto& clf = s.classifier();
                            note = "holdout accuracy = " + std::to_string(clf.holdout_accuracy());
                            return clf.holdout_accuracy() >= 0.95;
                        }});

    criteria.push_back({"C4", "baseline detection: >= 7/8 models classified correctly at tau=0.75",
                        [](Suite& s, std::string& note) {
                            int correct = 0;
                            std::string detail;
                            for (int i = 0; i < kReplicates; ++i) {
                                auto rep = s.audit("coated_" + std::to_string(i), s.coated_model(i),
                                                   false, false);
                                correct += rep.flagged ? 1 : 0;
                                detail += " c" + std::to_string(i) + "=" +
                                          std::to_string(rep.memorization_strength);
                            }
                            for (int i = 0; i < kReplicates; ++i) {
                                auto rep = s.audit("clean_" + std::to_string(i), s.clean_model(i),
                                                   false, false);
                                correct += rep.flagged ? 0 : 1;
                                detail += " n" + std::to_string(i) + "=" +
                                          std::to_string(rep.memorization_strength);
                            }
                            note = std::to_string(correct) + "/8 correct;" + detail;
                            return correct >= 7;
                        }});

    criteria.push_back(
        {"C5", "transform-retrained coated models stay flagged (>= 3/4 per transform)",
         [](Suite& s, std::string& note) {
             bool ok = true;
             for (const std::string kind : {"gaussian_blur", "color_jitter", "jpeg_compress"}) {
                 auto spec = transforms::default_spec(transforms::kind_from_name(kind));
                 auto tds = transforms::transform_dataset(s.coated_ds(), spec,
                                                          s.seed("transform-" + kind));
                 int flagged = 0;
                 for (int i = 0; i < kReplicates; ++i) {
                     std::string name = "tf_" + kind + "_" + std::to_string(i);
                     auto& m = s.trained(name, tds, i);
                     auto rep = s.audit(name, m, false, false);
                     flagged += rep.flagged ? 1 : 0;
                 }
                 note += kind + "=" + std::to_string(flagged) + "/4 ";
                 ok = ok && flagged >= 3;
             }
             return ok;
         }});

    criteria.push_back(
        {"C6", "rattan removal: <= 1/4 still flagged, clean models stay clear, mem drop >= 0.3",
         [](Suite& s, std::string& note) {
             double mem_before = 0.0, mem_after = 0.0;
             int still_flagged = 0;
             for (int i = 0; i < kReplicates; ++i) {
                 auto before = s.audit("coated_" + std::to_string(i), s.coated_model(i), false, false);
                 auto& cleaned = s.cleaned_model("g060", i, kGamma, s.coated_ds(), s.coated_model(i));
                 auto after = s.audit("cleaned_g060_" + std::to_string(i), cleaned, false, false);
                 mem_before += before.memorization_strength;
                 mem_after += after.memorization_strength;
                 still_flagged += after.flagged ? 1 : 0;
             }
             mem_before /= kReplicates;
             mem_after /= kReplicates;
             int clean_flagged = 0;
             for (int i = 0; i < kReplicates; ++i)
                 clean_flagged +=
                     s.audit("clean_" + std::to_string(i), s.clean_model(i), false, false).flagged;
             note = "flagged " + std::to_string(still_flagged) + "/4, clean flagged " +
                    std::to_string(clean_flagged) + ", mem " + std::to_string(mem_before) + " -> " +
                    std::to_string(mem_after);
             return still_flagged <= 1 && clean_flagged == 0 && (mem_before - mem_after) >= 0.3;
         }});

    criteria.push_back(
        {"C7", "trigger-conditioned coating flags only with the trigger; rattan clears it",
         [](Suite& s, std::string& note) {
             int flagged_with = 0, flagged_without = 0, cleaned_flagged = 0;
             double gap = 0.0;
             for (int i = 0; i < kReplicates; ++i) {
                 std::string id = "trig_" + std::to_string(i);
                 auto with = s.audit(id, s.trigger_model(i), true, true);
                 auto without = s.audit(id + "-plain", s.trigger_model(i), true, false);
                 flagged_with += with.flagged ? 1 : 0;
                 flagged_without += without.flagged ? 1 : 0;
                 gap += with.memorization_strength - without.memorization_strength;
                 auto& cleaned =
                     s.cleaned_model("trig", i, kGamma, s.trigger_ds(), s.trigger_model(i));
                 auto post = s.audit("cleaned_trig_" + std::to_string(i), cleaned, true, true);
                 cleaned_flagged += post.flagged ? 1 : 0;
             }
             gap /= kReplicates;
             note = "with=" + std::to_string(flagged_with) + "/4 without=" +
                    std::to_string(flagged_without) + "/4 gap=" + std::to_string(gap) +
                    " post-rattan=" + std::to_string(cleaned_flagged) + "/4";
             return flagged_with >= 3 && flagged_without == 0 && gap >= 0.3 && cleaned_flagged <= 1;
         }});

    criteria.push_back(
        {"C8", "gamma sweep reproduces det(0.2)>det(0.6) and mem(0.2)>mem(0.6)<mem(1.0)",
         [](Suite& s, std::string& note) {
             auto sweep = [&](const std::string& tag, double g, int& flagged, double& mem) {
                 flagged = 0;
                 mem = 0.0;
                 for (int i = 0; i < kReplicates; ++i) {
                     auto& cleaned = s.cleaned_model(tag, i, g, s.coated_ds(), s.coated_model(i));
                     auto rep =
                         s.audit("cleaned_" + tag + "_" + std::to_string(i), cleaned, false, false);
                     flagged += rep.flagged ? 1 : 0;
                     mem += rep.memorization_strength;
                 }
                 mem /= kReplicates;
             };
             int f02, f06, f10;
             double m02, m06, m10;
             sweep("g020", 0.2, f02, m02);
             sweep("g060", kGamma, f06, m06);
             sweep("g100", 1.0, f10, m10);
             note = "det: " + std::to_string(f02) + ">" + std::to_string(f06) + "? mem: " +
                    std::to_string(m02) + ">" + std::to_string(m06) + "<" + std::to_string(m10) + "?";
             return f02 > f06 && m02 > m06 && m06 < m10;
         }});

    criteria.push_back({"C9", "gamma 0 controlled generation is the bit-exact identity",
                        [](Suite& s, std::string& note) {
                            const auto& x = s.coated_ds().samples[0];
                            Image out = rattan::controlled_generate(s.guide(), x.pixels, x.caption,
                                                                    {0.0, kSteps, 12345});
                            note = "byte-identical = " + std::string(out.v == x.pixels.v ? "yes" : "no");
                            return out.v == x.pixels.v;
                        }});

    criteria.push_back(
        {"C10", "spread-spectrum channel: clean 1.0, wrong key in [0.4,0.6], blur >= 0.9",
         [](Suite& s, std::string& note) {
             auto ds = data::generate_shapes_dataset(100, s.seed("c10"), kImageSize, s.vocab);
             watermark::SpreadSpectrumCoating coat{kCoatKey, 64, 0.015};
             watermark::SpreadSpectrumCoating wrong{kCoatKey + 1, 64, 0.015};
             auto payload = watermark::payload_from_key(coat);
             std::vector<Image> embedded;
             for (const auto& smp : ds.samples) {
                 Image e = watermark::ss_embed(smp.pixels, coat);
                 quantize16(e);
                 embedded.push_back(e);
             }
             double clean_acc = detect::bit_accuracy(embedded, coat, payload);
             double wrong_acc = detect::bit_accuracy(embedded, wrong, payload);
             auto blur = transforms::default_spec(transforms::Kind::gaussian_blur);
             std::vector<Image> blurred;
             for (const auto& img : embedded)
                 blurred.push_back(transforms::apply_transform(img, blur, 0));
             double blur_acc = detect::bit_accuracy(blurred, coat, payload);
             note = "clean=" + std::to_string(clean_acc) + " wrong=" + std::to_string(wrong_acc) +
                    " blur=" + std::to_string(blur_acc);
             return clean_acc == 1.0 && wrong_acc >= 0.4 && wrong_acc <= 0.6 && blur_acc >= 0.9;
         }});

    criteria.push_back(
        {"C11", "fid: self 0, symmetric, analytic oracle to 1e-4, mixing monotone",
         [](Suite& s, std::string& note) {
             auto& enc = s.encoder();
             const auto& ds = s.clean_ds();
             std::vector<Image> a, b;
             for (int i = 0; i < 60; ++i) a.push_back(ds.samples[i].pixels);
             for (int i = 60; i < 120; ++i) b.push_back(ds.samples[i].pixels);
             double self = metrics::fid(a, a, enc);
             double ab = metrics::fid(a, b, enc), ba = metrics::fid(b, a, enc);

             // analytic oracle in feature space (commuting covariances)
             const int d = metrics::FeatureEncoder::kFeatureDim;
             Rng rng(s.seed("c11"));
             Eigen::VectorXd mu_a(d), mu_b(d), da(d), db(d);
             for (int i = 0; i < d; ++i) {
                 mu_a[i] = rng.uniform(-1, 1);
                 mu_b[i] = rng.uniform(-1, 1);
                 da[i] = rng.uniform(0.2, 2.0);
                 db[i] = rng.uniform(0.2, 2.0);
             }
             Eigen::MatrixXd g(d, d);
             for (int i = 0; i < d; ++i)
                 for (int j = 0; j < d; ++j) g(i, j) = rng.normal();
             Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
             double expected = (mu_a - mu_b).squaredNorm();
             for (int i = 0; i < d; ++i) expected += da[i] + db[i] - 2.0 * std::sqrt(da[i] * db[i]);
             double got = metrics::fid_from_moments(mu_a, q * da.asDiagonal() * q.transpose(), mu_b,
                                                    q * db.asDiagonal() * q.transpose());

             // mixing monotonicity: mixture of reference and inverted images;
             // sets are larger than the feature dimension to keep covariance
             // noise below the trend
             std::vector<Image> pure, half, matched;
             for (int i = 120; i < 200; ++i) {
                 matched.push_back(ds.samples[i].pixels);
                 Image inv = ds.samples[i].pixels;
                 for (double& v : inv.v) v = 1.0 - v;
                 pure.push_back(inv);
                 half.push_back(i % 2 ? inv : ds.samples[i].pixels);
             }
             std::vector<Image> ref;
             for (int i = 200; i < 380; ++i) ref.push_back(ds.samples[i].pixels);
             double f0 = metrics::fid(pure, ref, enc);
             double f1 = metrics::fid(half, ref, enc);
             double f2 = metrics::fid(matched, ref, enc);

             note = "self=" + std::to_string(self) + " |ab-ba|=" + std::to_string(std::abs(ab - ba)) +
                    " |analytic err|=" + std::to_string(std::abs(got - expected)) + " mix=" +
                    std::to_string(f0) + ">" + std::to_string(f1) + ">" + std::to_string(f2);
             return std::abs(self) <= 1e-6 && std::abs(ab - ba) <= 1e-6 &&
                    std::abs(got - expected) <= 1e-4 && f0 > f1 && f1 > f2;
         }});

    criteria.push_back(
        {"C12", "utility preserved: cleaned fid <= 1.25x coated fid, conditioning drop <= 10 pts",
         [](Suite& s, std::string& note) {
             auto& enc = s.encoder();
             std::vector<Image> reference;
             for (size_t i : s.clean_ds().holdout_indices())
                 reference.push_back(s.clean_ds().samples[i].pixels);
             double fid_coated = 0.0, fid_cleaned = 0.0, cond_coated = 0.0, cond_cleaned = 0.0;
             for (int i = 0; i < kReplicates; ++i) {
                 std::string cid = "coated_" + std::to_string(i);
                 std::string rid = "cleaned_g060_" + std::to_string(i);
                 auto imgs_c = s.audit_images(cid, s.coated_model(i), false);
                 auto& cleaned = s.cleaned_model("g060", i, kGamma, s.coated_ds(), s.coated_model(i));
                 auto imgs_r = s.audit_images(rid, cleaned, false);
                 fid_coated += metrics::fid(imgs_c, reference, enc);
                 fid_cleaned += metrics::fid(imgs_r, reference, enc);
                 cond_coated += s.conditioning_rate(s.coated_model(i), cid);
                 cond_cleaned += s.conditioning_rate(cleaned, rid);
             }
             fid_coated /= kReplicates;
             fid_cleaned /= kReplicates;
             cond_coated /= kReplicates;
             cond_cleaned /= kReplicates;
             note = "fid " + std::to_string(fid_coated) + " -> " + std::to_string(fid_cleaned) +
                    ", cond " + std::to_string(cond_coated) + " -> " + std::to_string(cond_cleaned);
             return approx_le(fid_cleaned, 1.25 * fid_coated) && cond_coated >= 0.8 &&
                    cond_cleaned >= cond_coated - 0.10;
         }});

    criteria.push_back(
        {"C13", "two full run-matrix executions produce byte-identical results tables",
         [](Suite& s, std::string& note) {
             harness::ExperimentConfig cfg;
             cfg.name = "accept13";
             cfg.dataset.n = 180;
             cfg.dataset.image_size = kImageSize;
             cfg.dataset.holdout = 40;
             cfg.model.channels = kChannels;
             cfg.model.T = kT;
             cfg.model.epochs = 6;
             cfg.model.batch = kBatch;
             cfg.sampler_steps = kSteps;
             cfg.transforms = {};
             cfg.rattan.k = kRattanK;
             cfg.rattan.epochs = 8;
             cfg.detection.prompts = 20;
             cfg.detection.classifier_epochs = kClassifierEpochs;
             cfg.replicates.coated = 1;
             cfg.replicates.clean = 1;
             cfg.master_seed = 7;
             fs::path root_a = "acceptance_c13_a", root_b = "acceptance_c13_b";
             fs::remove_all(root_a);
             fs::remove_all(root_b);
             auto rec_a = harness::run_experiment(cfg, root_a.string());
             auto rec_b = harness::run_experiment(cfg, root_b.string());
             auto ta = read_text((fs::path(rec_a.run_dir) / "report" / "results.tsv").string());
             auto tb = read_text((fs::path(rec_b.run_dir) / "report" / "results.tsv").string());
             note = "tables " + std::to_string(ta.size()) + " bytes, identical = " +
                    (ta == tb ? "yes" : "no");
             return !ta.empty() && ta == tb;
         }});

    int failures = 0;
    for (auto& c : criteria) {
        if (!only.empty() && !only.count(c.id)) continue;
        std::string note;
        bool ok = false;
        try {
            ok = c.run(suite, note);
        } catch (const std::exception& e) {
            note = std::string("exception: ") + e.what();
        }
        std::printf("[%s] %s %s (%s)\n", ok ? "PASS" : "FAIL", c.id.c_str(), c.title.c_str(),
                    note.c_str());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    if (failures) std::printf("%d criterion(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
