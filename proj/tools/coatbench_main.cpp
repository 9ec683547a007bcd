// coatbench: desk-scale testbed for dataset coatings on small text-conditioned
// diffusion models, the memorization-strength audit, and controlled-regeneration
// cleaning. `coatbench run-matrix --config configs/desk.json` runs everything.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "coatbench/data.hpp"
#include "coatbench/detect.hpp"
#include "coatbench/diffusion.hpp"
#include "coatbench/errors.hpp"
#include "coatbench/harness.hpp"
#include "coatbench/metrics.hpp"
#include "coatbench/png_io.hpp"
#include "coatbench/rattan.hpp"
#include "coatbench/transforms.hpp"
#include "coatbench/watermark.hpp"

namespace fs = std::filesystem;
using namespace coatbench;

namespace {

std::string out_root_or_env(const std::string& out) {
    if (!out.empty()) return out;
    if (const char* env = std::getenv("COATBENCH_OUT")) return env;
    return "out";
}

data::Dataset load_dataset(const std::string& dir, const data::CaptionVocab& vocab) {
    return data::load_manifest(dir, vocab);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"coatbench: dataset coating, detection and removal testbed"};
    app.require_subcommand(1);
    auto vocab = data::default_vocab();

    // ---- forge ----
    auto* forge = app.add_subcommand("forge", "generate the captioned-shapes dataset");
    struct {
        std::string out = "out/dataset";
        int n = 520;
        int image_size = 32;
        uint64_t seed = 7;
        double holdout = 0.2;
        std::string external_root, caption_source = "sidecar_text";
    } fo;
    forge->add_option("--out", fo.out, "dataset directory");
    forge->add_option("--n", fo.n, "sample count");
    forge->add_option("--image-size", fo.image_size, "image side length");
    forge->add_option("--seed", fo.seed, "dataset seed");
    forge->add_option("--holdout", fo.holdout, "holdout fraction");
    forge->add_option("--external-root", fo.external_root, "ingest an image folder instead");
    forge->add_option("--caption-source", fo.caption_source, "sidecar_text|filename");

    // ---- coat ----
    auto* coat = app.add_subcommand("coat", "apply a watermark coating to a dataset");
    struct {
        std::string dataset, out = "out/coated", record = "";
        std::string method = "warp", mode = "unconditional";
        double p = 0.2, strength = 1.5, amplitude = 0.015;
        int grid = 5, payload_bits = 64;
        uint64_t key_seed = 99, seed = 7;
    } co;
    coat->add_option("--dataset", co.dataset, "input dataset dir")->required();
    coat->add_option("--out", co.out, "coated dataset dir");
    coat->add_option("--record", co.record, "coating record path (default <out>/coating.json)");
    coat->add_option("--method", co.method, "warp|spread_spectrum");
    coat->add_option("--mode", co.mode, "unconditional|trigger_conditioned");
    coat->add_option("--p", co.p, "trigger-mode coat fraction");
    coat->add_option("--strength", co.strength, "warp strength in pixels");
    coat->add_option("--grid", co.grid, "warp control grid size");
    coat->add_option("--payload-bits", co.payload_bits, "spread-spectrum payload length");
    coat->add_option("--amplitude", co.amplitude, "spread-spectrum amplitude");
    coat->add_option("--key-seed", co.key_seed, "secret coating key");
    coat->add_option("--seed", co.seed, "subset selection seed");

    // ---- train ----
    auto* train = app.add_subcommand("train", "train a conditional denoiser on a dataset");
    struct {
        std::string dataset, out = "out/model.ckpt";
        int epochs = 24, batch = 16, channels = 16, T = 200;
        double lr = 2e-3, beta_start = 1e-4, beta_end = 0.02;
        uint64_t seed = 7;
        bool freeze = false;
    } tr;
    train->add_option("--dataset", tr.dataset)->required();
    train->add_option("--out", tr.out, "checkpoint path");
    train->add_option("--epochs", tr.epochs);
    train->add_option("--batch", tr.batch);
    train->add_option("--lr", tr.lr);
    train->add_option("--channels", tr.channels);
    train->add_option("--T", tr.T, "diffusion steps");
    train->add_option("--beta-start", tr.beta_start);
    train->add_option("--beta-end", tr.beta_end);
    train->add_option("--seed", tr.seed);
    train->add_flag("--freeze", tr.freeze, "freeze parameters after training");

    // ---- sample ----
    auto* sample = app.add_subcommand("sample", "generate an image from a caption");
    struct {
        std::string model, prompt = "a red circle on a gray background", out = "out/sample.png";
        int steps = 60;
        uint64_t seed = 7;
    } sa;
    sample->add_option("--model", sa.model)->required();
    sample->add_option("--prompt", sa.prompt);
    sample->add_option("--out", sa.out);
    sample->add_option("--steps", sa.steps);
    sample->add_option("--seed", sa.seed);

    // ---- transform ----
    auto* transform = app.add_subcommand("transform", "apply an image transformation to a dataset");
    struct {
        std::string dataset, out = "out/transformed", kind = "gaussian_blur";
        uint64_t seed = 7;
    } tf;
    transform->add_option("--dataset", tf.dataset)->required();
    transform->add_option("--out", tf.out);
    transform->add_option("--kind", tf.kind, "transform kind");
    transform->add_option("--seed", tf.seed);

    // ---- detect ----
    auto* detect_cmd = app.add_subcommand("detect", "audit a model for coated-data usage");
    struct {
        std::string model, classifier, coated_dataset, clean_dataset, coating;
        std::string classifier_out = "out/classifier.ckpt", out = "out/report.jsonl";
        double tau = 0.75;
        int prompts = 50, steps = 60, classifier_epochs = 80, aux_pairs = 1600;
        bool use_trigger = false;
        uint64_t seed = 7;
    } de;
    detect_cmd->add_option("--model", de.model, "audited model checkpoint")->required();
    detect_cmd->add_option("--classifier", de.classifier, "trained coating classifier");
    detect_cmd->add_option("--coated-dataset", de.coated_dataset,
                           "coated dataset (trains a classifier when none given)");
    detect_cmd->add_option("--clean-dataset", de.clean_dataset, "clean counterpart dataset");
    detect_cmd->add_option("--coating", de.coating, "coating record (for trigger + coated ids)");
    detect_cmd->add_option("--classifier-out", de.classifier_out);
    detect_cmd->add_option("--out", de.out, "report jsonl (appended)");
    detect_cmd->add_option("--tau", de.tau, "memorization threshold");
    detect_cmd->add_option("--prompts", de.prompts);
    detect_cmd->add_option("--steps", de.steps);
    detect_cmd->add_option("--classifier-epochs", de.classifier_epochs);
    detect_cmd->add_option("--aux-pairs", de.aux_pairs,
                           "synthesized classifier training pairs (shapes datasets)");
    detect_cmd->add_flag("--use-trigger", de.use_trigger, "prepend the trigger to audit prompts");
    detect_cmd->add_option("--seed", de.seed);

    // ---- rattan ----
    auto* rattan_cmd = app.add_subcommand("rattan", "clean a model by controlled regeneration");
    struct {
        std::string model, guide, dataset, out = "out/cleaned.ckpt",
                                      provenance = "out/provenance.jsonl";
        double gamma = 0.6, lr = -1.0;
        int k = 10, epochs = 30, steps = 60, batch = 1;
        uint64_t seed = 7;
    } ra;
    rattan_cmd->add_option("--model", ra.model, "watermarked model checkpoint")->required();
    rattan_cmd->add_option("--guide", ra.guide, "frozen guide model checkpoint")->required();
    rattan_cmd->add_option("--dataset", ra.dataset, "protected dataset dir")->required();
    rattan_cmd->add_option("--out", ra.out);
    rattan_cmd->add_option("--provenance", ra.provenance);
    rattan_cmd->add_option("--gamma", ra.gamma, "noising truncation fraction");
    rattan_cmd->add_option("--k", ra.k, "regenerated subset size");
    rattan_cmd->add_option("--epochs", ra.epochs, "fine-tuning epochs");
    rattan_cmd->add_option("--lr", ra.lr, "fine-tuning rate (<0: training default)");
    rattan_cmd->add_option("--batch", ra.batch);
    rattan_cmd->add_option("--steps", ra.steps);
    rattan_cmd->add_option("--seed", ra.seed);

    // ---- evaluate ----
    auto* evaluate = app.add_subcommand("evaluate", "desk-FID of a model against a dataset");
    struct {
        std::string model, dataset, encoder, encoder_out = "out/encoder.ckpt";
        int prompts = 50, steps = 60, encoder_epochs = 30;
        uint64_t seed = 7;
    } ev;
    evaluate->add_option("--model", ev.model)->required();
    evaluate->add_option("--dataset", ev.dataset, "clean reference dataset")->required();
    evaluate->add_option("--encoder", ev.encoder, "feature encoder (trained when absent)");
    evaluate->add_option("--encoder-out", ev.encoder_out);
    evaluate->add_option("--prompts", ev.prompts);
    evaluate->add_option("--steps", ev.steps);
    evaluate->add_option("--seed", ev.seed);

    // ---- report ----
    auto* report = app.add_subcommand("report", "re-emit the report for a finished run");
    struct {
        std::string run;
    } re;
    report->add_option("--run", re.run, "run directory")->required();

    // ---- run-matrix ----
    auto* matrix = app.add_subcommand("run-matrix", "run the full experiment pipeline");
    struct {
        std::string config, out;
        int64_t seed = -1;
    } mx;
    matrix->add_option("--config", mx.config, "experiment config file")->required();
    matrix->add_option("--out", mx.out, "output root (or $COATBENCH_OUT)");
    matrix->add_option("--seed", mx.seed, "override the config master seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*forge) {
            data::Dataset ds;
            if (fo.external_root.empty()) {
                ds = data::generate_shapes_dataset(fo.n, fo.seed, fo.image_size, vocab);
            } else {
                auto src = fo.caption_source == "filename" ? data::CaptionSource::filename
                                                           : data::CaptionSource::sidecar_text;
                auto res = data::load_external_dataset(fo.external_root, src, fo.image_size, vocab);
                ds = std::move(res.dataset);
                if (res.skipped) std::fprintf(stderr, "skipped %d undecodable files\n", res.skipped);
            }
            data::assign_splits(ds, fo.holdout, fo.seed);
            data::save_manifest(ds, fo.out);
            std::printf("forged %zu samples -> %s\n", ds.size(), fo.out.c_str());
        } else if (*coat) {
            auto ds = load_dataset(co.dataset, vocab);
            watermark::CoatingSpec spec;
            spec.method = data::coating_method_from_name(co.method);
            spec.warp = {co.key_seed, co.grid, co.strength};
            spec.ss = {co.key_seed, co.payload_bits, co.amplitude};
            spec.mode = co.mode == "unconditional"
                            ? watermark::CoatingMode{watermark::Mode::unconditional, 1.0, {}}
                            : watermark::CoatingMode{watermark::Mode::trigger_conditioned, co.p,
                                                     {vocab.trigger_id}};
            auto res = watermark::coat_dataset(ds, spec, co.seed, vocab);
            data::save_manifest(res.dataset, co.out);
            std::string rec_path = co.record.empty() ? co.out + "/coating.json" : co.record;
            watermark::save_coating_record(res.record, rec_path);
            std::printf("coated %zu/%zu samples -> %s (record %s)\n", res.record.coated_ids.size(),
                        ds.size(), co.out.c_str(), rec_path.c_str());
        } else if (*train) {
            auto ds = load_dataset(tr.dataset, vocab);
            diffusion::ArchConfig arch;
            arch.channels = tr.channels;
            auto sched = diffusion::make_schedule(tr.T, tr.beta_start, tr.beta_end);
            diffusion::DenoiserModel model(arch, sched, ds.image_size, vocab,
                                           derive_seed(tr.seed, "cli-init"));
            auto trace = diffusion::train(model, ds, {tr.epochs, tr.lr, tr.batch, tr.seed});
            if (tr.freeze) model.set_frozen(true);
            fs::create_directories(fs::path(tr.out).parent_path());
            model.save(tr.out);
            std::printf("trained %d epochs, loss %.6f -> %.6f, saved %s\n", tr.epochs,
                        trace.epoch_loss.empty() ? 0.0 : trace.epoch_loss.front(),
                        trace.epoch_loss.empty() ? 0.0 : trace.epoch_loss.back(), tr.out.c_str());
        } else if (*sample) {
            auto model = diffusion::DenoiserModel::load(sa.model, vocab);
            Image img = diffusion::sample(model, vocab.tokenize(sa.prompt), {sa.steps, sa.seed});
            fs::create_directories(fs::path(sa.out).parent_path());
            write_png16(sa.out, img);
            std::printf("sampled '%s' -> %s\n", sa.prompt.c_str(), sa.out.c_str());
        } else if (*transform) {
            auto ds = load_dataset(tf.dataset, vocab);
            auto spec = transforms::default_spec(transforms::kind_from_name(tf.kind));
            auto out_ds = transforms::transform_dataset(ds, spec, tf.seed);
            data::save_manifest(out_ds, tf.out);
            std::printf("transformed %zu samples with %s -> %s\n", ds.size(), tf.kind.c_str(),
                        tf.out.c_str());
        } else if (*detect_cmd) {
            detect::CoatingClassifier clf = [&] {
                if (!de.classifier.empty()) return detect::CoatingClassifier::load(de.classifier);
                if (de.coated_dataset.empty() || de.clean_dataset.empty())
                    throw ConfigError(
                        "detect needs either --classifier or both --coated-dataset and "
                        "--clean-dataset");
                auto coated = load_dataset(de.coated_dataset, vocab);
                auto clean = load_dataset(de.clean_dataset, vocab);
                std::vector<Image> coated_imgs, clean_imgs;
                for (size_t i = 0; i < coated.size(); ++i)
                    if (coated.samples[i].coated) {
                        coated_imgs.push_back(coated.samples[i].pixels);
                        clean_imgs.push_back(clean.samples[i].pixels);
                    }
                watermark::WarpCoating warp_key;
                const watermark::WarpCoating* key_ptr = nullptr;
                if (!de.coating.empty()) {
                    auto rec = watermark::load_coating_record(de.coating);
                    if (rec.method == data::CoatingMethod::warp) {
                        warp_key = rec.warp_coating();
                        key_ptr = &warp_key;
                    }
                    if (de.aux_pairs > 0) {
                        auto aux = data::generate_shapes_dataset(de.aux_pairs,
                                                                 derive_seed(de.seed, "aux"),
                                                                 coated.image_size, vocab);
                        for (auto& s2 : aux.samples) {
                            clean_imgs.push_back(s2.pixels);
                            Image c2 = rec.method == data::CoatingMethod::warp
                                           ? watermark::warp_coat(s2.pixels, rec.warp_coating())
                                           : watermark::ss_embed(s2.pixels, rec.ss_coating());
                            quantize16(c2);
                            coated_imgs.push_back(std::move(c2));
                        }
                    }
                }
                auto c = detect::train_classifier(coated_imgs, clean_imgs, de.classifier_epochs,
                                                  de.seed, key_ptr);
                fs::create_directories(fs::path(de.classifier_out).parent_path());
                c.save(de.classifier_out);
                std::printf("classifier holdout accuracy %.4f, saved %s\n", c.holdout_accuracy(),
                            de.classifier_out.c_str());
                return c;
            }();
            auto model = diffusion::DenoiserModel::load(de.model, vocab);
            detect::ModelSamplingHandle handle(model, de.steps);
            auto prompts = data::make_audit_prompts(vocab, de.prompts, de.seed);
            std::vector<int> trigger;
            if (de.use_trigger) {
                if (!de.coating.empty())
                    trigger = watermark::load_coating_record(de.coating).trigger;
                else
                    trigger = {vocab.trigger_id};
            }
            auto rep = detect::detect_model(clf, handle, de.tau, prompts, trigger, de.seed,
                                            fs::path(de.model).stem().string());
            fs::create_directories(fs::path(de.out).parent_path());
            detect::append_report(rep, de.out);
            std::printf("%s: memorization %.3f (tau %.2f) -> %s\n", rep.model_id.c_str(),
                        rep.memorization_strength, rep.tau, rep.flagged ? "FLAGGED" : "clear");
        } else if (*rattan_cmd) {
            auto model = diffusion::DenoiserModel::load(ra.model, vocab);
            auto guide = diffusion::DenoiserModel::load(ra.guide, vocab);
            guide.set_frozen(true);
            auto ds = load_dataset(ra.dataset, vocab);
            double lr = ra.lr < 0 ? 2e-3 : ra.lr;
            rattan::ControlledGenConfig gen_cfg{ra.gamma, ra.steps, derive_seed(ra.seed, "gen")};
            rattan::FinetuneConfig ft_cfg{ra.k, ra.epochs, lr, ra.batch, derive_seed(ra.seed, "ft")};
            auto rec = rattan::rattan_clean(model, guide, ds, gen_cfg, ft_cfg);
            fs::create_directories(fs::path(ra.out).parent_path());
            model.save(ra.out);
            fs::create_directories(fs::path(ra.provenance).parent_path());
            std::ofstream prov(ra.provenance, std::ios::app);
            prov << rec.to_json() << "\n";
            std::printf("cleaned model saved %s (gamma %.2f, k %d, %d epochs)\n", ra.out.c_str(),
                        ra.gamma, ra.k, ra.epochs);
        } else if (*evaluate) {
            auto ds = load_dataset(ev.dataset, vocab);
            metrics::FeatureEncoder enc = [&] {
                if (!ev.encoder.empty()) return metrics::FeatureEncoder::load(ev.encoder);
                auto e = metrics::train_encoder(ds, ev.encoder_epochs, ev.seed);
                fs::create_directories(fs::path(ev.encoder_out).parent_path());
                e.save(ev.encoder_out);
                return e;
            }();
            auto model = diffusion::DenoiserModel::load(ev.model, vocab);
            detect::ModelSamplingHandle handle(model, ev.steps);
            auto prompts = data::make_audit_prompts(vocab, ev.prompts, ev.seed);
            auto images = detect::generate_audit_images(handle, prompts, {}, ev.seed);
            std::vector<Image> reference;
            for (size_t i : ds.holdout_indices()) reference.push_back(ds.samples[i].pixels);
            if (reference.size() < 2)
                for (size_t i : ds.train_indices()) reference.push_back(ds.samples[i].pixels);
            double f = metrics::fid(images, reference, enc);
            std::printf("desk-FID(%s) = %.4f over %d generations\n", ev.model.c_str(), f,
                        ev.prompts);
        } else if (*report) {
            fs::path run_dir(re.run);
            if (!fs::exists(run_dir / "config.json"))
                throw ConfigError("not a run directory (missing config.json): " + re.run);
            auto cfg = harness::ExperimentConfig::from_file((run_dir / "config.json").string());
            fs::remove(run_dir / "report.done");
            auto rec = harness::run_experiment(cfg, run_dir.parent_path().string());
            std::printf("report re-emitted under %s/report\n", rec.run_dir.c_str());
        } else if (*matrix) {
            auto cfg = harness::ExperimentConfig::from_file(mx.config);
            if (mx.seed >= 0) cfg.master_seed = static_cast<uint64_t>(mx.seed);
            auto rec = harness::run_experiment(cfg, out_root_or_env(mx.out));
            std::printf("run %s complete; results at %s/report/results.tsv\n", rec.run_id.c_str(),
                        rec.run_dir.c_str());
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "coatbench: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "coatbench: %s\n", e.what());
        return 1;
    }
    return 0;
}
