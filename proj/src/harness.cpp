#include "coatbench/harness.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "coatbench/data.hpp"
#include "coatbench/detect.hpp"
#include "coatbench/diffusion.hpp"
#include "coatbench/errors.hpp"
#include "coatbench/metrics.hpp"
#include "coatbench/rattan.hpp"
#include "coatbench/transforms.hpp"
#include "coatbench/watermark.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace coatbench::harness {

// ---------------------------------------------------------------------------
// Config parsing (strict: unknown keys are errors)
// ---------------------------------------------------------------------------

namespace {

void check_keys(const json& j, const std::string& scope, const std::set<std::string>& allowed) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown config key: " + scope + "." + it.key());
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j[key].get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j = json::parse(text);
    check_keys(j, "config",
               {"version", "name", "dataset", "coating", "model", "sampler_steps", "transforms",
                "rattan", "detection", "replicates", "master_seed"});
    ExperimentConfig cfg;
    if (!j.contains("version")) throw ConfigError("config is missing the version field");
    cfg.version = j["version"].get<int>();
    if (cfg.version != 1)
        throw ConfigError("unsupported config version " + std::to_string(cfg.version));
    get_if(j, "name", cfg.name);
    get_if(j, "sampler_steps", cfg.sampler_steps);
    get_if(j, "master_seed", cfg.master_seed);
    get_if(j, "transforms", cfg.transforms);
    for (const auto& t : cfg.transforms) {
        try {
            transforms::kind_from_name(t);
        } catch (const ArgumentError&) {
            throw ConfigError("unknown transform kind in config: " + t);
        }
    }

    if (j.contains("dataset")) {
        const json& d = j["dataset"];
        check_keys(d, "dataset", {"kind", "n", "image_size", "holdout", "root", "caption_source"});
        get_if(d, "kind", cfg.dataset.kind);
        get_if(d, "n", cfg.dataset.n);
        get_if(d, "image_size", cfg.dataset.image_size);
        get_if(d, "holdout", cfg.dataset.holdout);
        get_if(d, "root", cfg.dataset.root);
        get_if(d, "caption_source", cfg.dataset.caption_source);
        if (cfg.dataset.kind != "shapes" && cfg.dataset.kind != "external")
            throw ConfigError("dataset.kind must be shapes or external");
    }
    if (j.contains("coating")) {
        const json& c = j["coating"];
        check_keys(c, "coating",
                   {"method", "mode", "p", "grid_size", "strength", "payload_bits", "amplitude",
                    "key_seed"});
        get_if(c, "method", cfg.coating.method);
        get_if(c, "mode", cfg.coating.mode);
        get_if(c, "p", cfg.coating.p);
        get_if(c, "grid_size", cfg.coating.grid_size);
        get_if(c, "strength", cfg.coating.strength);
        get_if(c, "payload_bits", cfg.coating.payload_bits);
        get_if(c, "amplitude", cfg.coating.amplitude);
        get_if(c, "key_seed", cfg.coating.key_seed);
        data::coating_method_from_name(cfg.coating.method);
        if (cfg.coating.mode != "unconditional" && cfg.coating.mode != "trigger_conditioned")
            throw ConfigError("coating.mode must be unconditional or trigger_conditioned");
    }
    if (j.contains("model")) {
        const json& m = j["model"];
        check_keys(m, "model",
                   {"channels", "emb_dim", "hidden", "T", "beta_start", "beta_end", "epochs", "lr",
                    "batch"});
        get_if(m, "channels", cfg.model.channels);
        get_if(m, "emb_dim", cfg.model.emb_dim);
        get_if(m, "hidden", cfg.model.hidden);
        get_if(m, "T", cfg.model.T);
        get_if(m, "beta_start", cfg.model.beta_start);
        get_if(m, "beta_end", cfg.model.beta_end);
        get_if(m, "epochs", cfg.model.epochs);
        get_if(m, "lr", cfg.model.lr);
        get_if(m, "batch", cfg.model.batch);
    }
    if (j.contains("rattan")) {
        const json& r = j["rattan"];
        check_keys(r, "rattan", {"gamma", "k", "epochs", "lr", "batch", "gamma_sweep"});
        get_if(r, "gamma", cfg.rattan.gamma);
        get_if(r, "k", cfg.rattan.k);
        get_if(r, "epochs", cfg.rattan.epochs);
        get_if(r, "lr", cfg.rattan.lr);
        get_if(r, "batch", cfg.rattan.batch);
        get_if(r, "gamma_sweep", cfg.rattan.gamma_sweep);
    }
    if (j.contains("detection")) {
        const json& d = j["detection"];
        check_keys(d, "detection", {"tau", "prompts", "classifier_epochs", "classifier_aux_pairs"});
        get_if(d, "tau", cfg.detection.tau);
        get_if(d, "prompts", cfg.detection.prompts);
        get_if(d, "classifier_epochs", cfg.detection.classifier_epochs);
        get_if(d, "classifier_aux_pairs", cfg.detection.classifier_aux_pairs);
    }
    if (j.contains("replicates")) {
        const json& r = j["replicates"];
        check_keys(r, "replicates", {"coated", "clean"});
        get_if(r, "coated", cfg.replicates.coated);
        get_if(r, "clean", cfg.replicates.clean);
        if (cfg.replicates.coated < 1 || cfg.replicates.clean < 1)
            throw ConfigError("replicate counts must be >= 1");
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
    return from_json_text(read_text(path));
}

std::string ExperimentConfig::to_json() const {
    json j{{"version", version},
           {"name", name},
           {"dataset",
            {{"kind", dataset.kind},
             {"n", dataset.n},
             {"image_size", dataset.image_size},
             {"holdout", dataset.holdout},
             {"root", dataset.root},
             {"caption_source", dataset.caption_source}}},
           {"coating",
            {{"method", coating.method},
             {"mode", coating.mode},
             {"p", coating.p},
             {"grid_size", coating.grid_size},
             {"strength", coating.strength},
             {"payload_bits", coating.payload_bits},
             {"amplitude", coating.amplitude},
             {"key_seed", coating.key_seed}}},
           {"model",
            {{"channels", model.channels},
             {"emb_dim", model.emb_dim},
             {"hidden", model.hidden},
             {"T", model.T},
             {"beta_start", model.beta_start},
             {"beta_end", model.beta_end},
             {"epochs", model.epochs},
             {"lr", model.lr},
             {"batch", model.batch}}},
           {"sampler_steps", sampler_steps},
           {"transforms", transforms},
           {"rattan",
            {{"gamma", rattan.gamma},
             {"k", rattan.k},
             {"epochs", rattan.epochs},
             {"lr", rattan.lr},
             {"batch", rattan.batch},
             {"gamma_sweep", rattan.gamma_sweep}}},
           {"detection",
            {{"tau", detection.tau},
             {"prompts", detection.prompts},
             {"classifier_epochs", detection.classifier_epochs},
             {"classifier_aux_pairs", detection.classifier_aux_pairs}}},
           {"replicates", {{"coated", replicates.coated}, {"clean", replicates.clean}}},
           {"master_seed", master_seed}};
    return j.dump(2);
}

uint64_t ExperimentConfig::hash() const {
    std::string s = to_json();
    return fnv1a64(s.data(), s.size());
}

// ---------------------------------------------------------------------------
// Stage bookkeeping
// ---------------------------------------------------------------------------

bool stage_done(const std::string& run_dir, const std::string& stage, uint64_t config_hash) {
    fs::path marker = fs::path(run_dir) / (stage + ".done");
    if (!fs::exists(marker)) return false;
    try {
        json j = json::parse(read_text(marker.string()));
        return j.value("config_hash", "") == hex64(config_hash);
    } catch (...) {
        return false;
    }
}

void mark_stage_done(const std::string& run_dir, const std::string& stage, uint64_t config_hash) {
    json j{{"stage", stage}, {"config_hash", hex64(config_hash)}};
    write_text_atomic((fs::path(run_dir) / (stage + ".done")).string(), j.dump() + "\n");
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

namespace {

struct Ctx {
    ExperimentConfig cfg;
    fs::path run;
    uint64_t chash = 0;
    data::CaptionVocab vocab = data::default_vocab();

    fs::path forge_dir() const { return run / "forge" / "dataset"; }
    fs::path coat_dir() const { return run / "coat" / "dataset"; }
    fs::path coating_json() const { return run / "coat" / "coating.json"; }
    fs::path train_dir() const { return run / "train"; }
    fs::path detect_dir() const { return run / "detect"; }
    fs::path transform_dir() const { return run / "transform"; }
    fs::path rattan_dir() const { return run / "rattan"; }
    fs::path eval_dir() const { return run / "evaluate"; }
    fs::path report_dir() const { return run / "report"; }

    uint64_t seed(const std::string& label, uint64_t idx = 0) const {
        return derive_seed(cfg.master_seed, label, idx);
    }

    diffusion::ArchConfig arch() const {
        return {cfg.model.channels, cfg.model.emb_dim, cfg.model.hidden};
    }
    diffusion::NoiseSchedule sched() const {
        return diffusion::make_schedule(cfg.model.T, cfg.model.beta_start, cfg.model.beta_end);
    }
    diffusion::TrainConfig train_cfg(uint64_t s) const {
        return {cfg.model.epochs, cfg.model.lr, cfg.model.batch, s};
    }
    double rattan_lr() const { return cfg.rattan.lr < 0 ? cfg.model.lr : cfg.rattan.lr; }

    std::string dataset_label() const {
        if (cfg.dataset.kind == "shapes") return "shapes";
        return fs::path(cfg.dataset.root).filename().string();
    }
    std::string gamma_tag(double g) const {
        char buf[32];
        std::snprintf(buf, sizeof buf, "g%.2f", g);
        return buf;
    }
};

void log_event(const Ctx& ctx, const std::string& text) {
    std::ofstream out(ctx.run / "run.log", std::ios::app);
    auto now = std::chrono::system_clock::now().time_since_epoch();
    out << json{{"t", std::chrono::duration_cast<std::chrono::milliseconds>(now).count()},
                {"event", text}}
               .dump()
        << "\n";
}

void save_trace(const diffusion::LossTrace& trace, const fs::path& path) {
    std::ostringstream ss;
    ss << "epoch\tloss\n";
    for (size_t e = 0; e < trace.epoch_loss.size(); ++e) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%zu\t%.9f\n", e, trace.epoch_loss[e]);
        ss << buf;
    }
    write_text_atomic(path.string(), ss.str());
}

void stage_forge(Ctx& ctx) {
    fs::create_directories(ctx.run / "forge");
    data::Dataset ds;
    if (ctx.cfg.dataset.kind == "shapes") {
        ds = data::generate_shapes_dataset(ctx.cfg.dataset.n, ctx.seed("forge"),
                                           ctx.cfg.dataset.image_size, ctx.vocab);
    } else {
        auto src = ctx.cfg.dataset.caption_source == "filename" ? data::CaptionSource::filename
                                                                : data::CaptionSource::sidecar_text;
        auto res = data::load_external_dataset(ctx.cfg.dataset.root, src,
                                               ctx.cfg.dataset.image_size, ctx.vocab);
        ds = std::move(res.dataset);
        if (res.skipped) log_event(ctx, "forge skipped " + std::to_string(res.skipped) + " files");
    }
    double frac = std::min(0.5, static_cast<double>(ctx.cfg.dataset.holdout) /
                                    std::max<size_t>(1, ds.size()));
    data::assign_splits(ds, frac, ctx.seed("split"));
    data::save_manifest(ds, ctx.forge_dir().string());
}

void stage_coat(Ctx& ctx) {
    fs::create_directories(ctx.run / "coat");
    data::Dataset clean = data::load_manifest(ctx.forge_dir().string(), ctx.vocab);
    watermark::CoatingSpec spec;
    spec.method = data::coating_method_from_name(ctx.cfg.coating.method);
    spec.warp = {ctx.cfg.coating.key_seed, ctx.cfg.coating.grid_size, ctx.cfg.coating.strength};
    spec.ss = {ctx.cfg.coating.key_seed, ctx.cfg.coating.payload_bits, ctx.cfg.coating.amplitude};
    if (ctx.cfg.coating.mode == "unconditional") {
        spec.mode = {watermark::Mode::unconditional, 1.0, {}};
    } else {
        spec.mode = {watermark::Mode::trigger_conditioned, ctx.cfg.coating.p,
                     {ctx.vocab.trigger_id}};
    }
    auto res = watermark::coat_dataset(clean, spec, ctx.seed("coat"), ctx.vocab);
    data::save_manifest(res.dataset, ctx.coat_dir().string());
    watermark::save_coating_record(res.record, ctx.coating_json().string());
}

void train_one(const Ctx& ctx, const data::Dataset& ds, const std::string& name, uint64_t init_seed,
               uint64_t train_seed, bool freeze = false) {
    diffusion::DenoiserModel model(ctx.arch(), ctx.sched(), ds.image_size, ctx.vocab, init_seed);
    auto trace = diffusion::train(model, ds, ctx.train_cfg(train_seed));
    if (freeze) model.set_frozen(true);
    model.save((ctx.train_dir() / (name + ".ckpt")).string());
    save_trace(trace, ctx.train_dir() / (name + "_trace.tsv"));
}

void stage_train(Ctx& ctx) {
    fs::create_directories(ctx.train_dir());
    data::Dataset clean = data::load_manifest(ctx.forge_dir().string(), ctx.vocab);
    data::Dataset coated = data::load_manifest(ctx.coat_dir().string(), ctx.vocab);
    for (int i = 0; i < ctx.cfg.replicates.coated; ++i)
        train_one(ctx, coated, "coated_" + std::to_string(i), ctx.seed("init-coated", i),
                  ctx.seed("train-coated", i));
    for (int i = 0; i < ctx.cfg.replicates.clean; ++i)
        train_one(ctx, clean, "clean_" + std::to_string(i), ctx.seed("init-clean", i),
                  ctx.seed("train-clean", i));
    // the adversary's stand-in for an off-the-shelf base model
    train_one(ctx, clean, "guide", ctx.seed("init-guide"), ctx.seed("train-guide"), true);
}

std::vector<data::Prompt> audit_prompts(const Ctx& ctx) {
    return data::make_audit_prompts(ctx.vocab, ctx.cfg.detection.prompts, ctx.seed("prompts"));
}

std::vector<int> audit_trigger(const Ctx& ctx, const watermark::CoatingRecord& rec) {
    return rec.mode == watermark::Mode::trigger_conditioned ? rec.trigger : std::vector<int>{};
}

void stage_detect(Ctx& ctx) {
    fs::create_directories(ctx.detect_dir());
    data::Dataset clean = data::load_manifest(ctx.forge_dir().string(), ctx.vocab);
    data::Dataset coated = data::load_manifest(ctx.coat_dir().string(), ctx.vocab);
    auto rec = watermark::load_coating_record(ctx.coating_json().string());

    // content-matched coated/clean pairs; the defender owns both versions and
    // can synthesize as many extra pairs with its secret key as it likes
    std::vector<Image> coated_imgs, clean_imgs;
    for (size_t id : rec.coated_ids) {
        coated_imgs.push_back(coated.samples[id].pixels);
        clean_imgs.push_back(clean.samples[id].pixels);
    }
    if (ctx.cfg.detection.classifier_aux_pairs > 0 && ctx.cfg.dataset.kind == "shapes") {
        auto aux = data::generate_shapes_dataset(ctx.cfg.detection.classifier_aux_pairs,
                                                 ctx.seed("classifier-aux"), coated.image_size,
                                                 ctx.vocab);
        for (auto& s : aux.samples) {
            clean_imgs.push_back(s.pixels);
            Image c = rec.method == data::CoatingMethod::warp
                          ? watermark::warp_coat(s.pixels, rec.warp_coating())
                          : watermark::ss_embed(s.pixels, rec.ss_coating());
            quantize16(c);
            coated_imgs.push_back(std::move(c));
        }
    }
    watermark::WarpCoating warp_key = rec.warp_coating();
    const watermark::WarpCoating* key_ptr =
        rec.method == data::CoatingMethod::warp ? &warp_key : nullptr;
    auto clf = detect::train_classifier(coated_imgs, clean_imgs, ctx.cfg.detection.classifier_epochs,
                                        ctx.seed("classifier"), key_ptr);
    clf.key_id = rec.key_id;
    clf.method = data::coating_method_name(rec.method);
    clf.save((ctx.detect_dir() / "classifier.ckpt").string());

    auto prompts = audit_prompts(ctx);
    auto trigger = audit_trigger(ctx, rec);
    std::ostringstream reports;
    auto audit_model = [&](const std::string& name) {
        auto model = diffusion::DenoiserModel::load((ctx.train_dir() / (name + ".ckpt")).string(),
                                                    ctx.vocab);
        detect::ModelSamplingHandle handle(model, ctx.cfg.sampler_steps);
        auto rep = detect::detect_model(clf, handle, ctx.cfg.detection.tau, prompts, trigger,
                                        ctx.seed("audit-" + name), name);
        reports << detect::report_to_json(rep) << "\n";
    };
    for (int i = 0; i < ctx.cfg.replicates.coated; ++i) audit_model("coated_" + std::to_string(i));
    for (int i = 0; i < ctx.cfg.replicates.clean; ++i) audit_model("clean_" + std::to_string(i));
    write_text_atomic((ctx.detect_dir() / "reports.jsonl").string(), reports.str());
}

void stage_transform(Ctx& ctx) {
    fs::create_directories(ctx.transform_dir());
    if (ctx.cfg.transforms.empty()) {
        write_text_atomic((ctx.transform_dir() / "reports.jsonl").string(), "");
        return;
    }
    data::Dataset coated = data::load_manifest(ctx.coat_dir().string(), ctx.vocab);
    auto rec = watermark::load_coating_record(ctx.coating_json().string());
    auto clf = detect::CoatingClassifier::load((ctx.detect_dir() / "classifier.ckpt").string());
    auto prompts = audit_prompts(ctx);
    auto trigger = audit_trigger(ctx, rec);

    std::ostringstream reports;
    for (const auto& kind : ctx.cfg.transforms) {
        auto spec = transforms::default_spec(transforms::kind_from_name(kind));
        data::Dataset tds = transforms::transform_dataset(coated, spec, ctx.seed("transform-" + kind));
        for (int i = 0; i < ctx.cfg.replicates.coated; ++i) {
            std::string name = "transform_" + kind + "_" + std::to_string(i);
            diffusion::DenoiserModel model(ctx.arch(), ctx.sched(), tds.image_size, ctx.vocab,
                                           ctx.seed("init-" + name));
            auto trace = diffusion::train(model, tds, ctx.train_cfg(ctx.seed("train-" + name)));
            model.save((ctx.transform_dir() / (name + ".ckpt")).string());
            save_trace(trace, ctx.transform_dir() / (name + "_trace.tsv"));
            detect::ModelSamplingHandle handle(model, ctx.cfg.sampler_steps);
            auto rep = detect::detect_model(clf, handle, ctx.cfg.detection.tau, prompts, trigger,
                                            ctx.seed("audit-" + name), name);
            reports << detect::report_to_json(rep) << "\n";
        }
    }
    write_text_atomic((ctx.transform_dir() / "reports.jsonl").string(), reports.str());
}

void stage_rattan(Ctx& ctx) {
    fs::create_directories(ctx.rattan_dir());
    data::Dataset coated = data::load_manifest(ctx.coat_dir().string(), ctx.vocab);
    auto guide = diffusion::DenoiserModel::load((ctx.train_dir() / "guide.ckpt").string(), ctx.vocab);

    std::vector<double> gammas{ctx.cfg.rattan.gamma};
    for (double g : ctx.cfg.rattan.gamma_sweep)
        if (std::find(gammas.begin(), gammas.end(), g) == gammas.end()) gammas.push_back(g);

    std::ostringstream provenance;
    for (double g : gammas) {
        bool main_gamma = g == ctx.cfg.rattan.gamma;
        for (int i = 0; i < ctx.cfg.replicates.coated; ++i) {
            std::string src = "coated_" + std::to_string(i);
            std::string name = main_gamma ? "cleaned_" + std::to_string(i)
                                          : "cleaned_" + ctx.gamma_tag(g) + "_" + std::to_string(i);
            auto model =
                diffusion::DenoiserModel::load((ctx.train_dir() / (src + ".ckpt")).string(), ctx.vocab);
            rattan::ControlledGenConfig gen_cfg{g, ctx.cfg.sampler_steps,
                                                ctx.seed("rattan-gen-" + name)};
            rattan::FinetuneConfig ft_cfg{ctx.cfg.rattan.k, ctx.cfg.rattan.epochs, ctx.rattan_lr(),
                                          ctx.cfg.rattan.batch, ctx.seed("rattan-ft-" + name)};
            auto rec = rattan::rattan_clean(model, guide, coated, gen_cfg, ft_cfg);
            model.save((ctx.rattan_dir() / (name + ".ckpt")).string());
            json line = json::parse(rec.to_json());
            line["model_id"] = name;
            provenance << line.dump() << "\n";
            log_event(ctx, "rattan " + name + " done");
        }
    }
    write_text_atomic((ctx.rattan_dir() / "provenance.jsonl").string(), provenance.str());
}

void stage_evaluate(Ctx& ctx) {
    fs::create_directories(ctx.eval_dir());
    data::Dataset clean = data::load_manifest(ctx.forge_dir().string(), ctx.vocab);
    auto rec = watermark::load_coating_record(ctx.coating_json().string());
    auto clf = detect::CoatingClassifier::load((ctx.detect_dir() / "classifier.ckpt").string());
    auto prompts = audit_prompts(ctx);
    auto trigger = audit_trigger(ctx, rec);

    auto encoder = metrics::train_encoder(clean, 30, ctx.seed("encoder"));
    encoder.save((ctx.eval_dir() / "encoder.ckpt").string());

    std::vector<Image> reference;
    for (size_t i : clean.holdout_indices()) reference.push_back(clean.samples[i].pixels);
    if (reference.size() < 2)
        for (size_t i : clean.train_indices()) reference.push_back(clean.samples[i].pixels);

    std::vector<double> gammas{ctx.cfg.rattan.gamma};
    for (double g : ctx.cfg.rattan.gamma_sweep)
        if (std::find(gammas.begin(), gammas.end(), g) == gammas.end()) gammas.push_back(g);

    // post-rattan audits
    std::ostringstream reports;
    for (double g : gammas) {
        bool main_gamma = g == ctx.cfg.rattan.gamma;
        for (int i = 0; i < ctx.cfg.replicates.coated; ++i) {
            std::string name = main_gamma ? "cleaned_" + std::to_string(i)
                                          : "cleaned_" + ctx.gamma_tag(g) + "_" + std::to_string(i);
            auto model = diffusion::DenoiserModel::load(
                (ctx.rattan_dir() / (name + ".ckpt")).string(), ctx.vocab);
            detect::ModelSamplingHandle handle(model, ctx.cfg.sampler_steps);
            auto rep = detect::detect_model(clf, handle, ctx.cfg.detection.tau, prompts, trigger,
                                            ctx.seed("audit-" + name), name);
            reports << detect::report_to_json(rep) << "\n";
        }
    }
    write_text_atomic((ctx.eval_dir() / "reports_rattan.jsonl").string(), reports.str());

    // desk-FID for every audited model group, on the audit image sets
    std::ostringstream fid_lines;
    auto fid_of = [&](const fs::path& ckpt, const std::string& name) {
        auto model = diffusion::DenoiserModel::load(ckpt.string(), ctx.vocab);
        detect::ModelSamplingHandle handle(model, ctx.cfg.sampler_steps);
        auto images =
            detect::generate_audit_images(handle, prompts, trigger, ctx.seed("audit-" + name));
        double f = metrics::fid(images, reference, encoder);
        fid_lines << json{{"model_id", name}, {"fid", f}}.dump() << "\n";
    };
    for (int i = 0; i < ctx.cfg.replicates.coated; ++i) {
        std::string name = "coated_" + std::to_string(i);
        fid_of(ctx.train_dir() / (name + ".ckpt"), name);
    }
    for (double g : gammas) {
        bool main_gamma = g == ctx.cfg.rattan.gamma;
        for (int i = 0; i < ctx.cfg.replicates.coated; ++i) {
            std::string name = main_gamma ? "cleaned_" + std::to_string(i)
                                          : "cleaned_" + ctx.gamma_tag(g) + "_" + std::to_string(i);
            fid_of(ctx.rattan_dir() / (name + ".ckpt"), name);
        }
    }
    for (const auto& kind : ctx.cfg.transforms)
        for (int i = 0; i < ctx.cfg.replicates.coated; ++i) {
            std::string name = "transform_" + kind + "_" + std::to_string(i);
            fid_of(ctx.transform_dir() / (name + ".ckpt"), name);
        }
    write_text_atomic((ctx.eval_dir() / "fid.jsonl").string(), fid_lines.str());
}

struct Stats {
    double mean = 0.0, stddev = 0.0;
};
Stats stats_of(const std::vector<double>& xs) {
    Stats s;
    if (xs.empty()) return s;
    for (double x : xs) s.mean += x;
    s.mean /= xs.size();
    double var = 0.0;
    for (double x : xs) var += (x - s.mean) * (x - s.mean);
    // sample std over replicate models (labelled as std in the table docs)
    s.stddev = xs.size() > 1 ? std::sqrt(var / (xs.size() - 1)) : 0.0;
    return s;
}

void stage_report(Ctx& ctx) {
    fs::create_directories(ctx.report_dir());

    auto parse_reports = [](const fs::path& p) {
        std::vector<detect::DetectionReport> out;
        if (fs::exists(p))
            for (const auto& line : read_lines(p.string())) out.push_back(detect::report_from_json(line));
        return out;
    };
    auto base_reports = parse_reports(ctx.detect_dir() / "reports.jsonl");
    auto transform_reports = parse_reports(ctx.transform_dir() / "reports.jsonl");
    auto rattan_reports = parse_reports(ctx.eval_dir() / "reports_rattan.jsonl");

    std::map<std::string, double> fid_by_model;
    for (const auto& line : read_lines((ctx.eval_dir() / "fid.jsonl").string())) {
        json j = json::parse(line);
        fid_by_model[j["model_id"].get<std::string>()] = j["fid"].get<double>();
    }

    auto starts_with = [](const std::string& s, const std::string& prefix) {
        return s.rfind(prefix, 0) == 0;
    };
    auto collect = [&](const std::vector<detect::DetectionReport>& reps, const std::string& prefix,
                       const std::string& exclude_prefix = {}) {
        std::vector<detect::DetectionReport> out;
        for (const auto& r : reps) {
            if (!starts_with(r.model_id, prefix)) continue;
            if (!exclude_prefix.empty() && starts_with(r.model_id, exclude_prefix)) continue;
            out.push_back(r);
        }
        return out;
    };
    auto row_for = [&](const std::string& method,
                       const std::vector<detect::DetectionReport>& positives,
                       const std::vector<detect::DetectionReport>& negatives) {
        metrics::RunRow row;
        row.dataset = ctx.dataset_label();
        row.method = method;
        row.mode = ctx.cfg.coating.mode;
        std::vector<detect::DetectionReport> all = positives;
        all.insert(all.end(), negatives.begin(), negatives.end());
        std::vector<bool> truth(positives.size(), true);
        truth.insert(truth.end(), negatives.size(), false);
        row.cm = metrics::confusion(all, truth);
        std::vector<double> fids, mems;
        for (const auto& r : positives) {
            mems.push_back(r.memorization_strength);
            auto it = fid_by_model.find(r.model_id);
            if (it != fid_by_model.end()) fids.push_back(it->second);
        }
        auto fs_ = stats_of(fids);
        row.fid_mean = fs_.mean;
        row.fid_std = fs_.stddev;
        row.mem_mean = stats_of(mems).mean;
        return row;
    };

    auto clean_reports = collect(base_reports, "clean_");
    metrics::ReportBundle bundle;
    bundle.rows.push_back(row_for("diagnosis", collect(base_reports, "coated_"), clean_reports));
    bundle.rows.push_back(
        row_for("rattan", collect(rattan_reports, "cleaned_", "cleaned_g"), clean_reports));
    // non-default gammas get their own rows
    for (double g : ctx.cfg.rattan.gamma_sweep) {
        if (g == ctx.cfg.rattan.gamma) continue;
        std::string tag = ctx.gamma_tag(g);
        bundle.rows.push_back(
            row_for("rattan-" + tag, collect(rattan_reports, "cleaned_" + tag + "_"), clean_reports));
    }
    for (const auto& kind : ctx.cfg.transforms)
        bundle.rows.push_back(row_for("transform:" + kind,
                                      collect(transform_reports, "transform_" + kind + "_"),
                                      clean_reports));

    // memorization vs gamma series over all rattan operating points
    {
        std::vector<double> gammas{ctx.cfg.rattan.gamma};
        for (double g : ctx.cfg.rattan.gamma_sweep)
            if (std::find(gammas.begin(), gammas.end(), g) == gammas.end()) gammas.push_back(g);
        std::sort(gammas.begin(), gammas.end());
        metrics::Series s;
        s.name = "memorization_vs_gamma";
        for (double g : gammas) {
            std::string prefix = g == ctx.cfg.rattan.gamma ? "cleaned_"
                                                           : "cleaned_" + ctx.gamma_tag(g) + "_";
            std::vector<double> mems;
            for (const auto& r : rattan_reports) {
                if (!starts_with(r.model_id, prefix)) continue;
                // the default prefix also matches sweep ids; filter those out
                if (prefix == "cleaned_" && r.model_id.find("cleaned_g") == 0) continue;
                mems.push_back(r.memorization_strength);
            }
            if (!mems.empty()) {
                s.x.push_back(g);
                s.y.push_back(stats_of(mems).mean);
            }
        }
        bundle.series.push_back(std::move(s));
    }
    // first coated/clean loss traces
    for (const std::string& name : {std::string("coated_0"), std::string("clean_0")}) {
        fs::path trace = ctx.train_dir() / (name + "_trace.tsv");
        if (!fs::exists(trace)) continue;
        metrics::Series s;
        s.name = "loss_" + name;
        auto lines = read_lines(trace.string());
        for (size_t i = 1; i < lines.size(); ++i) {
            double e, l;
            if (std::sscanf(lines[i].c_str(), "%lf\t%lf", &e, &l) == 2) {
                s.x.push_back(e);
                s.y.push_back(l);
            }
        }
        bundle.series.push_back(std::move(s));
    }

    auto add_records = [&](const fs::path& p, const char* type) {
        if (!fs::exists(p)) return;
        for (const auto& line : read_lines(p.string())) {
            json j = json::parse(line);
            j["record_type"] = type;
            bundle.record_lines.push_back(j.dump());
        }
    };
    add_records(ctx.detect_dir() / "reports.jsonl", "detection_baseline");
    add_records(ctx.transform_dir() / "reports.jsonl", "detection_transform");
    add_records(ctx.eval_dir() / "reports_rattan.jsonl", "detection_rattan");
    add_records(ctx.eval_dir() / "fid.jsonl", "fid");
    add_records(ctx.rattan_dir() / "provenance.jsonl", "rattan_provenance");

    metrics::emit_report(bundle, ctx.report_dir().string());
}

}  // namespace

RunRecord run_experiment(const ExperimentConfig& cfg, const std::string& out_root) {
    Ctx ctx;
    ctx.cfg = cfg;
    ctx.chash = cfg.hash();
    RunRecord rec;
    rec.run_id = cfg.name + "-" + hex64(ctx.chash).substr(0, 12);
    ctx.run = fs::path(out_root) / rec.run_id;
    rec.run_dir = ctx.run.string();
    rec.config_hash = hex64(ctx.chash);
    fs::create_directories(ctx.run);
    write_text_atomic((ctx.run / "config.json").string(), cfg.to_json() + "\n");

    using StageFn = void (*)(Ctx&);
    const std::pair<const char*, StageFn> stages[] = {
        {"forge", stage_forge},     {"coat", stage_coat},       {"train", stage_train},
        {"detect", stage_detect},   {"transform", stage_transform}, {"rattan", stage_rattan},
        {"evaluate", stage_evaluate}, {"report", stage_report},
    };

    for (const auto& [name, fn] : stages) {
        if (stage_done(rec.run_dir, name, ctx.chash)) {
            rec.completed_stages.push_back(name);
            log_event(ctx, std::string("stage ") + name + " already complete, skipping");
            continue;
        }
        auto t0 = std::chrono::steady_clock::now();
        try {
            fn(ctx);
        } catch (const std::exception& e) {
            rec.failed_stage = name;
            log_event(ctx, std::string("stage ") + name + " FAILED: " + e.what());
            json j{{"run_id", rec.run_id},
                   {"config_hash", rec.config_hash},
                   {"failed_stage", rec.failed_stage},
                   {"completed", rec.completed_stages}};
            write_text_atomic((ctx.run / "run_record.json").string(), j.dump(2) + "\n");
            throw;
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rec.stage_seconds[name] = secs;
        mark_stage_done(rec.run_dir, name, ctx.chash);
        rec.completed_stages.push_back(name);
        log_event(ctx, std::string("stage ") + name + " done in " + std::to_string(secs) + "s");
    }

    json j{{"run_id", rec.run_id},
           {"config_hash", rec.config_hash},
           {"completed", rec.completed_stages},
           {"stage_seconds", rec.stage_seconds}};
    write_text_atomic((ctx.run / "run_record.json").string(), j.dump(2) + "\n");
    return rec;
}

}  // namespace coatbench::harness
