// dram: phantom | preprocess | train | predict | evaluate
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "dram/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dram;

namespace {

constexpr int kSchemaVersion = 1;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw UsageError("cannot open config " + p.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw UsageError(p.string() + ": " + e.what());
    }
}

void emit_config(json cfg, const fs::path& dir, const std::string& command, int threads) {
    cfg["schema_version"] = kSchemaVersion;
    cfg["command"] = command;
    cfg["threads"] = {{"requested", threads}, {"used", 1}};
    fs::create_directories(dir);
    std::ofstream(dir / (command + "_config.json")) << cfg.dump(2) << '\n';
    std::cout << cfg.dump(2) << std::endl;
}

std::optional<Split> parse_split_opt(const std::string& s) {
    if (s.empty() || s == "all") return std::nullopt;
    return parse_split(s);
}

std::vector<ManifestRow> select_rows(const Manifest& m, std::optional<Split> split) {
    std::vector<ManifestRow> out;
    for (const auto& r : m.rows)
        if (!split || r.split == *split) out.push_back(r);
    return out;
}

void log(const std::string& s) { std::cerr << s << std::endl; }

// --- phantom -------------------------------------------------------------

struct PhantomArgs {
    int n = 0;
    std::string out, spec;
    std::uint64_t seed = 0;
};

int run_phantom(const PhantomArgs& a, int threads) {
    DatasetSpec ds;
    if (!a.spec.empty()) {
        try {
            ds = read_json(a.spec).get<DatasetSpec>();
        } catch (const json::exception& e) {
            throw UsageError(a.spec + ": " + e.what());
        }
    }
    ds.seed = a.seed;
    const auto rep = generate_dataset(a.n, ds, a.out);
    emit_config({{"n", a.n}, {"out", a.out}, {"dataset", ds}}, a.out, "phantom", threads);
    log("wrote " + std::to_string(rep.cases.size()) + " cases to " + a.out);
    return 0;
}

// --- preprocess ----------------------------------------------------------

struct PreprocessArgs {
    std::string manifest, out, extents = "32,56,72";
};

int run_preprocess(const PreprocessArgs& a, int threads) {
    Dims3 e;
    try {
        e = parse_extents(a.extents);
    } catch (const std::invalid_argument& x) {
        throw UsageError(x.what());
    }
    const auto s = preprocess_manifest(a.manifest, a.out, e, log);
    const auto summary = to_json(s, e);
    std::ofstream(fs::path(a.out) / "preprocess_summary.json") << summary.dump(2) << '\n';
    emit_config({{"manifest", a.manifest}, {"out", a.out}, {"extents", e}, {"summary", summary}}, a.out, "preprocess",
                threads);
    return 0;
}

// --- train ---------------------------------------------------------------

struct TrainArgs {
    std::string manifest, out, config, head, backbone, precision = "float";
    std::optional<int> base_channels, epochs, patience;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
    bool no_augment = false;
};

template <typename T>
FitResult train_with(const ModelConfig& mc, const TrainConfig& tc, const std::vector<LabeledCase>& tr,
                     const std::vector<LabeledCase>& va, const fs::path& out) {
    Model<T> m(mc);
    FitHooks h;
    h.on_epoch = [](const EpochRecord& r) {
        char buf[200];
        std::snprintf(buf, sizeof buf, "epoch %d lr %.3g loss %.5f val %.4f%s (%.1fs)", r.epoch, r.lr, r.total,
                      r.val_metric, r.improved ? " *" : "", r.seconds);
        log(buf);
    };
    return fit(m, tr, va, tc, out, h);
}

int run_train(const TrainArgs& a, int threads) {
    json file = a.config.empty() ? json::object() : read_json(a.config);
    ModelConfig mc;
    TrainConfig tc;
    try {
        if (file.contains("model")) mc = file["model"].get<ModelConfig>();
        if (file.contains("train")) tc = file["train"].get<TrainConfig>();
    } catch (const std::exception& e) {
        throw UsageError(a.config + ": " + e.what());
    }
    try {
        if (!a.head.empty()) mc.head = parse_head(a.head);
        if (!a.backbone.empty()) mc.backbone = parse_backbone(a.backbone);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (a.base_channels) mc.base_channels = *a.base_channels;
    if (a.seed) mc.seed = tc.seed = *a.seed;
    if (a.epochs) tc.max_epochs = *a.epochs;
    if (a.patience) tc.patience = *a.patience;
    if (a.lr) tc.initial_lr = *a.lr;
    if (a.no_augment) tc.augment = AugmentConfig::none();
    tc.head = mc.head;

    const auto manifest = read_manifest(a.manifest);
    const auto train = load_cases(manifest, Split::train);
    const auto valid = load_cases(manifest, Split::valid);
    if (train.empty() || valid.empty()) throw std::runtime_error("manifest needs nonempty train and valid splits");
    mc.input_extents = train.front().data->extents();
    try {
        mc.validate();
        tc.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    emit_config({{"manifest", a.manifest},
                 {"out", a.out},
                 {"precision", a.precision},
                 {"model", mc},
                 {"train", tc},
                 {"cases", {{"train", train.size()}, {"valid", valid.size()}}}},
                a.out, "train", threads);
    const auto r = a.precision == "double" ? train_with<double>(mc, tc, train, valid, a.out)
                                           : train_with<float>(mc, tc, train, valid, a.out);
    log("best epoch " + std::to_string(r.best_epoch) + " metric " + format_double(r.best_metric) + "; " +
        std::to_string(r.epochs_run) + " epochs run");
    return 0;
}

// --- predict -------------------------------------------------------------

struct PredictArgs {
    std::string checkpoint, manifest, out, export_maps, split = "all";
};

int run_predict(const PredictArgs& a, int threads) {
    const auto split = parse_split_opt(a.split);
    auto model = load_checkpoint<double>(a.checkpoint);
    const auto cases = load_cases(read_manifest(a.manifest), split);
    if (cases.empty()) throw std::runtime_error("no cases selected");
    if (cases.front().data->extents() != model.config().input_extents)
        throw std::runtime_error("case extents differ from the checkpoint's input extents");
    std::vector<std::vector<RealField>> maps;
    const auto preds = predict(model, cases, 4, a.export_maps.empty() ? nullptr : &maps);
    const fs::path out(a.out);
    write_predictions_csv(preds, out);
    if (!a.export_maps.empty())
        for (std::size_t i = 0; i < preds.size(); ++i) export_case_maps(preds[i].id, preds[i].head, maps[i], a.export_maps);
    emit_config({{"checkpoint", a.checkpoint},
                 {"manifest", a.manifest},
                 {"out", a.out},
                 {"split", a.split},
                 {"export_maps", a.export_maps},
                 {"model", model.config()}},
                out.has_parent_path() ? out.parent_path() : fs::path("."), "predict", threads);
    return 0;
}

// --- evaluate ------------------------------------------------------------

struct EvaluateArgs {
    std::string pred, manifest, out, truth, split = "eval";
    std::vector<std::string> from_matrix;
    int bootstrap = 0;
    std::uint64_t seed = 0;
};

int run_evaluate(const EvaluateArgs& a, int threads) {
    json report;
    const fs::path out(a.out);
    if (!a.from_matrix.empty()) {
        if (!a.pred.empty()) throw UsageError("--from-matrix and --pred are exclusive");
        report = json::array();
        for (const auto& path : a.from_matrix) {
            SubtypeReport r{fs::path(path).stem().string(), read_confusion_csv(path), std::nullopt};
            if (a.bootstrap > 0) {
                std::vector<int> p, v;
                r.matrix.to_pairs(p, v);
                r.ci = kappa_ci(p, v, r.matrix.k(), {0.95, a.bootstrap, a.seed});
            }
            report.push_back(metrics_json(r));
        }
    } else {
        if (a.pred.empty() || a.manifest.empty()) throw UsageError("evaluate needs --pred and --manifest, or --from-matrix");
        const auto rows = select_rows(read_manifest(a.manifest, false), parse_split_opt(a.split));
        std::map<std::string, PhantomTruth> truth;
        EvaluateOptions opt;
        opt.bootstrap = a.bootstrap;
        opt.seed = a.seed;
        if (!a.truth.empty()) {
            truth = read_truth(a.truth);
            opt.truth = &truth;
        }
        report = to_json(evaluate(read_predictions_csv(a.pred), rows, opt));
    }
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::ofstream(out) << report.dump(2) << '\n';
    emit_config({{"pred", a.pred},
                 {"manifest", a.manifest},
                 {"split", a.split},
                 {"truth", a.truth},
                 {"from_matrix", a.from_matrix},
                 {"bootstrap", a.bootstrap},
                 {"seed", a.seed},
                 {"out", a.out}},
                out.has_parent_path() ? out.parent_path() : fs::path("."), "evaluate", threads);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Emphysema subtype scoring: phantoms, preprocessing, training, prediction, evaluation"};
    app.require_subcommand(1);

    PhantomArgs pa;
    auto* ph = app.add_subcommand("phantom", "generate a synthetic phantom dataset");
    ph->add_option("--n", pa.n, "number of cases")->required()->check(CLI::PositiveNumber);
    ph->add_option("--out", pa.out, "output directory")->required();
    ph->add_option("--seed", pa.seed, "master seed");
    ph->add_option("--spec", pa.spec, "dataset spec JSON")->check(CLI::ExistingFile);

    PreprocessArgs pp;
    auto* pr = app.add_subcommand("preprocess", "clamp, crop, resize and mask a raw manifest");
    pr->add_option("--manifest", pp.manifest, "raw manifest CSV")->required()->check(CLI::ExistingFile);
    pr->add_option("--out", pp.out, "output directory")->required();
    pr->add_option("--extents", pp.extents, "D,H,W network input extents")->capture_default_str();

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "train one network");
    tr->add_option("--manifest", ta.manifest, "preprocessed manifest CSV")->required()->check(CLI::ExistingFile);
    tr->add_option("--out", ta.out, "output directory")->required();
    tr->add_option("--config", ta.config, "JSON with optional 'model' and 'train' sections")->check(CLI::ExistingFile);
    tr->add_option("--head", ta.head, "cls | reg")->check(CLI::IsMember({"cls", "reg", "classification", "regression"}));
    tr->add_option("--backbone", ta.backbone, "rn18 | rn34 | rn50")->check(CLI::IsMember({"rn18", "rn34", "rn50"}));
    tr->add_option("--base-channels", ta.base_channels, "stem width");
    tr->add_option("--epochs", ta.epochs, "maximum epochs");
    tr->add_option("--patience", ta.patience, "early-stopping patience");
    tr->add_option("--lr", ta.lr, "initial learning rate");
    tr->add_option("--seed", ta.seed, "seed for init, shuffling and augmentation");
    tr->add_option("--precision", ta.precision, "float | double")->check(CLI::IsMember({"float", "double"}))->capture_default_str();
    tr->add_flag("--no-augment", ta.no_augment, "disable augmentation");

    PredictArgs pd;
    auto* pe = app.add_subcommand("predict", "score cases with a checkpoint");
    pe->add_option("--checkpoint", pd.checkpoint, "checkpoint stem (x for x.json/x.bin)")->required();
    pe->add_option("--manifest", pd.manifest, "preprocessed manifest CSV")->required()->check(CLI::ExistingFile);
    pe->add_option("--out", pd.out, "predictions CSV")->required();
    pe->add_option("--export-maps", pd.export_maps, "directory for dense maps and PGM montages");
    pe->add_option("--split", pd.split, "train | valid | eval | all")->check(CLI::IsMember({"train", "valid", "eval", "all"}))->capture_default_str();

    EvaluateArgs ea;
    auto* ev = app.add_subcommand("evaluate", "agreement metrics report");
    ev->add_option("--pred", ea.pred, "predictions CSV")->check(CLI::ExistingFile);
    ev->add_option("--manifest", ea.manifest, "manifest with visual scores")->check(CLI::ExistingFile);
    ev->add_option("--out", ea.out, "metrics JSON")->required();
    ev->add_option("--split", ea.split, "train | valid | eval | all")->check(CLI::IsMember({"train", "valid", "eval", "all"}))->capture_default_str();
    ev->add_option("--truth", ea.truth, "phantom truth.csv for percentage errors")->check(CLI::ExistingFile);
    ev->add_option("--from-matrix", ea.from_matrix, "confusion matrix CSV (rows predicted); repeatable")->check(CLI::ExistingFile);
    ev->add_option("--bootstrap", ea.bootstrap, "bootstrap resamples for the kappa CI")->check(CLI::NonNegativeNumber);
    ev->add_option("--seed", ea.seed, "bootstrap seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        int threads = 1;
        try {
            threads = requested_threads();
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        if (*ph) return run_phantom(pa, threads);
        if (*pr) return run_preprocess(pp, threads);
        if (*tr) return run_train(ta, threads);
        if (*pe) return run_predict(pd, threads);
        if (*ev) return run_evaluate(ea, threads);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 2;
}
