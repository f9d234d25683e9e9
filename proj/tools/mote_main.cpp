// Command-line front end: synthetic dataset generation, protocol runs,
// sweeps over ablation/gamma/adapter-limit, and report generation over
// metrics directories.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mote/dataset.hpp"
#include "mote/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    auto parse_one = [](const std::string& s) {
        std::size_t used = 0;
        std::uint64_t v = std::stoull(s, &used);
        if (used != s.size()) throw mote::ValidationError("bad seed '" + s + "'");
        return v;
    };
    std::size_t dash = text.find('-');
    if (dash != std::string::npos && dash > 0) {
        std::uint64_t lo = parse_one(text.substr(0, dash));
        std::uint64_t hi = parse_one(text.substr(dash + 1));
        if (hi < lo) throw mote::ValidationError("seed range " + text + " is reversed");
        for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
        return seeds;
    }
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t comma = text.find(',', pos);
        std::string piece = text.substr(pos, comma == std::string::npos ? comma : comma - pos);
        if (piece.empty()) throw mote::ValidationError("empty seed in '" + text + "'");
        seeds.push_back(parse_one(piece));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (seeds.empty()) throw mote::ValidationError("no seeds given");
    return seeds;
}

std::size_t parse_limit(const std::string& text) {
    if (text == "unlimited") return mote::kUnlimitedAdapters;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(text, &used);
    } catch (const std::exception&) {
        throw mote::ValidationError("adapter limit must be a positive integer or 'unlimited'");
    }
    if (used != text.size() || v == 0)
        throw mote::ValidationError("adapter limit must be a positive integer or 'unlimited'");
    return static_cast<std::size_t>(v);
}

mote::MergeWeighting parse_merge(const std::string& text) {
    if (text == "clamped") return mote::MergeWeighting::ClampedNormalized;
    if (text == "softmax") return mote::MergeWeighting::Softmax;
    if (text == "raw") return mote::MergeWeighting::Raw;
    throw mote::ValidationError("merge weighting must be clamped, softmax or raw");
}

bool parse_onoff(const std::string& text, const char* what) {
    if (text == "on") return true;
    if (text == "off") return false;
    throw mote::ValidationError(std::string(what) + " must be 'on' or 'off'");
}

// Everything cmd_run and cmd_sweep share. String fields keep "not passed"
// distinguishable so manifest values and defaults fill the gaps.
struct RunFlags {
    std::string manifest;
    std::string seeds;
    int ablation = 0;  // 0 = not requested
    std::string filtering, confidence, scs;
    std::string gamma = "adaptive";
    std::string limit = "unlimited";
    std::string mode = "par";
    std::size_t bottleneck = 16;
    double lr0 = 0.01;
    double weight_decay = 0.005;
    std::size_t epochs = 20;
    std::size_t batch_size = 48;
    double momentum = 0.9;
    std::string merge_weighting = "clamped";
    std::string diagnostics;
    bool save_experts = false;
    std::string outdir = ".";
};

void add_run_options(CLI::App* sub, RunFlags& f) {
    sub->add_option("--manifest", f.manifest, "protocol manifest JSON")->required();
    sub->add_option("--seeds", f.seeds, "comma list (1991,1992) or range (1991-1995); default: manifest seed");
    sub->add_option("--ablation", f.ablation, "preset 1..5 for the inference flags")
        ->check(CLI::Range(1, 5));
    sub->add_option("--filtering", f.filtering, "on/off, overrides the preset");
    sub->add_option("--confidence", f.confidence, "on/off, overrides the preset");
    sub->add_option("--scs", f.scs, "on/off, overrides the preset");
    sub->add_option("--gamma", f.gamma, "'adaptive' or a fixed value, e.g. 0.5");
    sub->add_option("--limit", f.limit, "adapter budget M, or 'unlimited'");
    sub->add_option("--mode", f.mode, "adapter mode: seq or par");
    sub->add_option("--bottleneck", f.bottleneck, "adapter bottleneck width r");
    sub->add_option("--lr", f.lr0, "initial learning rate");
    sub->add_option("--wd", f.weight_decay, "weight decay");
    sub->add_option("--epochs", f.epochs, "training epochs per task");
    sub->add_option("--batch", f.batch_size, "batch size");
    sub->add_option("--momentum", f.momentum, "SGD momentum");
    sub->add_option("--merge-weighting", f.merge_weighting,
                    "overflow merge weights: clamped, softmax or raw");
    sub->add_option("--diagnostics", f.diagnostics, "per-sample JSONL path (final stage)");
    sub->add_flag("--save-experts", f.save_experts, "write expert checkpoints per seed");
    sub->add_option("--outdir", f.outdir, "output directory");
}

struct ResolvedRun {
    mote::ProtocolManifest manifest;
    std::vector<mote::EmbeddingDataset> datasets;
    std::vector<std::uint64_t> seeds;
    mote::TrainConfig train;
    mote::InferenceConfig infer;
    mote::HarnessOptions opts;
};

ResolvedRun resolve(const RunFlags& f) {
    ResolvedRun r;
    r.manifest = mote::load_manifest(f.manifest);
    for (const std::string& path : r.manifest.dataset_paths)
        r.datasets.push_back(mote::read_embeddings(path));
    r.seeds = f.seeds.empty() ? std::vector<std::uint64_t>{r.manifest.seed}
                              : parse_seeds(f.seeds);

    r.train.lr0 = f.lr0;
    r.train.weight_decay = f.weight_decay;
    r.train.epochs = f.epochs;
    r.train.batch_size = f.batch_size;
    r.train.momentum = f.momentum;

    r.infer = f.ablation != 0 ? mote::InferenceConfig::ablation(f.ablation)
                              : mote::InferenceConfig{};
    if (!f.filtering.empty()) r.infer.filtering = parse_onoff(f.filtering, "--filtering");
    if (!f.confidence.empty())
        r.infer.confidence_reweight = parse_onoff(f.confidence, "--confidence");
    if (!f.scs.empty()) r.infer.scs_reweight = parse_onoff(f.scs, "--scs");
    if (f.gamma == "adaptive") {
        r.infer.gamma_mode = mote::GammaMode::Adaptive;
    } else {
        r.infer.gamma_mode = mote::GammaMode::Fixed;
        try {
            std::size_t used = 0;
            r.infer.gamma = std::stod(f.gamma, &used);
            if (used != f.gamma.size()) throw std::invalid_argument(f.gamma);
        } catch (const std::exception&) {
            throw mote::ValidationError("--gamma must be 'adaptive' or a number");
        }
    }

    r.opts.adapter_limit = parse_limit(f.limit);
    r.opts.bottleneck = f.bottleneck;
    if (f.mode == "seq") {
        r.opts.mode = mote::AdapterMode::Seq;
    } else if (f.mode == "par") {
        r.opts.mode = mote::AdapterMode::Par;
    } else {
        throw mote::ValidationError("--mode must be seq or par");
    }
    r.opts.merge_weighting = parse_merge(f.merge_weighting);
    r.opts.diagnostics_path = f.diagnostics;
    return r;
}

struct SeedResult {
    std::uint64_t seed = 0;
    double avg = 0.0;
    double af = 0.0;
    double tia = 0.0;
    double last_union = 0.0;
    double last_task = 0.0;
};

SeedResult run_one_seed(const ResolvedRun& r, std::uint64_t seed, const std::string& outdir,
                        bool save_experts) {
    mote::Protocol protocol;
    protocol.base_classes = r.manifest.base_classes;
    protocol.increment = r.manifest.increment;
    protocol.seed = seed;

    mote::RunOutput out = r.datasets.size() == 1
                              ? mote::run_protocol(r.datasets[0], protocol, r.train, r.infer, r.opts)
                              : mote::run_protocol(r.datasets, protocol, r.train, r.infer, r.opts);

    // Fold the protocol description into the config snapshot for audit.
    json cfg = json::parse(out.metrics.config_json);
    cfg["protocol"] = {{"name", r.manifest.name},
                       {"base", r.manifest.base_classes},
                       {"increment", r.manifest.increment},
                       {"datasets", r.manifest.dataset_paths}};
    out.metrics.config_json = cfg.dump();

    std::string stem = outdir + "/metrics_" + std::to_string(seed);
    mote::write_metrics_json(stem + ".json", out.metrics, out.memory);
    mote::write_stage_csv(stem + ".csv", out.metrics);
    mote::save_pool(out.state.pool, outdir + "/pool_" + std::to_string(seed) + ".motp");
    if (save_experts)
        for (const mote::AdapterExpert& e : out.state.experts)
            mote::save_expert(e, outdir + "/expert_" + std::to_string(seed) + "_" +
                                     std::to_string(e.task_id) + ".motx");

    SeedResult res;
    res.seed = seed;
    res.avg = out.metrics.final_avg;
    res.af = out.metrics.af_final;
    res.tia = out.metrics.tia_curve.back();
    res.last_union = out.metrics.last_union;
    res.last_task = out.metrics.last_task;
    return res;
}

double mean_of(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

double std_of(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    double m = mean_of(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(xs.size()));
}

int cmd_run(const RunFlags& flags) {
    ResolvedRun r = resolve(flags);
    fs::create_directories(flags.outdir);

    std::vector<SeedResult> results;
    for (std::uint64_t seed : r.seeds)
        results.push_back(run_one_seed(r, seed, flags.outdir, flags.save_experts));

    json agg;
    agg["name"] = r.manifest.name;
    agg["seeds"] = r.seeds;
    auto collect = [&](auto getter) {
        std::vector<double> xs;
        for (const SeedResult& res : results) xs.push_back(getter(res));
        return xs;
    };
    std::map<std::string, std::vector<double>> columns = {
        {"avg", collect([](const SeedResult& s) { return s.avg; })},
        {"af", collect([](const SeedResult& s) { return s.af; })},
        {"tia", collect([](const SeedResult& s) { return s.tia; })},
        {"last_union", collect([](const SeedResult& s) { return s.last_union; })},
        {"last_task", collect([](const SeedResult& s) { return s.last_task; })},
    };
    for (const auto& [key, xs] : columns) {
        agg["mean"][key] = mean_of(xs);
        agg["std"][key] = std_of(xs);
    }
    for (const SeedResult& res : results)
        agg["per_seed"][std::to_string(res.seed)] = {{"avg", res.avg},
                                                     {"af", res.af},
                                                     {"tia", res.tia},
                                                     {"last_union", res.last_union},
                                                     {"last_task", res.last_task}};
    std::ofstream f(flags.outdir + "/aggregate.json", std::ios::trunc);
    if (!f) throw mote::IoError("cannot open " + flags.outdir + "/aggregate.json");
    f << agg.dump(2) << "\n";

    std::printf("%zu seed(s): mean Avg %.4f, AF %.4f, TIA %.4f, Last %.4f\n", r.seeds.size(),
                agg["mean"]["avg"].get<double>(), agg["mean"]["af"].get<double>(),
                agg["mean"]["tia"].get<double>(), agg["mean"]["last_union"].get<double>());
    return 0;
}

int cmd_sweep(const RunFlags& flags, const std::string& dimension,
              const std::vector<std::string>& values) {
    if (values.empty()) throw mote::ValidationError("sweep: empty value list");
    if (dimension != "ablation" && dimension != "gamma" && dimension != "limit")
        throw mote::ValidationError("sweep: unknown dimension '" + dimension +
                                    "' (expected ablation, gamma or limit)");
    ResolvedRun base = resolve(flags);
    fs::create_directories(flags.outdir);

    std::string csv_path = flags.outdir + "/sweep_" + dimension + ".csv";
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw mote::IoError("cannot open " + csv_path);
    csv << "value,seed,avg,af,tia,last,mean_avg\n";

    char buf[256];
    for (const std::string& value : values) {
        ResolvedRun r = base;
        if (dimension == "ablation") {
            int tag = 0;
            try {
                tag = std::stoi(value);
            } catch (const std::exception&) {
                throw mote::ValidationError("sweep: bad ablation value '" + value + "'");
            }
            r.infer = mote::InferenceConfig::ablation(tag);
        } else if (dimension == "gamma") {
            if (value == "adaptive") {
                r.infer.gamma_mode = mote::GammaMode::Adaptive;
            } else {
                r.infer.gamma_mode = mote::GammaMode::Fixed;
                try {
                    r.infer.gamma = std::stod(value);
                } catch (const std::exception&) {
                    throw mote::ValidationError("sweep: bad gamma value '" + value + "'");
                }
            }
        } else {
            r.opts.adapter_limit = parse_limit(value);
        }

        std::vector<SeedResult> results;
        std::string subdir = flags.outdir + "/" + dimension + "_" + value;
        fs::create_directories(subdir);
        for (std::uint64_t seed : r.seeds)
            results.push_back(run_one_seed(r, seed, subdir, false));
        std::vector<double> avgs;
        for (const SeedResult& res : results) avgs.push_back(res.avg);
        double mean_avg = mean_of(avgs);
        for (const SeedResult& res : results) {
            std::snprintf(buf, sizeof(buf), "%s,%llu,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                          value.c_str(), static_cast<unsigned long long>(res.seed), res.avg,
                          res.af, res.tia, res.last_union, mean_avg);
            csv << buf;
        }
    }
    if (!csv) throw mote::IoError("write failed for " + csv_path);
    std::printf("wrote %s\n", csv_path.c_str());
    return 0;
}

struct ReportRow {
    std::string file;
    std::uint64_t seed = 0;
    std::size_t stages = 0;
    double avg = 0.0, af = 0.0, tia = 0.0, last = 0.0;
    std::vector<double> avg_curve, af_curve, tia_curve, last_curve;
};

int cmd_report(const std::string& dir) {
    if (!fs::is_directory(dir)) throw mote::IoError("report: " + dir + " is not a directory");
    std::vector<fs::path> candidates;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".json")
            candidates.push_back(entry.path());
    std::sort(candidates.begin(), candidates.end());

    std::vector<ReportRow> rows;
    for (const fs::path& p : candidates) {
        std::ifstream f(p);
        json j;
        try {
            j = json::parse(f);
            ReportRow row;
            row.file = p.filename().string();
            row.seed = j.at("seed").get<std::uint64_t>();
            row.stages = j.at("stages").get<std::size_t>();
            row.avg = j.at("final_avg").get<double>();
            row.af = j.at("af_final").get<double>();
            row.tia = j.at("tia_curve").back().get<double>();
            row.last = j.at("last_union").get<double>();
            row.avg_curve = j.at("avg_curve").get<std::vector<double>>();
            row.af_curve = j.at("af_curve").get<std::vector<double>>();
            row.tia_curve = j.at("tia_curve").get<std::vector<double>>();
            row.last_curve = j.at("weighted_curve").get<std::vector<double>>();
            rows.push_back(std::move(row));
        } catch (const json::exception&) {
            std::fprintf(stderr, "warning: skipping %s (not a metrics file)\n",
                         p.string().c_str());
        }
    }
    if (rows.empty()) throw mote::ValidationError("report: no metrics files in " + dir);

    std::printf("%-24s %8s %6s %8s %8s %8s %8s\n", "file", "seed", "stages", "Avg", "AF", "TIA",
                "Last");
    for (const ReportRow& r : rows)
        std::printf("%-24s %8llu %6zu %8.2f %8.2f %8.2f %8.2f\n", r.file.c_str(),
                    static_cast<unsigned long long>(r.seed), r.stages, 100.0 * r.avg,
                    100.0 * r.af, 100.0 * r.tia, 100.0 * r.last);
    if (rows.size() > 1) {
        auto column = [&](auto getter) {
            std::vector<double> xs;
            for (const ReportRow& r : rows) xs.push_back(getter(r));
            return xs;
        };
        std::vector<double> avgs = column([](const ReportRow& r) { return r.avg; });
        std::vector<double> afs = column([](const ReportRow& r) { return r.af; });
        std::vector<double> tias = column([](const ReportRow& r) { return r.tia; });
        std::vector<double> lasts = column([](const ReportRow& r) { return r.last; });
        std::printf("%-24s %8s %6s %5.2f" "±" "%.2f %5.2f" "±" "%.2f %5.2f" "±"
                    "%.2f %5.2f" "±" "%.2f\n",
                    "mean", "", "", 100.0 * mean_of(avgs), 100.0 * std_of(avgs),
                    100.0 * mean_of(afs), 100.0 * std_of(afs), 100.0 * mean_of(tias),
                    100.0 * std_of(tias), 100.0 * mean_of(lasts), 100.0 * std_of(lasts));
    }

    std::string curves_path = dir + "/curves.csv";
    std::ofstream curves(curves_path, std::ios::trunc);
    if (!curves) throw mote::IoError("cannot open " + curves_path);
    curves << "file,stage,avg,af,tia,last\n";
    char buf[256];
    for (const ReportRow& r : rows)
        for (std::size_t t = 0; t < r.avg_curve.size(); ++t) {
            std::snprintf(buf, sizeof(buf), "%s,%zu,%.17g,%.17g,%.17g,%.17g\n", r.file.c_str(),
                          t + 1, r.avg_curve[t], r.af_curve[t], r.tia_curve[t], r.last_curve[t]);
            curves << buf;
        }
    if (!curves) throw mote::IoError("write failed for " + curves_path);
    std::printf("wrote %s\n", curves_path.c_str());
    return 0;
}

const char* error_class_name(mote::ErrorClass cls) {
    switch (cls) {
        case mote::ErrorClass::Validation: return "validation";
        case mote::ErrorClass::Io: return "io";
        case mote::ErrorClass::Internal: return "internal";
    }
    return "internal";
}

void print_error_json(const char* cls, const std::string& message) {
    json j;
    j["error"] = {{"class", cls}, {"message", message}};
    std::fprintf(stderr, "%s\n", j.dump().c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prototype-based class-incremental learning over frozen embeddings"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic embedding dataset");
    mote::SyntheticSpec spec;
    std::string synth_out;
    synth->add_option("--classes", spec.n_classes, "number of classes")->required();
    synth->add_option("--dim", spec.dim, "feature dimension")->required();
    synth->add_option("--per-class", spec.samples_per_class, "samples per class")->required();
    synth->add_option("--rho", spec.cluster_radius, "class-mean sphere radius")->required();
    synth->add_option("--sigma", spec.noise_sigma, "within-class noise std")->required();
    synth->add_option("--drift", spec.task_drift, "per-class mean drift");
    synth->add_option("--seed", spec.seed, "generator seed")->required();
    synth->add_option("-o,--out", synth_out, "output embedding file")->required();

    // run
    auto* run = app.add_subcommand("run", "execute a protocol over one or more seeds");
    RunFlags run_flags;
    add_run_options(run, run_flags);

    // sweep
    auto* sweep = app.add_subcommand("sweep", "run a protocol across a config dimension");
    RunFlags sweep_flags;
    std::string sweep_dimension;
    std::vector<std::string> sweep_values;
    sweep->add_option("--dimension", sweep_dimension, "ablation, gamma or limit")->required();
    sweep->add_option("--values", sweep_values, "values to sweep")->required()->delimiter(',');
    add_run_options(sweep, sweep_flags);

    // report
    auto* report = app.add_subcommand("report", "summarize a directory of metrics files");
    std::string report_dir;
    report->add_option("--dir", report_dir, "directory with metrics JSON files")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand(synth)) {
            mote::EmbeddingDataset ds = mote::generate_synthetic(spec);
            mote::write_embeddings(ds, synth_out);
            std::printf("wrote %s: %zu samples, %zu classes, dim %zu\n", synth_out.c_str(),
                        ds.samples.size(), ds.class_ids.size(), ds.dim);
            return 0;
        }
        if (app.got_subcommand(run)) return cmd_run(run_flags);
        if (app.got_subcommand(sweep)) return cmd_sweep(sweep_flags, sweep_dimension, sweep_values);
        if (app.got_subcommand(report)) return cmd_report(report_dir);
        throw mote::InternalError("no subcommand dispatched");
    } catch (const mote::Error& e) {
        print_error_json(error_class_name(e.error_class()), e.what());
        return static_cast<int>(e.error_class());
    } catch (const std::exception& e) {
        print_error_json("internal", e.what());
        return 4;
    }
}
