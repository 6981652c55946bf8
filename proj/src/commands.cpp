#include "gap/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gap/checkpoint.hpp"
#include "gap/errors.hpp"
#include "gap/pipeline.hpp"
#include "gap/synthetic.hpp"

namespace gap::cli {

namespace fs = std::filesystem;

RunConfig resolve_config(const CommandOptions& options) {
    if (options.config.empty()) throw ConfigError("--config is required");
    auto config = load_run_config(options.config);
    if (options.seed) config.seed = *options.seed;
    if (options.ablation) apply_ablation(config.model, *options.ablation);
    config.validate();
    return config;
}

namespace {

model::Checkpoint require_checkpoint(const CommandOptions& options) {
    if (!options.checkpoint) throw ConfigError("--checkpoint is required");
    return model::load_checkpoint(*options.checkpoint);
}

io::TextEmbeddings load_text(const RunConfig& config, std::size_t dim, bool unseen_only) {
    if (config.data.text_embeddings.empty()) throw ConfigError("config: data.text_embeddings is required");
    auto text = io::read_text_embeddings(config.data.text_embeddings);
    if (text.dim != dim) {
        throw ConfigError("text embedding width " + std::to_string(text.dim) + " does not match model width " +
                          std::to_string(dim));
    }
    if (unseen_only) text = text.subset(io::read_split(config.data.split).unseen);
    return text;
}

std::map<std::string, double> durations_of(const std::vector<io::AnnotationSet>& sets) {
    std::map<std::string, double> out;
    for (const auto& s : sets) out[s.video_id] = s.duration_seconds;
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

}  // namespace

int cmd_train(const CommandOptions& options, std::ostream& out) {
    const auto config = resolve_config(options);
    auto train = load_samples(config, io::Phase::train, config.model.dim);
    std::vector<VideoSample> validation;
    hold_out(train, validation, config.data.validation_fraction, config.seed);

    fs::create_directories(options.out);
    save_run_config(config, options.out / "run_config.json");
    std::ofstream log(options.out / "train_log.jsonl");
    if (!log) throw std::runtime_error("cannot write " + (options.out / "train_log.jsonl").string());

    const auto result = train_model(config, train, validation, {&log, options.out});
    out << "trained " << result.epochs.size() << " epochs on " << train.size() << " videos ("
        << validation.size() << " held out); best epoch " << result.best_epoch << '\n';
    if (!result.epochs.empty()) {
        out << "loss " << result.epochs.front().loss << " -> " << result.epochs.back().loss << '\n';
    }
    out << "checkpoints: " << (options.out / "checkpoint_best.gapf").string() << ", "
        << (options.out / "checkpoint_last.gapf").string() << '\n';
    return 0;
}

int cmd_eval(const CommandOptions& options, std::ostream& out) {
    const auto config = resolve_config(options);
    if (config.data.annotations.empty() || config.data.split.empty()) {
        throw ConfigError("config: data.annotations and data.split are required for eval");
    }
    const auto split = io::read_split(config.data.split);
    const auto annotations = io::read_annotations(config.data.annotations, split, io::Phase::test);
    const auto durations = durations_of(annotations);

    zeroshot::DetectionMap detections;
    fs::create_directories(options.out);
    if (options.detections) {
        detections = zeroshot::read_detections(*options.detections, durations);
    } else {
        const auto ckpt = require_checkpoint(options);
        const auto samples = load_samples(config, io::Phase::test, ckpt.config.dim);
        const auto text = load_text(config, ckpt.config.dim, true);
        std::vector<io::VideoFeatures> videos;
        for (const auto& s : samples) videos.push_back(s.features);
        detections = infer_all(ckpt.params, ckpt.config, videos, text, config.tau, worker_count());
        zeroshot::write_detections(detections, durations, options.out / "detections.json");
    }
    const auto report = evaluate(detections, annotations, config.eval);
    write_text(options.out / "eval_report.json", eval::report_to_json(report).dump(2) + "\n");
    const auto table = eval::report_table(report);
    write_text(options.out / "eval_report.txt", table);
    out << table;
    return 0;
}

int cmd_infer(const CommandOptions& options, std::ostream& out) {
    const auto config = resolve_config(options);
    const auto ckpt = require_checkpoint(options);
    const bool have_split = !config.data.split.empty() && fs::exists(config.data.split);
    const auto text = load_text(config, ckpt.config.dim, have_split);

    std::vector<fs::path> files;
    const fs::path source = options.features ? *options.features : config.data.features_dir;
    if (source.empty()) throw ConfigError("no features given (--features or data.features_dir)");
    if (fs::is_directory(source)) {
        for (const auto& e : fs::directory_iterator(source)) {
            if (e.is_regular_file() && e.path().extension() == ".gapf") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
    } else if (fs::exists(source)) {
        files.push_back(source);
    } else {
        throw ConfigError("features not found: " + source.string());
    }

    std::vector<io::VideoFeatures> videos;
    for (const auto& f : files) {
        videos.push_back(io::read_features(f));
        if (videos.back().dim != ckpt.config.dim) {
            throw ConfigError("feature width " + std::to_string(videos.back().dim) + " of '" + f.string() +
                              "' does not match model width " + std::to_string(ckpt.config.dim));
        }
    }

    std::map<std::string, double> durations;
    if (have_split && !config.data.annotations.empty() && fs::exists(config.data.annotations)) {
        durations = durations_of(
            io::read_annotations(config.data.annotations, io::read_split(config.data.split), io::Phase::test));
    }
    for (const auto& v : videos) durations.emplace(v.video_id, double(v.frames) * config.data.seconds_per_frame);

    const auto detections = infer_all(ckpt.params, ckpt.config, videos, text, config.tau, worker_count());
    fs::create_directories(options.out);
    zeroshot::write_detections(detections, durations, options.out / "detections.json");
    out << "wrote " << videos.size() << " videos x " << ckpt.config.num_queries << " detections to "
        << (options.out / "detections.json").string() << '\n';
    return 0;
}

int cmd_synth(const CommandOptions& options, std::ostream& out) {
    auto config = resolve_config(options);
    if (options.seed) config.synth.seed = *options.seed;
    const auto data = io::synth_generate(config.synth);
    fs::create_directories(options.out);
    io::write_dataset(data, options.out);

    const auto root = fs::absolute(options.out).lexically_normal();
    config.data.features_dir = root / "features";
    config.data.annotations = root / "annotations.json";
    config.data.split = root / "split.json";
    config.data.text_embeddings = root / "text_embeddings.gapf";
    config.model.dim = config.synth.dim;
    save_run_config(config, options.out / "run_config.json");
    out << "wrote " << data.features.size() << " videos, " << data.split.seen.size() << " seen / "
        << data.split.unseen.size() << " unseen classes to " << root.string() << '\n';
    return 0;
}

std::string gradcheck_table(const std::vector<check::GradcheckResult>& results, double tolerance) {
    std::size_t width = 5;
    for (const auto& r : results) width = std::max(width, r.name.size());
    std::ostringstream os;
    os << std::left << std::setw(int(width) + 2) << "block" << std::right << std::setw(9) << "checked"
       << std::setw(14) << "max rel err" << "  status\n";
    std::size_t failed = 0;
    for (const auto& r : results) {
        char err[32];
        std::snprintf(err, sizeof err, "%.3e", r.max_rel_error);
        os << std::left << std::setw(int(width) + 2) << r.name << std::right << std::setw(9) << r.checked
           << std::setw(14) << err << "  " << (r.passed ? "ok" : "FAIL");
        if (!r.passed) {
            os << "  (" << r.worst_input << "[" << r.worst_index << "] analytic " << r.worst_analytic << ", numeric "
               << r.worst_numeric << ")";
            ++failed;
        }
        os << '\n';
    }
    char tol[32];
    std::snprintf(tol, sizeof tol, "%.0e", tolerance);
    os << results.size() - failed << "/" << results.size() << " blocks below " << tol << '\n';
    return os.str();
}

int cmd_gradcheck(const CommandOptions& options, std::ostream& out) {
    const auto config = resolve_config(options);
    const check::GradcheckOptions opts;
    const auto started = std::chrono::steady_clock::now();
    const auto results = check::gradient_suite(config.seed, opts);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    out << gradcheck_table(results, opts.tolerance);
    out << "elapsed " << std::fixed << std::setprecision(2) << secs << " s\n";
    const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
    return ok ? 0 : 1;
}

}  // namespace gap::cli
