#include "gap/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gap/checkpoint.hpp"
#include "gap/errors.hpp"
#include "gap/eval.hpp"

namespace gap::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

EvalConfig::EvalConfig() : map_iou_grid(eval::make_grid(0.3, 0.7, 0.1)), tiou_grid(eval::make_grid(0.5, 1.0, 0.05)) {}

Ablation parse_ablation(const std::string& s) {
    if (s == "full") return Ablation::full;
    if (s == "no_rectify") return Ablation::no_rectify;
    if (s == "no_rectify_no_actionness") return Ablation::no_rectify_no_actionness;
    throw ConfigError("unknown ablation '" + s + "' (expected full, no_rectify or no_rectify_no_actionness)");
}

std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::full: return "full";
        case Ablation::no_rectify: return "no_rectify";
        case Ablation::no_rectify_no_actionness: return "no_rectify_no_actionness";
    }
    return "?";
}

void apply_ablation(model::ModelConfig& config, Ablation a) {
    config.use_rectifying = a == Ablation::full;
    config.use_actionness = a != Ablation::no_rectify_no_actionness;
}

namespace {

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError("config: '" + section + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
            throw ConfigError("config: unknown key '" + key + "' in '" + section + "'");
        }
    }
}

fs::path resolve(const json& j, const char* key, const fs::path& base) {
    if (!j.contains(key)) return {};
    fs::path p = j.at(key).get<std::string>();
    if (p.empty()) return {};
    return fs::absolute(p.is_relative() && !base.empty() ? base / p : p).lexically_normal();
}

template <typename T>
void check_sorted(const std::vector<T>& v, const char* name) {
    if (v.empty()) throw ConfigError(std::string("config: ") + name + " must not be empty");
    if (!std::is_sorted(v.begin(), v.end()) || std::adjacent_find(v.begin(), v.end()) != v.end()) {
        throw ConfigError(std::string("config: ") + name + " must be strictly ascending");
    }
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    loss.validate();
    synth.validate();
    if (!(data.seconds_per_frame > 0.0)) throw ConfigError("config: data.seconds_per_frame must be positive");
    if (!(data.validation_fraction >= 0.0 && data.validation_fraction < 1.0)) {
        throw ConfigError("config: data.validation_fraction must lie in [0, 1)");
    }
    const auto& a = optimizer.adamw;
    if (!(a.learning_rate > 0.0) || !(a.weight_decay >= 0.0) || !(a.beta1 >= 0.0 && a.beta1 < 1.0) ||
        !(a.beta2 >= 0.0 && a.beta2 < 1.0) || !(a.epsilon > 0.0)) {
        throw ConfigError("config: invalid optimizer constants");
    }
    if (optimizer.batch_size == 0) throw ConfigError("config: optimizer.batch_size must be positive");
    if (!(tau > 0.0)) throw ConfigError("config: inference.tau must be positive");
    check_sorted(eval.map_iou_grid, "eval.map_iou_grid");
    check_sorted(eval.tiou_grid, "eval.tiou_grid");
    check_sorted(eval.an_grid, "eval.an_grid");
    if (eval.an_max == 0 || eval.an_grid.front() == 0) throw ConfigError("config: AN values must be positive");
    for (double t : eval.map_iou_grid) {
        if (!(t > 0.0 && t <= 1.0)) throw ConfigError("config: IoU thresholds must lie in (0, 1]");
    }
    for (double t : eval.tiou_grid) {
        if (!(t > 0.0 && t <= 1.0)) throw ConfigError("config: tIoU thresholds must lie in (0, 1]");
    }
}

void RunConfig::require_data_paths() const {
    const std::pair<const char*, const fs::path*> paths[] = {{"data.features_dir", &data.features_dir},
                                                             {"data.annotations", &data.annotations},
                                                             {"data.split", &data.split},
                                                             {"data.text_embeddings", &data.text_embeddings}};
    for (const auto& [name, p] : paths) {
        if (p->empty()) throw ConfigError(std::string("config: ") + name + " is required");
        if (!fs::exists(*p)) throw ConfigError(std::string("config: ") + name + " does not exist: " + p->string());
    }
}

RunConfig run_config_from_json(const json& j, const fs::path& base_dir) {
    RunConfig c;
    try {
        check_keys(j, "root", {"data", "model", "loss", "optimizer", "inference", "eval", "synth", "seed"});
        if (j.contains("data")) {
            const auto& d = j["data"];
            check_keys(d, "data", {"features_dir", "annotations", "split", "text_embeddings", "seconds_per_frame",
                                   "validation_fraction"});
            c.data.features_dir = resolve(d, "features_dir", base_dir);
            c.data.annotations = resolve(d, "annotations", base_dir);
            c.data.split = resolve(d, "split", base_dir);
            c.data.text_embeddings = resolve(d, "text_embeddings", base_dir);
            c.data.seconds_per_frame = d.value("seconds_per_frame", c.data.seconds_per_frame);
            c.data.validation_fraction = d.value("validation_fraction", c.data.validation_fraction);
        }
        if (j.contains("model")) {
            check_keys(j["model"], "model", {"dim", "num_queries", "encoder_layers", "decoder_layers", "heads",
                                             "ffn_multiplier", "roi_bins", "dropout", "use_rectifying",
                                             "use_actionness", "rectify_aggregation", "rectify_scope"});
            c.model = model::model_config_from_json(j["model"], c.model);
        }
        if (j.contains("loss")) {
            const auto& l = j["loss"];
            check_keys(l, "loss", {"match_alpha", "match_beta", "match_gamma", "cls", "l1", "tiou", "lambda_ad",
                                   "focal_alpha", "focal_gamma"});
            auto& w = c.loss;
            w.match_alpha = l.value("match_alpha", w.match_alpha);
            w.match_beta = l.value("match_beta", w.match_beta);
            w.match_gamma = l.value("match_gamma", w.match_gamma);
            w.cls = l.value("cls", w.cls);
            w.l1 = l.value("l1", w.l1);
            w.tiou = l.value("tiou", w.tiou);
            w.lambda_ad = l.value("lambda_ad", w.lambda_ad);
            w.focal_alpha = l.value("focal_alpha", w.focal_alpha);
            w.focal_gamma = l.value("focal_gamma", w.focal_gamma);
        }
        if (j.contains("optimizer")) {
            const auto& o = j["optimizer"];
            check_keys(o, "optimizer",
                       {"learning_rate", "weight_decay", "beta1", "beta2", "epsilon", "batch_size", "epochs"});
            auto& a = c.optimizer.adamw;
            a.learning_rate = o.value("learning_rate", a.learning_rate);
            a.weight_decay = o.value("weight_decay", a.weight_decay);
            a.beta1 = o.value("beta1", a.beta1);
            a.beta2 = o.value("beta2", a.beta2);
            a.epsilon = o.value("epsilon", a.epsilon);
            c.optimizer.batch_size = o.value("batch_size", c.optimizer.batch_size);
            c.optimizer.epochs = o.value("epochs", c.optimizer.epochs);
        }
        if (j.contains("inference")) {
            check_keys(j["inference"], "inference", {"tau"});
            c.tau = j["inference"].value("tau", c.tau);
        }
        if (j.contains("eval")) {
            const auto& e = j["eval"];
            check_keys(e, "eval", {"map_iou_grid", "tiou_grid", "an_grid", "an_max"});
            if (e.contains("map_iou_grid")) c.eval.map_iou_grid = e["map_iou_grid"].get<std::vector<double>>();
            if (e.contains("tiou_grid")) c.eval.tiou_grid = e["tiou_grid"].get<std::vector<double>>();
            if (e.contains("an_grid")) c.eval.an_grid = e["an_grid"].get<std::vector<std::size_t>>();
            c.eval.an_max = e.value("an_max", c.eval.an_max);
        }
        if (j.contains("synth")) {
            const auto& s = j["synth"];
            check_keys(s, "synth", {"num_classes", "videos_per_class", "frames", "dim", "snr", "seed",
                                    "min_instances", "max_instances", "min_length", "max_length", "seen_fraction",
                                    "seconds_per_frame"});
            auto& y = c.synth;
            y.num_classes = s.value("num_classes", y.num_classes);
            y.videos_per_class = s.value("videos_per_class", y.videos_per_class);
            y.frames = s.value("frames", y.frames);
            y.dim = s.value("dim", y.dim);
            if (s.contains("snr")) y.snr = s["snr"].is_null() ? INFINITY : s["snr"].get<double>();
            y.seed = s.value("seed", y.seed);
            y.min_instances = s.value("min_instances", y.min_instances);
            y.max_instances = s.value("max_instances", y.max_instances);
            y.min_length = s.value("min_length", y.min_length);
            y.max_length = s.value("max_length", y.max_length);
            y.seen_fraction = s.value("seen_fraction", y.seen_fraction);
            y.seconds_per_frame = s.value("seconds_per_frame", y.seconds_per_frame);
        }
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

json run_config_to_json(const RunConfig& c) {
    const auto& a = c.optimizer.adamw;
    const auto& w = c.loss;
    const auto& y = c.synth;
    json data = {{"seconds_per_frame", c.data.seconds_per_frame},
                 {"validation_fraction", c.data.validation_fraction}};
    if (!c.data.features_dir.empty()) data["features_dir"] = c.data.features_dir.string();
    if (!c.data.annotations.empty()) data["annotations"] = c.data.annotations.string();
    if (!c.data.split.empty()) data["split"] = c.data.split.string();
    if (!c.data.text_embeddings.empty()) data["text_embeddings"] = c.data.text_embeddings.string();
    return {
        {"data", data},
        {"model", model::model_config_to_json(c.model)},
        {"loss",
         {{"match_alpha", w.match_alpha},
          {"match_beta", w.match_beta},
          {"match_gamma", w.match_gamma},
          {"cls", w.cls},
          {"l1", w.l1},
          {"tiou", w.tiou},
          {"lambda_ad", w.lambda_ad},
          {"focal_alpha", w.focal_alpha},
          {"focal_gamma", w.focal_gamma}}},
        {"optimizer",
         {{"learning_rate", a.learning_rate},
          {"weight_decay", a.weight_decay},
          {"beta1", a.beta1},
          {"beta2", a.beta2},
          {"epsilon", a.epsilon},
          {"batch_size", c.optimizer.batch_size},
          {"epochs", c.optimizer.epochs}}},
        {"inference", {{"tau", c.tau}}},
        {"eval",
         {{"map_iou_grid", c.eval.map_iou_grid},
          {"tiou_grid", c.eval.tiou_grid},
          {"an_grid", c.eval.an_grid},
          {"an_max", c.eval.an_max}}},
        {"synth",
         {{"num_classes", y.num_classes},
          {"videos_per_class", y.videos_per_class},
          {"frames", y.frames},
          {"dim", y.dim},
          {"snr", std::isfinite(y.snr) ? json(y.snr) : json(nullptr)},
          {"seed", y.seed},
          {"min_instances", y.min_instances},
          {"max_instances", y.max_instances},
          {"min_length", y.min_length},
          {"max_length", y.max_length},
          {"seen_fraction", y.seen_fraction},
          {"seconds_per_frame", y.seconds_per_frame}}},
        {"seed", c.seed},
    };
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    json j;
    try {
        j = json::parse(buffer.str());
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return run_config_from_json(j, path.parent_path());
}

void save_run_config(const RunConfig& config, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << run_config_to_json(config).dump(2) << '\n';
}

}  // namespace gap::cli
