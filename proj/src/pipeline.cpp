#include "gap/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "gap/adamw.hpp"
#include "gap/checkpoint.hpp"
#include "gap/errors.hpp"
#include "gap/losses.hpp"

namespace gap::cli {

namespace fs = std::filesystem;
using tensor::Tensor;

std::vector<VideoSample> load_samples(const RunConfig& config, io::Phase phase, std::size_t expected_dim) {
    config.require_data_paths();
    const auto split = io::read_split(config.data.split);
    auto sets = io::read_annotations(config.data.annotations, split, phase);
    std::vector<VideoSample> out;
    out.reserve(sets.size());
    for (auto& set : sets) {
        const auto path = config.data.features_dir / (set.video_id + ".gapf");
        if (!fs::exists(path)) throw ConfigError("missing features for video '" + set.video_id + "': " + path.string());
        VideoSample s{io::read_features(path), std::move(set)};
        if (s.features.dim != expected_dim) {
            throw ConfigError("feature width " + std::to_string(s.features.dim) + " of '" + path.string() +
                              "' does not match model width " + std::to_string(expected_dim));
        }
        out.push_back(std::move(s));
    }
    return out;
}

void hold_out(std::vector<VideoSample>& train, std::vector<VideoSample>& validation, double fraction,
              std::uint64_t seed) {
    validation.clear();
    const std::size_t n = train.size();
    if (n < 2 || fraction <= 0.0) return;
    const std::size_t k = std::min<std::size_t>(n - 1, static_cast<std::size_t>(std::llround(fraction * double(n))));
    if (k == 0) return;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<bool> held(n, false);
    for (std::size_t i = 0; i < k; ++i) held[idx[i]] = true;
    std::vector<VideoSample> kept;
    for (std::size_t i = 0; i < n; ++i) (held[i] ? validation : kept).push_back(std::move(train[i]));
    train = std::move(kept);
}

std::string epoch_log_line(const EpochStats& s) {
    nlohmann::json j = {{"epoch", s.epoch},   {"loss", s.loss}, {"detection", s.detection},
                        {"cls", s.cls},       {"l1", s.l1},     {"tiou", s.tiou},
                        {"actionness", s.actionness}};
    if (s.validation_ar) j["validation_ar"] = *s.validation_ar;
    j["best"] = s.best;
    return j.dump();
}

namespace {

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream)};
    return std::mt19937_64(seq);
}

enum Stream : std::uint64_t { init_stream = 1, shuffle_stream = 2, dropout_stream = 3 };

}  // namespace

TrainResult train_model(const RunConfig& config, const std::vector<VideoSample>& train,
                        const std::vector<VideoSample>& validation, const TrainSinks& sinks) {
    if (train.empty()) throw ConfigError("training set is empty");
    config.validate();
    const auto& mc = config.model;

    auto init_rng = derived_rng(config.seed, init_stream);
    auto shuffle_rng = derived_rng(config.seed, shuffle_stream);
    auto dropout_rng = derived_rng(config.seed, dropout_stream);

    TrainResult result;
    result.last = model::init_params<float>(mc, init_rng);
    auto named = result.last.named();
    auto state = tensor::make_adamw_state(named, config.optimizer.adamw);

    // Per-video inputs that do not change between epochs.
    std::vector<Tensor<float>> frames;
    std::vector<std::vector<Interval>> targets;
    std::vector<loss::FrameMask> masks;
    for (const auto& s : train) {
        frames.push_back(model::features_tensor<float>(s.features));
        targets.push_back(loss::target_intervals(s.annotation.instances));
        masks.push_back(loss::build_mask(s.annotation.instances, s.features.frames));
    }

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::optional<double> best_score;
    std::size_t step = 0;
    if (!sinks.checkpoint_dir.empty()) fs::create_directories(sinks.checkpoint_dir);

    for (std::size_t epoch = 1; epoch <= config.optimizer.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        EpochStats stats;
        stats.epoch = epoch;
        for (std::size_t begin = 0; begin < order.size(); begin += config.optimizer.batch_size) {
            const std::size_t end = std::min(order.size(), begin + config.optimizer.batch_size);
            result.last.zero_grad();
            for (std::size_t k = begin; k < end; ++k) {
                const std::size_t v = order[k];
                tensor::Tape<float> tape;
                tensor::Tape<float>::Scope scope(tape);
                model::RunMode<float> mode;
                mode.training = true;
                mode.rng = &dropout_rng;
                const auto batch = model::forward(result.last, mc, frames[v], mode);
                const auto l = loss::total_loss(batch.proposals, batch.scores, batch.actionness_logits, targets[v],
                                                masks[v], config.loss, mc.use_actionness);
                const double total = l.total.item();
                if (!std::isfinite(total)) {
                    std::ostringstream msg;
                    msg << "non-finite loss at epoch " << epoch << ", step " << step << ", video '"
                        << train[v].features.video_id << "' (detection " << l.detection.total.item();
                    if (l.actionness.defined()) msg << ", actionness " << l.actionness.item();
                    msg << ")";
                    throw NumericError(msg.str());
                }
                tape.backward(l.total);
                stats.loss += total;
                stats.detection += l.detection.total.item();
                stats.cls += l.detection.cls.item();
                stats.l1 += l.detection.l1.item();
                stats.tiou += l.detection.tiou.item();
                if (l.actionness.defined()) stats.actionness += l.actionness.item();
            }
            tensor::adamw_step(named, state, 1.0f / float(end - begin));
            ++step;
        }
        const double n = double(train.size());
        for (double* f : {&stats.loss, &stats.detection, &stats.cls, &stats.l1, &stats.tiou, &stats.actionness}) {
            *f /= n;
        }

        double score;
        if (!validation.empty()) {
            stats.validation_ar = proposal_recall(result.last, mc, validation, config.eval);
            score = *stats.validation_ar;
        } else {
            score = -stats.loss;
        }
        if (!best_score || score > *best_score) {
            best_score = score;
            stats.best = true;
            result.best_epoch = epoch;
            result.best = model::cast_params<float>(result.last);
            if (!sinks.checkpoint_dir.empty()) {
                model::save_checkpoint(mc, result.best, sinks.checkpoint_dir / "checkpoint_best.gapf");
            }
        }
        if (!sinks.checkpoint_dir.empty()) {
            model::save_checkpoint(mc, result.last, sinks.checkpoint_dir / "checkpoint_last.gapf");
        }
        if (sinks.log != nullptr) *sinks.log << epoch_log_line(stats) << '\n' << std::flush;
        result.epochs.push_back(stats);
    }
    if (result.epochs.empty()) {
        result.best = model::cast_params<float>(result.last);
        if (!sinks.checkpoint_dir.empty()) {
            model::save_checkpoint(mc, result.last, sinks.checkpoint_dir / "checkpoint_last.gapf");
            model::save_checkpoint(mc, result.best, sinks.checkpoint_dir / "checkpoint_best.gapf");
        }
    }
    return result;
}

std::size_t worker_count() {
    if (const char* env = std::getenv("GAP_THREADS")) {
        char* endp = nullptr;
        const long v = std::strtol(env, &endp, 10);
        if (endp != env && *endp == '\0' && v >= 1) return static_cast<std::size_t>(v);
        throw ConfigError(std::string("GAP_THREADS must be a positive integer, got '") + env + "'");
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    next = n;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

zeroshot::DetectionMap infer_all(const model::ModelParams<float>& params, const model::ModelConfig& config,
                                 const std::vector<io::VideoFeatures>& videos, const io::TextEmbeddings& text,
                                 double tau, std::size_t workers) {
    std::vector<std::vector<zeroshot::Detection>> per_video(videos.size());
    parallel_for(videos.size(), workers,
                 [&](std::size_t i) { per_video[i] = zeroshot::infer_video(params, config, videos[i], text, tau); });
    zeroshot::DetectionMap out;
    for (std::size_t i = 0; i < videos.size(); ++i) out[videos[i].video_id] = std::move(per_video[i]);
    return out;
}

std::map<std::string, std::vector<Interval>> ranked_proposals(const zeroshot::DetectionMap& detections) {
    std::map<std::string, std::vector<Interval>> out;
    for (const auto& [video, dets] : detections) {
        std::vector<const zeroshot::Detection*> sorted;
        for (const auto& d : dets) sorted.push_back(&d);
        std::stable_sort(sorted.begin(), sorted.end(),
                         [](const auto* a, const auto* b) { return a->foreground > b->foreground; });
        auto& list = out[video];
        for (const auto* d : sorted) list.push_back(d->interval());
    }
    return out;
}

eval::EvalReport evaluate(const zeroshot::DetectionMap& detections, const std::vector<io::AnnotationSet>& annotations,
                          const EvalConfig& config) {
    eval::EvalReport report;
    report.map = eval::map_suite(detections, annotations, config.map_iou_grid);
    report.recall =
        eval::recall_auc(ranked_proposals(detections), annotations, config.tiou_grid, config.an_grid, config.an_max);
    return report;
}

double proposal_recall(const model::ModelParams<float>& params, const model::ModelConfig& config,
                       const std::vector<VideoSample>& samples, const EvalConfig& eval_config) {
    tensor::Tape<float> quiet(tensor::TapeMode::forward_only);
    tensor::Tape<float>::Scope scope(quiet);
    std::map<std::string, std::vector<Interval>> proposals;
    std::vector<io::AnnotationSet> annotations;
    for (const auto& s : samples) {
        const auto batch = model::forward(params, config, model::features_tensor<float>(s.features));
        const std::size_t n = batch.proposals.dim(0);
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return batch.scores[a] > batch.scores[b]; });
        auto& list = proposals[s.features.video_id];
        for (std::size_t i : idx) list.push_back(ordered({batch.proposals.at(i, 0), batch.proposals.at(i, 1)}));
        annotations.push_back(s.annotation);
    }
    const auto r = eval::recall_auc(proposals, annotations, eval_config.tiou_grid, eval_config.an_grid,
                                    eval_config.an_max);
    return std::accumulate(r.ar_at_an.begin(), r.ar_at_an.end(), 0.0) / double(r.ar_at_an.size());
}

}  // namespace gap::cli
