// gap: train, evaluate and run the zero-shot temporal action localizer.

#include <exception>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "gap/commands.hpp"
#include "gap/errors.hpp"

namespace {

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const gap::ConfigError*>(&e) != nullptr) return 2;
    if (dynamic_cast<const gap::FormatError*>(&e) != nullptr) return 3;
    if (dynamic_cast<const gap::ValidationError*>(&e) != nullptr) return 3;
    if (dynamic_cast<const gap::NumericError*>(&e) != nullptr) return 4;
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Zero-shot temporal action localization with a query-based proposal generator"};
    app.require_subcommand(1);

    gap::cli::CommandOptions opts;
    std::string checkpoint, detections, features, ablation;
    std::uint64_t seed = 0;

    const std::map<std::string, std::string> help = {
        {"train", "Train on the seen classes and write checkpoints plus a JSON-lines log"},
        {"eval", "Evaluate on the unseen classes (mAP, AR@AN, AUC)"},
        {"infer", "Write the detection dump for a set of feature files"},
        {"synth", "Generate a synthetic seen/unseen dataset and a matching run config"},
        {"gradcheck", "Compare analytic gradients with finite differences for every block"},
    };
    std::map<std::string, CLI::App*> subs;
    for (const auto& [name, text] : help) {
        auto* sub = app.add_subcommand(name, text);
        sub->add_option("--config", opts.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "Override the configured seed");
        sub->add_option("--out", opts.out, "Output directory")->capture_default_str();
        subs[name] = sub;
    }
    for (const char* name : {"train", "eval", "infer"}) {
        subs[name]
            ->add_option("--ablation", ablation, "Model variant")
            ->check(CLI::IsMember({"full", "no_rectify", "no_rectify_no_actionness"}));
    }
    for (const char* name : {"eval", "infer"}) {
        subs[name]->add_option("--checkpoint", checkpoint, "Checkpoint file")->check(CLI::ExistingFile);
    }
    subs["eval"]->add_option("--detections", detections, "Score this detection dump instead of running the model")
        ->check(CLI::ExistingFile);
    subs["infer"]->add_option("--features", features, "A .gapf file or a directory of them")
        ->check(CLI::ExistingPath);

    CLI11_PARSE(app, argc, argv);

    auto* chosen = app.get_subcommands().front();
    if (chosen->count("--seed") > 0) opts.seed = seed;
    if (!checkpoint.empty()) opts.checkpoint = checkpoint;
    if (!detections.empty()) opts.detections = detections;
    if (!features.empty()) opts.features = features;

    try {
        if (!ablation.empty()) opts.ablation = gap::cli::parse_ablation(ablation);
        const std::string name = chosen->get_name();
        if (name == "train") return gap::cli::cmd_train(opts, std::cout);
        if (name == "eval") return gap::cli::cmd_eval(opts, std::cout);
        if (name == "infer") return gap::cli::cmd_infer(opts, std::cout);
        if (name == "synth") return gap::cli::cmd_synth(opts, std::cout);
        return gap::cli::cmd_gradcheck(opts, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e);
    }
}
