// Command-line entry points: train, eval, ablate, report, data, prompts, synth.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ovcos/camo_data.hpp"
#include "ovcos/harness.hpp"
#include "ovcos/prompt_engine.hpp"
#include "ovcos/report.hpp"
#include "ovcos/synthetic.hpp"

namespace fs = std::filesystem;
using namespace ovcos;

namespace {

constexpr int kExitSampleErrors = 1;
constexpr int kExitFailure = 2;

struct ConfigArgs {
    std::vector<std::string> files;
    std::vector<std::string> overrides;

    void attach(CLI::App* cmd)
    {
        cmd->add_option("-c,--config", files, "config file(s), applied in order")->check(CLI::ExistingFile);
        cmd->add_option("-s,--set", overrides, "key=value override, applied after the files");
    }

    harness::RunConfig load() const { return harness::load_config(files, overrides); }
};

int run_train(const ConfigArgs& ca, const std::string& resume, bool quiet)
{
    const harness::RunConfig cfg = ca.load();
    harness::TrainOptions opt;
    opt.resume_from = resume;
    if (!quiet)
        opt.on_step = [](const harness::StepLog& s) {
            std::fprintf(stderr, "step %lld epoch %d  l_s %.4f  l_e %.4f  l_d %.4f  total %.4f\n",
                         static_cast<long long>(s.step), s.epoch, s.seg, s.edge, s.depth, s.total);
        };
    const auto res = harness::train(cfg, opt);
    std::cout << "trained " << res.steps_run << " steps, last checkpoint " << res.last_checkpoint << "\n";
    return 0;
}

int run_eval(const ConfigArgs& ca, const std::string& checkpoint, bool table)
{
    const harness::RunConfig cfg = ca.load();
    harness::EvalOptions opt;
    opt.checkpoint = checkpoint;
    const auto res = harness::evaluate(cfg, opt);
    if (table) {
        std::cout << report::metric_header() << "\n" << metrics::format_row(res.report.aggregate) << "\n";
    } else {
        for (std::size_t m = 0; m < metrics::kNumMetrics; ++m)
            std::cout << metrics::metric_names()[m] << " " << res.report.aggregate[m] << "\n";
        std::cout << "accuracy " << res.report.accuracy() << "\n";
    }
    std::cout << "outputs in " << res.output_dir << "\n";
    for (const auto& e : res.errors) std::cerr << "skipped " << e << "\n";
    return res.ok() ? 0 : kExitSampleErrors;
}

int run_ablate(const ConfigArgs& ca, const std::vector<std::string>& presets)
{
    const harness::RunConfig cfg = ca.load();
    const auto expanded = harness::expand_presets(presets);
    const auto rows = harness::ablate(cfg, expanded);
    std::cout << harness::format_table(rows);
    return 0;
}

int run_report(const ConfigArgs& ca, const std::string& checkpoint, const std::string& report_json,
               const std::string& out_dir, const std::vector<std::string>& template_sets)
{
    const harness::RunConfig cfg = ca.load();
    const fs::path out = out_dir.empty() ? fs::path(cfg.output_dir) / "report" : fs::path(out_dir);
    fs::create_directories(out);
    int status = 0;

    if (!checkpoint.empty()) {
        auto backbone = harness::make_backbone(cfg);
        decoder::Decoder dec(cfg.decoder, backbone->spec());
        const auto ck = optim::load_checkpoint(checkpoint);
        optim::restore(dec.parameters(), ck);
        report::write_alpha_chart(out, report::alpha_bars(dec));
    }
    if (!report_json.empty()) {
        std::ifstream in(report_json);
        if (!in) throw IoError("cannot open report '" + report_json + "'");
        nlohmann::json j;
        in >> j;
        metrics::MetricRow row{};
        for (std::size_t m = 0; m < metrics::kNumMetrics; ++m)
            row[m] = j.at("aggregate").at(metrics::metric_names()[m]).get<double>();
        report::write_metric_row(out, row);
        std::cout << report::metric_header() << "\n" << metrics::format_row(row) << "\n";
    }
    if (!cfg.eval_manifest.empty()) {
        const auto eval = data::load_manifest(cfg.eval_manifest);
        std::vector<std::string> errors;
        const auto rows = report::attribute_table(eval.records, &errors);
        report::write_attribute_stats(out / "attributes", rows);
        for (const auto& e : errors) std::cerr << "skipped " << e << "\n";
        if (!errors.empty()) status = kExitSampleErrors;

        if (!cfg.train_manifest.empty()) {
            const auto train = data::load_manifest(cfg.train_manifest);
            auto backbone = harness::make_backbone(cfg);
            const auto samples =
                report::pool_with_ground_truth(*backbone, harness::evaluation_records(eval), cfg.resolution);
            std::vector<report::TemplateSetPoint> points;
            std::vector<std::string> sets = template_sets.empty() ? prompts::builtin_set_names() : template_sets;
            for (const auto& s : sets)
                points.push_back(report::analyze_template_set(*backbone, prompts::resolve_template_set(s),
                                                              harness::training_classes(train),
                                                              harness::evaluation_classes(eval), samples));
            report::write_template_scatter(out, points);
        }
    }
    std::cout << "report written to " << out.string() << "\n";
    return status;
}

int run_data_validate(const std::string& manifest, const std::string& split, bool check_files)
{
    data::ManifestOptions opt;
    opt.split_path = split;
    opt.check_files = check_files;
    const auto p = data::inspect_manifest(manifest, opt);
    const auto& m = p.manifest;
    std::cout << "records " << m.records.size() << "\n"
              << "classes " << m.classes().size() << "\n"
              << "seen_classes " << m.split.seen.size() << "\n"
              << "unseen_classes " << m.split.unseen.size() << "\n"
              << "seen_samples " << m.seen_records().size() << "\n"
              << "unseen_samples " << m.unseen_records().size() << "\n"
              << "issues " << p.issues.size() << "\n";
    for (const auto& i : p.issues) std::cerr << i.describe() << "\n";
    return p.issues.empty() ? 0 : kExitSampleErrors;
}

int run_data_stats(const std::string& manifest, const std::string& split, const std::string& out)
{
    data::ManifestOptions opt;
    opt.split_path = split;
    const auto m = data::load_manifest(manifest, opt);
    std::vector<std::string> errors;
    const auto rows = report::attribute_table(m.records, &errors);
    report::write_attribute_stats(out, rows);
    for (const auto& e : errors) std::cerr << "skipped " << e << "\n";
    std::cout << "attribute statistics for " << rows.size() << " images in " << out << "\n";
    return errors.empty() ? 0 : kExitSampleErrors;
}

int run_prompts_analyze(const ConfigArgs& ca, const std::vector<std::string>& sets, const std::string& out_dir)
{
    const harness::RunConfig cfg = ca.load();
    if (cfg.train_manifest.empty() || cfg.eval_manifest.empty())
        throw ConfigError("prompts analyze needs data.train_manifest and data.eval_manifest");
    const auto train = data::load_manifest(cfg.train_manifest);
    const auto eval = data::load_manifest(cfg.eval_manifest);
    auto backbone = harness::make_backbone(cfg);
    const auto samples = report::pool_with_ground_truth(*backbone, harness::evaluation_records(eval), cfg.resolution);
    std::vector<report::TemplateSetPoint> points;
    for (const auto& s : sets.empty() ? prompts::builtin_set_names() : sets) {
        points.push_back(report::analyze_template_set(*backbone, prompts::resolve_template_set(s),
                                                      harness::training_classes(train),
                                                      harness::evaluation_classes(eval), samples));
        const auto& p = points.back();
        std::cout << p.name << "\thausdorff " << p.hausdorff << "\taccuracy " << p.accuracy << "\n";
    }
    const fs::path out = out_dir.empty() ? fs::path(cfg.output_dir) / "prompts" : fs::path(out_dir);
    report::write_template_scatter(out, points);
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"open-vocabulary camouflaged object segmentation toolkit"};
    app.require_subcommand(1);

    ConfigArgs train_cfg, eval_cfg, ablate_cfg, report_cfg, prompts_cfg;
    std::string resume, checkpoint, report_json, report_out, prompts_out;
    bool quiet = false, table = false;
    std::vector<std::string> presets{"table3"}, report_sets, prompt_sets;

    auto* train = app.add_subcommand("train", "train the decoder on the seen split");
    train_cfg.attach(train);
    train->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);
    train->add_flag("-q,--quiet", quiet, "no per-step progress");

    auto* eval = app.add_subcommand("eval", "evaluate on the unseen split");
    eval_cfg.attach(eval);
    eval->add_option("--checkpoint", checkpoint, "trained checkpoint")->check(CLI::ExistingFile);
    eval->add_flag("--table", table, "print the six-column row only");

    auto* ablate = app.add_subcommand("ablate", "train and evaluate ablation presets");
    ablate_cfg.attach(ablate);
    ablate->add_option("-p,--presets", presets, "preset or group names (table3, t-sweep, baseline, ...)");

    auto* rep = app.add_subcommand("report", "emit charts and CSV files");
    report_cfg.attach(rep);
    rep->add_option("--checkpoint", checkpoint, "checkpoint for the alpha chart")->check(CLI::ExistingFile);
    rep->add_option("--metrics", report_json, "report.json from eval")->check(CLI::ExistingFile);
    rep->add_option("--templates", report_sets, "template sets for the Hausdorff scatter");
    rep->add_option("-o,--out", report_out, "output directory");

    auto* data_cmd = app.add_subcommand("data", "dataset tools");
    data_cmd->require_subcommand(1);
    std::string manifest, split, stats_out = "stats";
    bool no_files = false;
    auto* validate = data_cmd->add_subcommand("validate", "check a manifest and its split");
    validate->add_option("manifest", manifest)->required();
    validate->add_option("--split", split, "class split file (overrides the header reference)");
    validate->add_flag("--no-file-check", no_files, "skip file existence checks");
    auto* stats = data_cmd->add_subcommand("stats", "per-image attribute statistics");
    stats->add_option("manifest", manifest)->required();
    stats->add_option("--split", split, "class split file");
    stats->add_option("-o,--out", stats_out, "output directory");

    auto* prompts_cmd = app.add_subcommand("prompts", "template-set tools");
    prompts_cmd->require_subcommand(1);
    auto* analyze = prompts_cmd->add_subcommand("analyze", "Hausdorff distance and GT-mask accuracy per set");
    prompts_cfg.attach(analyze);
    analyze->add_option("--templates", prompt_sets, "built-in names or template files");
    analyze->add_option("-o,--out", prompts_out, "output directory");

    auto* synth_cmd = app.add_subcommand("synth", "write the synthetic toy dataset");
    std::string synth_out;
    synth::ToyOptions toy;
    synth_cmd->add_option("-o,--out", synth_out, "output directory")->required();
    synth_cmd->add_option("--train", toy.train_count, "training images");
    synth_cmd->add_option("--eval", toy.eval_count, "evaluation images");
    synth_cmd->add_option("--size", toy.size, "image side length");
    synth_cmd->add_option("--seed", toy.seed, "generator seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return run_train(train_cfg, resume, quiet);
        if (*eval) return run_eval(eval_cfg, checkpoint, table);
        if (*ablate) return run_ablate(ablate_cfg, presets);
        if (*rep) return run_report(report_cfg, checkpoint, report_json, report_out, report_sets);
        if (*validate) return run_data_validate(manifest, split, !no_files);
        if (*stats) return run_data_stats(manifest, split, stats_out);
        if (*analyze) return run_prompts_analyze(prompts_cfg, prompt_sets, prompts_out);
        if (*synth_cmd) {
            const auto layout = synth::write_toy_dataset(synth_out, toy);
            std::cout << "toy dataset written; run config " << layout.config << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitFailure;
}
