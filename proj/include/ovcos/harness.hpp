#pragma once

// Run configuration, training loop, evaluation and ablation presets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ovcos/camo_data.hpp"
#include "ovcos/decoder.hpp"
#include "ovcos/errors.hpp"
#include "ovcos/io.hpp"
#include "ovcos/metrics.hpp"
#include "ovcos/objectives.hpp"
#include "ovcos/optim.hpp"
#include "ovcos/prompt_engine.hpp"
#include "ovcos/recognizer.hpp"
#include "ovcos/vlm_bridge.hpp"

namespace ovcos::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------- configuration

struct RunConfig {
    std::string optimizer = "adamw";
    double lr = 3e-6;
    double weight_decay = 5e-4;
    int batch_size = 4;
    int epochs = 30;
    int resolution = 384;
    std::uint64_t seed = 0;
    std::int64_t max_steps = 0; // 0 = no cap

    decoder::DecoderConfig decoder;
    objectives::SegLossKind seg_loss = objectives::SegLossKind::WeightedBceIou;

    std::string backbone_kind = "stub";
    std::uint64_t backbone_seed = 1337;
    std::string backbone_concepts; // inline "name:r,g,b;..." or a JSON file path

    std::string train_manifest;
    std::string eval_manifest;
    std::string taxonomy;
    bool augment = true;

    std::string prompts_train = "camo";
    std::string prompts_eval; // empty: same as prompts_train

    std::string output_dir = "runs/default";

    double oracle_accuracy = -1.0; // >= 0 switches evaluation to ground-truth masks + planted classifier

    void validate() const
    {
        if (optimizer != "adamw") throw ConfigError("optimizer.name must be 'adamw', got '" + optimizer + "'");
        if (!(lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
        if (!(weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay must be non-negative");
        if (batch_size <= 0) throw ConfigError("batch_size must be positive");
        if (epochs <= 0) throw ConfigError("epochs must be positive");
        if (resolution <= 0 || resolution % 32 != 0)
            throw ConfigError("resolution must be a positive multiple of 32, got " + std::to_string(resolution));
        if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
        if (oracle_accuracy > 1.0) throw ConfigError("eval.oracle_accuracy must be <= 1");
        decoder.validate();
    }

    const std::string& eval_prompts() const { return prompts_eval.empty() ? prompts_train : prompts_eval; }
};

namespace detail {

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v)
{
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v)
{
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

inline long long parse_int(const std::string& key, const std::string& v)
{
    try {
        std::size_t pos = 0;
        const long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

inline std::string fmt_double(double d)
{
    std::ostringstream o;
    o.precision(17);
    o << d;
    return o.str();
}

inline std::set<int> parse_stages(const std::string& key, const std::string& v)
{
    std::set<int> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        out.insert(static_cast<int>(parse_int(key, tok)));
    }
    return out;
}

inline std::string resolve_path(const std::string& value, const fs::path& base)
{
    if (value.empty() || base.empty()) return value;
    const fs::path p(value);
    return p.is_absolute() ? value : (base / p).lexically_normal().string();
}

} // namespace detail

/// Sets one key. Relative paths in path-valued keys resolve against `base_dir`.
/// `prompts.*` and `backbone.concepts` resolve too when they name an existing file.
inline void set_value(RunConfig& c, const std::string& key, const std::string& raw, const fs::path& base_dir = {})
{
    using namespace detail;
    const std::string v = trim(raw);
    auto maybe_file = [&](const std::string& s) {
        if (base_dir.empty() || s.empty() || fs::path(s).is_absolute()) return s;
        const fs::path p = base_dir / s;
        return fs::exists(p) ? p.lexically_normal().string() : s;
    };

    if (key == "optimizer.name") c.optimizer = v;
    else if (key == "optimizer.lr") c.lr = parse_double(key, v);
    else if (key == "optimizer.weight_decay") c.weight_decay = parse_double(key, v);
    else if (key == "batch_size") c.batch_size = static_cast<int>(parse_int(key, v));
    else if (key == "epochs") c.epochs = static_cast<int>(parse_int(key, v));
    else if (key == "resolution") c.resolution = static_cast<int>(parse_int(key, v));
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(key, v));
    else if (key == "max_steps") c.max_steps = parse_int(key, v);
    else if (key == "decoder.width") c.decoder.width = static_cast<int>(parse_int(key, v));
    else if (key == "decoder.heads") c.decoder.heads = static_cast<int>(parse_int(key, v));
    else if (key == "decoder.iterations") c.decoder.iterations = static_cast<int>(parse_int(key, v));
    else if (key == "decoder.se_stages") c.decoder.se_stages = parse_stages(key, v);
    else if (key == "decoder.agg") {
        if (v == "max") c.decoder.agg = decoder::Aggregation::Max;
        else if (v == "mean") c.decoder.agg = decoder::Aggregation::Mean;
        else throw ConfigError("decoder.agg must be 'max' or 'mean', got '" + v + "'");
    }
    else if (key == "decoder.fusion") {
        if (v == "sea") c.decoder.fusion = decoder::StructureFusion::Attention;
        else if (v == "addition") c.decoder.fusion = decoder::StructureFusion::Addition;
        else throw ConfigError("decoder.fusion must be 'sea' or 'addition', got '" + v + "'");
    }
    else if (key == "decoder.semantic_guidance") c.decoder.semantic_guidance = parse_bool(key, v);
    else if (key == "decoder.edge_aux") c.decoder.edge_aux = parse_bool(key, v);
    else if (key == "decoder.depth_aux") c.decoder.depth_aux = parse_bool(key, v);
    else if (key == "decoder.correlation") c.decoder.use_correlation = parse_bool(key, v);
    else if (key == "decoder.object_repr") c.decoder.use_object_repr = parse_bool(key, v);
    else if (key == "decoder.cue_temperature") c.decoder.cue_temperature = parse_double(key, v);
    else if (key == "decoder.seed") c.decoder.seed = static_cast<std::uint64_t>(parse_int(key, v));
    else if (key == "loss.seg") c.seg_loss = objectives::parse_seg_loss(v);
    else if (key == "backbone.kind") c.backbone_kind = v;
    else if (key == "backbone.seed") c.backbone_seed = static_cast<std::uint64_t>(parse_int(key, v));
    else if (key == "backbone.concepts") c.backbone_concepts = maybe_file(v);
    else if (key == "data.train_manifest") c.train_manifest = resolve_path(v, base_dir);
    else if (key == "data.eval_manifest") c.eval_manifest = resolve_path(v, base_dir);
    else if (key == "data.taxonomy") c.taxonomy = resolve_path(v, base_dir);
    else if (key == "data.augment") c.augment = parse_bool(key, v);
    else if (key == "prompts.train") c.prompts_train = maybe_file(v);
    else if (key == "prompts.eval") c.prompts_eval = maybe_file(v);
    else if (key == "output.dir") c.output_dir = resolve_path(v, base_dir);
    else if (key == "eval.oracle_accuracy") c.oracle_accuracy = parse_double(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
}

/// "key=value" override as given on the command line.
inline void apply_override(RunConfig& c, const std::string& assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
    set_value(c, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

/// Applies a key = value file on top of `c`. `include = other.cfg` pulls in
/// another layer first; '#' starts a comment.
inline void apply_file(RunConfig& c, const std::string& path, int depth = 0)
{
    if (depth > 8) throw ConfigError("config include depth exceeded at '" + path + "'");
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    const fs::path base = fs::absolute(fs::path(path)).parent_path();
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto h = line.find('#'); h != std::string::npos) line = line.substr(0, h);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        try {
            if (key == "include")
                apply_file(c, detail::resolve_path(value, base), depth + 1);
            else
                set_value(c, key, value, base);
        } catch (const ConfigError& e) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline RunConfig load_config(const std::vector<std::string>& files, const std::vector<std::string>& overrides)
{
    RunConfig c;
    for (const auto& f : files) apply_file(c, f);
    for (const auto& o : overrides) apply_override(c, o);
    c.validate();
    return c;
}

/// Concept table as the inline string understood by the stub backbone.
inline std::string resolved_concepts(const RunConfig& c)
{
    const std::string& v = c.backbone_concepts;
    if (v.empty() || !fs::is_regular_file(v)) return v;
    std::ifstream in(v);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("backbone.concepts file '" + v + "' is not valid JSON: " + e.what());
    }
    std::vector<vlm::PlantedConcept> out;
    for (const auto& e : j) {
        vlm::PlantedConcept p;
        p.class_name = e.at("class").get<std::string>();
        p.color = e.at("color").get<std::array<double, 3>>();
        out.push_back(p);
    }
    return vlm::format_concepts(out);
}

/// Canonical flat view; also the checkpoint config snapshot.
inline std::map<std::string, std::string> to_key_values(const RunConfig& c)
{
    using detail::fmt_double;
    std::map<std::string, std::string> kv;
    kv["optimizer.name"] = c.optimizer;
    kv["optimizer.lr"] = fmt_double(c.lr);
    kv["optimizer.weight_decay"] = fmt_double(c.weight_decay);
    kv["batch_size"] = std::to_string(c.batch_size);
    kv["epochs"] = std::to_string(c.epochs);
    kv["resolution"] = std::to_string(c.resolution);
    kv["seed"] = std::to_string(c.seed);
    kv["max_steps"] = std::to_string(c.max_steps);
    kv["decoder.width"] = std::to_string(c.decoder.width);
    kv["decoder.heads"] = std::to_string(c.decoder.heads);
    kv["decoder.iterations"] = std::to_string(c.decoder.iterations);
    std::string stages;
    for (int s : c.decoder.se_stages) stages += (stages.empty() ? "" : ",") + std::to_string(s);
    kv["decoder.se_stages"] = stages;
    kv["decoder.agg"] = c.decoder.agg == decoder::Aggregation::Max ? "max" : "mean";
    kv["decoder.fusion"] = c.decoder.fusion == decoder::StructureFusion::Attention ? "sea" : "addition";
    kv["decoder.semantic_guidance"] = c.decoder.semantic_guidance ? "true" : "false";
    kv["decoder.edge_aux"] = c.decoder.edge_aux ? "true" : "false";
    kv["decoder.depth_aux"] = c.decoder.depth_aux ? "true" : "false";
    kv["decoder.correlation"] = c.decoder.use_correlation ? "true" : "false";
    kv["decoder.object_repr"] = c.decoder.use_object_repr ? "true" : "false";
    kv["decoder.cue_temperature"] = fmt_double(c.decoder.cue_temperature);
    kv["decoder.seed"] = std::to_string(c.decoder.seed);
    kv["loss.seg"] = c.seg_loss == objectives::SegLossKind::WeightedBceIou ? "wbce_wiou" : "bce_iou";
    kv["backbone.kind"] = c.backbone_kind;
    kv["backbone.seed"] = std::to_string(c.backbone_seed);
    kv["backbone.concepts"] = resolved_concepts(c);
    kv["data.train_manifest"] = c.train_manifest;
    kv["data.eval_manifest"] = c.eval_manifest;
    kv["data.taxonomy"] = c.taxonomy;
    kv["data.augment"] = c.augment ? "true" : "false";
    kv["prompts.train"] = c.prompts_train;
    kv["prompts.eval"] = c.prompts_eval;
    kv["output.dir"] = c.output_dir;
    kv["eval.oracle_accuracy"] = fmt_double(c.oracle_accuracy);
    return kv;
}

/// Keys that determine parameter shapes or frozen-feature semantics.
inline bool is_model_key(const std::string& key)
{
    return key.rfind("decoder.", 0) == 0 || key.rfind("backbone.", 0) == 0;
}

/// Human-readable list of model-relevant differences, empty when compatible.
inline std::vector<std::string> model_config_diff(const json& snapshot, const RunConfig& current)
{
    std::vector<std::string> diffs;
    const auto now = to_key_values(current);
    for (const auto& [key, value] : now) {
        if (!is_model_key(key)) continue;
        if (!snapshot.contains(key)) {
            diffs.push_back(key + ": missing in checkpoint");
            continue;
        }
        const std::string old = snapshot.at(key).get<std::string>();
        if (old != value) diffs.push_back(key + ": checkpoint '" + old + "' vs config '" + value + "'");
    }
    return diffs;
}

inline json config_snapshot(const RunConfig& c)
{
    json j = json::object();
    for (const auto& [k, v] : to_key_values(c)) j[k] = v;
    return j;
}

// ---------------------------------------------------------------- model assembly

inline std::unique_ptr<vlm::Backbone> make_backbone(const RunConfig& c)
{
    vlm::BackboneOptions o;
    o["seed"] = std::to_string(c.backbone_seed);
    const std::string concepts = resolved_concepts(c);
    if (!concepts.empty()) o["concepts"] = concepts;
    return vlm::BackboneRegistry::instance().create(c.backbone_kind, o);
}

inline std::vector<std::string> sorted(const std::set<std::string>& s) { return {s.begin(), s.end()}; }

/// Training classes: the seen split, or every class when no split is given.
inline std::vector<std::string> training_classes(const data::DatasetManifest& m)
{
    return m.split.seen.empty() ? sorted(m.classes()) : sorted(m.split.seen);
}

inline std::vector<data::ManifestRecord> training_records(const data::DatasetManifest& m)
{
    return m.split.seen.empty() ? m.records : m.seen_records();
}

inline std::vector<std::string> evaluation_classes(const data::DatasetManifest& m)
{
    return m.split.unseen.empty() ? sorted(m.classes()) : sorted(m.split.unseen);
}

inline std::vector<data::ManifestRecord> evaluation_records(const data::DatasetManifest& m)
{
    return m.split.unseen.empty() ? m.records : m.unseen_records();
}

inline void append_line(const fs::path& path, const std::string& line)
{
    std::ofstream out(path, std::ios::app);
    if (!out) throw IoError("cannot append to '" + path.string() + "'");
    out << line << "\n";
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

/// Records the files a run produced under its output directory.
class RunManifest {
public:
    explicit RunManifest(fs::path dir) : dir_(std::move(dir)) {}

    void add(const fs::path& file) { files_.insert(fs::relative(file, dir_).generic_string()); }

    void write() const
    {
        json j;
        j["files"] = std::vector<std::string>(files_.begin(), files_.end());
        std::ofstream(dir_ / "run_manifest.json") << j.dump(2) << "\n";
    }

private:
    fs::path dir_;
    std::set<std::string> files_;
};

// ---------------------------------------------------------------- training

struct StepLog {
    std::int64_t step = 0;
    int epoch = 0;
    double seg = 0.0;
    double edge = 0.0;
    double depth = 0.0;
    double total = 0.0;

    json to_json() const
    {
        return {{"step", step}, {"epoch", epoch}, {"l_s", seg}, {"l_e", edge}, {"l_d", depth}, {"total", total}};
    }
};

struct TrainOptions {
    std::string resume_from;                   // checkpoint path, empty = fresh start
    std::function<void(const StepLog&)> on_step; // progress hook
    bool write_outputs = true;
};

struct TrainResult {
    std::vector<StepLog> steps;
    std::vector<double> epoch_means;
    std::uint64_t backbone_hash_before = 0;
    std::uint64_t backbone_hash_after = 0;
    std::set<std::string> nonzero_grad_params;
    std::vector<std::string> parameter_names;
    std::string last_checkpoint;
    std::int64_t steps_run = 0;
    int epochs_completed = 0;
};

inline std::string checkpoint_path(const fs::path& out, int epoch)
{
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", epoch);
    return (out / "checkpoints" / name).string();
}

inline objectives::Targets make_targets(const data::Sample& s)
{
    return {s.mask, s.edge, s.depth};
}

inline TrainResult train(const RunConfig& cfg, const TrainOptions& opt = {})
{
    cfg.validate();
    if (cfg.train_manifest.empty()) throw ConfigError("data.train_manifest is not set");
    const data::DatasetManifest manifest = data::load_manifest(cfg.train_manifest);
    const auto records = training_records(manifest);
    if (records.empty()) throw InvalidInput("training manifest has no seen-class records");
    const auto classes = training_classes(manifest);

    auto backbone = make_backbone(cfg);
    decoder::Decoder dec(cfg.decoder, backbone->spec());
    optim::AdamW adam(dec.parameters(), {cfg.lr, cfg.weight_decay});
    const vlm::ClassEmbeddingSet text =
        prompts::class_embeddings(*backbone, prompts::resolve_template_set(cfg.prompts_train), classes);

    TrainResult res;
    res.backbone_hash_before = backbone->parameter_hash();
    for (const auto& [name, _] : dec.parameters().entries()) res.parameter_names.push_back(name);

    const fs::path out(cfg.output_dir);
    const json snapshot = config_snapshot(cfg);
    RunManifest produced(out);
    int start_epoch = 0;
    std::int64_t step = 0;
    if (!opt.resume_from.empty()) {
        const optim::Checkpoint ck = optim::load_checkpoint(opt.resume_from);
        const auto diffs = model_config_diff(ck.config, cfg);
        if (!diffs.empty()) {
            std::string msg = "checkpoint '" + opt.resume_from + "' is incompatible with the config:";
            for (const auto& d : diffs) msg += "\n  " + d;
            throw ConfigError(msg);
        }
        optim::restore(dec.parameters(), ck);
        if (!ck.optimizer.is_null()) adam.load_state(ck.optimizer);
        start_epoch = ck.epoch;
        step = ck.step;
        res.last_checkpoint = opt.resume_from;
    }
    const fs::path log_path = out / "train_log.jsonl";
    if (opt.write_outputs) {
        fs::create_directories(out);
        if (opt.resume_from.empty()) std::ofstream(log_path, std::ios::trunc);
        produced.add(log_path);
        std::ofstream(out / "config.json") << snapshot.dump(2) << "\n";
        produced.add(out / "config.json");
    }

    data::LoadOptions load;
    load.resolution = cfg.resolution;
    load.train = cfg.augment;
    load.seed = cfg.seed;

    const auto& params = dec.parameters();
    bool capped = false;
    for (int epoch = start_epoch; epoch < cfg.epochs && !capped; ++epoch) {
        std::vector<std::size_t> order(records.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::mt19937_64 shuffle_rng(cfg.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(epoch) + 1);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        load.epoch = epoch;

        double epoch_sum = 0.0;
        int epoch_batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
            if (cfg.max_steps > 0 && step >= cfg.max_steps) {
                capped = true;
                break;
            }
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
            dec.parameters().zero_grad();
            StepLog log;
            log.epoch = epoch;
            for (std::size_t k = b0; k < b1; ++k) {
                const auto& rec = records[order[k]];
                const data::Sample s = data::load_sample(rec, classes, load);
                if (cfg.decoder.depth_aux && !s.depth)
                    throw InvalidInput("sample '" + rec.image_id + "' has no depth map but decoder.depth_aux is on");
                const vlm::FeaturePyramid pyr = backbone->encode_image(s.image);
                objectives::LossBreakdown lb;
                try {
                    const auto states = dec.decode(pyr, text, *backbone);
                    lb = objectives::total_loss(states, make_targets(s), cfg.decoder, cfg.seg_loss);
                } catch (const NumericalFault& e) {
                    throw NumericalFault(std::string(e.what()) + " (sample '" + rec.image_id + "', step " +
                                         std::to_string(step) + "); last good checkpoint: " +
                                         (res.last_checkpoint.empty() ? "none" : res.last_checkpoint));
                }
                ag::backward(lb.total_var);
                log.seg += lb.seg_sum();
                log.edge += lb.edge_sum();
                log.depth += lb.depth_sum();
                log.total += lb.total;
            }
            const double n = static_cast<double>(b1 - b0);
            for (const auto& [name, var] : params.entries())
                if (var.has_grad() && var.grad().cwiseAbs().maxCoeff() > 0.0) res.nonzero_grad_params.insert(name);
            try {
                adam.step(1.0 / n);
            } catch (const NumericalFault& e) {
                throw NumericalFault(std::string(e.what()) + "; last good checkpoint: " +
                                     (res.last_checkpoint.empty() ? "none" : res.last_checkpoint));
            }
            ++step;
            log.step = step;
            log.seg /= n;
            log.edge /= n;
            log.depth /= n;
            log.total /= n;
            epoch_sum += log.total;
            ++epoch_batches;
            res.steps.push_back(log);
            if (opt.write_outputs) append_line(log_path, log.to_json().dump());
            if (opt.on_step) opt.on_step(log);
        }
        if (epoch_batches > 0) res.epoch_means.push_back(epoch_sum / epoch_batches);
        if (!capped) res.epochs_completed = epoch + 1;
        if (opt.write_outputs) {
            const int done = capped ? epoch : epoch + 1;
            const std::string path = capped ? (out / "checkpoints" / "final.ckpt").string() : checkpoint_path(out, done);
            optim::save_checkpoint(path, optim::capture(dec.parameters(), snapshot, &adam, done, step));
            res.last_checkpoint = path;
            produced.add(path);
        }
    }
    res.steps_run = static_cast<std::int64_t>(res.steps.size());
    res.backbone_hash_after = backbone->parameter_hash();
    if (res.backbone_hash_after != res.backbone_hash_before)
        throw NumericalFault("backbone parameters changed during training");
    if (opt.write_outputs) {
        json summary{{"steps", step},
                     {"epochs_completed", res.epochs_completed},
                     {"last_checkpoint", res.last_checkpoint},
                     {"backbone_hash", std::to_string(res.backbone_hash_after)},
                     {"epoch_means", res.epoch_means}};
        std::ofstream(out / "train_summary.json") << summary.dump(2) << "\n";
        produced.add(out / "train_summary.json");
        produced.write();
    }
    return res;
}

// ---------------------------------------------------------------- evaluation

struct EvalOptions {
    std::string checkpoint;   // empty: freshly initialized decoder
    bool write_outputs = true;
    std::string subdir = "eval";
};

struct EvalResult {
    metrics::MetricReport report;
    std::vector<recognizer::SamplePrediction> predictions;
    std::vector<std::string> errors; // "image_id: message"
    std::string output_dir;

    bool ok() const { return errors.empty(); }
};

/// Deterministic planted classifier: exactly round-down(i * accuracy) of the
/// first i samples are correct, spread evenly through the sequence.
inline bool planted_correct(std::size_t index, double accuracy)
{
    const auto a = std::floor(static_cast<double>(index + 1) * accuracy + 1e-9);
    const auto b = std::floor(static_cast<double>(index) * accuracy + 1e-9);
    return a > b;
}

inline std::vector<recognizer::SamplePrediction> oracle_predictions(const std::vector<metrics::GroundTruthEntry>& gts,
                                                                    const std::vector<std::string>& classes,
                                                                    double accuracy)
{
    require(accuracy >= 0.0 && accuracy <= 1.0, "oracle_predictions: accuracy must be in [0,1]");
    require(classes.size() >= 2 || accuracy == 1.0, "oracle_predictions: need two classes to plant mistakes");
    std::vector<recognizer::SamplePrediction> out;
    out.reserve(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) {
        recognizer::SamplePrediction p;
        p.image_id = gts[i].image_id;
        p.seg_prob = gts[i].mask;
        const int truth = data::class_index_of(classes, gts[i].class_name);
        require(truth >= 0, "oracle_predictions: unknown class '" + gts[i].class_name + "'");
        p.class_index = planted_correct(i, accuracy) ? truth : (truth + 1) % static_cast<int>(classes.size());
        p.class_name = classes[static_cast<std::size_t>(p.class_index)];
        p.class_scores.assign(classes.size(), 0.0);
        p.class_scores[static_cast<std::size_t>(p.class_index)] = 1.0;
        out.push_back(std::move(p));
    }
    return out;
}

inline void write_report(const fs::path& dir, const metrics::MetricReport& rep, RunManifest& produced)
{
    json j;
    j["samples"] = rep.samples;
    j["correct"] = rep.correct;
    j["accuracy"] = rep.accuracy();
    j["degenerate"] = rep.degenerate;
    for (std::size_t m = 0; m < metrics::kNumMetrics; ++m) j["aggregate"][metrics::metric_names()[m]] = rep.aggregate[m];
    json rows = json::array();
    for (const auto& r : rep.per_sample) {
        json s{{"image_id", r.image_id},
               {"predicted_class", r.predicted_class},
               {"true_class", r.true_class},
               {"class_correct", r.class_correct},
               {"degenerate", r.degenerate}};
        for (std::size_t m = 0; m < metrics::kNumMetrics; ++m) {
            s["base"][metrics::metric_names()[m]] = r.base[m];
            s["gated"][metrics::metric_names()[m]] = r.gated[m];
        }
        rows.push_back(s);
    }
    j["per_sample"] = rows;
    std::ofstream(dir / "report.json") << j.dump(2) << "\n";
    produced.add(dir / "report.json");

    std::ofstream csv(dir / "report.csv");
    csv << "image_id,predicted_class,true_class,class_correct";
    for (const auto& n : metrics::metric_names()) csv << "," << n;
    csv << "\n";
    csv.precision(10);
    for (const auto& r : rep.per_sample) {
        csv << r.image_id << "," << r.predicted_class << "," << r.true_class << "," << (r.class_correct ? 1 : 0);
        for (double v : r.gated) csv << "," << v;
        csv << "\n";
    }
    csv << "mean,,," << rep.accuracy();
    for (double v : rep.aggregate) csv << "," << v;
    csv << "\n";
    produced.add(dir / "report.csv");

    std::ofstream table(dir / "table_row.txt");
    for (std::size_t m = 0; m < metrics::kNumMetrics; ++m) table << (m ? " " : "") << metrics::metric_names()[m];
    table << "\n" << metrics::format_row(rep.aggregate) << "\n";
    produced.add(dir / "table_row.txt");
}

inline EvalResult evaluate(const RunConfig& cfg, const EvalOptions& opt = {})
{
    cfg.validate();
    if (cfg.eval_manifest.empty()) throw ConfigError("data.eval_manifest is not set");
    const data::DatasetManifest manifest = data::load_manifest(cfg.eval_manifest);
    const auto records = evaluation_records(manifest);
    if (records.empty()) throw InvalidInput("evaluation manifest has no unseen-class records");
    const auto classes = evaluation_classes(manifest);

    EvalResult res;
    const fs::path out = fs::path(cfg.output_dir) / opt.subdir;
    res.output_dir = out.string();
    RunManifest produced(out);
    if (opt.write_outputs) {
        fs::create_directories(out / "predictions");
        std::ofstream(out / "skipped.log", std::ios::trunc);
        std::ofstream(out / "predictions.jsonl", std::ios::trunc);
    }
    auto skip = [&](const std::string& id, const std::string& msg) {
        res.errors.push_back(id + ": " + msg);
        if (opt.write_outputs) append_line(out / "skipped.log", id + "\t" + msg);
    };

    std::vector<metrics::GroundTruthEntry> gts;
    if (cfg.oracle_accuracy >= 0.0) {
        for (const auto& rec : records) {
            try {
                gts.push_back({rec.image_id, io::read_mask(rec.mask_path), rec.class_name});
            } catch (const std::exception& e) {
                skip(rec.image_id, e.what());
            }
        }
        if (gts.empty()) throw InvalidInput("no evaluation sample could be read");
        res.predictions = oracle_predictions(gts, classes, cfg.oracle_accuracy);
    } else {
        auto backbone = make_backbone(cfg);
        decoder::Decoder dec(cfg.decoder, backbone->spec());
        if (!opt.checkpoint.empty()) {
            const optim::Checkpoint ck = optim::load_checkpoint(opt.checkpoint);
            const auto diffs = model_config_diff(ck.config, cfg);
            if (!diffs.empty()) {
                std::string msg = "checkpoint '" + opt.checkpoint + "' is incompatible with the config:";
                for (const auto& d : diffs) msg += "\n  " + d;
                throw ConfigError(msg);
            }
            optim::restore(dec.parameters(), ck);
        }
        const vlm::ClassEmbeddingSet text =
            prompts::class_embeddings(*backbone, prompts::resolve_template_set(cfg.eval_prompts()), classes);
        data::LoadOptions load;
        load.resolution = cfg.resolution;
        ag::NoGradGuard no_grad;
        for (const auto& rec0 : records) {
            data::ManifestRecord rec = rec0;
            rec.depth_path.reset(); // inference consumes RGB only
            try {
                const data::Sample s = data::load_sample(rec, classes, load);
                const Map gt = io::read_mask(rec.mask_path);
                const vlm::FeaturePyramid pyr = backbone->encode_image(s.image);
                const auto states = dec.decode(pyr, text, *backbone);
                const Map prob = states.back().prob_map();
                recognizer::SamplePrediction p = recognizer::recognize(*backbone, pyr, prob, text);
                p.image_id = rec.image_id;
                if (gt.height() != prob.height() || gt.width() != prob.width())
                    p.seg_prob = resize_bilinear(prob, gt.height(), gt.width());
                for (double& v : p.seg_prob.values()) v = std::clamp(v, 0.0, 1.0);
                gts.push_back({rec.image_id, gt, rec.class_name});
                res.predictions.push_back(std::move(p));
            } catch (const std::exception& e) {
                skip(rec.image_id, e.what());
            }
        }
        if (res.predictions.empty()) throw InvalidInput("no evaluation sample could be processed");
    }

    res.report = metrics::evaluate(res.predictions, gts);
    if (opt.write_outputs) {
        for (const auto& p : res.predictions) {
            const fs::path png = out / "predictions" / (p.image_id + ".png");
            io::write_gray8(png.string(), p.seg_prob);
            produced.add(png);
            append_line(out / "predictions.jsonl", json{{"image_id", p.image_id},
                                                       {"class_name", p.class_name},
                                                       {"class_score", p.class_score()},
                                                       {"degenerate", p.degenerate}}
                                                      .dump());
        }
        produced.add(out / "predictions.jsonl");
        produced.add(out / "skipped.log");
        write_report(out, res.report, produced);
        produced.write();
    }
    return res;
}

// ---------------------------------------------------------------- ablation

struct AblationPreset {
    std::string name;
    bool camo_prompts = true;
    bool semantic_guidance = true;
    bool depth_aux = true;
    bool edge_aux = true;
    int iterations = 2;
    bool correlation = true;
    bool object_repr = true;
    decoder::StructureFusion fusion = decoder::StructureFusion::Attention;
};

/// Every comparison row of the component/iteration ablation, in table order.
inline std::vector<AblationPreset> builtin_presets()
{
    using decoder::StructureFusion;
    return {
        {"baseline", false, false, false, false, 1, true, true, StructureFusion::Attention},
        {"plus_p", true, false, false, false, 1, true, true, StructureFusion::Attention},
        {"plus_pc", true, true, false, false, 1, true, true, StructureFusion::Attention},
        {"plus_pcd", true, true, true, false, 1, true, true, StructureFusion::Attention},
        {"plus_pce", true, true, false, true, 1, true, true, StructureFusion::Attention},
        {"plus_pcde", true, true, true, true, 1, true, true, StructureFusion::Attention},
        {"addition_fusion", true, true, true, true, 1, true, true, StructureFusion::Addition},
        {"t1", true, true, true, true, 1, true, true, StructureFusion::Attention},
        {"t2", true, true, true, true, 2, true, true, StructureFusion::Attention},
        {"no_mcor", true, true, true, true, 2, false, true, StructureFusion::Attention},
        {"no_fobj", true, true, true, true, 2, true, false, StructureFusion::Attention},
        {"t3", true, true, true, true, 3, true, true, StructureFusion::Attention},
    };
}

inline std::map<std::string, std::vector<std::string>> preset_groups()
{
    return {{"table3",
             {"baseline", "plus_p", "plus_pc", "plus_pcd", "plus_pce", "plus_pcde", "addition_fusion", "t1", "t2",
              "no_mcor", "no_fobj", "t3"}},
            {"t-sweep", {"t1", "t2", "t3"}}};
}

/// Resolves group and preset names; extra presets may be supplied (e.g. from
/// a file) but must not reuse an existing name.
inline std::vector<AblationPreset> expand_presets(const std::vector<std::string>& names,
                                                  const std::vector<AblationPreset>& extra = {})
{
    std::map<std::string, AblationPreset> known;
    for (const auto& p : builtin_presets()) known[p.name] = p;
    const auto groups = preset_groups();
    for (const auto& p : extra) {
        if (known.count(p.name) || groups.count(p.name))
            throw ConfigError("ablation preset name collision: '" + p.name + "'");
        known[p.name] = p;
    }
    std::vector<AblationPreset> out;
    std::set<std::string> used;
    auto push = [&](const std::string& n) {
        auto it = known.find(n);
        if (it == known.end()) throw ConfigError("unknown ablation preset '" + n + "'");
        if (used.insert(n).second) out.push_back(it->second);
    };
    for (const auto& n : names) {
        if (auto g = groups.find(n); g != groups.end())
            for (const auto& m : g->second) push(m);
        else
            push(n);
    }
    return out;
}

inline RunConfig apply_preset(RunConfig c, const AblationPreset& p)
{
    c.prompts_train = p.camo_prompts ? "camo" : "photo";
    c.prompts_eval = c.prompts_train;
    c.decoder.semantic_guidance = p.semantic_guidance;
    c.decoder.depth_aux = p.depth_aux;
    c.decoder.edge_aux = p.edge_aux;
    c.decoder.iterations = p.iterations;
    c.decoder.use_correlation = p.correlation;
    c.decoder.use_object_repr = p.object_repr;
    c.decoder.fusion = p.fusion;
    c.output_dir = (fs::path(c.output_dir) / "ablate" / p.name).string();
    return c;
}

struct AblationRow {
    std::string name;
    metrics::MetricRow metrics{};
    double accuracy = 0.0;
    double delta = 0.0; // fraction, relative to the row named "baseline" (or the first row)
};

/// Fills `delta` for each row from the metric values.
inline void compute_deltas(std::vector<AblationRow>& rows)
{
    if (rows.empty()) return;
    const AblationRow* base = &rows.front();
    for (const auto& r : rows)
        if (r.name == "baseline") base = &r;
    const metrics::MetricRow ref = base->metrics;
    for (auto& r : rows) r.delta = metrics::relative_gain(ref, r.metrics);
}

inline std::string format_delta(double fraction)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f%%", fraction * 100.0);
    return buf;
}

inline std::string format_table(const std::vector<AblationRow>& rows)
{
    std::ostringstream o;
    o << "model";
    for (const auto& n : metrics::metric_names()) o << "\t" << n;
    o << "\taccuracy\tdelta\n";
    for (const auto& r : rows) {
        o << r.name;
        char buf[32];
        for (double v : r.metrics) {
            std::snprintf(buf, sizeof(buf), "\t%.3f", v);
            o << buf;
        }
        std::snprintf(buf, sizeof(buf), "\t%.3f", r.accuracy);
        o << buf << "\t" << format_delta(r.delta) << "\n";
    }
    return o.str();
}

using RunFn = std::function<AblationRow(const RunConfig&, const AblationPreset&)>;

/// Default per-preset runner: train then evaluate the final checkpoint.
inline AblationRow train_and_evaluate(const RunConfig& cfg, const AblationPreset& preset)
{
    const TrainResult tr = train(cfg);
    EvalOptions eo;
    eo.checkpoint = tr.last_checkpoint;
    const EvalResult er = evaluate(cfg, eo);
    return {preset.name, er.report.aggregate, er.report.accuracy(), 0.0};
}

inline std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<AblationPreset>& presets,
                                       const RunFn& run = train_and_evaluate, bool write_outputs = true)
{
    std::set<std::string> names;
    for (const auto& p : presets)
        if (!names.insert(p.name).second) throw ConfigError("ablation preset name collision: '" + p.name + "'");
    std::vector<AblationRow> rows;
    for (const auto& p : presets) rows.push_back(run(apply_preset(base, p), p));
    compute_deltas(rows);
    if (write_outputs) {
        const fs::path dir = fs::path(base.output_dir) / "ablate";
        fs::create_directories(dir);
        std::ofstream(dir / "table.tsv") << format_table(rows);
        std::ofstream csv(dir / "table.csv");
        csv << "model";
        for (const auto& n : metrics::metric_names()) csv << "," << n;
        csv << ",accuracy,delta\n";
        csv.precision(10);
        for (const auto& r : rows) {
            csv << r.name;
            for (double v : r.metrics) csv << "," << v;
            csv << "," << r.accuracy << "," << r.delta << "\n";
        }
    }
    return rows;
}

} // namespace ovcos::harness
