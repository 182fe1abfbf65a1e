// Acceptance runner: one PASS/FAIL line per criterion.
//   ovcos_acceptance                 all criteria
//   ovcos_acceptance --criterion 3   just one

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ovcos/camo_data.hpp"
#include "ovcos/decoder.hpp"
#include "ovcos/harness.hpp"
#include "ovcos/metrics.hpp"
#include "ovcos/objectives.hpp"
#include "ovcos/prompt_engine.hpp"
#include "ovcos/synthetic.hpp"
#include "support/ablation_reference.hpp"
#include "support/data_fixtures.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace ovcos;
namespace fs = std::filesystem;

namespace {

/// Collects individual checks; the criterion passes when none failed.
class Verdict {
public:
    void check(bool ok, const std::string& what)
    {
        if (!ok) failures_.push_back(what);
    }
    void note(const std::string& s) { notes_.push_back(s); }
    bool passed() const { return failures_.empty(); }

    std::string summary() const
    {
        std::ostringstream o;
        const auto& items = failures_.empty() ? notes_ : failures_;
        for (std::size_t i = 0; i < items.size(); ++i) o << (i ? "; " : "") << items[i];
        return o.str();
    }

private:
    std::vector<std::string> failures_;
    std::vector<std::string> notes_;
};

std::string num(double v, int prec = 6)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    return buf;
}

fs::path workdir(int criterion)
{
    const fs::path p = fs::temp_directory_path() / ("ovcos_acceptance_" + std::to_string(criterion));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

using Named = std::vector<std::pair<std::string, ag::Var>>;

Named params_with_prefix(const decoder::Decoder& dec, const std::string& prefix)
{
    Named out;
    for (const auto& [name, v] : dec.parameters().entries())
        if (name.rfind(prefix, 0) == 0) out.emplace_back(name, v);
    return out;
}

ag::Var readout(const ag::Var& y, const Matrix& r) { return ag::sum_all(ag::mul(y, ag::constant(r))); }

// ---------------------------------------------------------------- 1

void metric_gate(Verdict& v)
{
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> corner(2, 12), extent(4, 18);
    const std::vector<std::string> classes{"crab", "frog", "moth"};
    std::vector<metrics::GroundTruthEntry> gts;
    for (int i = 0; i < 1000; ++i) {
        const int r0 = corner(rng), c0 = corner(rng);
        gts.push_back({"s" + std::to_string(i), data_fixtures::rect(32, 32, r0, c0, r0 + extent(rng), c0 + extent(rng)),
                       classes[static_cast<std::size_t>(i) % classes.size()]});
    }
    const auto preds = harness::oracle_predictions(gts, classes, 0.703);
    const auto rep = metrics::evaluate(preds, gts);
    v.check(std::abs(rep.accuracy() - 0.703) <= 1e-12, "accuracy " + num(rep.accuracy()));
    for (std::size_t m = 0; m < metrics::kNumMetrics; ++m) {
        const bool mae = metrics::gate_kind(m) == metrics::GateKind::Mae;
        const double want = mae ? 0.297 : 0.703;
        v.check(std::abs(rep.aggregate[m] - want) <= 1e-9,
                metrics::metric_names()[m] + " = " + num(rep.aggregate[m], 12) + ", want " + num(want));
    }
    v.note("row " + metrics::format_row(rep.aggregate));
}

// ---------------------------------------------------------------- 2

void base_metrics(Verdict& v)
{
    std::mt19937_64 rng(20240601);
    std::uniform_int_distribution<int> sz(1, 16);
    std::array<double, metrics::kNumMetrics> worst{};
    for (int t = 0; t < 200; ++t) {
        const int h = sz(rng), w = sz(rng);
        const Map g = oracle::random_mask(rng, h, w);
        const Map p = oracle::random_prediction(rng, g);
        const auto got = metrics::base_metrics(p, g);
        const std::array<double, metrics::kNumMetrics> want{oracle::s_measure(p, g), oracle::f_beta_weighted(p, g),
                                                            oracle::mae(p, g),       oracle::f_beta(p, g),
                                                            oracle::e_measure(p, g), oracle::iou(p, g)};
        for (std::size_t m = 0; m < metrics::kNumMetrics; ++m)
            worst[m] = std::max(worst[m], std::abs(got[m] - want[m]));
    }
    std::string row;
    for (std::size_t m = 0; m < metrics::kNumMetrics; ++m) {
        v.check(worst[m] <= 1e-6, metrics::metric_names()[m] + " max error " + num(worst[m]));
        row += (m ? " " : "") + metrics::metric_names()[m] + " " + num(worst[m], 2);
    }
    v.note("max |err| " + row);
}

// ---------------------------------------------------------------- 3

void gradients(Verdict& v)
{
    auto backbone = fixtures::toy_backbone();
    const auto text = fixtures::toy_text(*backbone);
    double worst = 0.0;
    auto record = [&](const std::string& what, const gradcheck::Result& r) {
        worst = std::max(worst, r.max_relative_error);
        v.check(r.max_relative_error < 1e-4, what + " rel err " + num(r.max_relative_error) + " at " + r.worst_input);
    };

    {
        const auto cfg = fixtures::small_config();
        decoder::Decoder dec(cfg, backbone->spec());
        std::mt19937_64 rng(3);
        ag::Var x = ag::parameter(gradcheck::random_matrix(rng, 36, cfg.width));
        ag::Var remod = ag::parameter((gradcheck::random_matrix(rng, 36, 1).array() * 0.3 + 0.5).matrix());
        const Matrix r = gradcheck::random_matrix(rng, 36, cfg.width);
        Named in = params_with_prefix(dec, "stage2.sga");
        in.emplace_back("x", x);
        in.emplace_back("remod", remod);
        record("SGA", gradcheck::check(in, [&] { return readout(dec.sga_forward(2, x, text, &remod).output, r); }));
    }
    {
        const auto cfg = fixtures::small_config();
        decoder::Decoder dec(cfg, backbone->spec());
        std::mt19937_64 rng(5);
        dec.alpha_logit(1).mutable_value() = gradcheck::random_matrix(rng, 1, cfg.heads);
        ag::Var x = ag::parameter(gradcheck::random_matrix(rng, 30, cfg.width));
        ag::Var e = ag::parameter(gradcheck::random_matrix(rng, 30, cfg.width));
        ag::Var d = ag::parameter(gradcheck::random_matrix(rng, 30, cfg.width));
        const Matrix r = gradcheck::random_matrix(rng, 30, cfg.width);
        Named in = params_with_prefix(dec, "stage1.sea");
        in.insert(in.end(), {{"x", x}, {"edge", e}, {"depth", d}});
        record("SEA", gradcheck::check(in, [&] { return readout(dec.sea_forward(1, x, e, d), r); }));
    }
    {
        std::mt19937_64 rng(1);
        const int h = 12, w = 10;
        Map disc(h, w);
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) disc(r, c) = (r - 6.0) * (r - 6.0) + (c - 5.0) * (c - 5.0) < 12.0;
        const Matrix gt = map_to_column(disc);
        std::uniform_real_distribution<double> u(0.05, 0.95);
        for (auto kind : {objectives::SegLossKind::WeightedBceIou, objectives::SegLossKind::BceIou}) {
            Matrix init(h * w, 1);
            for (Eigen::Index i = 0; i < init.size(); ++i) init(i, 0) = u(rng);
            ag::Var p = ag::parameter(init);
            record("seg loss", gradcheck::check({{"pred", p}}, [&] { return objectives::seg_loss(p, gt, h, w, kind); }));
        }
        Matrix soft(40, 1);
        for (Eigen::Index i = 0; i < 40; ++i) soft(i, 0) = u(rng);
        ag::Var el = ag::parameter(gradcheck::random_matrix(rng, 40, 1));
        record("edge loss", gradcheck::check({{"logits", el}}, [&] { return objectives::edge_loss(el, soft); }));
        Matrix depth_gt(9 * 14, 1);
        for (Eigen::Index i = 0; i < depth_gt.size(); ++i) depth_gt(i, 0) = u(rng);
        ag::Var dl = ag::parameter(gradcheck::random_matrix(rng, 9 * 14, 1));
        record("depth loss",
               gradcheck::check({{"logits", dl}}, [&] { return objectives::depth_loss(dl, depth_gt, 9, 14); }));
    }
    {
        const auto cfg = fixtures::small_config(2);
        decoder::Decoder dec(cfg, backbone->spec());
        const auto scene = fixtures::toy_scene(32);
        const auto pyr = backbone->encode_image(scene.image);
        Named in(dec.parameters().entries().begin(), dec.parameters().entries().end());
        record("decode",
               gradcheck::check(
                   in,
                   [&] { return objectives::total_loss(dec.decode(pyr, text, *backbone), scene.targets, cfg).total_var; },
                   1e-5, 6));
    }
    v.note("worst relative error " + num(worst));
}

// ---------------------------------------------------------------- 4

void loss_structure(Verdict& v)
{
    auto backbone = fixtures::toy_backbone();
    const auto text = fixtures::toy_text(*backbone);
    const auto scene = fixtures::toy_scene(64);
    for (int t : {2, 1}) {
        const auto cfg = fixtures::small_config(t);
        decoder::Decoder dec(cfg, backbone->spec());
        const auto lb = objectives::total_loss(dec.decode(backbone->encode_image(scene.image), text, *backbone),
                                               scene.targets, cfg);
        const std::size_t want = t == 2 ? 14u : 7u;
        v.check(lb.term_count() == want, "T=" + std::to_string(t) + " has " + std::to_string(lb.term_count()) + " terms");
        std::size_t edge = 0, depth = 0;
        for (const auto& it : lb.edge_terms) edge += it.size();
        for (const auto& it : lb.depth_terms) depth += it.size();
        v.check(lb.seg_terms.size() + edge + depth == lb.term_count(), "terms outside seg/edge/depth");
        // any classification contribution would show up as a gap here
        v.check(std::abs(lb.total - (lb.seg_sum() + lb.edge_sum() + lb.depth_sum())) <= 1e-12,
                "total differs from seg+edge+depth");
        v.note("T=" + std::to_string(t) + ": " + std::to_string(lb.seg_terms.size()) + " seg + " +
               std::to_string(edge) + " edge + " + std::to_string(depth) + " depth");
    }
}

// ---------------------------------------------------------------- 5

void frozen_backbone(Verdict& v)
{
    const fs::path dir = workdir(5);
    synth::ToyOptions opt;
    opt.train_count = 16;
    opt.eval_count = 4;
    opt.size = 64;
    const auto layout = synth::write_toy_dataset((dir / "toy").string(), opt);
    const auto cfg = harness::load_config(
        {layout.config}, {"batch_size=1", "epochs=10", "max_steps=50", "output.dir=" + (dir / "run").string()});
    const std::uint64_t fresh_hash = harness::make_backbone(cfg)->parameter_hash();
    harness::TrainOptions to;
    to.write_outputs = false;
    const auto r = harness::train(cfg, to);
    v.check(r.steps_run == 50, "ran " + std::to_string(r.steps_run) + " steps");
    v.check(r.backbone_hash_before == fresh_hash && r.backbone_hash_after == fresh_hash, "backbone hash changed");
    std::size_t missing = 0;
    for (const auto& name : r.parameter_names)
        if (!r.nonzero_grad_params.count(name)) {
            ++missing;
            v.check(false, "no gradient reached " + name);
        }
    v.note("50 steps, backbone hash " + std::to_string(fresh_hash) + " unchanged, " +
           std::to_string(r.parameter_names.size() - missing) + "/" + std::to_string(r.parameter_names.size()) +
           " decoder tensors received gradient");
}

// ---------------------------------------------------------------- 6

void iteration_entry(Verdict& v)
{
    auto backbone = fixtures::toy_backbone();
    const auto text = fixtures::toy_text(*backbone);
    decoder::Decoder dec(fixtures::small_config(2), backbone->spec());
    const auto states = dec.decode(backbone->encode_image(fixtures::toy_scene(64).image), text, *backbone);
    v.check(states.size() == 2, "expected two decode states");
    if (states.size() != 2) return;
    for (int stage : {5, 4})
        v.check(states[0].stage(stage).feature.value() == states[1].stage(stage).feature.value(),
                "stage " + std::to_string(stage) + " features differ across iterations");
    bool refined = false;
    for (int stage : {3, 2, 1})
        refined |= !(states[0].stage(stage).feature.value() == states[1].stage(stage).feature.value());
    v.check(refined, "second iteration did not change stages 3..1");

    std::mt19937_64 rng(12);
    for (int stage = 1; stage <= 5; ++stage) {
        const ag::Var x = ag::constant(gradcheck::random_matrix(rng, 16, 8));
        const ag::Var ones = ag::constant(Matrix::Ones(16, 1));
        const Matrix plain = dec.sga_forward(stage, x, text).output.value();
        const Matrix unit = dec.sga_forward(stage, x, text, &ones).output.value();
        v.check(plain == unit, "W_r = 1 changes the stage " + std::to_string(stage) + " output");
    }
    v.note("stages 5/4 bit-identical, unit remodulation bit-exact on all stages");
}

// ---------------------------------------------------------------- 7

void camo_prompts(Verdict& v)
{
    const std::vector<std::string> want{
        "A photo of the camouflaged <class>.",
        "A photo of the concealed <class>.",
        "A photo of the <class> camouflaged in the background.",
        "A photo of the <class> concealed in the background.",
        "A photo of the <class> camouflaged to blend in with its surroundings.",
        "A photo of the <class> concealed to blend in with its surroundings.",
    };
    const auto set = prompts::camo_prompts();
    v.check(set.templates() == want, "template strings differ");

    vlm::StubBackbone bb;
    const std::vector<std::string> classes{"crab", "moth", "sea horse", "stick insect"};
    const auto emb = prompts::class_embeddings(bb, set, classes);
    double norm_err = 0.0, mean_err = 0.0;
    for (Eigen::Index r = 0; r < emb.embeddings.rows(); ++r) {
        norm_err = std::max(norm_err, std::abs(emb.embeddings.row(r).norm() - 1.0));
        Matrix mean = bb.encode_text(prompts::expand(set, classes[static_cast<std::size_t>(r)])).embeddings.colwise().mean();
        mean /= mean.norm();
        mean_err = std::max(mean_err, (emb.embeddings.row(r) - mean).cwiseAbs().maxCoeff());
    }
    v.check(norm_err < 1e-12, "embedding norm error " + num(norm_err));
    v.check(mean_err < 1e-12, "embedding is not the normalized template mean");

    std::mt19937_64 rng(7);
    const Matrix a = gradcheck::random_matrix(rng, 6, 64);
    v.check(prompts::hausdorff_distance(a, a) == 0.0, "H(A,A) != 0");
    const Matrix p = (Matrix(1, 2) << 0, 0).finished(), q = (Matrix(1, 2) << 3, 4).finished();
    const double h = prompts::hausdorff_distance(p, q);
    v.check(h == 5.0, "H((0,0),(3,4)) = " + num(h));
    v.note("6 templates verbatim, norm error " + num(norm_err, 2) + ", H((0,0),(3,4)) = " + num(h));
}

// ---------------------------------------------------------------- 8

void dataset(Verdict& v)
{
    int matched = 0;
    const auto cases = data_fixtures::attribute_fixtures();
    for (const auto& c : cases) {
        const auto got = data::compute_attributes(c.mask, c.image);
        const auto want = oracle::attributes(c.mask, c.image);
        const bool ok = std::abs(got.concentration - want.concentration) <= 1e-9 &&
                        std::abs(got.avg_color_ratio - want.color_ratio) <= 1e-9 &&
                        std::abs(got.area_ratio - want.area_ratio) <= 1e-9 && std::abs(got.centroid_x - want.cx) <= 1e-9 &&
                        std::abs(got.centroid_y - want.cy) <= 1e-9 && got.num_parts == want.parts;
        v.check(ok, "attributes differ on fixture " + c.name);
        matched += ok;
    }
    v.check(cases.size() == 20, "expected 20 attribute fixtures");

    data::Taxonomy tax;
    tax.add_edge("insect", "moth");
    tax.add_node("rock");
    const double same = data::path_similarity(tax, "moth", "moth");
    const double adjacent = data::path_similarity(tax, "moth", "insect");
    const double apart = data::path_similarity(tax, "moth", "rock");
    v.check(same == 1.0 && adjacent == 0.5 && apart == 0.0,
            "path similarity " + num(same) + "/" + num(adjacent) + "/" + num(apart));

    const fs::path dir = workdir(8);
    auto src = data_fixtures::ovcamo_manifest_from_env();
    const bool real = src.has_value();
    if (!real) src = data_fixtures::write_ovcamo_shaped_manifest(dir);
    data::ManifestOptions mo;
    mo.split_path = src->split;
    mo.check_files = real;
    const auto m = data::load_manifest(src->manifest, mo);
    const std::size_t n = m.records.size(), classes = m.classes().size(), seen = m.split.seen.size(),
                      unseen = m.split.unseen.size(), seen_n = m.seen_records().size(),
                      unseen_n = m.unseen_records().size();
    v.check(n == 11483 && classes == 75 && seen == 14 && unseen == 61 && seen_n == 7713 && unseen_n == 3770,
            "manifest counts " + std::to_string(n) + "/" + std::to_string(classes) + "/" + std::to_string(seen) + "/" +
                std::to_string(unseen) + "/" + std::to_string(seen_n) + "/" + std::to_string(unseen_n));
    v.note(std::to_string(matched) + "/20 attribute fixtures, path similarity 1/0.5/0, " +
           (real ? "real manifest " + src->manifest : std::string("synthetic OVCamo-shaped manifest")) + ": " +
           std::to_string(n) + " records, " + std::to_string(classes) + " classes, " + std::to_string(seen) + "/" +
           std::to_string(unseen) + " split, " + std::to_string(seen_n) + "/" + std::to_string(unseen_n) + " samples");
}

// ---------------------------------------------------------------- 9

void toy_learnability(Verdict& v)
{
    const fs::path dir = workdir(9);
    const auto layout = synth::write_toy_dataset((dir / "toy").string());
    const auto cfg = harness::load_config({layout.config}, {"output.dir=" + (dir / "run").string()});
    v.check(cfg.eval_prompts() == layout.eval_templates, "evaluation does not use the held-out templates");
    const auto tr = harness::train(cfg);
    harness::EvalOptions eo;
    eo.checkpoint = tr.last_checkpoint;
    const auto er = harness::evaluate(cfg, eo);
    const double ciou = er.report.aggregate[static_cast<std::size_t>(metrics::Metric::IoU)];
    const double acc = er.report.accuracy();
    v.check(er.report.samples == 16, "evaluated " + std::to_string(er.report.samples) + " samples");
    v.check(ciou >= 0.5, "cIoU " + num(ciou, 4));
    v.check(acc >= 0.9, "accuracy " + num(acc, 4));
    v.note(std::to_string(tr.steps_run) + " steps; cIoU " + num(ciou, 4) + ", accuracy " + num(acc, 4) + ", row " +
           metrics::format_row(er.report.aggregate));
}

// ---------------------------------------------------------------- 10

void delta_formula(Verdict& v)
{
    const auto rows = ablation_reference::rows();
    auto find = [&](const std::string& name) {
        for (const auto& r : rows)
            if (r.name == name) return r;
        throw InvalidInput("no reference row " + name);
    };
    const auto base = find("baseline");
    std::string got;
    for (const char* name : {"plus_p", "t2"}) {
        const auto r = find(name);
        const double pct = metrics::relative_gain(base.metrics, r.metrics) * 100.0;
        v.check(std::abs(pct - r.delta_percent) <= 0.2,
                std::string(name) + " gives " + num(pct, 4) + "%, want " + num(r.delta_percent) + "%");
        got += std::string(got.empty() ? "" : ", ") + name + " " + harness::format_delta(pct / 100.0);
    }
    v.note(got);
}

struct Criterion {
    int id;
    const char* title;
    double budget_s; // 0 = no time limit
    std::function<void(Verdict&)> run;
};

const std::vector<Criterion>& criteria()
{
    static const std::vector<Criterion> all{
        {1, "metric gate", 10.0, metric_gate},
        {2, "base metrics vs oracles", 60.0, base_metrics},
        {3, "gradients vs finite differences", 120.0, gradients},
        {4, "loss structure", 0.0, loss_structure},
        {5, "frozen backbone", 0.0, frozen_backbone},
        {6, "iteration entry", 0.0, iteration_entry},
        {7, "CamoPrompts", 0.0, camo_prompts},
        {8, "dataset", 0.0, dataset},
        {9, "toy learnability", 900.0, toy_learnability},
        {10, "relative gain formula", 0.0, delta_formula},
    };
    return all;
}

bool run_one(const Criterion& c)
{
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        c.run(v);
    } catch (const std::exception& e) {
        v.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0.0) v.check(secs < c.budget_s, "took " + num(secs, 4) + " s, limit " + num(c.budget_s) + " s");
    std::printf("criterion %d (%s): %s [%.2f s] %s\n", c.id, c.title, v.passed() ? "PASS" : "FAIL", secs,
                v.summary().c_str());
    std::fflush(stdout);
    return v.passed();
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"acceptance criteria"};
    int only = 0;
    app.add_option("--criterion", only, "run a single criterion (1-10)")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);
    bool ok = true;
    for (const auto& c : criteria())
        if (only == 0 || c.id == only) ok &= run_one(c);
    return ok ? 0 : 1;
}
