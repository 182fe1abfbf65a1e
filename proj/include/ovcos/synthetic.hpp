#pragma once

// Synthetic camouflage scenes for smoke tests and the learnability check:
// a textured ellipse tinted toward its class colour on a background that
// shares the same texture field.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <cstdio>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ovcos/camo_data.hpp"
#include "ovcos/image.hpp"
#include "ovcos/io.hpp"
#include "ovcos/vlm_bridge.hpp"

namespace ovcos::synth {

struct ToyClass {
    std::string name;
    std::array<double, 3> color;
};

inline std::vector<ToyClass> default_classes()
{
    return {{"crab", {0.8, 0.3, 0.2}},
            {"frog", {0.2, 0.7, 0.3}},
            {"beetle", {0.25, 0.35, 0.85}},
            {"moth", {0.85, 0.8, 0.25}}};
}

/// Phrasings never used during training.
inline std::vector<std::string> held_out_templates()
{
    return {"A photo of the hidden <class>.", "A <class> hiding in plain sight."};
}

struct ToyOptions {
    int train_count = 64;
    int eval_count = 16;
    int size = 64;
    std::uint64_t seed = 2024;
    double tint = 0.75;           // object colour = mix(background, class colour, tint)
    double texture_amplitude = 0.08;
    std::vector<ToyClass> classes = default_classes();
};

struct ToyScene {
    Image image;
    Map mask;
    Map depth;
    int class_index = 0;
};

inline ToyScene make_scene(const ToyOptions& opt, int class_index, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int n = opt.size;
    ToyScene s;
    s.class_index = class_index;
    s.image = Image(3, n, n);
    s.mask = Map(n, n);
    s.depth = Map(n, n);

    // shared texture: a few oriented sinusoids plus pixel noise
    struct Wave {
        double fx, fy, phase, amp;
    };
    std::vector<Wave> waves;
    for (int k = 0; k < 3; ++k) {
        const double ang = u(rng) * M_PI;
        const double freq = 0.25 + 0.5 * u(rng);
        waves.push_back({freq * std::cos(ang), freq * std::sin(ang), u(rng) * 2 * M_PI, 0.5 + 0.5 * u(rng)});
    }
    std::normal_distribution<double> noise(0.0, 0.35);

    const double bg_level = 0.45 + 0.1 * u(rng);
    const std::array<double, 3> bg{bg_level + 0.04 * (u(rng) - 0.5), bg_level + 0.04 * (u(rng) - 0.5),
                                   bg_level + 0.04 * (u(rng) - 0.5)};
    const auto& cls = opt.classes[static_cast<std::size_t>(class_index)].color;
    std::array<double, 3> obj{};
    for (int ch = 0; ch < 3; ++ch)
        obj[static_cast<std::size_t>(ch)] = (1 - opt.tint) * bg[static_cast<std::size_t>(ch)] + opt.tint * cls[static_cast<std::size_t>(ch)];

    const double cx = n * (0.3 + 0.4 * u(rng));
    const double cy = n * (0.3 + 0.4 * u(rng));
    const double ra = n * (0.14 + 0.11 * u(rng));
    const double rb = n * (0.14 + 0.11 * u(rng));
    const double th = u(rng) * M_PI;
    const double ct = std::cos(th);
    const double st = std::sin(th);
    const double slope = 0.2 + 0.2 * u(rng);

    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            const double x = c + 0.5 - cx;
            const double y = r + 0.5 - cy;
            const double xr = (ct * x + st * y) / ra;
            const double yr = (-st * x + ct * y) / rb;
            const double d2 = xr * xr + yr * yr;
            const bool inside = d2 <= 1.0;
            double t = 0.0;
            for (const auto& w : waves) t += w.amp * std::sin(w.fx * c + w.fy * r + w.phase);
            t = (t / 3.0 + noise(rng) / 3.0) * opt.texture_amplitude;
            const auto& base = inside ? obj : bg;
            for (int ch = 0; ch < 3; ++ch)
                s.image(ch, r, c) = std::clamp(base[static_cast<std::size_t>(ch)] * (1.0 + t), 0.0, 1.0);
            s.mask(r, c) = inside ? 1.0 : 0.0;
            double depth = slope + 0.4 * (static_cast<double>(r) / n);
            if (inside) depth += 0.3 * std::sqrt(std::max(0.0, 1.0 - d2));
            s.depth(r, c) = std::clamp(depth, 0.0, 1.0);
        }
    return s;
}

struct ToyLayout {
    std::string root;
    std::string train_manifest;
    std::string train_split;
    std::string eval_manifest;
    std::string eval_split;
    std::string concepts;
    std::string taxonomy;
    std::string eval_templates;
    std::string config;
};

inline ToyLayout layout_for(const std::string& root)
{
    const std::filesystem::path r(root);
    return {root,
            (r / "train.jsonl").string(),
            (r / "train_split.json").string(),
            (r / "eval.jsonl").string(),
            (r / "eval_split.json").string(),
            (r / "concepts.json").string(),
            (r / "taxonomy.txt").string(),
            (r / "eval_templates.txt").string(),
            (r / "toy.cfg").string()};
}

inline std::string concept_spec(const ToyOptions& opt)
{
    std::vector<vlm::PlantedConcept> cs;
    for (const auto& c : opt.classes) cs.push_back({c.name, c.color});
    return vlm::format_concepts(cs);
}

/// Writes images, masks, depth maps, manifests, split files, the planted
/// concept table, a small taxonomy, held-out templates and a run config.
inline ToyLayout write_toy_dataset(const std::string& root, const ToyOptions& opt = {})
{
    require(!opt.classes.empty(), "write_toy_dataset: no classes");
    const ToyLayout L = layout_for(root);
    const std::filesystem::path r(root);
    std::filesystem::create_directories(r / "images");
    std::filesystem::create_directories(r / "masks");
    std::filesystem::create_directories(r / "depth");

    std::set<std::string> names;
    for (const auto& c : opt.classes) names.insert(c.name);

    auto emit = [&](const std::string& prefix, int count, std::uint64_t salt) {
        data::DatasetManifest m;
        for (int i = 0; i < count; ++i) {
            const int k = i % static_cast<int>(opt.classes.size());
            const ToyScene s = make_scene(opt, k, opt.seed * 1000003ull + salt * 7919ull + static_cast<std::uint64_t>(i));
            char id[64];
            std::snprintf(id, sizeof(id), "%s_%03d", prefix.c_str(), i);
            data::ManifestRecord rec;
            rec.image_id = id;
            rec.image_path = (r / "images" / (std::string(id) + ".png")).string();
            rec.mask_path = (r / "masks" / (std::string(id) + ".png")).string();
            rec.depth_path = (r / "depth" / (std::string(id) + ".png")).string();
            rec.class_name = opt.classes[static_cast<std::size_t>(k)].name;
            io::write_image(rec.image_path, s.image);
            io::write_gray8(rec.mask_path, s.mask);
            io::write_gray16(*rec.depth_path, s.depth);
            m.records.push_back(std::move(rec));
        }
        return m;
    };

    data::DatasetManifest train = emit("train", opt.train_count, 1);
    data::DatasetManifest eval = emit("eval", opt.eval_count, 2);
    data::write_split(L.train_split, {names, {}});
    data::write_split(L.eval_split, {{}, names});
    data::write_manifest(L.train_manifest, train, "train_split.json");
    data::write_manifest(L.eval_manifest, eval, "eval_split.json");

    nlohmann::json concepts = nlohmann::json::array();
    for (const auto& c : opt.classes) concepts.push_back({{"class", c.name}, {"color", c.color}});
    std::ofstream(L.concepts) << concepts.dump(2) << "\n";

    {
        std::ofstream tax(L.taxonomy);
        tax << "# toy taxonomy\n"
            << "animal,arthropod\n"
            << "animal,amphibian\n";
        for (const auto& c : opt.classes) tax << (c.name == "frog" ? "amphibian," : "arthropod,") << c.name << "\n";
    }
    {
        std::ofstream t(L.eval_templates);
        for (const auto& s : held_out_templates()) t << s << "\n";
    }
    {
        std::ofstream cfg(L.config);
        cfg << "# toy learnability run\n"
            << "data.train_manifest = train.jsonl\n"
            << "data.eval_manifest = eval.jsonl\n"
            << "data.taxonomy = taxonomy.txt\n"
            << "backbone.kind = stub\n"
            << "backbone.concepts = concepts.json\n"
            << "prompts.train = camo\n"
            << "prompts.eval = eval_templates.txt\n"
            << "resolution = " << opt.size << "\n"
            << "optimizer.lr = 1e-3\n"
            << "optimizer.weight_decay = 5e-4\n"
            << "batch_size = 4\n"
            << "epochs = 30\n"
            << "decoder.width = 32\n"
            << "decoder.heads = 4\n"
            << "decoder.iterations = 2\n";
    }
    return L;
}

} // namespace ovcos::synth
