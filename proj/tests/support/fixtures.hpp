#pragma once

// Small end-to-end fixtures: stub backbone with planted toy concepts, one scene
// with targets, and a compact decoder configuration.

#include <memory>
#include <string>
#include <vector>

#include "ovcos/camo_data.hpp"
#include "ovcos/decoder.hpp"
#include "ovcos/objectives.hpp"
#include "ovcos/prompt_engine.hpp"
#include "ovcos/synthetic.hpp"
#include "ovcos/vlm_bridge.hpp"

namespace fixtures {

using namespace ovcos;

inline std::vector<std::string> toy_class_names()
{
    std::vector<std::string> out;
    for (const auto& c : synth::default_classes()) out.push_back(c.name);
    return out;
}

inline std::unique_ptr<vlm::StubBackbone> toy_backbone()
{
    vlm::StubOptions opt;
    for (const auto& c : synth::default_classes()) opt.concepts.push_back({c.name, c.color});
    return std::make_unique<vlm::StubBackbone>(opt);
}

struct Scene {
    Image image;
    objectives::Targets targets;
    int class_index = 0;
};

inline Scene toy_scene(int size, int class_index = 0, std::uint64_t seed = 99)
{
    synth::ToyOptions o;
    o.size = size;
    synth::ToyScene s = synth::make_scene(o, class_index, seed);
    Scene out;
    out.image = s.image;
    out.targets.mask = s.mask;
    out.targets.edge = data::make_edge_gt(s.mask);
    out.targets.depth = s.depth;
    out.class_index = class_index;
    return out;
}

inline decoder::DecoderConfig small_config(int iterations = 2)
{
    decoder::DecoderConfig c;
    c.width = 8;
    c.heads = 2;
    c.iterations = iterations;
    return c;
}

inline vlm::ClassEmbeddingSet toy_text(const vlm::Backbone& bb)
{
    return prompts::class_embeddings(bb, prompts::camo_prompts(), toy_class_names());
}

} // namespace fixtures
