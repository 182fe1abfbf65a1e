#pragma once

// Iterative refinement decoder.
//
// Stages run top-down from 5 to 1. Each stage projects its pyramid level to the
// decoder width, adds the 2x-upsampled output of the deeper stage, applies
// semantic guidance attention (SGA) and, on structure stages, the edge/depth
// branches fused by structure enhancement attention (SEA). Passes after the
// first re-enter at stage 3 with a spatial re-modulation map derived from the
// previous pass's mask.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "ovcos/autograd.hpp"
#include "ovcos/nn.hpp"
#include "ovcos/recognizer.hpp"
#include "ovcos/vlm_bridge.hpp"

namespace ovcos::decoder {

inline constexpr int kNumStages = 5;
inline constexpr int kIterationEntryStage = 3;

enum class Aggregation { Max, Mean };
enum class StructureFusion { Attention, Addition };

struct DecoderConfig {
    int width = 32;
    int heads = 4;
    int iterations = 2;
    std::set<int> se_stages{1, 2, 3};
    int num_stages = kNumStages;
    Aggregation agg = Aggregation::Max;
    double cue_temperature = 0.01;

    // Component switches used by ablation presets.
    bool semantic_guidance = true;
    bool edge_aux = true;
    bool depth_aux = true;
    StructureFusion fusion = StructureFusion::Attention;
    bool use_correlation = true;
    bool use_object_repr = true;

    std::uint64_t seed = 7;

    bool structure_enabled() const { return (edge_aux || depth_aux) && !se_stages.empty(); }
    bool has_structure(int stage) const { return structure_enabled() && se_stages.count(stage) != 0; }

    void validate() const
    {
        if (width <= 0 || heads <= 0) throw ConfigError("decoder.width and decoder.heads must be positive");
        if (width % heads != 0)
            throw ConfigError("decoder.width (" + std::to_string(width) + ") must be divisible by decoder.heads (" +
                              std::to_string(heads) + ")");
        if (iterations < 1) throw ConfigError("decoder.iterations must be >= 1");
        if (num_stages != kNumStages) throw ConfigError("decoder.num_stages must be 5");
        for (int s : se_stages)
            if (s < 1 || s > num_stages)
                throw ConfigError("decoder.se_stages contains invalid stage " + std::to_string(s));
        if (!(cue_temperature > 0.0)) throw ConfigError("decoder cue temperature must be positive");
    }
};

struct StructureMaps {
    ag::Var edge_features;  // f_e, undefined when the edge branch is disabled
    ag::Var depth_features; // f_d
    ag::Var edge_logits;    // M_e, (h*w x 1)
    ag::Var depth_logits;   // M_d
    int height = 0;
    int width = 0;
};

struct StageFeature {
    ag::Var feature; // (h*w x C)
    int height = 0;
    int width = 0;
};

/// Top-down cues derived from a completed pass.
struct TopDownGuidance {
    ag::Var object_repr;      // f_obj (1 x C5)
    ag::Var visual_embedding; // f_v (1 x D)
    ag::Var correlation;      // M_cor (1 x K)
    ag::Var cue;              // u (1 x C)
    std::map<int, ag::Var> remod; // W_r per recomputed stage, (h*w x 1)
    bool degenerate = false;
};

struct DecodeState {
    int iteration = 1;
    std::array<StageFeature, kNumStages> stages; // index stage-1
    ag::Var seg_logits; // M_s at input resolution (H*W x 1)
    ag::Var seg_prob;   // P_s
    int height = 0;
    int width = 0;
    std::map<int, StructureMaps> structure;
    std::optional<TopDownGuidance> guidance; // present from the second pass on

    const StageFeature& stage(int i) const { return stages[static_cast<std::size_t>(i - 1)]; }
    Map prob_map() const { return column_to_map(seg_prob.value(), height, width); }
};

/// Diagnostics of one semantic guidance attention call.
struct GuidanceTensors {
    ag::Var base_weight;     // W_b (h*w x 1), after optional re-modulation
    ag::Var remod_weight;    // W_r or undefined
    ag::Var class_guidance;  // G_t (K x C)
    ag::Var similarity;      // S (h*w x K)
    ag::Var value;           // V
    ag::Var modulated_value; // V'
};

struct SgaResult {
    ag::Var output;
    GuidanceTensors guidance;
};

struct SgaBlock {
    nn::LayerNorm norm;
    nn::Linear q, k, v, g, o;

    SgaResult forward(const ag::Var& x, const Matrix& text, const ag::Var* remod, const DecoderConfig& cfg,
                      const std::string& context) const
    {
        require(text.rows() >= 1, "sga_forward: at least one class embedding is required");
        ag::Var xn = norm(x);
        ag::Var qv = q(xn);
        ag::Var kv = k(xn);
        ag::Var vv = v(xn);
        SgaResult res;
        res.guidance.value = vv;
        ag::Var vmod = vv;
        if (cfg.semantic_guidance) {
            ag::Var gt = g(ag::constant(text));
            ag::Var s = ag::scale(ag::matmul(qv, ag::transpose(gt)), 1.0 / std::sqrt(static_cast<double>(x.cols())));
            if (!s.value().allFinite()) throw NumericalFault("sga_forward: non-finite class similarity at " + context);
            ag::Var probs = ag::softmax_rows(s);
            ag::Var wb = cfg.agg == Aggregation::Max ? ag::max_rows(probs) : ag::mean_rows(probs);
            if (remod != nullptr) {
                wb = ag::mul(wb, *remod);
                res.guidance.remod_weight = *remod;
            }
            vmod = ag::mul_col(vv, ag::add_scalar(wb, 1.0));
            res.guidance.class_guidance = gt;
            res.guidance.similarity = s;
            res.guidance.base_weight = wb;
        }
        res.guidance.modulated_value = vmod;
        ag::Var attn = ag::attention(qv, kv, vmod, cfg.heads);
        res.output = ag::add(x, o(attn));
        return res;
    }
};

struct SeaBlock {
    nn::LayerNorm norm_x, norm_kv;
    nn::Linear q, k, v, o;
    ag::Var alpha_logit; // (1 x heads)
    Matrix head_expand;  // (heads x C), constant

    ag::Var alpha() const { return ag::sigmoid(alpha_logit); }

    ag::Var branch(const ag::Var& qv, const ag::Var& kv_in, int heads) const
    {
        ag::Var kvn = norm_kv(kv_in);
        return ag::attention(qv, k(kvn), v(kvn), heads);
    }

    /// Either feature may be undefined (branch disabled); then the other is used alone.
    ag::Var forward(const ag::Var& x, const ag::Var& edge, const ag::Var& depth, int heads) const
    {
        ag::Var qv = q(norm_x(x));
        ag::Var mixed;
        if (edge.defined() && depth.defined()) {
            ag::Var a = ag::matmul(alpha(), ag::constant(head_expand)); // (1 x C)
            mixed = ag::add(ag::mul_row(branch(qv, edge, heads), a),
                            ag::mul_row(branch(qv, depth, heads), ag::one_minus(a)));
        } else if (edge.defined()) {
            mixed = branch(qv, edge, heads);
        } else {
            mixed = branch(qv, depth, heads);
        }
        return ag::add(x, o(mixed));
    }
};

struct StructureBranchBlock {
    nn::Conv3x3 edge_stem1, edge_stem2, depth_stem1, depth_stem2;
    nn::Linear edge_head, depth_head;
    nn::Linear fuse; // addition-fusion ablation only
};

class Decoder {
public:
    Decoder(DecoderConfig config, const vlm::BackboneSpec& backbone)
        : cfg_(std::move(config)), backbone_spec_(backbone)
    {
        cfg_.validate();
        backbone_spec_.validate();
        std::mt19937_64 rng(cfg_.seed);
        const int c = cfg_.width;
        for (int i = 1; i <= kNumStages; ++i) {
            const std::string p = "stage" + std::to_string(i);
            const int in_ch = i == 1 ? backbone_spec_.stage_channels[0]
                                     : backbone_spec_.stage_channels[static_cast<std::size_t>(i - 2)];
            entry_[idx(i)] = nn::Linear::create(store_, p + ".entry", in_ch, c, rng);

            SgaBlock& s = sga_[idx(i)];
            s.norm = nn::LayerNorm::create(store_, p + ".sga.norm", c);
            s.q = nn::Linear::create(store_, p + ".sga.q", c, c, rng);
            s.k = nn::Linear::create(store_, p + ".sga.k", c, c, rng, false);
            s.v = nn::Linear::create(store_, p + ".sga.v", c, c, rng);
            if (cfg_.semantic_guidance)
                s.g = nn::Linear::create(store_, p + ".sga.g", backbone_spec_.embed_dim, c, rng, false);
            s.o = nn::Linear::create(store_, p + ".sga.o", c, c, rng);

            if (cfg_.has_structure(i)) {
                StructureBranchBlock& b = branch_[idx(i)];
                if (cfg_.edge_aux) {
                    b.edge_stem1 = nn::Conv3x3::create(store_, p + ".edge.stem1", c, c, rng);
                    b.edge_stem2 = nn::Conv3x3::create(store_, p + ".edge.stem2", c, c, rng);
                    b.edge_head = nn::Linear::create(store_, p + ".edge.head", c, 1, rng);
                }
                if (cfg_.depth_aux) {
                    b.depth_stem1 = nn::Conv3x3::create(store_, p + ".depth.stem1", c, c, rng);
                    b.depth_stem2 = nn::Conv3x3::create(store_, p + ".depth.stem2", c, c, rng);
                    b.depth_head = nn::Linear::create(store_, p + ".depth.head", c, 1, rng);
                }
                if (cfg_.fusion == StructureFusion::Attention) {
                    SeaBlock& e = sea_[idx(i)];
                    e.norm_x = nn::LayerNorm::create(store_, p + ".sea.norm_x", c);
                    e.norm_kv = nn::LayerNorm::create(store_, p + ".sea.norm_kv", c);
                    e.q = nn::Linear::create(store_, p + ".sea.q", c, c, rng);
                    e.k = nn::Linear::create(store_, p + ".sea.k", c, c, rng, false);
                    e.v = nn::Linear::create(store_, p + ".sea.v", c, c, rng);
                    e.o = nn::Linear::create(store_, p + ".sea.o", c, c, rng);
                    if (cfg_.edge_aux && cfg_.depth_aux)
                        e.alpha_logit = store_.add(p + ".sea.alpha_logit", Matrix::Zero(1, cfg_.heads));
                    e.head_expand = Matrix::Zero(cfg_.heads, c);
                    const int d = c / cfg_.heads;
                    for (int h = 0; h < cfg_.heads; ++h) e.head_expand.block(h, h * d, 1, d).setOnes();
                } else {
                    b.fuse = nn::Linear::create(store_, p + ".fuse", c, c, rng);
                }
            }
        }
        seg_head_ = nn::Linear::create(store_, "seg_head", c, 1, rng);
        if (cfg_.iterations > 1) {
            if (cfg_.use_object_repr)
                object_proj_ = nn::Linear::create(store_, "topdown.object_proj", backbone_spec_.top_channels(), c, rng);
            if (cfg_.use_correlation)
                text_proj_ = nn::Linear::create(store_, "topdown.text_proj", backbone_spec_.embed_dim, c, rng);
        }
    }

    const DecoderConfig& config() const { return cfg_; }
    const vlm::BackboneSpec& backbone_spec() const { return backbone_spec_; }
    nn::ParameterStore& parameters() { return store_; }
    const nn::ParameterStore& parameters() const { return store_; }

    SgaResult sga_forward(int stage, const ag::Var& x, const vlm::ClassEmbeddingSet& text,
                          const ag::Var* remod = nullptr, int iteration = 1) const
    {
        check_stage(stage);
        require(text.size() >= 1, "sga_forward: class count must be >= 1");
        require(x.cols() == cfg_.width, "sga_forward: stage feature must be projected to the decoder width");
        if (remod != nullptr)
            require(remod->cols() == 1 && remod->rows() == x.rows(), "sga_forward: W_r must be (h*w x 1)");
        return sga_[idx(stage)].forward(x, text.embeddings, remod, cfg_,
                                        "stage " + std::to_string(stage) + ", iteration " + std::to_string(iteration));
    }

    ag::Var sea_forward(int stage, const ag::Var& x, const ag::Var& edge, const ag::Var& depth) const
    {
        check_stage(stage);
        require(cfg_.has_structure(stage), "sea_forward: stage " + std::to_string(stage) + " has no structure branch");
        for (const ag::Var* f : {&edge, &depth})
            if (f->defined())
                require(f->rows() == x.rows() && f->cols() == x.cols(),
                        "sea_forward: edge/depth features must match the stage feature's spatial size and width");
        if (cfg_.fusion == StructureFusion::Addition) {
            ag::Var sum = edge.defined() && depth.defined() ? ag::add(edge, depth) : (edge.defined() ? edge : depth);
            return ag::add(x, branch_[idx(stage)].fuse(sum));
        }
        return sea_[idx(stage)].forward(x, edge, depth, cfg_.heads);
    }

    StructureMaps structure_branch(int stage, const ag::Var& x, int h, int w) const
    {
        check_stage(stage);
        require(cfg_.has_structure(stage), "structure_branch: stage " + std::to_string(stage) + " is not an SE stage");
        require(x.rows() == static_cast<Eigen::Index>(h) * w && x.cols() == cfg_.width,
                "structure_branch: feature shape mismatch");
        const StructureBranchBlock& b = branch_[idx(stage)];
        StructureMaps m;
        m.height = h;
        m.width = w;
        if (cfg_.edge_aux) {
            m.edge_features = ag::relu(b.edge_stem2(ag::relu(b.edge_stem1(x, h, w)), h, w));
            m.edge_logits = b.edge_head(m.edge_features);
        }
        if (cfg_.depth_aux) {
            m.depth_features = ag::relu(b.depth_stem2(ag::relu(b.depth_stem1(x, h, w)), h, w));
            m.depth_logits = b.depth_head(m.depth_features);
        }
        return m;
    }

    /// SEA mixing weights per head for one stage (empty when not applicable).
    std::vector<double> alphas(int stage) const
    {
        check_stage(stage);
        const SeaBlock& e = sea_[idx(stage)];
        if (!e.alpha_logit.defined()) return {};
        std::vector<double> out;
        for (Eigen::Index h = 0; h < e.alpha_logit.cols(); ++h)
            out.push_back(ag::sigmoid_value(e.alpha_logit.value()(0, h)));
        return out;
    }

    /// Direct access for tests that pin alpha to an endpoint.
    ag::Var alpha_logit(int stage) const { return sea_[idx(stage)].alpha_logit; }

    TopDownGuidance build_topdown_guidance(const DecodeState& prev, const vlm::FeaturePyramid& pyramid,
                                           const vlm::ClassEmbeddingSet& text, const vlm::Backbone& backbone) const
    {
        require(prev.seg_prob.defined(), "build_topdown_guidance: previous state has no segmentation");
        const auto& top = pyramid.level(5);
        TopDownGuidance g;
        ag::Var mask = ag::downsample_mask(prev.seg_prob, prev.height, prev.width, top.height, top.width);
        auto [pooled, degenerate] = recognizer::masked_average_pool(ag::constant(top.tokens), mask, true);
        g.object_repr = pooled;
        g.degenerate = degenerate;
        g.visual_embedding = backbone.project_visual_var(pooled);
        ag::Var ft = ag::constant(text.embeddings);
        g.correlation = ag::matmul(g.visual_embedding, ag::transpose(ft));

        std::vector<ag::Var> parts;
        if (cfg_.use_object_repr) parts.push_back(object_proj_(pooled));
        if (cfg_.use_correlation) {
            ag::Var weights = ag::softmax_rows(ag::scale(g.correlation, 1.0 / cfg_.cue_temperature));
            parts.push_back(text_proj_(ag::matmul(weights, ft)));
        }
        if (parts.empty()) return g;
        g.cue = parts.size() == 2 ? ag::scale(ag::add(parts[0], parts[1]), 0.5) : parts[0];

        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg_.width));
        for (int i = kIterationEntryStage; i >= 1; --i) {
            const StageFeature& sf = prev.stage(i);
            g.remod[i] = ag::sigmoid(ag::scale(ag::matmul(sf.feature, ag::transpose(g.cue)), inv_sqrt));
        }
        return g;
    }

    std::vector<DecodeState> decode(const vlm::FeaturePyramid& pyramid, const vlm::ClassEmbeddingSet& text,
                                    const vlm::Backbone& backbone) const
    {
        check_pyramid(pyramid);
        require(text.size() >= 1, "decode: class set is empty");
        require(text.embeddings.cols() == backbone_spec_.embed_dim, "decode: text embedding dimension mismatch");

        std::vector<DecodeState> states;
        states.reserve(static_cast<std::size_t>(cfg_.iterations));
        for (int t = 1; t <= cfg_.iterations; ++t) {
            DecodeState st;
            st.iteration = t;
            st.height = pyramid.input_height;
            st.width = pyramid.input_width;
            if (t > 1) st.guidance = build_topdown_guidance(states.back(), pyramid, text, backbone);

            const int top = t == 1 ? kNumStages : kIterationEntryStage;
            if (t > 1)
                for (int i = kNumStages; i > kIterationEntryStage; --i) st.stages[idx(i)] = states.front().stage(i);

            for (int i = top; i >= 1; --i) {
                const auto& lvl = pyramid.level(i);
                ag::Var p = entry_[idx(i)](ag::constant(lvl.tokens));
                if (i < kNumStages) {
                    const StageFeature& deeper = st.stages[idx(i + 1)];
                    p = ag::add(p, ag::resize(deeper.feature, deeper.height, deeper.width, lvl.height, lvl.width));
                }
                const ag::Var* remod = nullptr;
                if (st.guidance) {
                    auto it = st.guidance->remod.find(i);
                    if (it != st.guidance->remod.end()) remod = &it->second;
                }
                ag::Var x = sga_forward(i, p, text, remod, t).output;
                if (cfg_.has_structure(i)) {
                    StructureMaps maps = structure_branch(i, x, lvl.height, lvl.width);
                    x = sea_forward(i, x, maps.edge_features, maps.depth_features);
                    st.structure[i] = std::move(maps);
                }
                st.stages[idx(i)] = {x, lvl.height, lvl.width};
            }
            const auto& s1 = st.stage(1);
            ag::Var logits = seg_head_(s1.feature);
            st.seg_logits = ag::resize(logits, s1.height, s1.width, st.height, st.width);
            st.seg_prob = ag::sigmoid(st.seg_logits);
            if (!st.seg_logits.value().allFinite())
                throw NumericalFault("decode: non-finite segmentation logits at iteration " + std::to_string(t));
            states.push_back(std::move(st));
        }
        return states;
    }

    /// Trainable scalar count at this configuration.
    std::size_t trainable_count() const { return store_.scalar_count(); }

private:
    static std::size_t idx(int stage) { return static_cast<std::size_t>(stage - 1); }

    static void check_stage(int stage)
    {
        require(stage >= 1 && stage <= kNumStages, "decoder: stage index out of range");
    }

    void check_pyramid(const vlm::FeaturePyramid& pyr) const
    {
        for (int i = 1; i <= kNumStages; ++i) {
            const auto& l = pyr.level(i);
            if (l.tokens.size() == 0) throw InvalidInput("decode: pyramid level " + std::to_string(i) + " is missing");
            require(l.tokens.rows() == static_cast<Eigen::Index>(l.height) * l.width,
                    "decode: pyramid level " + std::to_string(i) + " has inconsistent spatial size");
            const int expected = i == 1 ? backbone_spec_.stage_channels[0]
                                        : backbone_spec_.stage_channels[static_cast<std::size_t>(i - 2)];
            require(l.channels() == expected, "decode: pyramid level " + std::to_string(i) + " has " +
                                                  std::to_string(l.channels()) + " channels, expected " +
                                                  std::to_string(expected));
            if (i < kNumStages) {
                const auto& d = pyr.level(i + 1);
                require(l.height == 2 * d.height && l.width == 2 * d.width,
                        "decode: pyramid level " + std::to_string(i) + " must be 2x level " + std::to_string(i + 1));
            }
        }
    }

    DecoderConfig cfg_;
    vlm::BackboneSpec backbone_spec_;
    nn::ParameterStore store_;
    std::array<nn::Linear, kNumStages> entry_;
    std::array<SgaBlock, kNumStages> sga_;
    std::array<SeaBlock, kNumStages> sea_;
    std::array<StructureBranchBlock, kNumStages> branch_;
    nn::Linear seg_head_;
    nn::Linear object_proj_;
    nn::Linear text_proj_;
};

} // namespace ovcos::decoder
