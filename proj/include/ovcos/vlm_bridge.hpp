#pragma once

// Frozen vision-language backbone: text encoder, multi-scale visual encoder and
// visual projection. The stub backend is deterministic and CPU-fast; a real CLIP
// adapter plugs in through the registry under the "external-adapter" kind.

#include <array>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ovcos/autograd.hpp"
#include "ovcos/errors.hpp"
#include "ovcos/image.hpp"
#include "ovcos/nn.hpp"

namespace ovcos::vlm {

inline constexpr int kNumLevels = 5;

struct BackboneSpec {
    int embed_dim = 64;
    std::array<int, 4> stage_channels{24, 48, 96, 192};
    std::array<int, 4> stage_strides{4, 8, 16, 32};
    bool frozen = true;
    std::size_t parameter_count = 0; // frozen parameters, for budget arithmetic

    int top_channels() const { return stage_channels.back(); }
    int max_stride() const { return stage_strides.back(); }

    void validate() const
    {
        require(frozen, "BackboneSpec: the backbone must be frozen");
        require(embed_dim > 0, "BackboneSpec: embed_dim must be positive");
        for (int i = 0; i < 4; ++i) {
            require(stage_channels[static_cast<std::size_t>(i)] > 0, "BackboneSpec: stage channels must be positive");
            require(stage_strides[static_cast<std::size_t>(i)] > 0, "BackboneSpec: stage strides must be positive");
            if (i > 0)
                require(stage_strides[static_cast<std::size_t>(i)] > stage_strides[static_cast<std::size_t>(i - 1)],
                        "BackboneSpec: stage strides must be strictly increasing");
        }
    }
};

/// Desk-scale shapes used by the stub backend.
inline BackboneSpec stub_spec() { return BackboneSpec{}; }

/// CLIP ConvNeXt-L shapes. The parameter count is the approximate size of the
/// frozen text and visual towers (~352M).
inline BackboneSpec convnext_large_spec()
{
    BackboneSpec s;
    s.embed_dim = 768;
    s.stage_channels = {192, 384, 768, 1536};
    s.stage_strides = {4, 8, 16, 32};
    s.parameter_count = 352'000'000;
    return s;
}

/// Multi-scale features {f^1..f^5}; each level in token layout (h*w x channels).
struct FeaturePyramid {
    struct Level {
        Matrix tokens;
        int height = 0;
        int width = 0;
        Eigen::Index channels() const { return tokens.cols(); }
    };

    std::array<Level, kNumLevels> levels;
    int input_height = 0;
    int input_width = 0;

    /// 1-based level access.
    const Level& level(int i) const
    {
        require(i >= 1 && i <= kNumLevels, "FeaturePyramid: level index out of range");
        return levels[static_cast<std::size_t>(i - 1)];
    }
    Level& level(int i)
    {
        require(i >= 1 && i <= kNumLevels, "FeaturePyramid: level index out of range");
        return levels[static_cast<std::size_t>(i - 1)];
    }

    bool complete() const
    {
        for (const auto& l : levels)
            if (l.tokens.size() == 0) return false;
        return true;
    }
};

inline Matrix upsample2x(const Matrix& tokens, int h, int w) { return resize_bilinear(tokens, h, w, 2 * h, 2 * w); }

/// Per-class unit-norm text embeddings, rows aligned with class_names.
struct ClassEmbeddingSet {
    std::vector<std::string> class_names;
    Matrix embeddings; // (num_classes x D)

    std::size_t size() const { return class_names.size(); }

    void validate(double tol = 1e-5) const
    {
        require(!class_names.empty(), "ClassEmbeddingSet: empty class set");
        require(embeddings.rows() == static_cast<Eigen::Index>(class_names.size()),
                "ClassEmbeddingSet: row count does not match class names");
        for (Eigen::Index r = 0; r < embeddings.rows(); ++r)
            require(std::abs(embeddings.row(r).norm() - 1.0) <= tol,
                    "ClassEmbeddingSet: row for '" + class_names[static_cast<std::size_t>(r)] + "' is not unit norm");
    }

    int index_of(const std::string& name) const
    {
        for (std::size_t i = 0; i < class_names.size(); ++i)
            if (class_names[i] == name) return static_cast<int>(i);
        return -1;
    }
};

struct TextEncoding {
    Matrix embeddings;                 // (len x D), unit rows
    std::vector<std::string> warnings; // e.g. truncation notices
};

struct VisualEmbedding {
    Matrix embedding; // (1 x D), unit norm unless degenerate
    bool degenerate = false;
};

class Backbone {
public:
    virtual ~Backbone() = default;

    virtual const BackboneSpec& spec() const = 0;
    virtual TextEncoding encode_text(const std::vector<std::string>& prompts) const = 0;
    virtual FeaturePyramid encode_image(const Image& image) const = 0;
    /// Raw projection (1 x C5) -> (1 x D), before normalization.
    virtual Matrix project_raw(const Matrix& feature_row) const = 0;
    virtual std::uint64_t parameter_hash() const = 0;
    virtual std::size_t parameter_count() const = 0;

    VisualEmbedding project_visual(const Matrix& feature_row) const
    {
        require(feature_row.rows() == 1 && feature_row.cols() == spec().top_channels(),
                "project_visual: expected a 1x" + std::to_string(spec().top_channels()) + " feature, got " +
                    std::to_string(feature_row.rows()) + "x" + std::to_string(feature_row.cols()));
        VisualEmbedding out;
        out.embedding = project_raw(feature_row);
        const double n = out.embedding.norm();
        if (!(n > 1e-12)) {
            out.embedding.setZero();
            out.degenerate = true;
        } else {
            out.embedding /= n;
        }
        return out;
    }

    /// Differentiable w.r.t. the input only; the projection weights stay frozen.
    virtual ag::Var project_visual_var(const ag::Var& feature_row) const = 0;

    std::size_t text_encode_calls() const { return text_calls_.load(); }

protected:
    void count_text_call() const { text_calls_.fetch_add(1); }

private:
    mutable std::atomic<std::size_t> text_calls_{0};
};

// ---------------------------------------------------------------- stub backend

struct PlantedConcept {
    std::string class_name;
    std::array<double, 3> color{0.0, 0.0, 0.0};
};

struct StubOptions {
    std::uint64_t seed = 1337;
    BackboneSpec spec = stub_spec();
    std::size_t token_limit = 77;
    /// Colour-keyed detectors written into the last stage-5 channels; their
    /// projection columns point at the stub text embedding of the class name.
    std::vector<PlantedConcept> concepts;
    double concept_sigma = 0.15;
    double concept_gain = 4.0;
    double generic_projection_gain = 0.1;
};

inline std::vector<std::string> tokenize(const std::string& prompt)
{
    std::vector<std::string> tokens;
    std::istringstream in(prompt);
    std::string word;
    while (in >> word) {
        std::size_t b = 0;
        std::size_t e = word.size();
        while (b < e && !std::isalnum(static_cast<unsigned char>(word[b]))) ++b;
        while (e > b && !std::isalnum(static_cast<unsigned char>(word[e - 1]))) --e;
        std::string t = word.substr(b, e - b);
        for (auto& ch : t) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        if (!t.empty()) tokens.push_back(std::move(t));
    }
    return tokens;
}

class StubBackbone final : public Backbone {
public:
    explicit StubBackbone(StubOptions options = {}) : opt_(std::move(options))
    {
        opt_.spec.validate();
        const auto& sp = opt_.spec;
        require(opt_.concepts.size() <= static_cast<std::size_t>(sp.top_channels()),
                "StubBackbone: more planted concepts than stage-5 channels");
        std::mt19937_64 rng(opt_.seed);
        int in_ch = 3;
        int prev_stride = 1;
        for (std::size_t s = 0; s < 4; ++s) {
            const int factor = sp.stage_strides[s] / prev_stride;
            require(factor * prev_stride == sp.stage_strides[s], "StubBackbone: strides must be nested multiples");
            const int fan_in = factor * factor * in_ch;
            stage_factor_[s] = factor;
            stage_weight_[s] = nn::gaussian(fan_in, sp.stage_channels[s], std::sqrt(2.0 / fan_in), rng);
            stage_bias_[s] = nn::gaussian(1, sp.stage_channels[s], 0.05, rng);
            in_ch = sp.stage_channels[s];
            prev_stride = sp.stage_strides[s];
        }
        const int c5 = sp.top_channels();
        projection_ = nn::gaussian(c5, sp.embed_dim, opt_.generic_projection_gain / std::sqrt(static_cast<double>(c5)),
                                   rng);
        const int first_concept = c5 - static_cast<int>(opt_.concepts.size());
        for (std::size_t k = 0; k < opt_.concepts.size(); ++k) {
            const Matrix e = token_sum({opt_.concepts[k].class_name});
            const Matrix unit = e / e.norm();
            projection_.row(first_concept + static_cast<Eigen::Index>(k)) = unit;
        }
    }

    const BackboneSpec& spec() const override { return opt_.spec; }
    const StubOptions& options() const { return opt_; }

    TextEncoding encode_text(const std::vector<std::string>& prompts) const override
    {
        require(!prompts.empty(), "encode_text: prompt list is empty");
        count_text_call();
        TextEncoding out;
        out.embeddings.resize(static_cast<Eigen::Index>(prompts.size()), opt_.spec.embed_dim);
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            require(!prompts[i].empty(), "encode_text: prompt " + std::to_string(i) + " is empty");
            auto tokens = tokenize(prompts[i]);
            if (tokens.empty()) tokens.push_back(prompts[i]);
            if (tokens.size() > opt_.token_limit) {
                out.warnings.push_back("prompt " + std::to_string(i) + " truncated from " +
                                       std::to_string(tokens.size()) + " to " + std::to_string(opt_.token_limit) +
                                       " tokens");
                tokens.resize(opt_.token_limit);
            }
            Matrix e = token_sum(tokens);
            out.embeddings.row(static_cast<Eigen::Index>(i)) = e / e.norm();
        }
        return out;
    }

    FeaturePyramid encode_image(const Image& image) const override
    {
        const auto& sp = opt_.spec;
        require(image.channels() == 3, "encode_image: expected a 3-channel image");
        const int m = sp.max_stride();
        if (image.height() % m != 0 || image.width() % m != 0 || image.height() == 0 || image.width() == 0)
            throw InvalidInput("encode_image: height and width must be positive multiples of " + std::to_string(m) +
                               " (got " + std::to_string(image.height()) + "x" + std::to_string(image.width()) + ")");

        FeaturePyramid pyr;
        pyr.input_height = image.height();
        pyr.input_width = image.width();
        Matrix x = image_to_tokens(image);
        int h = image.height();
        int w = image.width();
        for (std::size_t s = 0; s < 4; ++s) {
            const int f = stage_factor_[s];
            Matrix patches = patchify(x, h, w, f);
            h /= f;
            w /= f;
            Matrix y = (patches * stage_weight_[s]).rowwise() + stage_bias_[s].row(0);
            x = y.cwiseMax(0.0);
            pyr.level(static_cast<int>(s) + 2) = {x, h, w};
        }
        if (!opt_.concepts.empty()) write_concepts(image, pyr.level(5));
        const auto& l2 = pyr.level(2);
        pyr.level(1) = {upsample2x(l2.tokens, l2.height, l2.width), 2 * l2.height, 2 * l2.width};
        return pyr;
    }

    Matrix project_raw(const Matrix& feature_row) const override { return feature_row * projection_; }

    ag::Var project_visual_var(const ag::Var& feature_row) const override
    {
        require(feature_row.cols() == opt_.spec.top_channels(), "project_visual: stage-5 channel mismatch");
        return ag::l2_normalize_rows(ag::matmul(feature_row, ag::constant(projection_)));
    }

    std::uint64_t parameter_hash() const override
    {
        std::uint64_t h = 1469598103934665603ull;
        for (std::size_t s = 0; s < 4; ++s) {
            h = nn::hash_matrix(stage_weight_[s], h);
            h = nn::hash_matrix(stage_bias_[s], h);
        }
        return nn::hash_matrix(projection_, h);
    }

    std::size_t parameter_count() const override
    {
        std::size_t n = static_cast<std::size_t>(projection_.size());
        for (std::size_t s = 0; s < 4; ++s)
            n += static_cast<std::size_t>(stage_weight_[s].size() + stage_bias_[s].size());
        return n;
    }

private:
    Matrix token_vector(const std::string& token) const
    {
        std::mt19937_64 rng(nn::fnv1a(token, opt_.seed * 0x9E3779B97F4A7C15ull + 1));
        return nn::gaussian(1, opt_.spec.embed_dim, 1.0, rng);
    }

    Matrix token_sum(const std::vector<std::string>& tokens) const
    {
        Matrix e = Matrix::Zero(1, opt_.spec.embed_dim);
        for (const auto& t : tokens) e += token_vector(t);
        return e;
    }

    static Matrix patchify(const Matrix& x, int h, int w, int f)
    {
        const int oh = h / f;
        const int ow = w / f;
        const Eigen::Index c = x.cols();
        Matrix out(static_cast<Eigen::Index>(oh) * ow, f * f * c);
        for (int r = 0; r < oh; ++r)
            for (int q = 0; q < ow; ++q)
                for (int dy = 0; dy < f; ++dy)
                    for (int dx = 0; dx < f; ++dx)
                        out.block(static_cast<Eigen::Index>(r) * ow + q, (dy * f + dx) * c, 1, c) =
                            x.row(static_cast<Eigen::Index>(r * f + dy) * w + (q * f + dx));
        return out;
    }

    void write_concepts(const Image& image, FeaturePyramid::Level& top) const
    {
        const int stride = opt_.spec.max_stride();
        const int first = static_cast<int>(top.tokens.cols()) - static_cast<int>(opt_.concepts.size());
        const double inv = 1.0 / (2.0 * opt_.concept_sigma * opt_.concept_sigma);
        for (std::size_t k = 0; k < opt_.concepts.size(); ++k) {
            const auto& col = opt_.concepts[k].color;
            for (int r = 0; r < top.height; ++r)
                for (int q = 0; q < top.width; ++q) {
                    double acc = 0.0;
                    for (int y = r * stride; y < (r + 1) * stride; ++y)
                        for (int x = q * stride; x < (q + 1) * stride; ++x) {
                            double d2 = 0.0;
                            for (int ch = 0; ch < 3; ++ch) {
                                const double d = image(ch, y, x) - col[static_cast<std::size_t>(ch)];
                                d2 += d * d;
                            }
                            acc += std::exp(-d2 * inv);
                        }
                    top.tokens(static_cast<Eigen::Index>(r) * top.width + q, first + static_cast<Eigen::Index>(k)) =
                        opt_.concept_gain * acc / (stride * stride);
                }
        }
    }

    StubOptions opt_;
    std::array<int, 4> stage_factor_{};
    std::array<Matrix, 4> stage_weight_;
    std::array<Matrix, 4> stage_bias_;
    Matrix projection_;
};

// ---------------------------------------------------------------- registry

/// "name:r,g,b;name:r,g,b" -> planted concepts.
inline std::vector<PlantedConcept> parse_concepts(const std::string& spec)
{
    std::vector<PlantedConcept> out;
    std::istringstream in(spec);
    std::string item;
    while (std::getline(in, item, ';')) {
        if (item.empty()) continue;
        const auto colon = item.find(':');
        if (colon == std::string::npos || colon == 0)
            throw ConfigError("backbone concepts: expected 'name:r,g,b', got '" + item + "'");
        PlantedConcept c;
        c.class_name = item.substr(0, colon);
        std::istringstream rgb(item.substr(colon + 1));
        std::string v;
        for (int k = 0; k < 3; ++k) {
            if (!std::getline(rgb, v, ','))
                throw ConfigError("backbone concepts: colour of '" + c.class_name + "' needs three components");
            c.color[static_cast<std::size_t>(k)] = std::stod(v);
        }
        out.push_back(std::move(c));
    }
    return out;
}

inline std::string format_concepts(const std::vector<PlantedConcept>& concepts)
{
    std::ostringstream out;
    out.precision(17);
    for (std::size_t i = 0; i < concepts.size(); ++i) {
        if (i) out << ';';
        out << concepts[i].class_name << ':' << concepts[i].color[0] << ',' << concepts[i].color[1] << ','
            << concepts[i].color[2];
    }
    return out.str();
}

using BackboneOptions = std::map<std::string, std::string>;
using BackboneFactory = std::function<std::unique_ptr<Backbone>(const BackboneOptions&)>;

class BackboneRegistry {
public:
    static BackboneRegistry& instance()
    {
        static BackboneRegistry registry;
        return registry;
    }

    void register_kind(const std::string& kind, BackboneFactory factory)
    {
        std::lock_guard lock(mutex_);
        factories_[kind] = std::move(factory);
    }

    bool has(const std::string& kind) const
    {
        std::lock_guard lock(mutex_);
        return factories_.count(kind) != 0;
    }

    std::unique_ptr<Backbone> create(const std::string& kind, const BackboneOptions& options) const
    {
        BackboneFactory factory;
        {
            std::lock_guard lock(mutex_);
            auto it = factories_.find(kind);
            if (it == factories_.end()) {
                if (kind == "external-adapter")
                    throw ConfigError("backbone.kind=external-adapter but no adapter has been registered");
                throw ConfigError("unknown backbone.kind '" + kind + "'");
            }
            factory = it->second;
        }
        return factory(options);
    }

private:
    BackboneRegistry()
    {
        factories_["stub"] = [](const BackboneOptions& o) {
            StubOptions s;
            if (auto it = o.find("seed"); it != o.end()) s.seed = std::stoull(it->second);
            if (auto it = o.find("concepts"); it != o.end()) s.concepts = parse_concepts(it->second);
            return std::make_unique<StubBackbone>(s);
        };
    }

    mutable std::mutex mutex_;
    std::map<std::string, BackboneFactory> factories_;
};

/// Hook for real CLIP adapters (loaded outside the core library).
inline void register_backbone(const std::string& kind, BackboneFactory factory)
{
    BackboneRegistry::instance().register_kind(kind, std::move(factory));
}

} // namespace ovcos::vlm
