#pragma once

// Region-level recognition: masked average pooling of the top feature by the
// soft segmentation, projection into the joint space, cosine matching.

#include <cmath>
#include <string>
#include <vector>

#include "ovcos/autograd.hpp"
#include "ovcos/vlm_bridge.hpp"

namespace ovcos::recognizer {

inline constexpr double kPoolEps = 1e-6;
inline constexpr double kTemperature = 0.01;

struct PooledFeature {
    Matrix vector; // (1 x C)
    bool degenerate = false;
};

/// sum_x mask(x) f(:,x) / max(sum_x mask(x), eps). `mask` is (h*w x 1),
/// already at the feature resolution.
inline PooledFeature masked_average_pool(const Matrix& feature, const Matrix& mask)
{
    require(mask.cols() == 1 && mask.rows() == feature.rows(),
            "masked_average_pool: mask must be (h*w x 1) at the feature resolution");
    const double total = mask.sum();
    PooledFeature out;
    out.degenerate = !(total > kPoolEps);
    out.vector = (mask.transpose() * feature) / std::max(total, kPoolEps);
    return out;
}

/// Resizes a full-resolution probability map to the feature grid (area
/// averaging for integral factors), then pools.
inline PooledFeature masked_average_pool(const vlm::FeaturePyramid::Level& level, const Map& prob)
{
    const bool integral = prob.height() % level.height == 0 && prob.width() % level.width == 0;
    const Map small = integral ? resize_area(prob, level.height, level.width)
                               : resize_bilinear(prob, level.height, level.width);
    return masked_average_pool(level.tokens, map_to_column(small));
}

/// Differentiable pooling; returns the pooled row and whether the mask was empty.
/// When `fallback_to_global` is set an empty mask pools uniformly instead.
inline std::pair<ag::Var, bool> masked_average_pool(const ag::Var& feature, const ag::Var& mask,
                                                    bool fallback_to_global)
{
    require(mask.cols() == 1 && mask.rows() == feature.rows(),
            "masked_average_pool: mask must be (h*w x 1) at the feature resolution");
    const double total = mask.value().sum();
    if (!(total > kPoolEps)) {
        if (fallback_to_global) {
            return {ag::scale(ag::sum_rows(feature), 1.0 / static_cast<double>(feature.rows())), true};
        }
        return {ag::scale(ag::matmul(ag::transpose(mask), feature), 1.0 / kPoolEps), true};
    }
    ag::Var num = ag::matmul(ag::transpose(mask), feature);
    return {ag::mul_scalar(num, ag::reciprocal(ag::sum_all(mask))), false};
}

struct Classification {
    int class_index = 0;
    std::vector<double> class_scores;
    std::vector<double> correlation;
    bool degenerate = false;
};

/// Cosine correlation of a unit visual embedding against unit class rows,
/// tempered softmax, argmax with lowest-index tie-break.
inline Classification classify(const vlm::VisualEmbedding& visual, const vlm::ClassEmbeddingSet& classes,
                               double temperature = kTemperature)
{
    require(classes.size() >= 1, "classify: empty class set");
    require(visual.embedding.cols() == classes.embeddings.cols(), "classify: embedding dimension mismatch");
    require(temperature > 0.0, "classify: temperature must be positive");
    Classification out;
    out.degenerate = visual.degenerate;
    const Matrix corr = visual.embedding * classes.embeddings.transpose();
    const auto k = static_cast<std::size_t>(corr.cols());
    out.correlation.resize(k);
    for (std::size_t c = 0; c < k; ++c) out.correlation[c] = corr(0, static_cast<Eigen::Index>(c));

    double m = out.correlation[0];
    for (double v : out.correlation) m = std::max(m, v);
    out.class_scores.resize(k);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        out.class_scores[c] = std::exp((out.correlation[c] - m) / temperature);
        z += out.class_scores[c];
    }
    for (auto& s : out.class_scores) s /= z;

    out.class_index = 0;
    if (!out.degenerate) {
        for (std::size_t c = 1; c < k; ++c)
            if (out.correlation[c] > out.correlation[static_cast<std::size_t>(out.class_index)])
                out.class_index = static_cast<int>(c);
    }
    return out;
}

struct SamplePrediction {
    std::string image_id;
    Map seg_prob; // input resolution, values in [0,1]
    int class_index = 0;
    std::string class_name;
    std::vector<double> class_scores;
    std::vector<double> correlation;
    bool degenerate = false;

    double class_score() const
    {
        return class_scores.empty() ? 0.0 : class_scores[static_cast<std::size_t>(class_index)];
    }
};

/// Full recognition path for a final probability map.
inline SamplePrediction recognize(const vlm::Backbone& backbone, const vlm::FeaturePyramid& pyramid,
                                  const Map& seg_prob, const vlm::ClassEmbeddingSet& classes,
                                  double temperature = kTemperature)
{
    const PooledFeature pooled = masked_average_pool(pyramid.level(5), seg_prob);
    vlm::VisualEmbedding visual = backbone.project_visual(pooled.vector);
    if (pooled.degenerate) {
        visual.degenerate = true;
        visual.embedding.setZero();
    }
    const Classification cls = classify(visual, classes, temperature);
    SamplePrediction p;
    p.seg_prob = seg_prob;
    p.class_index = cls.class_index;
    p.class_name = classes.class_names[static_cast<std::size_t>(cls.class_index)];
    p.class_scores = cls.class_scores;
    p.correlation = cls.correlation;
    p.degenerate = cls.degenerate;
    return p;
}

} // namespace ovcos::recognizer
