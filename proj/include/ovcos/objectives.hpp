#pragma once

// Training objective: weighted segmentation loss per pass, dice edge loss and
// L1 + SSIM depth loss per structure stage and pass, plainly summed.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "ovcos/autograd.hpp"
#include "ovcos/decoder.hpp"
#include "ovcos/image.hpp"

namespace ovcos::objectives {

enum class SegLossKind { WeightedBceIou, BceIou };

inline SegLossKind parse_seg_loss(const std::string& s)
{
    if (s == "wbce_wiou") return SegLossKind::WeightedBceIou;
    if (s == "bce_iou") return SegLossKind::BceIou;
    throw ConfigError("loss.seg must be one of {wbce_wiou, bce_iou}, got '" + s + "'");
}

inline constexpr double kBceClip = 1e-7;
inline constexpr int kBoundaryWindow = 31;
inline constexpr double kBoundaryGain = 5.0;
inline constexpr double kDiceSmooth = 1.0;
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

inline void require_binary(const Matrix& g, const char* what)
{
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        const double v = g.data()[i];
        if (v != 0.0 && v != 1.0) throw InvalidInput(std::string(what) + ": ground-truth mask must be binary {0,1}");
    }
}

inline void require_unit_range(const Matrix& g, const char* what)
{
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        const double v = g.data()[i];
        if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput(std::string(what) + ": ground truth must lie in [0,1]");
    }
}

/// 1 + 5 |box31(g) - g| with zero padding, divisor always 31*31.
inline Matrix boundary_weight(const Matrix& gt_col, int h, int w)
{
    const Matrix box = Matrix::Constant(kBoundaryWindow, kBoundaryWindow, 1.0 / (kBoundaryWindow * kBoundaryWindow));
    const Matrix pooled = ag::filter_same(gt_col, h, w, box);
    return (kBoundaryGain * (pooled - gt_col).array().abs() + 1.0).matrix();
}

/// pred_prob and gt are (h*w x 1).
inline ag::Var seg_loss(const ag::Var& pred_prob, const Matrix& gt, int h, int w,
                        SegLossKind kind = SegLossKind::WeightedBceIou)
{
    require(pred_prob.rows() == gt.rows() && pred_prob.cols() == 1 && gt.cols() == 1 &&
                gt.rows() == static_cast<Eigen::Index>(h) * w,
            "seg_loss: prediction and mask shapes differ");
    require_binary(gt, "seg_loss");
    const Matrix weight = kind == SegLossKind::WeightedBceIou ? boundary_weight(gt, h, w)
                                                              : Matrix::Ones(gt.rows(), 1);
    const ag::Var wv = ag::constant(weight);
    const ag::Var gv = ag::constant(gt);
    const ag::Var p = ag::clamp(pred_prob, kBceClip, 1.0 - kBceClip);
    ag::Var bce = ag::scale(ag::add(ag::mul(gv, ag::log(p)), ag::mul(ag::constant((1.0 - gt.array()).matrix()),
                                                                      ag::log(ag::one_minus(p)))),
                            -1.0);
    ag::Var wbce = ag::scale(ag::sum_all(ag::mul(wv, bce)), 1.0 / weight.sum());
    ag::Var inter = ag::sum_all(ag::mul(wv, ag::mul(pred_prob, gv)));
    ag::Var uni = ag::sum_all(ag::mul(wv, ag::add(pred_prob, gv)));
    ag::Var wiou = ag::one_minus(ag::div(ag::add_scalar(inter, 1.0), ag::add_scalar(ag::sub(uni, inter), 1.0)));
    return ag::add(wbce, wiou);
}

inline double seg_loss(const Map& pred, const Map& gt, SegLossKind kind = SegLossKind::WeightedBceIou)
{
    require(pred.same_shape(gt), "seg_loss: prediction and mask shapes differ");
    ag::NoGradGuard guard;
    return seg_loss(ag::constant(map_to_column(pred)), map_to_column(gt), pred.height(), pred.width(), kind).item();
}

/// Dice on sigmoid(logits).
inline ag::Var edge_loss(const ag::Var& logits, const Matrix& gt)
{
    require(logits.rows() == gt.rows() && logits.cols() == gt.cols(), "edge_loss: logits and edge map shapes differ");
    const ag::Var p = ag::sigmoid(logits);
    ag::Var num = ag::add_scalar(ag::scale(ag::sum_all(ag::mul(p, ag::constant(gt))), 2.0), kDiceSmooth);
    ag::Var den = ag::add_scalar(ag::sum_all(p), gt.sum() + kDiceSmooth);
    return ag::one_minus(ag::div(num, den));
}

/// Dice on probabilities already in [0,1] (no sigmoid).
inline double dice_loss(const Matrix& p, const Matrix& g)
{
    require(p.rows() == g.rows() && p.cols() == g.cols(), "dice_loss: shapes differ");
    return 1.0 - (2.0 * p.cwiseProduct(g).sum() + kDiceSmooth) / (p.sum() + g.sum() + kDiceSmooth);
}

/// Normalized 2-D Gaussian window.
inline Matrix gaussian_window(int size, double sigma)
{
    Matrix k(size, size);
    const double c = (size - 1) / 2.0;
    for (int r = 0; r < size; ++r)
        for (int q = 0; q < size; ++q)
            k(r, q) = std::exp(-((r - c) * (r - c) + (q - c) * (q - c)) / (2.0 * sigma * sigma));
    return k / k.sum();
}

/// Mean SSIM of two single-channel maps, zero-padded 'same' Gaussian windows.
inline ag::Var ssim(const ag::Var& x, const ag::Var& y, int h, int w)
{
    const Matrix k = gaussian_window(kSsimWindow, kSsimSigma);
    ag::Var mx = ag::filter(x, h, w, k);
    ag::Var my = ag::filter(y, h, w, k);
    ag::Var mx2 = ag::square(mx);
    ag::Var my2 = ag::square(my);
    ag::Var mxy = ag::mul(mx, my);
    ag::Var sx = ag::sub(ag::filter(ag::square(x), h, w, k), mx2);
    ag::Var sy = ag::sub(ag::filter(ag::square(y), h, w, k), my2);
    ag::Var sxy = ag::sub(ag::filter(ag::mul(x, y), h, w, k), mxy);
    ag::Var num = ag::mul(ag::add_scalar(ag::scale(mxy, 2.0), kSsimC1), ag::add_scalar(ag::scale(sxy, 2.0), kSsimC2));
    ag::Var den = ag::mul(ag::add_scalar(ag::add(mx2, my2), kSsimC1), ag::add_scalar(ag::add(sx, sy), kSsimC2));
    return ag::mean_all(ag::div(num, den));
}

inline ag::Var depth_loss(const ag::Var& logits, const Matrix& gt, int h, int w)
{
    require(logits.rows() == gt.rows() && logits.cols() == 1 && gt.cols() == 1 &&
                gt.rows() == static_cast<Eigen::Index>(h) * w,
            "depth_loss: logits and depth map shapes differ");
    require_unit_range(gt, "depth_loss");
    const ag::Var p = ag::sigmoid(logits);
    const ag::Var g = ag::constant(gt);
    return ag::add(ag::mean_all(ag::abs(ag::sub(p, g))), ag::one_minus(ssim(p, g, h, w)));
}

/// Full-resolution targets of one sample.
struct Targets {
    Map mask;
    Map edge;
    std::optional<Map> depth;
};

struct StageTerm {
    int stage = 0;
    double value = 0.0;
};

struct LossBreakdown {
    std::vector<double> seg_terms;                 // [t]
    std::vector<std::vector<StageTerm>> edge_terms;  // [t][stage]
    std::vector<std::vector<StageTerm>> depth_terms; // [t][stage]
    double total = 0.0;
    ag::Var total_var;

    std::size_t term_count() const
    {
        std::size_t n = seg_terms.size();
        for (const auto& v : edge_terms) n += v.size();
        for (const auto& v : depth_terms) n += v.size();
        return n;
    }

    double sum_of_terms() const
    {
        double s = 0.0;
        for (double v : seg_terms) s += v;
        for (const auto& v : edge_terms)
            for (const auto& e : v) s += e.value;
        for (const auto& v : depth_terms)
            for (const auto& e : v) s += e.value;
        return s;
    }

    double seg_sum() const
    {
        double s = 0.0;
        for (double v : seg_terms) s += v;
        return s;
    }
    double edge_sum() const
    {
        double s = 0.0;
        for (const auto& v : edge_terms)
            for (const auto& e : v) s += e.value;
        return s;
    }
    double depth_sum() const
    {
        double s = 0.0;
        for (const auto& v : depth_terms)
            for (const auto& e : v) s += e.value;
        return s;
    }
};

/// Edge targets shrink by box averaging so thin bands survive as soft values.
inline Matrix edge_target_at(const Map& edge, int h, int w)
{
    if (edge.height() % h == 0 && edge.width() % w == 0) return map_to_column(resize_area(edge, h, w));
    return map_to_column(resize_bilinear(edge, h, w));
}

inline Matrix depth_target_at(const Map& depth, int h, int w)
{
    Matrix m = map_to_column(resize_bilinear(depth, h, w));
    return m.cwiseMax(0.0).cwiseMin(1.0);
}

inline LossBreakdown total_loss(const std::vector<decoder::DecodeState>& states, const Targets& gt,
                                const decoder::DecoderConfig& cfg, SegLossKind kind = SegLossKind::WeightedBceIou)
{
    require(!states.empty(), "total_loss: no decode states");
    require(gt.mask.height() == states.front().height && gt.mask.width() == states.front().width,
            "total_loss: mask resolution differs from the decode resolution");
    LossBreakdown out;
    std::vector<ag::Var> parts;
    const Matrix mask = map_to_column(gt.mask);
    for (const auto& st : states) {
        const std::string where = "iteration " + std::to_string(st.iteration);
        ag::Var ls = seg_loss(st.seg_prob, mask, st.height, st.width, kind);
        out.seg_terms.push_back(ls.item());
        parts.push_back(ls);
        out.edge_terms.emplace_back();
        out.depth_terms.emplace_back();
        for (int stage = decoder::kNumStages; stage >= 1; --stage) {
            if (!cfg.has_structure(stage)) continue;
            auto it = st.structure.find(stage);
            if (it == st.structure.end())
                throw InvalidInput("total_loss: missing structure maps at stage " + std::to_string(stage) + ", " +
                                   where);
            const decoder::StructureMaps& m = it->second;
            if (cfg.edge_aux) {
                if (!m.edge_logits.defined())
                    throw InvalidInput("total_loss: missing edge logits at stage " + std::to_string(stage) + ", " +
                                       where);
                ag::Var le = edge_loss(m.edge_logits, edge_target_at(gt.edge, m.height, m.width));
                out.edge_terms.back().push_back({stage, le.item()});
                parts.push_back(le);
            }
            if (cfg.depth_aux) {
                if (!m.depth_logits.defined())
                    throw InvalidInput("total_loss: missing depth logits at stage " + std::to_string(stage) + ", " +
                                       where);
                if (!gt.depth)
                    throw InvalidInput("total_loss: depth supervision requested but the sample has no depth map");
                ag::Var ld = depth_loss(m.depth_logits, depth_target_at(*gt.depth, m.height, m.width), m.height,
                                        m.width);
                out.depth_terms.back().push_back({stage, ld.item()});
                parts.push_back(ld);
            }
        }
    }
    ag::Var total = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) total = ag::add(total, parts[i]);
    out.total_var = total;
    out.total = total.item();
    if (!std::isfinite(out.total)) throw NumericalFault("total_loss: non-finite loss");
    return out;
}

} // namespace ovcos::objectives
