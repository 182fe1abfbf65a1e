#pragma once

// Class-aware segmentation metrics: six base measures on a [0,1] prediction
// against a binary mask, wrapped by a hard classification gate.

#include <algorithm>
#include <array>
#include <cfenv>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ovcos/errors.hpp"
#include "ovcos/image.hpp"
#include "ovcos/recognizer.hpp"

namespace ovcos::metrics {

inline constexpr double kEps = std::numeric_limits<double>::epsilon();

enum class Metric { SMeasure = 0, WeightedF = 1, MAE = 2, FBeta = 3, EMeasure = 4, IoU = 5 };
inline constexpr std::size_t kNumMetrics = 6;
enum class GateKind { Ascending, Mae };

/// Reporting order: cS_m, cF_beta^w, cMAE, cF_beta, cE_m, cIoU.
inline const std::array<std::string, kNumMetrics>& metric_names()
{
    static const std::array<std::string, kNumMetrics> names{"cS_m", "cF_beta_w", "cMAE", "cF_beta", "cE_m", "cIoU"};
    return names;
}

inline GateKind gate_kind(std::size_t metric_index)
{
    return metric_index == static_cast<std::size_t>(Metric::MAE) ? GateKind::Mae : GateKind::Ascending;
}

inline void check_pair(const Map& pred, const Map& gt, const char* op)
{
    if (!pred.same_shape(gt))
        throw InvalidInput(std::string(op) + ": shape mismatch (" + std::to_string(pred.height()) + "x" +
                           std::to_string(pred.width()) + " vs " + std::to_string(gt.height()) + "x" +
                           std::to_string(gt.width()) + ")");
    if (pred.size() == 0) throw InvalidInput(std::string(op) + ": empty maps");
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (gt[i] != 0.0 && gt[i] != 1.0) throw InvalidInput(std::string(op) + ": ground truth must be binary");
        if (!(pred[i] >= 0.0 && pred[i] <= 1.0)) throw InvalidInput(std::string(op) + ": prediction outside [0,1]");
    }
}

inline double mae(const Map& pred, const Map& gt)
{
    check_pair(pred, gt, "mae");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - gt[i]);
    return s / static_cast<double>(pred.size());
}

inline double iou(const Map& pred, const Map& gt, double threshold = 0.5)
{
    check_pair(pred, gt, "iou");
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] >= threshold;
        const bool g = gt[i] == 1.0;
        inter += p && g;
        uni += p || g;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Binarization at min(2 mean, 1); a zero prediction stays negative.
inline std::vector<char> adaptive_binarize(const Map& pred)
{
    const double thr = std::min(2.0 * pred.mean(), 1.0);
    std::vector<char> out(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) out[i] = pred[i] >= thr && pred[i] > 0.0;
    return out;
}

inline double f_beta(const Map& pred, const Map& gt, double beta_sq = 0.3)
{
    check_pair(pred, gt, "f_beta");
    const auto bin = adaptive_binarize(pred);
    std::size_t tp = 0;
    std::size_t npred = 0;
    std::size_t ngt = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        tp += bin[i] && gt[i] == 1.0;
        npred += bin[i] != 0;
        ngt += gt[i] == 1.0;
    }
    if (tp == 0) return 0.0;
    const double p = static_cast<double>(tp) / static_cast<double>(npred);
    const double r = static_cast<double>(tp) / static_cast<double>(ngt);
    return (1.0 + beta_sq) * p * r / (beta_sq * p + r);
}

// ---------------------------------------------------------------- weighted F

struct NearestForeground {
    std::vector<double> distance; // Euclidean distance to the nearest foreground pixel
    std::vector<int> index;       // row-major index of that pixel, lowest index on ties
};

/// Exact nearest-foreground search. For each column the closest foreground rows
/// above and below are the only candidates; columns are scanned outward until
/// the horizontal offset alone exceeds the best distance.
inline NearestForeground nearest_foreground(const Map& gt)
{
    const int h = gt.height();
    const int w = gt.width();
    const int none = -1;
    std::vector<int> up(static_cast<std::size_t>(h) * w, none);
    std::vector<int> down(static_cast<std::size_t>(h) * w, none);
    for (int c = 0; c < w; ++c) {
        int last = none;
        for (int r = 0; r < h; ++r) {
            if (gt(r, c) == 1.0) last = r;
            up[static_cast<std::size_t>(r) * w + c] = last;
        }
        last = none;
        for (int r = h - 1; r >= 0; --r) {
            if (gt(r, c) == 1.0) last = r;
            down[static_cast<std::size_t>(r) * w + c] = last;
        }
    }
    NearestForeground out;
    out.distance.assign(static_cast<std::size_t>(h) * w, std::numeric_limits<double>::infinity());
    out.index.assign(static_cast<std::size_t>(h) * w, none);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            long best_d2 = std::numeric_limits<long>::max();
            int best_idx = none;
            auto consider = [&](int rr, int cc) {
                const long dr = rr - r;
                const long dc = cc - c;
                const long d2 = dr * dr + dc * dc;
                const int idx = rr * w + cc;
                if (d2 < best_d2 || (d2 == best_d2 && idx < best_idx)) {
                    best_d2 = d2;
                    best_idx = idx;
                }
            };
            for (int off = 0; off < w; ++off) {
                const long o2 = static_cast<long>(off) * off;
                if (o2 > best_d2) break;
                for (int side = 0; side < (off == 0 ? 1 : 2); ++side) {
                    const int cc = side == 0 ? c - off : c + off;
                    if (cc < 0 || cc >= w) continue;
                    const int a = up[static_cast<std::size_t>(r) * w + cc];
                    const int b = down[static_cast<std::size_t>(r) * w + cc];
                    if (a != none) consider(a, cc);
                    if (b != none) consider(b, cc);
                }
            }
            if (best_idx != none) {
                out.distance[static_cast<std::size_t>(r) * w + c] = std::sqrt(static_cast<double>(best_d2));
                out.index[static_cast<std::size_t>(r) * w + c] = best_idx;
            }
        }
    return out;
}

/// MATLAB-style normalized Gaussian (fspecial).
inline Matrix matlab_gaussian(int size, double sigma)
{
    Matrix k(size, size);
    const double c = (size - 1) / 2.0;
    for (int r = 0; r < size; ++r)
        for (int q = 0; q < size; ++q)
            k(r, q) = std::exp(-((r - c) * (r - c) + (q - c) * (q - c)) / (2.0 * sigma * sigma));
    const double cut = kEps * k.maxCoeff();
    for (Eigen::Index i = 0; i < k.size(); ++i)
        if (k.data()[i] < cut) k.data()[i] = 0.0;
    return k / k.sum();
}

inline double f_beta_weighted(const Map& pred, const Map& gt, double beta_sq = 1.0)
{
    check_pair(pred, gt, "f_beta_weighted");
    const int h = gt.height();
    const int w = gt.width();
    const std::size_t n = gt.size();
    if (gt.sum() == 0.0) {
        for (std::size_t i = 0; i < n; ++i)
            if (pred[i] >= 0.5) return 0.0;
        return 1.0;
    }
    const NearestForeground nf = nearest_foreground(gt);
    std::vector<double> e(n), et(n);
    for (std::size_t i = 0; i < n; ++i) e[i] = std::abs(pred[i] - gt[i]);
    for (std::size_t i = 0; i < n; ++i)
        et[i] = gt[i] == 1.0 ? e[i] : e[static_cast<std::size_t>(nf.index[i])];

    const Matrix k = matlab_gaussian(7, 5.0);
    const int p = 3;
    double tp_err = 0.0;
    double fp = 0.0;
    double fg = 0.0;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * w + c;
            double ew;
            if (gt[i] == 1.0) {
                double ea = 0.0;
                for (int ky = 0; ky < 7; ++ky) {
                    const int sr = r + ky - p;
                    if (sr < 0 || sr >= h) continue;
                    for (int kx = 0; kx < 7; ++kx) {
                        const int sc = c + kx - p;
                        if (sc < 0 || sc >= w) continue;
                        ea += k(ky, kx) * et[static_cast<std::size_t>(sr) * w + sc];
                    }
                }
                ew = ea < e[i] ? ea : e[i];
                tp_err += ew;
                fg += 1.0;
            } else {
                const double b = 2.0 - std::exp(std::log(0.5) / 5.0 * nf.distance[i]);
                ew = e[i] * b;
                fp += ew;
            }
        }
    const double tpw = fg - tp_err;
    const double recall = 1.0 - tp_err / fg;
    const double precision = tpw / (tpw + fp + kEps);
    return (1.0 + beta_sq) * recall * precision / (recall + beta_sq * precision + kEps);
}

// ---------------------------------------------------------------- S-measure

namespace detail {

inline double s_object(const Map& x, const Map& mask)
{
    double n = 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (mask[i] == 1.0) {
            n += 1.0;
            s += x[i];
        }
    if (n == 0.0) return 0.0;
    const double mean = s / n;
    double ss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (mask[i] == 1.0) ss += (x[i] - mean) * (x[i] - mean);
    const double sigma = n > 1.0 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    return 2.0 * mean / (mean * mean + 1.0 + sigma + kEps);
}

/// SSIM-like block score over rows [r0,r1) and cols [c0,c1).
inline double block_ssim(const Map& pred, const Map& gt, int r0, int r1, int c0, int c1)
{
    const double n = static_cast<double>(std::max(0, r1 - r0)) * std::max(0, c1 - c0);
    if (n == 0.0) return 0.0;
    double sx = 0.0;
    double sy = 0.0;
    for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) {
            sx += pred(r, c);
            sy += gt(r, c);
        }
    const double x = sx / n;
    const double y = sy / n;
    double vx = 0.0;
    double vy = 0.0;
    double cxy = 0.0;
    if (n > 1.0) {
        for (int r = r0; r < r1; ++r)
            for (int c = c0; c < c1; ++c) {
                const double dx = pred(r, c) - x;
                const double dy = gt(r, c) - y;
                vx += dx * dx;
                vy += dy * dy;
                cxy += dx * dy;
            }
        vx /= n - 1.0;
        vy /= n - 1.0;
        cxy /= n - 1.0;
    }
    const double alpha = 4.0 * x * y * cxy;
    const double beta = (x * x + y * y) * (vx + vy);
    if (alpha != 0.0) return alpha / (beta + kEps);
    if (beta == 0.0) return 1.0;
    return 0.0;
}

inline double round_half_even(double v)
{
    const int mode = std::fegetround();
    std::fesetround(FE_TONEAREST);
    const double r = std::nearbyint(v);
    std::fesetround(mode);
    return r;
}

} // namespace detail

inline double s_measure(const Map& pred, const Map& gt, double alpha = 0.5)
{
    check_pair(pred, gt, "s_measure");
    const double y = gt.mean();
    if (y == 0.0) return 1.0 - pred.mean();
    if (y == 1.0) return pred.mean();

    const int h = gt.height();
    const int w = gt.width();
    Map fg(h, w);
    Map bg(h, w);
    Map inv(h, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            fg(r, c) = pred(r, c) * gt(r, c);
            bg(r, c) = (1.0 - pred(r, c)) * (1.0 - gt(r, c));
            inv(r, c) = 1.0 - gt(r, c);
        }
    const double object = y * detail::s_object(fg, gt) + (1.0 - y) * detail::s_object(bg, inv);

    double sr = 0.0;
    double sc = 0.0;
    double cnt = 0.0;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            if (gt(r, c) == 1.0) {
                sr += r;
                sc += c;
                cnt += 1.0;
            }
    const int cy = static_cast<int>(detail::round_half_even(sr / cnt)) + 1;
    const int cx = static_cast<int>(detail::round_half_even(sc / cnt)) + 1;
    const double area = static_cast<double>(h) * w;
    const double w1 = static_cast<double>(cx) * cy / area;
    const double w2 = static_cast<double>(cy) * (w - cx) / area;
    const double w3 = static_cast<double>(h - cy) * cx / area;
    const double w4 = 1.0 - w1 - w2 - w3;
    const double region = w1 * detail::block_ssim(pred, gt, 0, cy, 0, cx) +
                          w2 * detail::block_ssim(pred, gt, 0, cy, cx, w) +
                          w3 * detail::block_ssim(pred, gt, cy, h, 0, cx) +
                          w4 * detail::block_ssim(pred, gt, cy, h, cx, w);
    return std::max(0.0, alpha * object + (1.0 - alpha) * region);
}

// ---------------------------------------------------------------- E-measure

/// Enhanced alignment of the adaptively binarized prediction; the sum over
/// pixels is divided by the pixel count.
inline double e_measure(const Map& pred, const Map& gt)
{
    check_pair(pred, gt, "e_measure");
    const auto bin = adaptive_binarize(pred);
    const double n = static_cast<double>(pred.size());
    double npos = 0.0;
    for (char b : bin) npos += b;
    const double gsum = gt.sum();
    if (gsum == 0.0) return (n - npos) / n;
    if (gsum == n) return npos / n;

    double count[2][2] = {{0.0, 0.0}, {0.0, 0.0}}; // [pred][gt]
    for (std::size_t i = 0; i < pred.size(); ++i) count[bin[i] ? 1 : 0][gt[i] == 1.0 ? 1 : 0] += 1.0;
    const double mp = npos / n;
    const double mg = gsum / n;
    double total = 0.0;
    for (int p = 0; p < 2; ++p)
        for (int g = 0; g < 2; ++g) {
            if (count[p][g] == 0.0) continue;
            const double ap = p - mp;
            const double ag = g - mg;
            const double align = 2.0 * ap * ag / (ap * ap + ag * ag + kEps);
            total += count[p][g] * (align + 1.0) * (align + 1.0) / 4.0;
        }
    return total / n;
}

// ---------------------------------------------------------------- gate and aggregation

inline double gated(double value, bool class_correct, GateKind kind)
{
    if (class_correct) return value;
    return kind == GateKind::Mae ? 1.0 : 0.0;
}

using MetricRow = std::array<double, kNumMetrics>;

struct MetricOptions {
    double iou_threshold = 0.5;
    double beta_sq = 0.3;
    double s_alpha = 0.5;
};

inline MetricRow base_metrics(const Map& pred, const Map& gt, const MetricOptions& opt = {})
{
    MetricRow row{};
    row[static_cast<std::size_t>(Metric::SMeasure)] = s_measure(pred, gt, opt.s_alpha);
    row[static_cast<std::size_t>(Metric::WeightedF)] = f_beta_weighted(pred, gt);
    row[static_cast<std::size_t>(Metric::MAE)] = mae(pred, gt);
    row[static_cast<std::size_t>(Metric::FBeta)] = f_beta(pred, gt, opt.beta_sq);
    row[static_cast<std::size_t>(Metric::EMeasure)] = e_measure(pred, gt);
    row[static_cast<std::size_t>(Metric::IoU)] = iou(pred, gt, opt.iou_threshold);
    return row;
}

inline MetricRow gate_row(const MetricRow& base, bool class_correct)
{
    MetricRow out{};
    for (std::size_t m = 0; m < kNumMetrics; ++m) out[m] = gated(base[m], class_correct, gate_kind(m));
    return out;
}

struct SampleRecord {
    std::string image_id;
    std::string predicted_class;
    std::string true_class;
    bool class_correct = false;
    bool degenerate = false;
    MetricRow base{};
    MetricRow gated{};
};

struct MetricReport {
    std::vector<SampleRecord> per_sample;
    MetricRow aggregate{};
    std::size_t samples = 0;
    std::size_t correct = 0;
    std::size_t degenerate = 0;

    double accuracy() const { return samples == 0 ? 0.0 : static_cast<double>(correct) / samples; }
    double value(Metric m) const { return aggregate[static_cast<std::size_t>(m)]; }
};

struct GroundTruthEntry {
    std::string image_id;
    Map mask;
    std::string class_name;
};

/// Arithmetic means in sample order.
inline MetricReport aggregate(std::vector<SampleRecord> records)
{
    MetricReport rep;
    rep.per_sample = std::move(records);
    rep.samples = rep.per_sample.size();
    for (const auto& r : rep.per_sample) {
        rep.correct += r.class_correct;
        rep.degenerate += r.degenerate;
        for (std::size_t m = 0; m < kNumMetrics; ++m) rep.aggregate[m] += r.gated[m];
    }
    if (rep.samples > 0)
        for (auto& v : rep.aggregate) v /= static_cast<double>(rep.samples);
    return rep;
}

inline MetricReport evaluate(const std::vector<recognizer::SamplePrediction>& predictions,
                             const std::vector<GroundTruthEntry>& gts, const MetricOptions& opt = {})
{
    require(!predictions.empty(), "evaluate: at least one sample is required");
    if (predictions.size() != gts.size())
        throw InvalidInput("evaluate: " + std::to_string(predictions.size()) + " predictions but " +
                           std::to_string(gts.size()) + " ground-truth entries");
    std::vector<std::string> bad;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (predictions[i].image_id != gts[i].image_id)
            bad.push_back(predictions[i].image_id + "!=" + gts[i].image_id);
    if (!bad.empty()) {
        std::string msg = "evaluate: image id mismatch:";
        for (const auto& b : bad) msg += " " + b;
        throw InvalidInput(msg);
    }
    std::vector<SampleRecord> records;
    records.reserve(predictions.size());
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        SampleRecord r;
        r.image_id = predictions[i].image_id;
        r.predicted_class = predictions[i].class_name;
        r.true_class = gts[i].class_name;
        r.class_correct = predictions[i].class_name == gts[i].class_name;
        r.degenerate = predictions[i].degenerate;
        r.base = base_metrics(predictions[i].seg_prob, gts[i].mask, opt);
        r.gated = gate_row(r.base, r.class_correct);
        records.push_back(std::move(r));
    }
    return aggregate(std::move(records));
}

// ---------------------------------------------------------------- relative gain

/// Mean over the six metrics of the signed relative change against `base`;
/// the MAE contribution is sign-flipped so that improvements are positive.
inline double relative_gain(const MetricRow& base, const MetricRow& candidate)
{
    double s = 0.0;
    for (std::size_t m = 0; m < kNumMetrics; ++m) {
        require(base[m] != 0.0, "relative_gain: baseline metric " + metric_names()[m] + " is zero");
        s += gate_kind(m) == GateKind::Mae ? (base[m] - candidate[m]) / base[m] : (candidate[m] - base[m]) / base[m];
    }
    return s / static_cast<double>(kNumMetrics);
}

inline std::string format_row(const MetricRow& row, int precision = 3)
{
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(precision);
    for (std::size_t m = 0; m < kNumMetrics; ++m) out << (m ? " " : "") << row[m];
    return out.str();
}

} // namespace ovcos::metrics
