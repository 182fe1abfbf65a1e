#pragma once

// Static artifacts: attribute histograms, template-set diagnostics, SEA
// mixing weights and the six-column metric row. Every chart is written as a
// PNG together with the CSV it was drawn from.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <opencv2/imgproc.hpp>

#include "ovcos/camo_data.hpp"
#include "ovcos/decoder.hpp"
#include "ovcos/io.hpp"
#include "ovcos/metrics.hpp"
#include "ovcos/prompt_engine.hpp"
#include "ovcos/recognizer.hpp"
#include "ovcos/vlm_bridge.hpp"

namespace ovcos::report {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- drawing

namespace detail {

inline constexpr int kWidth = 640;
inline constexpr int kHeight = 400;
inline constexpr int kMargin = 50;

inline cv::Mat canvas() { return cv::Mat(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255)); }

inline void axes(cv::Mat& img, const std::string& title)
{
    const cv::Scalar black(0, 0, 0);
    cv::line(img, {kMargin, kHeight - kMargin}, {kWidth - kMargin / 2, kHeight - kMargin}, black, 1);
    cv::line(img, {kMargin, kMargin / 2}, {kMargin, kHeight - kMargin}, black, 1);
    cv::putText(img, title, {kMargin, 20}, cv::FONT_HERSHEY_SIMPLEX, 0.5, black, 1, cv::LINE_AA);
}

inline std::string num(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

inline void label(cv::Mat& img, const std::string& text, int x, int y, double scale = 0.35)
{
    cv::putText(img, text, {x, y}, cv::FONT_HERSHEY_SIMPLEX, scale, cv::Scalar(60, 60, 60), 1, cv::LINE_AA);
}

inline void save(const std::string& path, const cv::Mat& img) { io::write_checked(path, img); }

} // namespace detail

/// Vertical bars with one label per bar.
inline void bar_chart(const std::string& png, const std::vector<std::string>& labels, const std::vector<double>& values,
                      const std::string& title)
{
    require(labels.size() == values.size(), "bar_chart: label/value count mismatch");
    using namespace detail;
    cv::Mat img = canvas();
    axes(img, title);
    const double vmax = values.empty() ? 1.0 : std::max(1e-12, *std::max_element(values.begin(), values.end()));
    const int n = std::max<int>(1, static_cast<int>(values.size()));
    const double slot = (kWidth - 1.5 * kMargin) / n;
    const int plot_h = kHeight - 2 * kMargin;
    for (int i = 0; i < static_cast<int>(values.size()); ++i) {
        const int x0 = kMargin + static_cast<int>(i * slot + slot * 0.15);
        const int x1 = kMargin + static_cast<int>((i + 1) * slot - slot * 0.15);
        const int h = static_cast<int>(std::max(0.0, values[static_cast<std::size_t>(i)]) / vmax * plot_h);
        cv::rectangle(img, {x0, kHeight - kMargin - h}, {x1, kHeight - kMargin}, cv::Scalar(180, 120, 40), cv::FILLED);
        label(img, labels[static_cast<std::size_t>(i)], x0, kHeight - kMargin + 14);
        label(img, num(values[static_cast<std::size_t>(i)]), x0, kHeight - kMargin - h - 4);
    }
    save(png, img);
}

struct Histogram {
    double lo = 0.0;
    double hi = 1.0;
    std::vector<std::size_t> counts;
};

inline Histogram histogram(const std::vector<double>& values, int bins, double lo, double hi)
{
    require(bins > 0 && hi > lo, "histogram: invalid bin layout");
    Histogram h{lo, hi, std::vector<std::size_t>(static_cast<std::size_t>(bins), 0)};
    for (double v : values) {
        int b = static_cast<int>(std::floor((v - lo) / (hi - lo) * bins));
        b = std::clamp(b, 0, bins - 1);
        ++h.counts[static_cast<std::size_t>(b)];
    }
    return h;
}

inline void write_histogram(const fs::path& dir, const std::string& name, const std::vector<double>& values, int bins,
                            double lo, double hi)
{
    const Histogram h = histogram(values, bins, lo, hi);
    std::ofstream csv(dir / (name + "_hist.csv"));
    csv << "bin_lo,bin_hi,count\n";
    std::vector<std::string> labels;
    std::vector<double> counts;
    const double w = (hi - lo) / bins;
    for (int b = 0; b < bins; ++b) {
        csv << lo + b * w << "," << lo + (b + 1) * w << "," << h.counts[static_cast<std::size_t>(b)] << "\n";
        labels.push_back(b % std::max(1, bins / 5) == 0 ? detail::num(lo + b * w) : "");
        counts.push_back(static_cast<double>(h.counts[static_cast<std::size_t>(b)]));
    }
    bar_chart((dir / (name + "_hist.png")).string(), labels, counts, name);
}

/// Labelled points on linear axes fitted to the data range.
inline void scatter(const std::string& png, const std::vector<std::string>& labels, const std::vector<double>& xs,
                    const std::vector<double>& ys, const std::string& title)
{
    require(labels.size() == xs.size() && xs.size() == ys.size(), "scatter: size mismatch");
    using namespace detail;
    cv::Mat img = canvas();
    axes(img, title);
    if (!xs.empty()) {
        auto [xmin, xmax] = std::minmax_element(xs.begin(), xs.end());
        auto [ymin, ymax] = std::minmax_element(ys.begin(), ys.end());
        const double x0 = *xmin, y0 = *ymin;
        const double xr = std::max(1e-9, *xmax - x0), yr = std::max(1e-9, *ymax - y0);
        const int pw = kWidth - 3 * kMargin, ph = kHeight - 3 * kMargin;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const int px = kMargin + kMargin / 2 + static_cast<int>((xs[i] - x0) / xr * pw);
            const int py = kHeight - kMargin - kMargin / 2 - static_cast<int>((ys[i] - y0) / yr * ph);
            cv::circle(img, {px, py}, 5, cv::Scalar(40, 40, 200), cv::FILLED, cv::LINE_AA);
            label(img, labels[i] + " (" + num(xs[i]) + ", " + num(ys[i]) + ")", px + 8, py - 6);
        }
    }
    save(png, img);
}

// ---------------------------------------------------------------- dataset statistics

struct AttributeRow {
    std::string image_id;
    std::string class_name;
    data::ObjectAttributes attributes;
};

inline std::vector<AttributeRow> attribute_table(const std::vector<data::ManifestRecord>& records,
                                                 std::vector<std::string>* errors = nullptr)
{
    std::vector<AttributeRow> rows;
    for (const auto& r : records) {
        try {
            const Image img = io::read_image(r.image_path);
            const Map mask = io::read_mask(r.mask_path);
            rows.push_back({r.image_id, r.class_name, data::compute_attributes(mask, img)});
        } catch (const std::exception& e) {
            if (!errors) throw;
            errors->push_back(r.image_id + ": " + e.what());
        }
    }
    return rows;
}

/// Per-image attribute CSV plus one histogram per attribute.
inline void write_attribute_stats(const fs::path& dir, const std::vector<AttributeRow>& rows)
{
    fs::create_directories(dir);
    std::ofstream csv(dir / "attributes.csv");
    csv << "image_id,class,concentration,avg_color_ratio,area_ratio,num_parts,centroid_x,centroid_y,empty\n";
    csv.precision(10);
    std::vector<double> conc, color, area, parts, cx, cy;
    for (const auto& r : rows) {
        const auto& a = r.attributes;
        csv << r.image_id << "," << r.class_name << "," << a.concentration << "," << a.avg_color_ratio << ","
            << a.area_ratio << "," << a.num_parts << "," << a.centroid_x << "," << a.centroid_y << ","
            << (a.empty ? 1 : 0) << "\n";
        if (a.empty) continue;
        conc.push_back(a.concentration);
        color.push_back(a.avg_color_ratio);
        area.push_back(a.area_ratio);
        parts.push_back(a.num_parts);
        cx.push_back(a.centroid_x);
        cy.push_back(a.centroid_y);
    }
    write_histogram(dir, "concentration", conc, 10, 0.0, 1.0);
    const double cmax = color.empty() ? 2.0 : std::max(2.0, *std::max_element(color.begin(), color.end()));
    write_histogram(dir, "avg_color_ratio", color, 10, 0.0, cmax);
    write_histogram(dir, "area_ratio", area, 10, 0.0, 1.0);
    write_histogram(dir, "num_parts", parts, 10, 0.5, 10.5);
    write_histogram(dir, "centroid_x", cx, 10, 0.0, 1.0);
    write_histogram(dir, "centroid_y", cy, 10, 0.0, 1.0);
}

// ---------------------------------------------------------------- template sets

struct TemplateSetPoint {
    std::string name;
    double hausdorff = 0.0; // between seen-class and unseen-class embeddings
    double accuracy = 0.0;  // ground-truth-mask pooling on the evaluation samples
    std::size_t samples = 0;
};

struct PooledSample {
    std::string class_name;
    vlm::VisualEmbedding visual;
};

/// Encodes each record once and pools its top-level feature with the ground-truth mask.
inline std::vector<PooledSample> pool_with_ground_truth(const vlm::Backbone& backbone,
                                                        const std::vector<data::ManifestRecord>& records,
                                                        int resolution)
{
    std::vector<PooledSample> out;
    for (const auto& r : records) {
        const Image img = resize_bilinear(io::read_image(r.image_path), resolution, resolution);
        const Map mask = io::read_mask(r.mask_path);
        const vlm::FeaturePyramid pyr = backbone.encode_image(img);
        const recognizer::PooledFeature pooled = recognizer::masked_average_pool(pyr.level(5), mask);
        vlm::VisualEmbedding v = backbone.project_visual(pooled.vector);
        if (pooled.degenerate) {
            v.degenerate = true;
            v.embedding.setZero();
        }
        out.push_back({r.class_name, v});
    }
    return out;
}

inline TemplateSetPoint analyze_template_set(const vlm::Backbone& backbone, const prompts::PromptTemplateSet& set,
                                             const std::vector<std::string>& seen,
                                             const std::vector<std::string>& unseen,
                                             const std::vector<PooledSample>& samples)
{
    TemplateSetPoint p;
    p.name = set.name();
    const auto eu = prompts::class_embeddings(backbone, set, unseen);
    if (!seen.empty()) {
        const auto es = prompts::class_embeddings(backbone, set, seen);
        p.hausdorff = prompts::hausdorff_distance(es.embeddings, eu.embeddings);
    }
    std::size_t correct = 0;
    for (const auto& s : samples) {
        const auto cls = recognizer::classify(s.visual, eu);
        correct += eu.class_names[static_cast<std::size_t>(cls.class_index)] == s.class_name;
    }
    p.samples = samples.size();
    p.accuracy = samples.empty() ? 0.0 : static_cast<double>(correct) / samples.size();
    return p;
}

inline void write_template_scatter(const fs::path& dir, const std::vector<TemplateSetPoint>& points)
{
    fs::create_directories(dir);
    std::ofstream csv(dir / "hausdorff_accuracy.csv");
    csv << "template_set,hausdorff,accuracy,samples\n";
    csv.precision(10);
    std::vector<std::string> names;
    std::vector<double> xs, ys;
    for (const auto& p : points) {
        csv << p.name << "," << p.hausdorff << "," << p.accuracy << "," << p.samples << "\n";
        names.push_back(p.name);
        xs.push_back(p.hausdorff);
        ys.push_back(p.accuracy);
    }
    scatter((dir / "hausdorff_accuracy.png").string(), names, xs, ys, "accuracy vs Hausdorff (seen/unseen)");
}

// ---------------------------------------------------------------- SEA weights

struct AlphaBar {
    int stage = 0;
    int head = 0;
    double alpha = 0.0;
};

inline std::vector<AlphaBar> alpha_bars(const decoder::Decoder& dec)
{
    std::vector<AlphaBar> out;
    for (int s : dec.config().se_stages) {
        const auto a = dec.alphas(s);
        for (std::size_t h = 0; h < a.size(); ++h) out.push_back({s, static_cast<int>(h), a[h]});
    }
    return out;
}

inline void write_alpha_chart(const fs::path& dir, const std::vector<AlphaBar>& bars)
{
    fs::create_directories(dir);
    std::ofstream csv(dir / "alpha.csv");
    csv << "stage,head,alpha\n";
    csv.precision(10);
    std::vector<std::string> labels;
    std::vector<double> values;
    for (const auto& b : bars) {
        csv << b.stage << "," << b.head << "," << b.alpha << "\n";
        labels.push_back("s" + std::to_string(b.stage) + "h" + std::to_string(b.head));
        values.push_back(b.alpha);
    }
    bar_chart((dir / "alpha.png").string(), labels, values, "edge weight alpha per stage/head");
}

// ---------------------------------------------------------------- metric row

inline std::string metric_header()
{
    std::string s;
    for (const auto& n : metrics::metric_names()) s += (s.empty() ? "" : " ") + n;
    return s;
}

inline void write_metric_row(const fs::path& dir, const metrics::MetricRow& row)
{
    fs::create_directories(dir);
    std::ofstream csv(dir / "metric_row.csv");
    std::string header;
    for (const auto& n : metrics::metric_names()) header += (header.empty() ? "" : ",") + n;
    csv << header << "\n";
    csv.precision(10);
    for (std::size_t m = 0; m < metrics::kNumMetrics; ++m) csv << (m ? "," : "") << row[m];
    csv << "\n";
    std::vector<std::string> labels(metrics::metric_names().begin(), metrics::metric_names().end());
    bar_chart((dir / "metric_row.png").string(), labels, std::vector<double>(row.begin(), row.end()),
              metric_header());
}

} // namespace ovcos::report
