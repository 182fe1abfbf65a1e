#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ovcos/errors.hpp"

namespace ovcos {

/// Row-major dense matrix used for every tensor in the project.
/// Spatial feature maps are stored in token layout: (height*width) x channels.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Single-channel real-valued raster, row-major.
class Map {
public:
    Map() = default;
    Map(int height, int width, double fill = 0.0)
        : height_(height), width_(width), data_(static_cast<std::size_t>(height) * width, fill)
    {
        require(height >= 0 && width >= 0, "Map: negative dimensions");
    }

    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * width_ + c]; }
    double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * width_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    bool same_shape(const Map& other) const { return height_ == other.height_ && width_ == other.width_; }

    double sum() const
    {
        double s = 0.0;
        for (double v : data_) s += v;
        return s;
    }
    double mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }

    friend bool operator==(const Map&, const Map&) = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<double> data_;
};

/// Multi-channel raster in planar (channels x height x width) layout.
class Image {
public:
    Image() = default;
    Image(int channels, int height, int width, double fill = 0.0)
        : channels_(channels), height_(height), width_(width),
          data_(static_cast<std::size_t>(channels) * height * width, fill)
    {
        require(channels >= 0 && height >= 0 && width >= 0, "Image: negative dimensions");
    }

    int channels() const { return channels_; }
    int height() const { return height_; }
    int width() const { return width_; }

    double& operator()(int ch, int r, int c) { return data_[index(ch, r, c)]; }
    double operator()(int ch, int r, int c) const { return data_[index(ch, r, c)]; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    Map plane(int ch) const
    {
        Map out(height_, width_);
        std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(ch) * height_ * width_, out.size(),
                    out.values().begin());
        return out;
    }

    void set_plane(int ch, const Map& m)
    {
        require(m.height() == height_ && m.width() == width_, "Image::set_plane: shape mismatch");
        std::copy(m.values().begin(), m.values().end(),
                  data_.begin() + static_cast<std::ptrdiff_t>(ch) * height_ * width_);
    }

    friend bool operator==(const Image&, const Image&) = default;

private:
    std::size_t index(int ch, int r, int c) const
    {
        return (static_cast<std::size_t>(ch) * height_ + r) * width_ + c;
    }

    int channels_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<double> data_;
};

/// One-dimensional linear interpolation taps (half-pixel centers, edge clamped).
struct LinearTap {
    int lo = 0;
    int hi = 0;
    double frac = 0.0;
};

inline std::vector<LinearTap> linear_taps(int in_size, int out_size)
{
    std::vector<LinearTap> taps(static_cast<std::size_t>(out_size));
    const double scale = static_cast<double>(in_size) / out_size;
    for (int o = 0; o < out_size; ++o) {
        double src = scale * (o + 0.5) - 0.5;
        if (src < 0.0) src = 0.0;
        int lo = static_cast<int>(src);
        if (lo > in_size - 1) lo = in_size - 1;
        int hi = lo < in_size - 1 ? lo + 1 : lo;
        taps[static_cast<std::size_t>(o)] = {lo, hi, src - lo};
    }
    return taps;
}

inline int nearest_index(int out_index, int in_size, int out_size)
{
    int src = static_cast<int>(std::floor(out_index * static_cast<double>(in_size) / out_size));
    return std::min(src, in_size - 1);
}

/// Bilinear resize of a token-layout matrix ((h*w) x c) to (oh*ow) x c.
inline Matrix resize_bilinear(const Matrix& src, int h, int w, int oh, int ow)
{
    require(src.rows() == static_cast<Eigen::Index>(h) * w, "resize_bilinear: row count does not match h*w");
    Matrix out(static_cast<Eigen::Index>(oh) * ow, src.cols());
    const auto ty = linear_taps(h, oh);
    const auto tx = linear_taps(w, ow);
    for (int r = 0; r < oh; ++r) {
        const auto& a = ty[static_cast<std::size_t>(r)];
        for (int c = 0; c < ow; ++c) {
            const auto& b = tx[static_cast<std::size_t>(c)];
            const double w00 = (1 - a.frac) * (1 - b.frac);
            const double w01 = (1 - a.frac) * b.frac;
            const double w10 = a.frac * (1 - b.frac);
            const double w11 = a.frac * b.frac;
            out.row(static_cast<Eigen::Index>(r) * ow + c) =
                w00 * src.row(static_cast<Eigen::Index>(a.lo) * w + b.lo) +
                w01 * src.row(static_cast<Eigen::Index>(a.lo) * w + b.hi) +
                w10 * src.row(static_cast<Eigen::Index>(a.hi) * w + b.lo) +
                w11 * src.row(static_cast<Eigen::Index>(a.hi) * w + b.hi);
        }
    }
    return out;
}

inline Matrix map_to_column(const Map& m)
{
    Matrix out(static_cast<Eigen::Index>(m.size()), 1);
    for (std::size_t i = 0; i < m.size(); ++i) out(static_cast<Eigen::Index>(i), 0) = m[i];
    return out;
}

inline Map column_to_map(const Matrix& col, int h, int w, Eigen::Index channel = 0)
{
    require(col.rows() == static_cast<Eigen::Index>(h) * w, "column_to_map: row count does not match h*w");
    Map out(h, w);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = col(static_cast<Eigen::Index>(i), channel);
    return out;
}

inline Matrix image_to_tokens(const Image& img)
{
    const Eigen::Index n = static_cast<Eigen::Index>(img.height()) * img.width();
    Matrix out(n, img.channels());
    for (int ch = 0; ch < img.channels(); ++ch)
        for (int r = 0; r < img.height(); ++r)
            for (int c = 0; c < img.width(); ++c)
                out(static_cast<Eigen::Index>(r) * img.width() + c, ch) = img(ch, r, c);
    return out;
}

inline Image tokens_to_image(const Matrix& tokens, int h, int w)
{
    require(tokens.rows() == static_cast<Eigen::Index>(h) * w, "tokens_to_image: row count does not match h*w");
    Image out(static_cast<int>(tokens.cols()), h, w);
    for (int ch = 0; ch < out.channels(); ++ch)
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) out(ch, r, c) = tokens(static_cast<Eigen::Index>(r) * w + c, ch);
    return out;
}

inline Map resize_bilinear(const Map& m, int oh, int ow)
{
    if (m.height() == oh && m.width() == ow) return m;
    return column_to_map(resize_bilinear(map_to_column(m), m.height(), m.width(), oh, ow), oh, ow);
}

inline Image resize_bilinear(const Image& img, int oh, int ow)
{
    if (img.height() == oh && img.width() == ow) return img;
    return tokens_to_image(resize_bilinear(image_to_tokens(img), img.height(), img.width(), oh, ow), oh, ow);
}

inline Map resize_nearest(const Map& m, int oh, int ow)
{
    Map out(oh, ow);
    for (int r = 0; r < oh; ++r) {
        const int sr = nearest_index(r, m.height(), oh);
        for (int c = 0; c < ow; ++c) out(r, c) = m(sr, nearest_index(c, m.width(), ow));
    }
    return out;
}

/// Box-filter downsampling by an integer factor; keeps thin structures as soft values.
inline Map resize_area(const Map& m, int oh, int ow)
{
    require(oh > 0 && ow > 0 && m.height() % oh == 0 && m.width() % ow == 0,
            "resize_area: target must divide the source size");
    const int fy = m.height() / oh;
    const int fx = m.width() / ow;
    Map out(oh, ow);
    for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
            double s = 0.0;
            for (int y = 0; y < fy; ++y)
                for (int x = 0; x < fx; ++x) s += m(r * fy + y, c * fx + x);
            out(r, c) = s / (fy * fx);
        }
    return out;
}

} // namespace ovcos
