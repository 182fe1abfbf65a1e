#pragma once

// PNG/JPEG file access through OpenCV. Images come back planar RGB in [0,1],
// masks binary (>= 128), depth as raw grey values.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include <opencv2/imgcodecs.hpp>

#include "ovcos/errors.hpp"
#include "ovcos/image.hpp"

namespace ovcos::io {

inline cv::Mat read_raw(const std::string& path, int flags)
{
    if (!std::filesystem::exists(path)) throw IoError("file not found: '" + path + "'");
    cv::Mat m;
    try {
        m = cv::imread(path, flags);
    } catch (const cv::Exception& e) {
        throw IoError("cannot decode '" + path + "': " + e.what());
    }
    if (m.empty()) throw IoError("cannot decode '" + path + "'");
    return m;
}

inline Image read_image(const std::string& path)
{
    cv::Mat m = read_raw(path, cv::IMREAD_COLOR);
    Image img(3, m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r) {
        const auto* row = m.ptr<cv::Vec3b>(r);
        for (int c = 0; c < m.cols; ++c)
            for (int ch = 0; ch < 3; ++ch) img(ch, r, c) = row[c][2 - ch] / 255.0; // BGR -> RGB
    }
    return img;
}

inline Map read_mask(const std::string& path)
{
    cv::Mat m = read_raw(path, cv::IMREAD_GRAYSCALE);
    Map out(m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r) {
        const auto* row = m.ptr<unsigned char>(r);
        for (int c = 0; c < m.cols; ++c) out(r, c) = row[c] >= 128 ? 1.0 : 0.0;
    }
    return out;
}

/// 8- or 16-bit single channel, returned unscaled.
inline Map read_depth(const std::string& path)
{
    cv::Mat m = read_raw(path, cv::IMREAD_ANYDEPTH | cv::IMREAD_GRAYSCALE);
    Map out(m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r)
        for (int c = 0; c < m.cols; ++c) {
            if (m.depth() == CV_16U)
                out(r, c) = m.at<unsigned short>(r, c);
            else if (m.depth() == CV_8U)
                out(r, c) = m.at<unsigned char>(r, c);
            else
                throw IoError("unsupported depth bit depth in '" + path + "'");
        }
    return out;
}

inline void write_checked(const std::string& path, const cv::Mat& m)
{
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    bool ok = false;
    try {
        ok = cv::imwrite(path, m);
    } catch (const cv::Exception& e) {
        throw IoError("cannot write '" + path + "': " + e.what());
    }
    if (!ok) throw IoError("cannot write '" + path + "'");
}

inline unsigned char to_byte(double v)
{
    const double x = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
    return static_cast<unsigned char>(x);
}

inline void write_gray8(const std::string& path, const Map& map)
{
    cv::Mat m(map.height(), map.width(), CV_8UC1);
    for (int r = 0; r < map.height(); ++r)
        for (int c = 0; c < map.width(); ++c) m.at<unsigned char>(r, c) = to_byte(map(r, c));
    write_checked(path, m);
}

inline void write_gray16(const std::string& path, const Map& map)
{
    cv::Mat m(map.height(), map.width(), CV_16UC1);
    for (int r = 0; r < map.height(); ++r)
        for (int c = 0; c < map.width(); ++c)
            m.at<unsigned short>(r, c) = static_cast<unsigned short>(std::round(std::clamp(map(r, c), 0.0, 1.0) * 65535.0));
    write_checked(path, m);
}

inline void write_image(const std::string& path, const Image& img)
{
    require(img.channels() == 3, "write_image: expected 3 channels");
    cv::Mat m(img.height(), img.width(), CV_8UC3);
    for (int r = 0; r < img.height(); ++r)
        for (int c = 0; c < img.width(); ++c)
            for (int ch = 0; ch < 3; ++ch) m.at<cv::Vec3b>(r, c)[2 - ch] = to_byte(img(ch, r, c));
    write_checked(path, m);
}

} // namespace ovcos::io
