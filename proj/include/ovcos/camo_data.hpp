#pragma once

// Dataset layer: manifests and class splits, edge targets, per-object
// attribute statistics, taxonomy similarity and sample loading.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ovcos/errors.hpp"
#include "ovcos/image.hpp"
#include "ovcos/io.hpp"
#include "ovcos/nn.hpp"

namespace ovcos::data {

using json = nlohmann::json;

inline constexpr const char* kManifestFormat = "ovcos-manifest";
inline constexpr int kManifestVersion = 1;

struct ManifestRecord {
    std::string image_id;
    std::string image_path; // resolved against the manifest directory
    std::string mask_path;
    std::optional<std::string> depth_path;
    std::string class_name;
};

struct ClassSplit {
    std::set<std::string> seen;
    std::set<std::string> unseen;
};

struct DatasetManifest {
    std::vector<ManifestRecord> records;
    ClassSplit split;
    std::string source;

    std::vector<ManifestRecord> seen_records() const { return filter(split.seen); }
    std::vector<ManifestRecord> unseen_records() const { return filter(split.unseen); }

    std::set<std::string> classes() const
    {
        std::set<std::string> out;
        for (const auto& r : records) out.insert(r.class_name);
        return out;
    }

private:
    std::vector<ManifestRecord> filter(const std::set<std::string>& names) const
    {
        std::vector<ManifestRecord> out;
        for (const auto& r : records)
            if (names.count(r.class_name)) out.push_back(r);
        return out;
    }
};

struct ManifestIssue {
    int line = 0; // 0 when not tied to a manifest line
    std::string kind;
    std::string detail;

    std::string describe() const
    {
        return (line > 0 ? "line " + std::to_string(line) + ": " : std::string()) + kind + ": " + detail;
    }
};

class ManifestError : public InvalidInput {
public:
    explicit ManifestError(std::vector<ManifestIssue> issues)
        : InvalidInput(summarize(issues)), issues_(std::move(issues))
    {
    }
    const std::vector<ManifestIssue>& issues() const { return issues_; }

private:
    static std::string summarize(const std::vector<ManifestIssue>& issues)
    {
        std::string s = "manifest validation failed (" + std::to_string(issues.size()) + " issue(s))";
        for (std::size_t i = 0; i < issues.size() && i < 10; ++i) s += "\n  " + issues[i].describe();
        return s;
    }
    std::vector<ManifestIssue> issues_;
};

inline ClassSplit parse_split(const json& j)
{
    if (!j.is_object() || !j.contains("seen") || !j.contains("unseen"))
        throw InvalidInput("split file must be an object with 'seen' and 'unseen' lists");
    ClassSplit s;
    for (const auto& v : j.at("seen")) s.seen.insert(v.get<std::string>());
    for (const auto& v : j.at("unseen")) s.unseen.insert(v.get<std::string>());
    return s;
}

inline ClassSplit load_split(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open split file '" + path + "'");
    try {
        return parse_split(json::parse(in));
    } catch (const json::exception& e) {
        throw InvalidInput("split file '" + path + "': " + e.what());
    }
}

inline json split_to_json(const ClassSplit& s)
{
    return json{{"seen", std::vector<std::string>(s.seen.begin(), s.seen.end())},
                {"unseen", std::vector<std::string>(s.unseen.begin(), s.unseen.end())}};
}

/// Structural checks that need no file system access.
inline std::vector<ManifestIssue> check_split(const DatasetManifest& m)
{
    std::vector<ManifestIssue> issues;
    for (const auto& c : m.split.seen)
        if (m.split.unseen.count(c)) issues.push_back({0, "split-overlap", "class '" + c + "' is in both splits"});
    std::set<std::string> reported;
    for (const auto& r : m.records) {
        const bool in_seen = m.split.seen.count(r.class_name) != 0;
        const bool in_unseen = m.split.unseen.count(r.class_name) != 0;
        if (!in_seen && !in_unseen && reported.insert(r.class_name).second)
            issues.push_back({0, "unsplit-class", "class '" + r.class_name + "' is in neither split"});
    }
    return issues;
}

inline std::vector<ManifestIssue> check_files(const DatasetManifest& m)
{
    std::vector<ManifestIssue> issues;
    for (const auto& r : m.records) {
        if (!std::filesystem::exists(r.image_path))
            issues.push_back({0, "missing-file", r.image_id + ": image '" + r.image_path + "'"});
        if (!std::filesystem::exists(r.mask_path))
            issues.push_back({0, "missing-file", r.image_id + ": mask '" + r.mask_path + "'"});
        if (r.depth_path && !std::filesystem::exists(*r.depth_path))
            issues.push_back({0, "missing-file", r.image_id + ": depth '" + *r.depth_path + "'"});
    }
    return issues;
}

struct ManifestParse {
    DatasetManifest manifest;
    std::vector<ManifestIssue> issues;
    std::optional<std::string> split_ref; // split path named by the header
};

inline ManifestParse parse_manifest(std::istream& in, const std::filesystem::path& base_dir)
{
    ManifestParse out;
    std::string line;
    int lineno = 0;
    bool header = false;
    std::set<std::string> ids;
    auto resolve = [&](const std::string& p) {
        const std::filesystem::path path(p);
        return (path.is_absolute() ? path : base_dir / path).lexically_normal().string();
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            out.issues.push_back({lineno, "parse", e.what()});
            continue;
        }
        if (!header) {
            header = true;
            if (!j.is_object() || j.value("format", std::string()) != kManifestFormat) {
                out.issues.push_back({lineno, "header", "first line must be {\"format\":\"ovcos-manifest\",...}"});
                continue;
            }
            if (j.value("version", 0) != kManifestVersion)
                out.issues.push_back({lineno, "header", "unsupported manifest version"});
            if (j.contains("split")) out.split_ref = resolve(j.at("split").get<std::string>());
            continue;
        }
        try {
            ManifestRecord r;
            r.image_id = j.at("image_id").get<std::string>();
            r.image_path = resolve(j.at("image").get<std::string>());
            r.mask_path = resolve(j.at("mask").get<std::string>());
            if (j.contains("depth") && !j.at("depth").is_null()) r.depth_path = resolve(j.at("depth").get<std::string>());
            r.class_name = j.at("class").get<std::string>();
            if (r.image_id.empty() || r.class_name.empty())
                throw InvalidInput("image_id and class must be non-empty");
            if (!ids.insert(r.image_id).second) {
                out.issues.push_back({lineno, "duplicate-id", "image_id '" + r.image_id + "' repeats"});
                continue;
            }
            out.manifest.records.push_back(std::move(r));
        } catch (const std::exception& e) {
            out.issues.push_back({lineno, "record", e.what()});
        }
    }
    if (!header) out.issues.push_back({0, "header", "manifest is empty"});
    return out;
}

struct ManifestOptions {
    std::string split_path; // overrides the header reference
    bool check_files = true;
};

/// Returns the manifest together with every issue found (does not throw on issues).
inline ManifestParse inspect_manifest(const std::string& path, const ManifestOptions& opt = {})
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest '" + path + "'");
    ManifestParse p = parse_manifest(in, std::filesystem::path(path).parent_path());
    p.manifest.source = path;
    const std::string split_path = !opt.split_path.empty() ? opt.split_path : p.split_ref.value_or("");
    if (split_path.empty()) {
        p.issues.push_back({0, "split", "no class split given (header 'split' or explicit path)"});
    } else {
        try {
            p.manifest.split = load_split(split_path);
            auto more = check_split(p.manifest);
            p.issues.insert(p.issues.end(), more.begin(), more.end());
        } catch (const std::exception& e) {
            p.issues.push_back({0, "split", e.what()});
        }
    }
    if (opt.check_files) {
        auto more = check_files(p.manifest);
        p.issues.insert(p.issues.end(), more.begin(), more.end());
    }
    return p;
}

inline DatasetManifest load_manifest(const std::string& path, const ManifestOptions& opt = {})
{
    ManifestParse p = inspect_manifest(path, opt);
    if (!p.issues.empty()) throw ManifestError(std::move(p.issues));
    return std::move(p.manifest);
}

/// Paths are written relative to the manifest directory when possible.
inline void write_manifest(const std::string& path, const DatasetManifest& m, const std::string& split_ref = {})
{
    const auto base = std::filesystem::path(path).parent_path();
    if (!base.empty()) std::filesystem::create_directories(base);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest '" + path + "'");
    auto rel = [&](const std::string& p) {
        return base.empty() ? p : std::filesystem::path(p).lexically_relative(base).string();
    };
    json header{{"format", kManifestFormat}, {"version", kManifestVersion}};
    if (!split_ref.empty()) header["split"] = split_ref;
    out << header.dump() << "\n";
    for (const auto& r : m.records) {
        json j{{"image_id", r.image_id}, {"image", rel(r.image_path)}, {"mask", rel(r.mask_path)}, {"class", r.class_name}};
        if (r.depth_path) j["depth"] = rel(*r.depth_path);
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("write failed for '" + path + "'");
}

inline void write_split(const std::string& path, const ClassSplit& s)
{
    std::ofstream out(path);
    if (!out) throw IoError("cannot write split file '" + path + "'");
    out << split_to_json(s).dump(2) << "\n";
}

// ---------------------------------------------------------------- edge targets

/// 3x3 dilation minus 3x3 erosion. Pixels outside the frame count as
/// background for erosion and do not contribute to dilation.
inline Map make_edge_gt(const Map& mask)
{
    const int h = mask.height();
    const int w = mask.width();
    Map out(h, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            bool any = false;
            bool all = true;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int rr = r + dy;
                    const int cc = c + dx;
                    const bool on = rr >= 0 && rr < h && cc >= 0 && cc < w && mask(rr, cc) >= 0.5;
                    any = any || on;
                    all = all && on;
                }
            out(r, c) = (any ? 1.0 : 0.0) - (all ? 1.0 : 0.0);
        }
    return out;
}

// ---------------------------------------------------------------- attributes

struct ObjectAttributes {
    double concentration = 0.0;
    double avg_color_ratio = 0.0;
    double area_ratio = 0.0;
    int num_parts = 0;
    double centroid_x = 0.0;
    double centroid_y = 0.0;
    bool empty = true;
};

struct Point {
    std::int64_t x = 0;
    std::int64_t y = 0;
    friend bool operator<(const Point& a, const Point& b) { return a.x != b.x ? a.x < b.x : a.y < b.y; }
    friend bool operator==(const Point& a, const Point& b) = default;
};

inline std::int64_t cross(const Point& o, const Point& a, const Point& b)
{
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

/// Monotone-chain convex hull, counter-clockwise, no collinear points.
inline std::vector<Point> convex_hull(std::vector<Point> pts)
{
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() < 3) return pts;
    std::vector<Point> hull(2 * pts.size());
    std::size_t k = 0;
    for (const auto& p : pts) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
        hull[k++] = p;
    }
    for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
        while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

/// Corner points of every foreground pixel's unit square.
inline std::vector<Point> mask_corner_points(const Map& mask)
{
    std::vector<Point> pts;
    for (int r = 0; r < mask.height(); ++r)
        for (int c = 0; c < mask.width(); ++c)
            if (mask(r, c) >= 0.5) {
                pts.push_back({c, r});
                pts.push_back({c + 1, r});
                pts.push_back({c, r + 1});
                pts.push_back({c + 1, r + 1});
            }
    return pts;
}

/// Area of the rectangle aligned with direction (dx, dy) enclosing `pts`.
inline double aligned_rect_area(const std::vector<Point>& pts, std::int64_t dx, std::int64_t dy)
{
    std::int64_t umin = INT64_MAX, umax = INT64_MIN, vmin = INT64_MAX, vmax = INT64_MIN;
    for (const auto& p : pts) {
        const std::int64_t u = p.x * dx + p.y * dy;
        const std::int64_t v = -p.x * dy + p.y * dx;
        umin = std::min(umin, u);
        umax = std::max(umax, u);
        vmin = std::min(vmin, v);
        vmax = std::max(vmax, v);
    }
    return static_cast<double>(umax - umin) * static_cast<double>(vmax - vmin) / static_cast<double>(dx * dx + dy * dy);
}

/// Minimum-area enclosing rectangle over hull-edge directions.
inline double min_area_rect(const std::vector<Point>& pts)
{
    const auto hull = convex_hull(pts);
    require(hull.size() >= 3, "min_area_rect: degenerate point set");
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < hull.size(); ++i) {
        const Point& a = hull[i];
        const Point& b = hull[(i + 1) % hull.size()];
        best = std::min(best, aligned_rect_area(hull, b.x - a.x, b.y - a.y));
    }
    return best;
}

/// 4-connected component count of the foreground.
inline int count_components(const Map& mask)
{
    const int h = mask.height();
    const int w = mask.width();
    std::vector<char> seen(static_cast<std::size_t>(h) * w, 0);
    int parts = 0;
    std::deque<std::pair<int, int>> queue;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            if (mask(r, c) < 0.5 || seen[static_cast<std::size_t>(r) * w + c]) continue;
            ++parts;
            seen[static_cast<std::size_t>(r) * w + c] = 1;
            queue.emplace_back(r, c);
            while (!queue.empty()) {
                auto [y, x] = queue.front();
                queue.pop_front();
                const int ny[4] = {y - 1, y + 1, y, y};
                const int nx[4] = {x, x, x - 1, x + 1};
                for (int k = 0; k < 4; ++k) {
                    if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
                    const std::size_t idx = static_cast<std::size_t>(ny[k]) * w + nx[k];
                    if (seen[idx] || mask(ny[k], nx[k]) < 0.5) continue;
                    seen[idx] = 1;
                    queue.emplace_back(ny[k], nx[k]);
                }
            }
        }
    return parts;
}

inline constexpr double kColorFloor = 1.0 / 255.0;

inline ObjectAttributes compute_attributes(const Map& mask, const Image& image)
{
    require(image.channels() == 3, "compute_attributes: expected a 3-channel image");
    require(image.height() == mask.height() && image.width() == mask.width(),
            "compute_attributes: mask and image shapes differ");
    ObjectAttributes a;
    const int h = mask.height();
    const int w = mask.width();
    double area = 0.0;
    double sx = 0.0;
    double sy = 0.0;
    std::array<double, 3> obj{0, 0, 0};
    std::array<double, 3> bg{0, 0, 0};
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const bool on = mask(r, c) >= 0.5;
            if (on) {
                area += 1.0;
                sx += c;
                sy += r;
            }
            for (int ch = 0; ch < 3; ++ch) (on ? obj : bg)[static_cast<std::size_t>(ch)] += image(ch, r, c);
        }
    if (area == 0.0) return a;
    a.empty = false;
    const double total = static_cast<double>(h) * w;
    const double bg_area = total - area;
    a.area_ratio = area / total;
    a.centroid_x = (sx / area + 0.5) / w;
    a.centroid_y = (sy / area + 0.5) / h;
    a.num_parts = count_components(mask);
    a.concentration = area / min_area_rect(mask_corner_points(mask));
    double ratio = 0.0;
    for (std::size_t ch = 0; ch < 3; ++ch) {
        if (bg_area == 0.0) {
            ratio += 1.0;
            continue;
        }
        const double mo = obj[ch] / area;
        const double mb = bg[ch] / bg_area;
        if (mb > 0.0)
            ratio += mo / mb;
        else
            ratio += mo > 0.0 ? mo / kColorFloor : 1.0;
    }
    a.avg_color_ratio = ratio / 3.0;
    return a;
}

// ---------------------------------------------------------------- taxonomy

class Taxonomy {
public:
    void add_node(const std::string& name)
    {
        require(!name.empty(), "Taxonomy: empty node name");
        if (!index_.count(name)) {
            index_[name] = names_.size();
            names_.push_back(name);
            adj_.emplace_back();
        }
    }

    void add_edge(const std::string& a, const std::string& b)
    {
        if (a == b) throw InvalidInput("Taxonomy: self-loop on '" + a + "'");
        add_node(a);
        add_node(b);
        const std::size_t ia = index_.at(a);
        const std::size_t ib = index_.at(b);
        if (std::find(adj_[ia].begin(), adj_[ia].end(), ib) == adj_[ia].end()) {
            adj_[ia].push_back(ib);
            adj_[ib].push_back(ia);
        }
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const std::vector<std::string>& nodes() const { return names_; }

    std::size_t index_of(const std::string& name) const
    {
        auto it = index_.find(name);
        if (it == index_.end()) throw InvalidInput("Taxonomy: unknown class '" + name + "'");
        return it->second;
    }

    /// Edge count of the shortest path, or -1 when disconnected.
    int path_length(const std::string& a, const std::string& b) const
    {
        const std::size_t s = index_of(a);
        const std::size_t t = index_of(b);
        if (s == t) return 0;
        std::vector<int> dist(names_.size(), -1);
        std::deque<std::size_t> q{s};
        dist[s] = 0;
        while (!q.empty()) {
            const std::size_t u = q.front();
            q.pop_front();
            for (std::size_t v : adj_[u]) {
                if (dist[v] >= 0) continue;
                dist[v] = dist[u] + 1;
                if (v == t) return dist[v];
                q.push_back(v);
            }
        }
        return -1;
    }

private:
    std::vector<std::string> names_;
    std::map<std::string, std::size_t> index_;
    std::vector<std::vector<std::size_t>> adj_;
};

/// One edge per line as "a,b"; a single name declares an isolated node; '#' starts a comment.
inline Taxonomy load_taxonomy(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open taxonomy '" + path + "'");
    Taxonomy t;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) {
            t.add_node(line);
            continue;
        }
        const std::string a = trim(line.substr(0, comma));
        const std::string b = trim(line.substr(comma + 1));
        if (a.empty() || b.empty() || b.find(',') != std::string::npos)
            throw InvalidInput("taxonomy '" + path + "' line " + std::to_string(lineno) + ": expected 'a,b'");
        t.add_edge(a, b);
    }
    return t;
}

inline double path_similarity(const Taxonomy& t, const std::string& a, const std::string& b)
{
    const int p = t.path_length(a, b);
    return p < 0 ? 0.0 : 1.0 / (p + 1.0);
}

inline Matrix similarity_matrix(const Taxonomy& t, const std::vector<std::string>& classes)
{
    const auto n = static_cast<Eigen::Index>(classes.size());
    Matrix m(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        m(i, i) = path_similarity(t, classes[static_cast<std::size_t>(i)], classes[static_cast<std::size_t>(i)]);
        for (Eigen::Index j = i + 1; j < n; ++j)
            m(i, j) = m(j, i) =
                path_similarity(t, classes[static_cast<std::size_t>(i)], classes[static_cast<std::size_t>(j)]);
    }
    return m;
}

// ---------------------------------------------------------------- sample loading

struct Augmentation {
    double flip_probability = 0.5;
    double max_rotation_deg = 15.0;
    double jitter = 0.2; // brightness/contrast/saturation factors drawn from [1-j, 1+j]
};

struct LoadOptions {
    int resolution = 384;
    bool train = false;
    std::uint64_t seed = 0;
    int epoch = 0;
    Augmentation augment;
};

struct Sample {
    std::string image_id;
    std::string class_name;
    int class_index = -1;
    Image image;
    Map mask;
    Map edge;
    std::optional<Map> depth;
};

/// Drawn augmentation parameters; exposed for tests.
struct AugmentDraw {
    bool flip = false;
    double angle_deg = 0.0;
    double brightness = 1.0;
    double contrast = 1.0;
    double saturation = 1.0;
};

inline std::uint64_t sample_seed(std::uint64_t seed, const std::string& image_id, int epoch)
{
    std::uint64_t h = nn::fnv1a(image_id, 1469598103934665603ull ^ (seed * 0x9E3779B97F4A7C15ull));
    const auto e = static_cast<std::uint64_t>(epoch);
    return nn::fnv1a(&e, sizeof(e), h);
}

inline AugmentDraw draw_augmentation(const Augmentation& a, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    AugmentDraw d;
    d.flip = u(rng) < a.flip_probability;
    d.angle_deg = (2.0 * u(rng) - 1.0) * a.max_rotation_deg;
    d.brightness = 1.0 + (2.0 * u(rng) - 1.0) * a.jitter;
    d.contrast = 1.0 + (2.0 * u(rng) - 1.0) * a.jitter;
    d.saturation = 1.0 + (2.0 * u(rng) - 1.0) * a.jitter;
    return d;
}

inline Map flip_horizontal(const Map& m)
{
    Map out(m.height(), m.width());
    for (int r = 0; r < m.height(); ++r)
        for (int c = 0; c < m.width(); ++c) out(r, c) = m(r, m.width() - 1 - c);
    return out;
}

/// Rotation about the image centre. `nearest` selects nearest sampling with
/// zero fill outside; otherwise bilinear with edge clamping.
inline Map rotate(const Map& m, double angle_deg, bool nearest)
{
    if (angle_deg == 0.0) return m;
    const int h = m.height();
    const int w = m.width();
    const double th = angle_deg * M_PI / 180.0;
    const double cs = std::cos(th);
    const double sn = std::sin(th);
    const double cy = (h - 1) / 2.0;
    const double cx = (w - 1) / 2.0;
    Map out(h, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const double x = c - cx;
            const double y = r - cy;
            const double sx = cs * x + sn * y + cx;
            const double sy = -sn * x + cs * y + cy;
            if (nearest) {
                const int ix = static_cast<int>(std::lround(sx));
                const int iy = static_cast<int>(std::lround(sy));
                out(r, c) = (ix >= 0 && ix < w && iy >= 0 && iy < h) ? m(iy, ix) : 0.0;
            } else {
                const double fx = std::clamp(sx, 0.0, w - 1.0);
                const double fy = std::clamp(sy, 0.0, h - 1.0);
                const int x0 = static_cast<int>(std::floor(fx));
                const int y0 = static_cast<int>(std::floor(fy));
                const int x1 = std::min(x0 + 1, w - 1);
                const int y1 = std::min(y0 + 1, h - 1);
                const double ax = fx - x0;
                const double ay = fy - y0;
                out(r, c) = (1 - ay) * ((1 - ax) * m(y0, x0) + ax * m(y0, x1)) +
                            ay * ((1 - ax) * m(y1, x0) + ax * m(y1, x1));
            }
        }
    return out;
}

inline Image map_planes(const Image& img, const auto& fn)
{
    Image out(img.channels(), img.height(), img.width());
    for (int ch = 0; ch < img.channels(); ++ch) out.set_plane(ch, fn(img.plane(ch)));
    return out;
}

inline Image color_jitter(const Image& img, double brightness, double contrast, double saturation)
{
    Image out = img;
    const int h = img.height();
    const int w = img.width();
    double mean_gray = 0.0;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            mean_gray += 0.299 * img(0, r, c) + 0.587 * img(1, r, c) + 0.114 * img(2, r, c);
    mean_gray = mean_gray * brightness / (static_cast<double>(h) * w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double px[3];
            for (int ch = 0; ch < 3; ++ch) px[ch] = img(ch, r, c) * brightness;
            for (double& v : px) v = mean_gray + contrast * (v - mean_gray);
            const double gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            for (int ch = 0; ch < 3; ++ch) out(ch, r, c) = std::clamp(gray + saturation * (px[ch] - gray), 0.0, 1.0);
        }
    return out;
}

inline Map normalize_min_max(const Map& m)
{
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (double v : m.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    Map out(m.height(), m.width());
    if (!(hi > lo)) return out;
    for (std::size_t i = 0; i < m.size(); ++i) out[i] = (m[i] - lo) / (hi - lo);
    return out;
}

inline int class_index_of(const std::vector<std::string>& classes, const std::string& name)
{
    for (std::size_t i = 0; i < classes.size(); ++i)
        if (classes[i] == name) return static_cast<int>(i);
    return -1;
}

/// Applies resizing and (in training mode) augmentation to decoded rasters.
inline Sample prepare_sample(const ManifestRecord& rec, const std::vector<std::string>& classes, Image image,
                             Map mask, std::optional<Map> depth, const LoadOptions& opt)
{
    require(opt.resolution > 0, "load_sample: resolution must be positive");
    Sample s;
    s.image_id = rec.image_id;
    s.class_name = rec.class_name;
    s.class_index = class_index_of(classes, rec.class_name);
    if (s.class_index < 0)
        throw InvalidInput("load_sample: class '" + rec.class_name + "' of '" + rec.image_id +
                           "' is not in the active class list");
    if (image.height() != mask.height() || image.width() != mask.width())
        throw InvalidInput("load_sample: image and mask sizes differ for '" + rec.image_id + "'");
    const int res = opt.resolution;
    s.image = resize_bilinear(image, res, res);
    s.mask = resize_nearest(mask, res, res);
    if (depth) s.depth = resize_bilinear(normalize_min_max(*depth), res, res);

    if (opt.train) {
        const AugmentDraw d = draw_augmentation(opt.augment, sample_seed(opt.seed, rec.image_id, opt.epoch));
        if (d.flip) {
            s.image = map_planes(s.image, [](const Map& p) { return flip_horizontal(p); });
            s.mask = flip_horizontal(s.mask);
            if (s.depth) s.depth = flip_horizontal(*s.depth);
        }
        if (d.angle_deg != 0.0) {
            s.image = map_planes(s.image, [&](const Map& p) { return rotate(p, d.angle_deg, false); });
            s.mask = rotate(s.mask, d.angle_deg, true);
            if (s.depth) s.depth = rotate(*s.depth, d.angle_deg, false);
        }
        s.image = color_jitter(s.image, d.brightness, d.contrast, d.saturation);
    }
    s.edge = make_edge_gt(s.mask);
    return s;
}

/// Reads and prepares one record. Depth is read when present; training
/// callers that need it check `Sample::depth`.
inline Sample load_sample(const ManifestRecord& rec, const std::vector<std::string>& classes,
                          const LoadOptions& opt = {})
{
    Image image = io::read_image(rec.image_path);
    Map mask = io::read_mask(rec.mask_path);
    std::optional<Map> depth;
    if (rec.depth_path) depth = io::read_depth(*rec.depth_path);
    if (depth && (depth->height() != mask.height() || depth->width() != mask.width()))
        depth = resize_bilinear(*depth, mask.height(), mask.width());
    return prepare_sample(rec, classes, std::move(image), std::move(mask), std::move(depth), opt);
}

} // namespace ovcos::data
