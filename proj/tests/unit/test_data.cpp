#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "ovcos/camo_data.hpp"
#include "ovcos/io.hpp"
#include "support/data_fixtures.hpp"
#include "support/oracles.hpp"

using namespace ovcos;
using namespace ovcos::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("ovcos_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_text(const fs::path& p, const std::string& s)
{
    std::ofstream out(p);
    out << s;
}

LoadOptions opts(int resolution, bool train = false, std::uint64_t seed = 0)
{
    LoadOptions o;
    o.resolution = resolution;
    o.train = train;
    o.seed = seed;
    return o;
}

const char* kHeader = R"({"format":"ovcos-manifest","version":1,"split":"split.json"})";

} // namespace

// ---------------------------------------------------------------- manifest

TEST(Manifest, ToyManifestLoads)
{
    const auto dir = scratch("toy");
    write_text(dir / "split.json", R"({"seen":["crab","frog"],"unseen":["moth"]})");
    write_text(dir / "m.jsonl", std::string(kHeader) + "\n" +
                                    R"({"image_id":"a","image":"a.jpg","mask":"a.png","class":"crab"})" "\n"
                                    R"({"image_id":"b","image":"b.jpg","mask":"b.png","class":"frog"})" "\n"
                                    R"({"image_id":"c","image":"c.jpg","mask":"c.png","class":"moth","depth":"c_d.png"})" "\n");
    const auto m = load_manifest((dir / "m.jsonl").string(), {.split_path = {}, .check_files = false});
    EXPECT_EQ(m.records.size(), 3u);
    EXPECT_EQ(m.seen_records().size(), 2u);
    EXPECT_EQ(m.unseen_records().size(), 1u);
    EXPECT_EQ(m.records[0].image_path, (dir / "a.jpg").string());
    ASSERT_TRUE(m.records[2].depth_path.has_value());
    EXPECT_FALSE(m.records[0].depth_path.has_value());

    // missing files are reported when checked
    try {
        load_manifest((dir / "m.jsonl").string());
        FAIL();
    } catch (const ManifestError& e) {
        EXPECT_EQ(e.issues().size(), 7u);
        EXPECT_EQ(e.issues()[0].kind, "missing-file");
    }
}

TEST(Manifest, SplitOverlapNamesTheClass)
{
    const auto dir = scratch("overlap");
    write_text(dir / "split.json", R"({"seen":["crab","frog"],"unseen":["frog"]})");
    write_text(dir / "m.jsonl", std::string(kHeader) + "\n" +
                                    R"({"image_id":"a","image":"a.jpg","mask":"a.png","class":"crab"})" "\n");
    try {
        load_manifest((dir / "m.jsonl").string(), {.split_path = {}, .check_files = false});
        FAIL();
    } catch (const ManifestError& e) {
        ASSERT_EQ(e.issues().size(), 1u);
        EXPECT_EQ(e.issues()[0].kind, "split-overlap");
        EXPECT_NE(std::string(e.what()).find("frog"), std::string::npos);
    }
}

TEST(Manifest, StructuralErrorsAreCollected)
{
    const auto dir = scratch("errors");
    write_text(dir / "split.json", R"({"seen":["crab"],"unseen":["moth"]})");
    write_text(dir / "m.jsonl", std::string(kHeader) + "\n" +
                                    "not json\n" +
                                    R"({"image_id":"a","image":"a.jpg","mask":"a.png","class":"crab"})" "\n" +
                                    R"({"image_id":"a","image":"b.jpg","mask":"b.png","class":"crab"})" "\n" +
                                    R"({"image_id":"c","image":"c.jpg","class":"crab"})" "\n" +
                                    R"({"image_id":"d","image":"d.jpg","mask":"d.png","class":"bat"})" "\n");
    const auto p = inspect_manifest((dir / "m.jsonl").string(), {.split_path = {}, .check_files = false});
    std::vector<std::string> kinds;
    for (const auto& i : p.issues) kinds.push_back(i.kind);
    EXPECT_EQ(kinds, (std::vector<std::string>{"parse", "duplicate-id", "record", "unsplit-class"}));
    EXPECT_EQ(p.issues[0].line, 2);

    write_text(dir / "bad_header.jsonl", R"({"image_id":"a"})" "\n");
    EXPECT_THROW(load_manifest((dir / "bad_header.jsonl").string(), {.split_path = {}, .check_files = false}),
                 ManifestError);
    EXPECT_THROW(load_manifest((dir / "absent.jsonl").string()), IoError);
}

TEST(Manifest, WriteReadRoundTrip)
{
    const auto dir = scratch("roundtrip");
    DatasetManifest m;
    m.split = {{"crab"}, {"moth"}};
    m.records.push_back({"x1", (dir / "img/x1.jpg").string(), (dir / "gt/x1.png").string(), std::nullopt, "crab"});
    m.records.push_back({"x2", (dir / "img/x2.jpg").string(), (dir / "gt/x2.png").string(),
                         (dir / "depth/x2.png").string(), "moth"});
    write_split((dir / "split.json").string(), m.split);
    write_manifest((dir / "m.jsonl").string(), m, "split.json");
    const auto back = load_manifest((dir / "m.jsonl").string(), {.split_path = {}, .check_files = false});
    ASSERT_EQ(back.records.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(back.records[i].image_id, m.records[i].image_id);
        EXPECT_EQ(back.records[i].image_path, m.records[i].image_path);
        EXPECT_EQ(back.records[i].mask_path, m.records[i].mask_path);
        EXPECT_EQ(back.records[i].depth_path, m.records[i].depth_path);
    }
    EXPECT_EQ(back.split.seen, m.split.seen);
}

TEST(Manifest, OvcamoShapedCounts)
{
    const auto dir = scratch("ovcamo");
    auto src = data_fixtures::ovcamo_manifest_from_env();
    const bool real = src.has_value();
    if (!real) src = data_fixtures::write_ovcamo_shaped_manifest(dir);
    const auto m = load_manifest(src->manifest, {.split_path = src->split, .check_files = real});
    EXPECT_EQ(m.records.size(), 11483u);
    EXPECT_EQ(m.classes().size(), 75u);
    EXPECT_EQ(m.split.seen.size(), 14u);
    EXPECT_EQ(m.split.unseen.size(), 61u);
    EXPECT_EQ(m.seen_records().size(), 7713u);
    EXPECT_EQ(m.unseen_records().size(), 3770u);
    for (const auto& r : m.seen_records()) EXPECT_EQ(m.split.unseen.count(r.class_name), 0u);
}

// ---------------------------------------------------------------- edges

TEST(EdgeGt, HandMorphology)
{
    EXPECT_EQ(make_edge_gt(Map(5, 5)).sum(), 0.0);
    Map dot(5, 5);
    dot(2, 2) = 1.0;
    const Map e = make_edge_gt(dot);
    EXPECT_EQ(e.sum(), 9.0);
    for (int r = 1; r <= 3; ++r)
        for (int c = 1; c <= 3; ++c) EXPECT_EQ(e(r, c), 1.0);
    const Map full = make_edge_gt(Map(6, 7, 1.0));
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 7; ++c)
            EXPECT_EQ(full(r, c), (r == 0 || r == 5 || c == 0 || c == 6) ? 1.0 : 0.0) << r << "," << c;
}

TEST(EdgeGt, EqualsDilationMinusErosion)
{
    std::mt19937_64 rng(8);
    for (int t = 0; t < 30; ++t) {
        const Map m = oracle::random_mask(rng, 12, 9);
        const Map e = make_edge_gt(m);
        double dil = 0, ero = 0;
        for (int r = 0; r < 12; ++r)
            for (int c = 0; c < 9; ++c) {
                bool any = false, all = true;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int rr = r + dy, cc = c + dx;
                        const bool on = rr >= 0 && rr < 12 && cc >= 0 && cc < 9 && m(rr, cc) == 1.0;
                        any |= on;
                        all &= on;
                    }
                dil += any;
                ero += all;
            }
        EXPECT_EQ(e.sum(), dil - ero);
        for (double v : e.values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
    }
}

// ---------------------------------------------------------------- attributes

TEST(Attributes, TwentyFixtureSuiteMatchesOracle)
{
    const auto cases = data_fixtures::attribute_fixtures();
    ASSERT_EQ(cases.size(), 20u);
    for (const auto& c : cases) {
        SCOPED_TRACE(c.name);
        const auto got = compute_attributes(c.mask, c.image);
        const auto want = oracle::attributes(c.mask, c.image);
        EXPECT_FALSE(got.empty);
        EXPECT_NEAR(got.concentration, want.concentration, 1e-9);
        EXPECT_NEAR(got.avg_color_ratio, want.color_ratio, 1e-9);
        EXPECT_NEAR(got.area_ratio, want.area_ratio, 1e-9);
        EXPECT_NEAR(got.centroid_x, want.cx, 1e-9);
        EXPECT_NEAR(got.centroid_y, want.cy, 1e-9);
        EXPECT_EQ(got.num_parts, want.parts);
        EXPECT_GT(got.concentration, 0.0);
        EXPECT_LE(got.concentration, 1.0 + 1e-12);
    }
}

TEST(Attributes, Examples)
{
    const Image img(3, 8, 8, 0.5);
    const auto full = compute_attributes(Map(8, 8, 1.0), img);
    EXPECT_DOUBLE_EQ(full.concentration, 1.0);
    EXPECT_DOUBLE_EQ(full.area_ratio, 1.0);
    EXPECT_EQ(full.num_parts, 1);
    EXPECT_DOUBLE_EQ(full.centroid_x, 0.5);
    EXPECT_DOUBLE_EQ(full.centroid_y, 0.5);
    EXPECT_DOUBLE_EQ(compute_attributes(data_fixtures::rect(8, 8, 2, 1, 5, 7), img).concentration, 1.0);
    const auto empty = compute_attributes(Map(8, 8), img);
    EXPECT_TRUE(empty.empty);
    EXPECT_EQ(empty.num_parts, 0);
    EXPECT_THROW(compute_attributes(Map(4, 4), img), InvalidInput);
}

TEST(Attributes, MinAreaRectMatchesAllPairsSearch)
{
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<int> coord(-20, 20);
    for (int t = 0; t < 100; ++t) {
        std::vector<Point> pts;
        std::vector<std::array<std::int64_t, 2>> raw;
        for (int i = 0; i < 7; ++i) {
            const Point p{coord(rng), coord(rng)};
            pts.push_back(p);
            raw.push_back({p.x, p.y});
        }
        if (convex_hull(pts).size() < 3) continue;
        EXPECT_NEAR(min_area_rect(pts), oracle::min_rect_area_all_pairs(raw), 1e-9);
    }
}

TEST(Attributes, ComponentCountMatchesUnionFind)
{
    std::mt19937_64 rng(10);
    for (int t = 0; t < 50; ++t) {
        const Map m = oracle::random_mask(rng, 15, 11);
        EXPECT_EQ(count_components(m), oracle::components(m));
    }
}

// ---------------------------------------------------------------- taxonomy

TEST(Taxonomy, PathSimilarityValues)
{
    const auto dir = scratch("taxonomy");
    write_text(dir / "tax.txt", "# animals\nanimal, insect\ninsect, moth\ninsect, beetle\nanimal,crab\nrock\n");
    const Taxonomy t = load_taxonomy((dir / "tax.txt").string());
    EXPECT_DOUBLE_EQ(path_similarity(t, "moth", "moth"), 1.0);
    EXPECT_DOUBLE_EQ(path_similarity(t, "moth", "insect"), 0.5);
    EXPECT_DOUBLE_EQ(path_similarity(t, "moth", "beetle"), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(path_similarity(t, "moth", "crab"), 0.25);
    EXPECT_DOUBLE_EQ(path_similarity(t, "moth", "rock"), 0.0);
    EXPECT_THROW(path_similarity(t, "moth", "whale"), InvalidInput);

    const Matrix s = similarity_matrix(t, {"moth", "beetle", "crab", "rock"});
    EXPECT_TRUE(s.isApprox(s.transpose()));
    EXPECT_TRUE(s.diagonal().isOnes());
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            if (i != j) {
                EXPECT_LT(s(i, j), 1.0);
            }

    write_text(dir / "bad.txt", "a,b,c\n");
    EXPECT_THROW(load_taxonomy((dir / "bad.txt").string()), InvalidInput);
    write_text(dir / "loop.txt", "a,a\n");
    EXPECT_THROW(load_taxonomy((dir / "loop.txt").string()), InvalidInput);
}

TEST(Taxonomy, ChainAndStar)
{
    Taxonomy chain;
    chain.add_edge("a", "b");
    const Matrix m = similarity_matrix(chain, {"a", "b"});
    EXPECT_TRUE(m.isApprox((Matrix(2, 2) << 1, 0.5, 0.5, 1).finished()));
    Taxonomy star;
    for (const char* leaf : {"x", "y", "z"}) star.add_edge("hub", leaf);
    EXPECT_DOUBLE_EQ(path_similarity(star, "x", "z"), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(path_similarity(star, "y", "x"), path_similarity(star, "x", "y"));
}

// ---------------------------------------------------------------- samples

class SampleTest : public ::testing::Test {
protected:
    fs::path dir = scratch("samples");
    ManifestRecord rec;
    std::vector<std::string> classes{"crab", "moth"};

    void SetUp() override
    {
        // planted marker: a bright square near the top-left, mirrored in the mask
        Image img(3, 40, 48, 0.2);
        Map mask(40, 48), depth(40, 48);
        for (int r = 4; r < 12; ++r)
            for (int c = 6; c < 14; ++c) {
                for (int ch = 0; ch < 3; ++ch) img(ch, r, c) = 0.9;
                mask(r, c) = 1.0;
            }
        for (int r = 0; r < 40; ++r)
            for (int c = 0; c < 48; ++c) depth(r, c) = 0.1 + 0.5 * c / 47.0;
        io::write_image((dir / "x.png").string(), img);
        io::write_gray8((dir / "x_mask.png").string(), mask);
        io::write_gray16((dir / "x_depth.png").string(), depth);
        rec = {"x", (dir / "x.png").string(), (dir / "x_mask.png").string(), (dir / "x_depth.png").string(), "moth"};
    }
};

TEST_F(SampleTest, EvalModeIsDeterministicAndResized)
{
    const LoadOptions opt = opts(32);
    const Sample a = load_sample(rec, classes, opt), b = load_sample(rec, classes, opt);
    EXPECT_TRUE(a.image == b.image);
    EXPECT_TRUE(a.mask == b.mask);
    EXPECT_EQ(a.class_index, 1);
    EXPECT_EQ(a.image.height(), 32);
    EXPECT_EQ(a.mask.width(), 32);
    for (double v : a.mask.values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
    ASSERT_TRUE(a.depth.has_value());
    double lo = 1, hi = 0;
    for (double v : a.depth->values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    EXPECT_NEAR(lo, 0.0, 0.05);
    EXPECT_NEAR(hi, 1.0, 0.05);
    EXPECT_TRUE(a.edge == make_edge_gt(a.mask));
}

TEST_F(SampleTest, MissingDepthIsAllowed)
{
    rec.depth_path.reset();
    const Sample s = load_sample(rec, classes, opts(32));
    EXPECT_FALSE(s.depth.has_value());
}

TEST_F(SampleTest, AugmentationIsSeededAndCoherent)
{
    LoadOptions opt = opts(40, true, 3);
    opt.augment.jitter = 0.0;
    opt.augment.max_rotation_deg = 0.0;
    int flips = 0;
    for (int epoch = 0; epoch < 12; ++epoch) {
        opt.epoch = epoch;
        const Sample s = load_sample(rec, classes, opt);
        const Sample again = load_sample(rec, classes, opt);
        EXPECT_TRUE(s.image == again.image);
        const bool flipped = draw_augmentation(opt.augment, sample_seed(opt.seed, rec.image_id, epoch)).flip;
        flips += flipped;
        // the marker stays aligned with the mask
        for (int r = 0; r < 40; ++r)
            for (int c = 0; c < 40; ++c)
                if (s.mask(r, c) == 1.0) {
                    EXPECT_GT(s.image(0, r, c), 0.5);
                }
        double sx = 0;
        for (int r = 0; r < 40; ++r)
            for (int c = 0; c < 40; ++c) sx += s.mask(r, c) * c;
        const double cx = sx / s.mask.sum();
        EXPECT_EQ(cx > 20.0, flipped);
        // depth ramp direction follows the flip
        EXPECT_EQ((*s.depth)(20, 0) > (*s.depth)(20, 39), flipped);
    }
    EXPECT_GT(flips, 0);
    EXPECT_LT(flips, 12);
}

TEST_F(SampleTest, RotationKeepsMaskBinary)
{
    LoadOptions opt = opts(40, true, 11);
    for (int epoch = 0; epoch < 4; ++epoch) {
        opt.epoch = epoch;
        const Sample s = load_sample(rec, classes, opt);
        for (double v : s.mask.values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
        for (double v : s.image.values()) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST_F(SampleTest, Errors)
{
    EXPECT_THROW(load_sample(rec, {"crab"}, opts(32)), InvalidInput);
    ManifestRecord broken = rec;
    broken.image_path = (dir / "absent.png").string();
    EXPECT_THROW(load_sample(broken, classes, opts(32)), IoError);
    write_text(dir / "corrupt.png", "not a png");
    broken.image_path = (dir / "corrupt.png").string();
    EXPECT_THROW(load_sample(broken, classes, opts(32)), IoError);
}
