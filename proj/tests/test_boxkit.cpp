#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lofi/boxkit.hpp"
#include "lofi/common.hpp"

using namespace lofi;

static NormBox random_norm_box(Rng& rng) {
    int x0 = static_cast<int>(rng.uniform_int(0, 999));
    int y0 = static_cast<int>(rng.uniform_int(0, 999));
    int x1 = static_cast<int>(rng.uniform_int(x0 + 1, 1000));
    int y1 = static_cast<int>(rng.uniform_int(y0 + 1, 1000));
    return NormBox{x0, y0, x1, y1};
}

TEST_CASE("iou basic values") {
    PixelBox a{0, 0, 100, 100};
    CHECK(iou(a, a) == doctest::Approx(1.0));
    CHECK(iou(a, PixelBox{100, 100, 200, 200}) == 0.0);
    // 50x100 intersection = 5000, union = 10000 + 10000 - 5000 = 15000
    CHECK(iou(a, PixelBox{50, 0, 150, 100}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("iou symmetry and range on random boxes") {
    Rng rng(11);
    for (int i = 0; i < 2000; ++i) {
        NormBox a = random_norm_box(rng);
        NormBox b = random_norm_box(rng);
        double ab = iou(a, b);
        CHECK(ab == iou(b, a));
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
        CHECK(iou(a, a) == doctest::Approx(1.0));
    }
}

TEST_CASE("normalize_box exact scaling") {
    NormBox n = normalize_box(PixelBox{12.8, 25.6, 64.0, 96.0}, 128, 128);
    CHECK(n == NormBox{100, 200, 500, 750});
    CHECK(normalize_box(PixelBox{0, 0, 128, 128}, 128, 128) == NormBox{0, 0, 1000, 1000});
    CHECK_THROWS_AS(normalize_box(PixelBox{0, 0, 129, 128}, 128, 128), std::invalid_argument);
    CHECK_THROWS_AS(normalize_box(PixelBox{10, 10, 5, 20}, 128, 128), std::invalid_argument);
}

TEST_CASE("normalize/denormalize roundtrip error bound") {
    Rng rng(7);
    const int w = 128, h = 96;
    for (int i = 0; i < 10000; ++i) {
        PixelBox b;
        b.x_min = rng.uniform(0, w - 1);
        b.y_min = rng.uniform(0, h - 1);
        b.x_max = rng.uniform(b.x_min + 0.01, w);
        b.y_max = rng.uniform(b.y_min + 0.01, h);
        PixelBox back = denormalize_box(normalize_box(b, w, h), w, h);
        CHECK(std::fabs(back.x_min - b.x_min) <= w / 2000.0 + 1e-9);
        CHECK(std::fabs(back.x_max - b.x_max) <= w / 2000.0 + 1e-9);
        CHECK(std::fabs(back.y_min - b.y_min) <= h / 2000.0 + 1e-9);
        CHECK(std::fabs(back.y_max - b.y_max) <= h / 2000.0 + 1e-9);
    }
}

TEST_CASE("normalize_box monotone per coordinate") {
    Rng rng(13);
    for (int i = 0; i < 1000; ++i) {
        PixelBox b;
        b.x_min = rng.uniform(0, 100);
        b.y_min = rng.uniform(0, 100);
        b.x_max = rng.uniform(b.x_min + 1, 127);
        b.y_max = rng.uniform(b.y_min + 1, 127);
        PixelBox b2 = b;
        b2.x_min += rng.uniform(0, b.x_max - b.x_min - 0.5);
        NormBox n1 = normalize_box(b, 128, 128);
        NormBox n2 = normalize_box(b2, 128, 128);
        CHECK(n2.x_min >= n1.x_min);
    }
}

TEST_CASE("boxes_to_string format") {
    CHECK(boxes_to_string({NormBox{100, 200, 500, 750}}) == "[100,200,500,750]");
    // canonical (y_min, x_min) ordering
    CHECK(boxes_to_string({NormBox{5, 500, 10, 600}, NormBox{0, 0, 10, 10}}) ==
          "[0,0,10,10];[5,500,10,600]");
    CHECK_THROWS_AS(boxes_to_string({}), std::invalid_argument);
}

TEST_CASE("string_to_boxes basics") {
    BoxParse p = string_to_boxes("[100,200,500,750]");
    REQUIRE(p.boxes.size() == 1);
    CHECK(p.boxes[0] == NormBox{100, 200, 500, 750});
    CHECK(!p.malformed);

    p = string_to_boxes("garbage");
    CHECK(p.boxes.empty());
    CHECK(p.malformed);

    p = string_to_boxes("[0,0,1000,1000];[1,2,3");
    REQUIRE(p.boxes.size() == 1);
    CHECK(p.boxes[0] == NormBox{0, 0, 1000, 1000});
    CHECK(p.malformed);

    p = string_to_boxes("");
    CHECK(p.boxes.empty());
    CHECK(p.malformed);

    // leading zeros and out-of-range values are not grammar ints
    CHECK(string_to_boxes("[007,0,10,10]").boxes.empty());
    CHECK(string_to_boxes("[0,0,1001,10]").boxes.empty());
    // inverted corners violate the NormBox invariant
    CHECK(string_to_boxes("[10,10,5,20]").boxes.empty());
}

TEST_CASE("box string roundtrip property (10k random lists)") {
    Rng rng(1234);
    int failures = 0;
    for (int iter = 0; iter < 10000; ++iter) {
        int n = static_cast<int>(rng.uniform_int(1, 5));
        std::vector<NormBox> boxes;
        for (int i = 0; i < n; ++i) boxes.push_back(random_norm_box(rng));
        BoxParse p = string_to_boxes(boxes_to_string(boxes));
        if (p.malformed || p.boxes != canonical_order(boxes)) ++failures;
    }
    CHECK(failures == 0);
}

TEST_CASE("weighted_box_fusion hand cases") {
    // single box unchanged
    auto one = weighted_box_fusion({PixelBox{3, 4, 50, 60}});
    REQUIRE(one.size() == 1);
    CHECK(one[0] == PixelBox{3, 4, 50, 60});

    // IoU = 8000/12000 = 0.667 >= 0.55, equal weights -> coordinate mean
    auto fused = weighted_box_fusion({PixelBox{0, 0, 100, 100}, PixelBox{20, 0, 120, 100}});
    REQUIRE(fused.size() == 1);
    CHECK(fused[0].x_min == doctest::Approx(10.0));
    CHECK(fused[0].y_min == doctest::Approx(0.0));
    CHECK(fused[0].x_max == doctest::Approx(110.0));
    CHECK(fused[0].y_max == doctest::Approx(100.0));

    // disjoint boxes pass through
    auto two = weighted_box_fusion({PixelBox{0, 0, 10, 10}, PixelBox{50, 50, 60, 60}});
    CHECK(two.size() == 2);

    // empty input -> empty output
    CHECK(weighted_box_fusion({}).empty());

    CHECK_THROWS_AS(weighted_box_fusion({PixelBox{0, 0, 1, 1}}, {0.0}), std::invalid_argument);
}

// generate duplicate-annotation style input: jittered copies around
// well-separated anchors, the regime the fusion is meant for
static std::vector<PixelBox> clustered_boxes(Rng& rng, int n_anchors) {
    std::vector<PixelBox> out;
    for (int a = 0; a < n_anchors; ++a) {
        double cx = 100 + 250 * a + rng.uniform(-10, 10);
        double cy = rng.uniform(100, 400);
        double wd = rng.uniform(40, 90), ht = rng.uniform(40, 90);
        int copies = static_cast<int>(rng.uniform_int(1, 4));
        for (int c = 0; c < copies; ++c) {
            double jx = rng.uniform(-4, 4), jy = rng.uniform(-4, 4);
            out.push_back(PixelBox{cx - wd / 2 + jx, cy - ht / 2 + jy,
                                   cx + wd / 2 + jx, cy + ht / 2 + jy});
        }
    }
    return out;
}

TEST_CASE("weighted_box_fusion idempotence on clustered inputs") {
    Rng rng(99);
    for (int iter = 0; iter < 500; ++iter) {
        auto boxes = clustered_boxes(rng, static_cast<int>(rng.uniform_int(1, 4)));
        auto once = weighted_box_fusion(boxes);
        auto twice = weighted_box_fusion(once);
        REQUIRE(twice.size() == once.size());
        for (size_t i = 0; i < once.size(); ++i) {
            CHECK(std::fabs(twice[i].x_min - once[i].x_min) < 1e-9);
            CHECK(std::fabs(twice[i].y_min - once[i].y_min) < 1e-9);
            CHECK(std::fabs(twice[i].x_max - once[i].x_max) < 1e-9);
            CHECK(std::fabs(twice[i].y_max - once[i].y_max) < 1e-9);
        }
    }
}

TEST_CASE("weighted_box_fusion permutation invariance under equal weights") {
    Rng rng(202);
    for (int iter = 0; iter < 200; ++iter) {
        auto boxes = clustered_boxes(rng, 2);
        auto ref = weighted_box_fusion(boxes);
        // shuffle
        auto shuffled = boxes;
        for (size_t i = shuffled.size(); i > 1; --i)
            std::swap(shuffled[i - 1], shuffled[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
        auto got = weighted_box_fusion(shuffled);
        REQUIRE(got.size() == ref.size());
        for (size_t i = 0; i < ref.size(); ++i) {
            CHECK(got[i].x_min == doctest::Approx(ref[i].x_min).epsilon(1e-12));
            CHECK(got[i].y_max == doctest::Approx(ref[i].y_max).epsilon(1e-12));
        }
    }
}

TEST_CASE("fused output count never exceeds input count") {
    Rng rng(55);
    for (int iter = 0; iter < 200; ++iter) {
        int n = static_cast<int>(rng.uniform_int(1, 12));
        std::vector<PixelBox> boxes;
        std::vector<double> w;
        for (int i = 0; i < n; ++i) {
            double x0 = rng.uniform(0, 400), y0 = rng.uniform(0, 400);
            boxes.push_back(PixelBox{x0, y0, x0 + rng.uniform(10, 200), y0 + rng.uniform(10, 200)});
            w.push_back(rng.uniform(0.1, 2.0));
        }
        CHECK(weighted_box_fusion(boxes, w).size() <= boxes.size());
    }
}
