#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "lofi/common.hpp"
#include "lofi/retrieval.hpp"

using namespace lofi;

static Mat random_rows(int n, int d, Rng& rng) {
    Mat m(n, d);
    for (double& v : m.a) v = rng.normal();
    return m;
}

static std::vector<std::string> seq_ids(int n, const std::string& prefix = "id") {
    std::vector<std::string> ids;
    char buf[32];
    for (int i = 0; i < n; ++i) {
        std::snprintf(buf, sizeof buf, "%s%05d", prefix.c_str(), i);
        ids.emplace_back(buf);
    }
    return ids;
}

TEST_CASE("build_index: normalization and errors") {
    Rng rng(1);
    Mat m = random_rows(5, 8, rng);
    auto idx = build_index(m, seq_ids(5));
    for (int i = 0; i < idx.size(); ++i)
        CHECK(std::fabs(l2_norm(idx.vectors.row(i), idx.dim()) - 1.0) < 1e-7);

    // already-unit rows stored unchanged (within 1e-7)
    auto idx2 = build_index(idx.vectors, idx.ids);
    for (size_t i = 0; i < idx.vectors.size(); ++i)
        CHECK(std::fabs(idx2.vectors.a[i] - idx.vectors.a[i]) < 1e-7);

    auto bad_ids = seq_ids(5);
    bad_ids[3] = bad_ids[0];
    CHECK_THROWS_AS(build_index(m, bad_ids), std::invalid_argument);
    CHECK_THROWS_AS(build_index(m, seq_ids(4)), std::invalid_argument);

    // empty index builds, queries error cleanly
    Mat empty(0, 8);
    auto eidx = build_index(empty, {});
    Mat q = random_rows(1, 8, rng);
    CHECK_THROWS_AS(topk(eidx, q, 3), std::runtime_error);
}

TEST_CASE("topk: exact member retrieval, clamping, determinism on ties") {
    Rng rng(2);
    Mat m = random_rows(50, 16, rng);
    auto idx = build_index(m, seq_ids(50));

    Mat q(1, 16);
    std::copy(idx.vectors.row(17), idx.vectors.row(17) + 16, q.row(0));
    RankingResult r = topk(idx, q, 5, "q");
    CHECK(r.ranked[0].first == idx.ids[17]);
    CHECK(r.ranked[0].second == doctest::Approx(1.0).epsilon(1e-9));

    CHECK(topk(idx, q, 500).ranked.size() == 50);

    // exact duplicate vectors tie; ascending id breaks it
    Mat dup(3, 4);
    for (int i = 0; i < 3; ++i) dup.at(i, 0) = 1.0;
    auto didx = build_index(dup, {"b", "a", "c"});
    Mat dq(1, 4);
    dq.at(0, 0) = 1.0;
    auto dr = topk(didx, dq, 3);
    CHECK(dr.ranked[0].first == "a");
    CHECK(dr.ranked[1].first == "b");
    CHECK(dr.ranked[2].first == "c");
}

TEST_CASE("topk agrees with brute-force full sort on 1000 random indices") {
    Rng rng(3);
    int mismatches = 0;
    for (int iter = 0; iter < 1000; ++iter) {
        int n = static_cast<int>(rng.uniform_int(2, 30));
        int d = static_cast<int>(rng.uniform_int(2, 12));
        Mat m = random_rows(n, d, rng);
        auto idx = build_index(m, seq_ids(n));
        Mat q = random_rows(1, d, rng);
        int k = static_cast<int>(rng.uniform_int(1, n));

        // brute force: cosine against every row, full sort
        std::vector<std::pair<double, std::string>> brute;
        double qn = l2_norm(q.row(0), d);
        for (int i = 0; i < n; ++i)
            brute.emplace_back(dot(q.row(0), idx.vectors.row(i), d) / qn, idx.ids[static_cast<size_t>(i)]);
        std::sort(brute.begin(), brute.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });

        RankingResult r = topk(idx, q, k);
        for (int i = 0; i < k; ++i)
            if (r.ranked[static_cast<size_t>(i)].first != brute[static_cast<size_t>(i)].second)
                ++mismatches;
    }
    CHECK(mismatches == 0);
}

TEST_CASE("self-retrieval rank 1 over 1000 distinct vectors") {
    Rng rng(4);
    Mat m = random_rows(1000, 64, rng);
    auto idx = build_index(m, seq_ids(1000));
    int wrong = 0;
    for (int i = 0; i < 1000; ++i) {
        Mat q(1, 64);
        std::copy(idx.vectors.row(i), idx.vectors.row(i) + 64, q.row(0));
        if (topk(idx, q, 1).ranked[0].first != idx.ids[static_cast<size_t>(i)]) ++wrong;
    }
    CHECK(wrong == 0);
}

TEST_CASE("split_subreports shapes and flatten property") {
    std::vector<std::string> s12(12);
    for (int i = 0; i < 12; ++i) s12[static_cast<size_t>(i)] = "s" + std::to_string(i);
    auto chunks = split_subreports(s12, 5);
    REQUIRE(chunks.size() == 3);
    CHECK(chunks[0].size() == 5);
    CHECK(chunks[1].size() == 5);
    CHECK(chunks[2].size() == 2);

    auto one = split_subreports({"a", "b", "c"}, 5);
    REQUIRE(one.size() == 1);
    CHECK(one[0].size() == 3);

    Rng rng(5);
    for (int iter = 0; iter < 200; ++iter) {
        int n = static_cast<int>(rng.uniform_int(1, 23));
        std::vector<std::string> xs(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) xs[static_cast<size_t>(i)] = "x" + std::to_string(i);
        auto ch = split_subreports(xs, static_cast<int>(rng.uniform_int(1, 7)));
        std::vector<std::string> flat;
        for (const auto& c : ch) flat.insert(flat.end(), c.begin(), c.end());
        CHECK(flat == xs);
    }
    CHECK_THROWS_AS(split_subreports({}, 5), std::invalid_argument);
}

TEST_CASE("recall_at_k basics and parent pooling") {
    std::vector<RankingResult> rk;
    for (int q = 0; q < 4; ++q) {
        RankingResult r;
        r.query_id = "q" + std::to_string(q);
        r.ranked = {{"q" + std::to_string(q), 1.0}, {"other", 0.5}, {"next", 0.2}};
        rk.push_back(r);
    }
    std::map<std::string, std::set<std::string>> rel;
    for (int q = 0; q < 4; ++q) rel["q" + std::to_string(q)] = {"q" + std::to_string(q)};
    CHECK(recall_at_k(rk, rel, 1) == 100.0);

    // relevant at rank 3 for all
    for (auto& r : rk)
        r.ranked = {{"x", 0.9}, {"y", 0.8}, {r.query_id, 0.7}, {"z", 0.6}, {"w", 0.5}};
    CHECK(recall_at_k(rk, rel, 1) == 0.0);
    CHECK(recall_at_k(rk, rel, 5) == 100.0);

    // sub-report candidates collapse to their parent report
    std::vector<RankingResult> r2(1);
    r2[0].query_id = "img0";
    r2[0].ranked = {{"rep1#0", 0.9}, {"rep0#1", 0.8}};
    std::map<std::string, std::set<std::string>> rel2{{"img0", {"rep0"}}};
    std::map<std::string, std::string> cand_parent{{"rep1#0", "rep1"}, {"rep0#1", "rep0"}};
    CHECK(recall_at_k(r2, rel2, 1, cand_parent) == 0.0);
    CHECK(recall_at_k(r2, rel2, 2, cand_parent) == 100.0);

    // sub-report queries pool into their parent: one hit suffices
    std::vector<RankingResult> r3(2);
    r3[0].query_id = "rep0#0";
    r3[0].ranked = {{"imgX", 0.9}};
    r3[1].query_id = "rep0#1";
    r3[1].ranked = {{"img0", 0.9}};
    std::map<std::string, std::set<std::string>> rel3{{"rep0", {"img0"}}};
    std::map<std::string, std::string> query_parent{{"rep0#0", "rep0"}, {"rep0#1", "rep0"}};
    CHECK(recall_at_k(r3, rel3, 1, {}, query_parent) == 100.0);

    CHECK_THROWS_AS(recall_at_k(rk, {}, 1), std::invalid_argument);
}

TEST_CASE("recall_at_k matches brute-force recomputation on 500 random tables") {
    Rng rng(6);
    int mismatches = 0;
    for (int iter = 0; iter < 500; ++iter) {
        int n_queries = static_cast<int>(rng.uniform_int(1, 8));
        int n_cands = static_cast<int>(rng.uniform_int(2, 12));
        int k = static_cast<int>(rng.uniform_int(1, n_cands));
        std::vector<RankingResult> rk(static_cast<size_t>(n_queries));
        std::map<std::string, std::set<std::string>> rel;
        for (int q = 0; q < n_queries; ++q) {
            auto& r = rk[static_cast<size_t>(q)];
            r.query_id = "q" + std::to_string(q);
            std::vector<int> perm(static_cast<size_t>(n_cands));
            for (int i = 0; i < n_cands; ++i) perm[static_cast<size_t>(i)] = i;
            for (int i = n_cands - 1; i > 0; --i)
                std::swap(perm[static_cast<size_t>(i)],
                          perm[static_cast<size_t>(rng.uniform_int(0, i))]);
            for (int i = 0; i < n_cands; ++i)
                r.ranked.emplace_back("c" + std::to_string(perm[static_cast<size_t>(i)]),
                                      1.0 - i * 0.01);
            rel[r.query_id] = {"c" + std::to_string(rng.uniform_int(0, n_cands - 1))};
        }
        double got = recall_at_k(rk, rel, k);
        int hits = 0;
        for (const auto& r : rk) {
            const auto& want = *rel[r.query_id].begin();
            bool hit = false;
            for (int i = 0; i < k; ++i)
                if (r.ranked[static_cast<size_t>(i)].first == want) hit = true;
            if (hit) ++hits;
        }
        double brute = 100.0 * hits / n_queries;
        if (std::fabs(got - brute) > 1e-9) ++mismatches;
    }
    CHECK(mismatches == 0);
}

TEST_CASE("R@K non-decreasing in K; R@N is 100 with self-relevance") {
    Rng rng(7);
    Mat m = random_rows(40, 8, rng);
    auto idx = build_index(m, seq_ids(40));
    std::vector<RankingResult> rk;
    std::map<std::string, std::set<std::string>> rel;
    for (int i = 0; i < 40; ++i) {
        Mat q = random_rows(1, 8, rng);
        auto r = topk(idx, q, 40, "q" + std::to_string(i));
        rk.push_back(r);
        rel["q" + std::to_string(i)] = {idx.ids[static_cast<size_t>(rng.uniform_int(0, 39))]};
    }
    double prev = 0;
    for (int k = 1; k <= 40; ++k) {
        double cur = recall_at_k(rk, rel, k);
        CHECK(cur >= prev - 1e-12);
        prev = cur;
    }
    CHECK(prev == 100.0);
}

TEST_CASE("index save/load roundtrip") {
    Rng rng(8);
    Mat m = random_rows(7, 5, rng);
    auto idx = build_index(m, seq_ids(7));
    std::string path =
        (std::filesystem::temp_directory_path() / "lofi_test_index.bin").string();
    save_index(idx, path);
    auto loaded = load_index(path);
    CHECK(loaded.ids == idx.ids);
    CHECK(loaded.vectors.a == idx.vectors.a);
    std::filesystem::remove(path);
}
