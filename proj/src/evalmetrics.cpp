#include "lofi/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace lofi {

namespace {

struct DpValue {
    int count = 0;
    double total_iou = 0;
    bool operator<(const DpValue& o) const {
        if (count != o.count) return count < o.count;
        return total_iou < o.total_iou;
    }
};

// exact assignment by subset DP over the gt side (smaller side <= 20)
MatchResult match_exact(const std::vector<NormBox>& pred, const std::vector<NormBox>& gt,
                        double thresh) {
    const int p = static_cast<int>(pred.size());
    const int g = static_cast<int>(gt.size());
    std::vector<double> iou_pg(static_cast<size_t>(p) * static_cast<size_t>(g));
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < g; ++j)
            iou_pg[static_cast<size_t>(i) * g + j] = iou(pred[static_cast<size_t>(i)], gt[static_cast<size_t>(j)]);

    // dp over subsets of gt, one table per pred prefix for reconstruction
    const size_t masks = size_t(1) << g;
    std::vector<std::vector<DpValue>> tables(static_cast<size_t>(p) + 1);
    tables[0].assign(masks, DpValue{});
    for (int i = 0; i < p; ++i) {
        tables[static_cast<size_t>(i) + 1] = tables[static_cast<size_t>(i)];
        auto& cur = tables[static_cast<size_t>(i)];
        auto& next = tables[static_cast<size_t>(i) + 1];
        for (size_t m = 0; m < masks; ++m) {
            for (int j = 0; j < g; ++j) {
                if (m & (size_t(1) << j)) continue;
                double v = iou_pg[static_cast<size_t>(i) * g + j];
                if (v < thresh) continue;
                DpValue cand{cur[m].count + 1, cur[m].total_iou + v};
                size_t nm = m | (size_t(1) << j);
                if (next[nm] < cand) next[nm] = cand;
            }
        }
    }
    size_t best_mask = 0;
    for (size_t m = 1; m < masks; ++m)
        if (tables[static_cast<size_t>(p)][best_mask] < tables[static_cast<size_t>(p)][m])
            best_mask = m;

    MatchResult result;
    std::vector<bool> pred_used(static_cast<size_t>(p), false);
    size_t m = best_mask;
    for (int i = p; i-- > 0;) {
        const auto& before = tables[static_cast<size_t>(i)];
        const auto& after = tables[static_cast<size_t>(i) + 1];
        // did pred i make the move into state m?
        bool moved = false;
        for (int j = 0; j < g && !moved; ++j) {
            if (!(m & (size_t(1) << j))) continue;
            double v = iou_pg[static_cast<size_t>(i) * g + j];
            if (v < thresh) continue;
            size_t pm = m & ~(size_t(1) << j);
            DpValue cand{before[pm].count + 1, before[pm].total_iou + v};
            if (!(cand < after[m]) && !(after[m] < cand)) {
                result.pairs.push_back({i, j, v});
                pred_used[static_cast<size_t>(i)] = true;
                m = pm;
                moved = true;
            }
        }
        // if not moved, pred i was skipped and state m carries over
        if (!moved && !(before[m] < after[m]) && !(after[m] < before[m])) continue;
        if (!moved) {
            // state strictly improved without pred i taking a gt: impossible
            throw std::logic_error("match_boxes: reconstruction failed");
        }
    }
    std::reverse(result.pairs.begin(), result.pairs.end());

    std::vector<bool> gt_used(static_cast<size_t>(g), false);
    for (const auto& pr : result.pairs) gt_used[static_cast<size_t>(pr.gt)] = true;
    for (int i = 0; i < p; ++i)
        if (!pred_used[static_cast<size_t>(i)]) result.unmatched_pred.push_back(i);
    for (int j = 0; j < g; ++j)
        if (!gt_used[static_cast<size_t>(j)]) result.unmatched_gt.push_back(j);
    return result;
}

// greedy fallback for implausibly large instances
MatchResult match_greedy(const std::vector<NormBox>& pred, const std::vector<NormBox>& gt,
                         double thresh) {
    struct Cand {
        double v;
        int i, j;
    };
    std::vector<Cand> cands;
    for (int i = 0; i < static_cast<int>(pred.size()); ++i)
        for (int j = 0; j < static_cast<int>(gt.size()); ++j) {
            double v = iou(pred[static_cast<size_t>(i)], gt[static_cast<size_t>(j)]);
            if (v >= thresh) cands.push_back({v, i, j});
        }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.v != b.v) return a.v > b.v;
        if (a.i != b.i) return a.i < b.i;
        return a.j < b.j;
    });
    MatchResult r;
    std::vector<bool> pu(pred.size(), false), gu(gt.size(), false);
    for (const auto& c : cands) {
        if (pu[static_cast<size_t>(c.i)] || gu[static_cast<size_t>(c.j)]) continue;
        pu[static_cast<size_t>(c.i)] = true;
        gu[static_cast<size_t>(c.j)] = true;
        r.pairs.push_back({c.i, c.j, c.v});
    }
    for (int i = 0; i < static_cast<int>(pred.size()); ++i)
        if (!pu[static_cast<size_t>(i)]) r.unmatched_pred.push_back(i);
    for (int j = 0; j < static_cast<int>(gt.size()); ++j)
        if (!gu[static_cast<size_t>(j)]) r.unmatched_gt.push_back(j);
    return r;
}

}  // namespace

MatchResult match_boxes(const std::vector<NormBox>& pred, const std::vector<NormBox>& gt,
                        double iou_thresh) {
    if (!(iou_thresh > 0) || iou_thresh > 1)
        throw std::invalid_argument("match_boxes: threshold must be in (0,1]");
    if (pred.empty() || gt.empty()) {
        MatchResult r;
        for (int i = 0; i < static_cast<int>(pred.size()); ++i) r.unmatched_pred.push_back(i);
        for (int j = 0; j < static_cast<int>(gt.size()); ++j) r.unmatched_gt.push_back(j);
        return r;
    }
    // DP over the smaller side; swap roles if gt is the bigger one
    if (gt.size() <= 16 || pred.size() <= 16) {
        if (gt.size() <= pred.size() && gt.size() <= 16) return match_exact(pred, gt, iou_thresh);
        if (pred.size() < gt.size() && pred.size() <= 16) {
            MatchResult sw = match_exact(gt, pred, iou_thresh);
            MatchResult r;
            for (const auto& pr : sw.pairs) r.pairs.push_back({pr.gt, pr.pred, pr.iou});
            r.unmatched_pred = sw.unmatched_gt;
            r.unmatched_gt = sw.unmatched_pred;
            return r;
        }
    }
    return match_greedy(pred, gt, iou_thresh);
}

Prf prf_at_iou(const std::vector<QueryBoxes>& queries, double iou_thresh) {
    long matched = 0, total_pred = 0, total_gt = 0;
    for (const auto& q : queries) {
        matched += static_cast<long>(match_boxes(q.pred, q.gt, iou_thresh).pairs.size());
        total_pred += static_cast<long>(q.pred.size());
        total_gt += static_cast<long>(q.gt.size());
    }
    Prf out;
    out.precision = total_pred > 0 ? 100.0 * matched / total_pred : 0.0;
    out.recall = total_gt > 0 ? 100.0 * matched / total_gt : 0.0;
    out.f1 = (out.precision + out.recall) > 0
                 ? 2.0 * out.precision * out.recall / (out.precision + out.recall)
                 : 0.0;
    return out;
}

namespace {

bool center_hit(const NormBox& a, const NormBox& b) {
    double acx = 0.5 * (a.x_min + a.x_max), acy = 0.5 * (a.y_min + a.y_max);
    double bcx = 0.5 * (b.x_min + b.x_max), bcy = 0.5 * (b.y_min + b.y_max);
    bool a_in_b = acx >= b.x_min && acx <= b.x_max && acy >= b.y_min && acy <= b.y_max;
    bool b_in_a = bcx >= a.x_min && bcx <= a.x_max && bcy >= a.y_min && bcy <= a.y_max;
    return a_in_b || b_in_a;
}

}  // namespace

RobustOutcome robust_outcome(const std::vector<QueryBoxes>& queries) {
    long total_gt = 0, localized = 0;
    double iou_sum = 0;
    for (const auto& q : queries) {
        total_gt += static_cast<long>(q.gt.size());
        struct Cand {
            double v;
            int i, j;
        };
        std::vector<Cand> cands;
        for (int i = 0; i < static_cast<int>(q.pred.size()); ++i)
            for (int j = 0; j < static_cast<int>(q.gt.size()); ++j) {
                double v = iou(q.pred[static_cast<size_t>(i)], q.gt[static_cast<size_t>(j)]);
                if (v > 0 && center_hit(q.pred[static_cast<size_t>(i)], q.gt[static_cast<size_t>(j)]))
                    cands.push_back({v, i, j});
            }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.v != b.v) return a.v > b.v;
            if (a.i != b.i) return a.i < b.i;
            return a.j < b.j;
        });
        std::vector<bool> pu(q.pred.size(), false), gu(q.gt.size(), false);
        for (const auto& c : cands) {
            if (pu[static_cast<size_t>(c.i)] || gu[static_cast<size_t>(c.j)]) continue;
            pu[static_cast<size_t>(c.i)] = true;
            gu[static_cast<size_t>(c.j)] = true;
            ++localized;
            iou_sum += c.v;
        }
    }
    RobustOutcome out;
    out.rol = total_gt > 0 ? 100.0 * localized / total_gt : 0.0;
    out.ros = localized > 0 ? 100.0 * iou_sum / localized : 0.0;
    return out;
}

std::string EvalReport::to_json_string() const {
    nlohmann::ordered_json j;
    j["RoL"] = RoL;
    j["RoS"] = RoS;
    j["F05"] = F05;
    j["P05"] = P05;
    j["R05"] = R05;
    j["counts"] = {{"n_images", n_images}, {"n_gt", n_gt}, {"n_pred", n_pred}, {"n_malformed", n_malformed}};
    if (!config_echo.empty()) j["config_echo"] = config_echo;
    return j.dump(2);
}

}  // namespace lofi
