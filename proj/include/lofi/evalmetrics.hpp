#pragma once

#include <string>
#include <vector>

#include "lofi/boxkit.hpp"

namespace lofi {

struct MatchResult {
    struct MatchedPair {
        int pred = -1;
        int gt = -1;
        double iou = 0;
    };
    std::vector<MatchedPair> pairs;
    std::vector<int> unmatched_pred;
    std::vector<int> unmatched_gt;
};

// Maximum-cardinality one-to-one matching over pairs with IoU >= iou_thresh;
// among maximum matchings, maximizes total IoU. Exact for the small per-phrase
// box counts this is used on.
MatchResult match_boxes(const std::vector<NormBox>& pred, const std::vector<NormBox>& gt,
                        double iou_thresh);

struct QueryBoxes {
    std::vector<NormBox> pred;
    std::vector<NormBox> gt;
};

struct Prf {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
};

// Micro-averaged over all queries at the IoU threshold (percentages).
Prf prf_at_iou(const std::vector<QueryBoxes>& queries, double iou_thresh = 0.5);

struct RobustOutcome {
    double rol = 0;  // % of gt boxes localized by a center-hit prediction
    double ros = 0;  // mean IoU over localized pairs (%), 0 when none
};

// Greedy center-hit assignment in descending IoU: a gt box is localized when
// an unassigned prediction's center lies inside it or vice versa.
RobustOutcome robust_outcome(const std::vector<QueryBoxes>& queries);

struct EvalReport {
    double RoL = 0, RoS = 0, P05 = 0, R05 = 0, F05 = 0;
    int n_images = 0, n_gt = 0, n_pred = 0, n_malformed = 0;
    std::string config_echo;

    std::string to_json_string() const;
};

}  // namespace lofi
