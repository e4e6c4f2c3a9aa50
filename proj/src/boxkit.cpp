#include "lofi/boxkit.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lofi {

namespace {

template <typename Box>
double iou_impl(const Box& a, const Box& b) {
    double ix = std::min<double>(a.x_max, b.x_max) - std::max<double>(a.x_min, b.x_min);
    double iy = std::min<double>(a.y_max, b.y_max) - std::max<double>(a.y_min, b.y_min);
    if (ix <= 0 || iy <= 0) return 0.0;
    double inter = ix * iy;
    double area_a = double(a.x_max - a.x_min) * double(a.y_max - a.y_min);
    double area_b = double(b.x_max - b.x_min) * double(b.y_max - b.y_min);
    double uni = area_a + area_b - inter;
    return uni > 0 ? inter / uni : 0.0;
}

int round_half_away(double v) {
    return static_cast<int>(v >= 0 ? std::floor(v + 0.5) : std::ceil(v - 0.5));
}

}  // namespace

double iou(const PixelBox& a, const PixelBox& b) { return iou_impl(a, b); }
double iou(const NormBox& a, const NormBox& b) { return iou_impl(a, b); }

NormBox normalize_box(const PixelBox& b, int image_w, int image_h) {
    if (!b.valid()) throw std::invalid_argument("normalize_box: invalid pixel box");
    if (b.x_max > image_w || b.y_max > image_h)
        throw std::invalid_argument("normalize_box: box exceeds image bounds");
    NormBox n;
    n.x_min = round_half_away(b.x_min / image_w * 1000.0);
    n.y_min = round_half_away(b.y_min / image_h * 1000.0);
    n.x_max = round_half_away(b.x_max / image_w * 1000.0);
    n.y_max = round_half_away(b.y_max / image_h * 1000.0);
    return n;
}

PixelBox denormalize_box(const NormBox& b, int image_w, int image_h) {
    PixelBox p;
    p.x_min = b.x_min / 1000.0 * image_w;
    p.y_min = b.y_min / 1000.0 * image_h;
    p.x_max = b.x_max / 1000.0 * image_w;
    p.y_max = b.y_max / 1000.0 * image_h;
    return p;
}

std::vector<NormBox> canonical_order(std::vector<NormBox> boxes) {
    std::stable_sort(boxes.begin(), boxes.end(), [](const NormBox& a, const NormBox& b) {
        if (a.y_min != b.y_min) return a.y_min < b.y_min;
        if (a.x_min != b.x_min) return a.x_min < b.x_min;
        if (a.y_max != b.y_max) return a.y_max < b.y_max;
        return a.x_max < b.x_max;
    });
    return boxes;
}

std::string boxes_to_string(const std::vector<NormBox>& boxes) {
    if (boxes.empty()) throw std::invalid_argument("boxes_to_string: empty list");
    std::string out;
    auto ordered = canonical_order(boxes);
    for (size_t i = 0; i < ordered.size(); ++i) {
        if (i) out += ';';
        const NormBox& b = ordered[i];
        out += '[';
        out += std::to_string(b.x_min) + ',' + std::to_string(b.y_min) + ',' +
               std::to_string(b.x_max) + ',' + std::to_string(b.y_max);
        out += ']';
    }
    return out;
}

namespace {

// strict "int" per the box-string grammar: 0..1000, no leading zeros
bool parse_grammar_int(const std::string& s, size_t& i, int& out) {
    size_t start = i;
    while (i < s.size() && s[i] >= '0' && s[i] <= '9') ++i;
    size_t len = i - start;
    if (len == 0 || len > 4) return false;
    if (len > 1 && s[start] == '0') return false;
    int v = 0;
    for (size_t k = start; k < i; ++k) v = v * 10 + (s[k] - '0');
    if (v > 1000) return false;
    out = v;
    return true;
}

// attempt a full "[a,b,c,d]" at position i (s[i] == '[')
bool parse_one_box(const std::string& s, size_t& i, NormBox& out) {
    size_t j = i + 1;
    int vals[4];
    for (int k = 0; k < 4; ++k) {
        if (!parse_grammar_int(s, j, vals[k])) return false;
        if (k < 3) {
            if (j >= s.size() || s[j] != ',') return false;
            ++j;
        }
    }
    if (j >= s.size() || s[j] != ']') return false;
    NormBox b{vals[0], vals[1], vals[2], vals[3]};
    if (!b.valid()) return false;
    out = b;
    i = j + 1;
    return true;
}

}  // namespace

BoxParse string_to_boxes(const std::string& s) {
    BoxParse result;
    size_t i = 0;
    bool expect_box = true;  // cleared right after a valid box
    while (i < s.size()) {
        if (s[i] == '[') {
            NormBox b;
            size_t save = i;
            if (parse_one_box(s, i, b)) {
                if (!expect_box) result.malformed = true;  // missing ";" separator
                result.boxes.push_back(b);
                expect_box = false;
                continue;
            }
            result.malformed = true;
            i = save + 1;
        } else if (s[i] == ';' && !expect_box) {
            expect_box = true;
            ++i;
        } else {
            result.malformed = true;
            ++i;
        }
    }
    if (expect_box && !result.boxes.empty()) result.malformed = true;  // trailing ";"
    if (result.boxes.empty()) result.malformed = true;
    return result;
}

std::vector<PixelBox> weighted_box_fusion(const std::vector<PixelBox>& boxes,
                                          const std::vector<double>& weights,
                                          double iou_thresh) {
    if (boxes.empty()) return {};
    std::vector<double> w = weights;
    if (w.empty()) w.assign(boxes.size(), 1.0);
    if (w.size() != boxes.size())
        throw std::invalid_argument("weighted_box_fusion: weights size mismatch");
    for (double v : w)
        if (!(v > 0)) throw std::invalid_argument("weighted_box_fusion: weights must be positive");

    // processing order: weight descending, then (y_min, x_min) ascending
    std::vector<size_t> order(boxes.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (w[a] != w[b]) return w[a] > w[b];
        const PixelBox &ba = boxes[a], &bb = boxes[b];
        if (ba.y_min != bb.y_min) return ba.y_min < bb.y_min;
        if (ba.x_min != bb.x_min) return ba.x_min < bb.x_min;
        if (ba.y_max != bb.y_max) return ba.y_max < bb.y_max;
        return ba.x_max < bb.x_max;
    });

    struct Cluster {
        PixelBox fused{};     // running weighted mean
        double weight = 0.0;  // total member weight
    };
    std::vector<Cluster> clusters;
    for (size_t idx : order) {
        const PixelBox& b = boxes[idx];
        bool joined = false;
        for (auto& c : clusters) {
            if (iou(c.fused, b) >= iou_thresh) {
                double tw = c.weight + w[idx];
                c.fused.x_min = (c.fused.x_min * c.weight + b.x_min * w[idx]) / tw;
                c.fused.y_min = (c.fused.y_min * c.weight + b.y_min * w[idx]) / tw;
                c.fused.x_max = (c.fused.x_max * c.weight + b.x_max * w[idx]) / tw;
                c.fused.y_max = (c.fused.y_max * c.weight + b.y_max * w[idx]) / tw;
                c.weight = tw;
                joined = true;
                break;
            }
        }
        if (!joined) clusters.push_back(Cluster{b, w[idx]});
    }

    std::vector<PixelBox> fused;
    fused.reserve(clusters.size());
    for (const auto& c : clusters) fused.push_back(c.fused);
    // canonical output order, independent of cluster creation order
    std::sort(fused.begin(), fused.end(), [](const PixelBox& a, const PixelBox& b) {
        if (a.y_min != b.y_min) return a.y_min < b.y_min;
        if (a.x_min != b.x_min) return a.x_min < b.x_min;
        if (a.y_max != b.y_max) return a.y_max < b.y_max;
        return a.x_max < b.x_max;
    });
    return fused;
}

}  // namespace lofi
