#pragma once

#include <string>
#include <utility>
#include <vector>

namespace lofi {

// Corner-convention box in pixel units, x_max/y_max exclusive.
struct PixelBox {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    bool valid() const {
        return x_min >= 0 && y_min >= 0 && x_min < x_max && y_min < y_max;
    }
    bool operator==(const PixelBox&) const = default;
};

// Integer box on the [0,1000] grid, the serialization unit for the
// autoregressive grounding targets.
struct NormBox {
    int x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    bool valid() const {
        return x_min >= 0 && y_min >= 0 && x_max <= 1000 && y_max <= 1000 &&
               x_min <= x_max && y_min <= y_max;
    }
    bool operator==(const NormBox&) const = default;
};

double iou(const PixelBox& a, const PixelBox& b);
double iou(const NormBox& a, const NormBox& b);

// Scale a pixel box into the [0,1000] grid. Rounding is half-away-from-zero.
// Throws std::invalid_argument if the box is invalid or exceeds the image.
NormBox normalize_box(const PixelBox& b, int image_w, int image_h);

PixelBox denormalize_box(const NormBox& b, int image_w, int image_h);

// Canonical order for serialization: (y_min, x_min, y_max, x_max) ascending.
std::vector<NormBox> canonical_order(std::vector<NormBox> boxes);

// "[x,y,x,y]" per box, ";"-joined, canonically ordered. Throws on empty input.
std::string boxes_to_string(const std::vector<NormBox>& boxes);

struct BoxParse {
    std::vector<NormBox> boxes;
    bool malformed = false;  // set when any fragment failed to parse
};

// Lenient parser for decoder output: extracts every well-formed box, flags
// anything else. Never throws.
BoxParse string_to_boxes(const std::string& s);

// Greedy weight-descending clustering; a box joins the first cluster whose
// running fused box overlaps it at >= iou_thresh, else starts a new cluster.
// Fused box = weight-weighted mean of member coordinates.
std::vector<PixelBox> weighted_box_fusion(const std::vector<PixelBox>& boxes,
                                          const std::vector<double>& weights = {},
                                          double iou_thresh = 0.55);

}  // namespace lofi
