#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lofi/boxkit.hpp"
#include "lofi/png_io.hpp"

namespace lofi {
namespace synth {

enum class Shape { circle, square, triangle, cross, ring };
enum class SizeClass { small, medium, large };
enum class Intensity { bright, dark };
enum class Region { upper_left, upper_right, lower_left, lower_right, center };

struct SceneObject {
    Shape shape{};
    SizeClass size{};
    Intensity intensity{};
    Region region{};
    double cx = 0, cy = 0;   // pixels
    double radius = 0;       // pixels, half-extent
    double level = 0;        // draw value in [0,1]
};

struct GenConfig {
    int image_w = 128;
    int image_h = 128;
    int min_objects = 1;
    int max_objects = 4;
    double max_pair_iou = 0.3;
    int max_attempts = 1000;
    double p_nobox = 0.3;
};

// analytic tight bounding box (contains every drawn pixel of the object)
PixelBox tight_box(const SceneObject& obj);

// pixel rectangle a region's object centers are confined to
PixelBox region_rect(Region r, int image_w, int image_h);

const char* shape_word(Shape s);
const char* size_word(SizeClass s);
const char* intensity_word(Intensity i);
const char* region_word(Region r);

// fixed word list of the report grammar (plus "." emitted as punctuation)
const std::vector<std::string>& grammar_words();

// 1..4 non-identical objects, pairwise tight-box IoU <= max_pair_iou.
// Throws std::runtime_error after max_attempts rejected placements.
std::vector<SceneObject> generate_scene(uint64_t seed, const GenConfig& cfg);

GrayImage render_image(const std::vector<SceneObject>& objects, int image_w, int image_h,
                       double background = 0.4);

struct Report {
    std::vector<std::string> sentences;
    std::vector<std::vector<PixelBox>> boxes_per_sentence;
};

// One sentence per object from the fixed template grammar. The grammar has a
// single template, so the seed is accepted for interface stability but does
// not influence the output.
Report realize_report(const std::vector<SceneObject>& objects, uint64_t seed = 0);

struct Sample {
    std::string id;
    std::string image_path;  // relative to manifest directory
    std::vector<std::string> sentences;
    bool has_boxes = false;
    std::vector<std::vector<PixelBox>> boxes;  // aligned with sentences when has_boxes
    GrayImage image;                           // filled by load_dataset
};

struct DatasetConfig {
    std::string split = "train";  // train | test | pool
    int count = 0;
    uint64_t seed = 0;
    uint64_t base_index = 0;  // global sample index offset; keeps splits disjoint
    std::string out_dir;
    GenConfig gen;
};

struct DatasetManifest {
    std::string split;
    uint64_t seed = 0;
    GenConfig gen;
    std::vector<Sample> samples;  // images not loaded
    std::string manifest_path;
};

// Generates samples, writes PNGs under <out_dir>/images/ and a JSON-lines
// manifest <out_dir>/<split>.jsonl. Deterministic in (seed, config).
DatasetManifest build_dataset(const DatasetConfig& cfg);

// Reads a manifest and its images into memory.
std::vector<Sample> load_dataset(const std::string& manifest_path);

// Uniform subset of clamp(uniform(n_min,n_max),1,len) sentences, original
// order preserved. Throws on an empty sentence list.
std::vector<std::string> sample_sentences(const std::vector<std::string>& sentences, int n_min,
                                          int n_max, uint64_t seed);

}  // namespace synth
}  // namespace lofi
