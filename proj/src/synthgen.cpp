#include "lofi/synthgen.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "lofi/common.hpp"

namespace lofi {
namespace synth {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

const char* shape_word(Shape s) {
    switch (s) {
        case Shape::circle: return "circle";
        case Shape::square: return "square";
        case Shape::triangle: return "triangle";
        case Shape::cross: return "cross";
        case Shape::ring: return "ring";
    }
    return "?";
}

const char* size_word(SizeClass s) {
    switch (s) {
        case SizeClass::small: return "small";
        case SizeClass::medium: return "medium";
        case SizeClass::large: return "large";
    }
    return "?";
}

const char* intensity_word(Intensity i) {
    return i == Intensity::bright ? "bright" : "dark";
}

const char* region_word(Region r) {
    switch (r) {
        case Region::upper_left: return "upper-left";
        case Region::upper_right: return "upper-right";
        case Region::lower_left: return "lower-left";
        case Region::lower_right: return "lower-right";
        case Region::center: return "center";
    }
    return "?";
}

const std::vector<std::string>& grammar_words() {
    static const std::vector<std::string> words = {
        "there",      "is",          "a",          "small",       "medium", "large",
        "bright",     "dark",        "circle",     "square",      "triangle", "cross",
        "ring",       "in",          "the",        "upper-left",  "upper-right",
        "lower-left", "lower-right", "center",     "region",      "."};
    return words;
}

PixelBox region_rect(Region r, int w, int h) {
    double hw = w / 2.0, hh = h / 2.0;
    switch (r) {
        case Region::upper_left: return {0, 0, hw, hh};
        case Region::upper_right: return {hw, 0, double(w), hh};
        case Region::lower_left: return {0, hh, hw, double(h)};
        case Region::lower_right: return {hw, hh, double(w), double(h)};
        case Region::center: return {w / 4.0, h / 4.0, 3.0 * w / 4.0, 3.0 * h / 4.0};
    }
    return {};
}

namespace {

double size_radius(SizeClass s, int w, int h) {
    double unit = std::min(w, h) / 128.0;
    switch (s) {
        case SizeClass::small: return 9.0 * unit;
        case SizeClass::medium: return 14.0 * unit;
        case SizeClass::large: return 20.0 * unit;
    }
    return 0;
}

// triangle vertex offsets relative to (cx, cy), in units of radius
constexpr double kTriHalfWidth = 0.9;
constexpr double kTriBottom = 0.75;
constexpr double kCrossArm = 0.35;
constexpr double kRingInner = 0.6;

bool point_in_triangle(double px, double py, double cx, double cy, double r) {
    double ax = cx, ay = cy - r;
    double bx = cx - kTriHalfWidth * r, by = cy + kTriBottom * r;
    double dx = cx + kTriHalfWidth * r, dy = cy + kTriBottom * r;
    auto cross2 = [](double ox, double oy, double x1, double y1, double x2, double y2) {
        return (x1 - ox) * (y2 - oy) - (x2 - ox) * (y1 - oy);
    };
    double s1 = cross2(ax, ay, bx, by, px, py);
    double s2 = cross2(bx, by, dx, dy, px, py);
    double s3 = cross2(dx, dy, ax, ay, px, py);
    return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
}

bool point_in_object(double px, double py, const SceneObject& o) {
    double dx = px - o.cx, dy = py - o.cy;
    switch (o.shape) {
        case Shape::circle:
            return dx * dx + dy * dy <= o.radius * o.radius;
        case Shape::square:
            return std::max(std::fabs(dx), std::fabs(dy)) <= o.radius;
        case Shape::ring: {
            double d2 = dx * dx + dy * dy;
            double inner = kRingInner * o.radius;
            return d2 <= o.radius * o.radius && d2 >= inner * inner;
        }
        case Shape::cross: {
            double arm = kCrossArm * o.radius;
            return (std::fabs(dx) <= arm && std::fabs(dy) <= o.radius) ||
                   (std::fabs(dy) <= arm && std::fabs(dx) <= o.radius);
        }
        case Shape::triangle:
            return point_in_triangle(px, py, o.cx, o.cy, o.radius);
    }
    return false;
}

}  // namespace

PixelBox tight_box(const SceneObject& o) {
    if (o.shape == Shape::triangle)
        return {o.cx - kTriHalfWidth * o.radius, o.cy - o.radius,
                o.cx + kTriHalfWidth * o.radius, o.cy + kTriBottom * o.radius};
    return {o.cx - o.radius, o.cy - o.radius, o.cx + o.radius, o.cy + o.radius};
}

std::vector<SceneObject> generate_scene(uint64_t seed, const GenConfig& cfg) {
    Rng rng(mix_seed(seed, 0x5ce7eULL));
    int want = static_cast<int>(rng.uniform_int(cfg.min_objects, cfg.max_objects));

    std::vector<SceneObject> objects;
    std::vector<uint32_t> used_categories;
    int attempts = 0;
    while (static_cast<int>(objects.size()) < want) {
        if (++attempts > cfg.max_attempts)
            throw std::runtime_error("generate_scene: placement failed after " +
                                     std::to_string(cfg.max_attempts) + " attempts");
        SceneObject o;
        o.shape = static_cast<Shape>(rng.uniform_int(0, 4));
        o.size = static_cast<SizeClass>(rng.uniform_int(0, 2));
        o.intensity = static_cast<Intensity>(rng.uniform_int(0, 1));
        o.region = static_cast<Region>(rng.uniform_int(0, 4));

        uint32_t cat = static_cast<uint32_t>(o.shape) | (static_cast<uint32_t>(o.size) << 4) |
                       (static_cast<uint32_t>(o.intensity) << 8) |
                       (static_cast<uint32_t>(o.region) << 12);
        if (std::find(used_categories.begin(), used_categories.end(), cat) !=
            used_categories.end())
            continue;

        o.radius = size_radius(o.size, cfg.image_w, cfg.image_h);
        o.level = o.intensity == Intensity::bright ? rng.uniform(0.85, 0.95)
                                                   : rng.uniform(0.05, 0.15);

        PixelBox rect = region_rect(o.region, cfg.image_w, cfg.image_h);
        double lo_x = std::max(rect.x_min, o.radius);
        double hi_x = std::min(rect.x_max, cfg.image_w - o.radius);
        double lo_y = std::max(rect.y_min, o.radius);
        double hi_y = std::min(rect.y_max, cfg.image_h - o.radius);
        if (lo_x >= hi_x || lo_y >= hi_y) continue;  // object cannot fit in this region
        o.cx = rng.uniform(lo_x, hi_x);
        o.cy = rng.uniform(lo_y, hi_y);

        PixelBox box = tight_box(o);
        bool ok = true;
        for (const auto& other : objects) {
            if (iou(box, tight_box(other)) > cfg.max_pair_iou) {
                ok = false;
                break;
            }
        }
        if (!ok) continue;
        objects.push_back(o);
        used_categories.push_back(cat);
    }
    return objects;
}

GrayImage render_image(const std::vector<SceneObject>& objects, int image_w, int image_h,
                       double background) {
    GrayImage img;
    img.width = image_w;
    img.height = image_h;
    img.pixels.assign(static_cast<size_t>(image_w) * image_h, background);
    for (const auto& o : objects) {
        PixelBox box = tight_box(o);
        int x0 = std::max(0, static_cast<int>(std::floor(box.x_min)));
        int y0 = std::max(0, static_cast<int>(std::floor(box.y_min)));
        int x1 = std::min(image_w, static_cast<int>(std::ceil(box.x_max)));
        int y1 = std::min(image_h, static_cast<int>(std::ceil(box.y_max)));
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x)
                if (point_in_object(x + 0.5, y + 0.5, o)) img.at(x, y) = o.level;
    }
    return img;
}

Report realize_report(const std::vector<SceneObject>& objects, uint64_t /*seed*/) {
    if (objects.empty()) throw std::invalid_argument("realize_report: empty object list");
    Report rep;
    for (const auto& o : objects) {
        std::string s = std::string("there is a ") + size_word(o.size) + " " +
                        intensity_word(o.intensity) + " " + shape_word(o.shape) + " in the " +
                        region_word(o.region) + " region .";
        rep.sentences.push_back(s);
        rep.boxes_per_sentence.push_back({tight_box(o)});
    }
    return rep;
}

namespace {

json box_to_json(const PixelBox& b) { return json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }

PixelBox box_from_json(const json& j) {
    return PixelBox{j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
                    j.at(3).get<double>()};
}

}  // namespace

DatasetManifest build_dataset(const DatasetConfig& cfg) {
    if (cfg.count < 0) throw std::invalid_argument("build_dataset: negative count");
    fs::path out(cfg.out_dir);
    fs::path img_dir = out / "images";
    std::error_code ec;
    fs::create_directories(img_dir, ec);
    if (ec) throw std::invalid_argument("build_dataset: cannot create " + img_dir.string());

    DatasetManifest man;
    man.split = cfg.split;
    man.seed = cfg.seed;
    man.gen = cfg.gen;

    fs::path manifest_path = out / (cfg.split + ".jsonl");
    std::ofstream mf(manifest_path);
    if (!mf) throw std::invalid_argument("build_dataset: cannot write " + manifest_path.string());

    for (int i = 0; i < cfg.count; ++i) {
        uint64_t global_index = cfg.base_index + static_cast<uint64_t>(i);
        uint64_t scene_seed = mix_seed(cfg.seed, global_index, 1);
        Rng aux(mix_seed(cfg.seed, global_index, 2));

        std::vector<SceneObject> objects = generate_scene(scene_seed, cfg.gen);
        double background = aux.uniform(0.37, 0.43);
        GrayImage img = render_image(objects, cfg.gen.image_w, cfg.gen.image_h, background);
        Report rep = realize_report(objects);
        bool has_boxes = aux.uniform() >= cfg.gen.p_nobox;

        char idbuf[32];
        std::snprintf(idbuf, sizeof idbuf, "%s_%06llu", cfg.split.c_str(),
                      static_cast<unsigned long long>(global_index));
        Sample s;
        s.id = idbuf;
        s.image_path = "images/" + s.id + ".png";
        s.sentences = rep.sentences;
        s.has_boxes = has_boxes;
        if (has_boxes) s.boxes = rep.boxes_per_sentence;

        write_gray_png((out / s.image_path).string(), img);

        json rec;
        rec["id"] = s.id;
        rec["image_path"] = s.image_path;
        rec["sentences"] = s.sentences;
        if (has_boxes) {
            json per_sentence = json::array();
            for (const auto& sb : s.boxes) {
                json lst = json::array();
                for (const auto& b : sb) lst.push_back(box_to_json(b));
                per_sentence.push_back(lst);
            }
            rec["boxes"] = per_sentence;
        } else {
            rec["boxes"] = nullptr;
        }
        mf << rec.dump() << "\n";
        man.samples.push_back(std::move(s));
    }
    mf.close();
    man.manifest_path = manifest_path.string();
    return man;
}

std::vector<Sample> load_dataset(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + manifest_path);
    fs::path dir = fs::path(manifest_path).parent_path();

    std::vector<Sample> samples;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line);
        Sample s;
        s.id = rec.at("id").get<std::string>();
        s.image_path = rec.at("image_path").get<std::string>();
        s.sentences = rec.at("sentences").get<std::vector<std::string>>();
        if (!rec.at("boxes").is_null()) {
            s.has_boxes = true;
            for (const auto& sb : rec.at("boxes")) {
                std::vector<PixelBox> lst;
                for (const auto& b : sb) lst.push_back(box_from_json(b));
                s.boxes.push_back(std::move(lst));
            }
            if (s.boxes.size() != s.sentences.size())
                throw std::runtime_error("load_dataset: boxes/sentences length mismatch in " + s.id);
        }
        s.image = read_gray_png((dir / s.image_path).string());
        samples.push_back(std::move(s));
    }
    return samples;
}

std::vector<std::string> sample_sentences(const std::vector<std::string>& sentences, int n_min,
                                          int n_max, uint64_t seed) {
    if (sentences.empty()) throw std::invalid_argument("sample_sentences: empty sentence list");
    if (n_min > n_max) throw std::invalid_argument("sample_sentences: n_min > n_max");
    Rng rng(mix_seed(seed, 0x5e47e4ceULL));
    int len = static_cast<int>(sentences.size());
    int n = static_cast<int>(rng.uniform_int(n_min, n_max));
    n = std::clamp(n, 1, len);

    // uniform combination: partial Fisher-Yates then restore order
    std::vector<int> idx(sentences.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    for (int i = 0; i < n; ++i) {
        int j = static_cast<int>(rng.uniform_int(i, len - 1));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(n));
    std::sort(idx.begin(), idx.end());

    std::vector<std::string> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(sentences[static_cast<size_t>(i)]);
    return out;
}

}  // namespace synth
}  // namespace lofi
