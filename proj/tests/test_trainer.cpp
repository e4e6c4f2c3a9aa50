#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "lofi/config.hpp"
#include "lofi/trainer.hpp"

using namespace lofi;
namespace fs = std::filesystem;
using json = nlohmann::json;

TEST_CASE("cosine_lr endpoints and midpoint") {
    CHECK(cosine_lr(0, 100, 3e-4) == 3e-4);
    CHECK(cosine_lr(100, 100, 3e-4) == doctest::Approx(0.0).epsilon(1e-18));
    CHECK(cosine_lr(50, 100, 3e-4) == doctest::Approx(1.5e-4).epsilon(1e-15));
    CHECK_THROWS_AS(cosine_lr(0, 0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(cosine_lr(-1, 10, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(cosine_lr(11, 10, 1.0), std::invalid_argument);
}

TEST_CASE("adam minimizes a quadratic") {
    ParamStore store;
    Param* p = store.create("x", 1, 1);
    p->w.a[0] = 3.0;
    GradSink g;
    g.init(store);
    Adam adam;
    for (int i = 0; i < 2000; ++i) {
        g.zero();
        g.of(p).a[0] = 2.0 * p->w.a[0];  // d/dx of x²
        adam.step(store, g, 0.01);
    }
    CHECK(std::fabs(p->w.a[0]) < 1e-2);
}

namespace {

struct TmpDataset {
    fs::path root;
    std::string manifest;

    explicit TmpDataset(int n, uint64_t seed, double p_nobox = 0.3) {
        root = fs::temp_directory_path() / ("lofi_trainer_test_" + std::to_string(seed));
        fs::remove_all(root);
        synth::DatasetConfig dc;
        dc.split = "train";
        dc.count = n;
        dc.seed = seed;
        dc.out_dir = root.string();
        dc.gen.image_w = dc.gen.image_h = 32;
        dc.gen.min_objects = 1;
        dc.gen.max_objects = 2;
        dc.gen.p_nobox = p_nobox;
        manifest = synth::build_dataset(dc).manifest_path;
    }
    ~TmpDataset() { fs::remove_all(root); }
};

TrainConfig tiny_train_config(const std::string& manifest, const std::string& out) {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.lr0 = 1e-3;
    cfg.lambda = 5.0;
    cfg.seed = 3;
    cfg.manifest_path = manifest;
    cfg.out_dir = out;
    cfg.model.image_w = cfg.model.image_h = 32;
    cfg.model.patch = 16;
    cfg.model.d = 16;
    cfg.model.enc_blocks = 1;
    cfg.model.enc_heads = 2;
    cfg.model.enc_dff = 32;
    cfg.model.d_dec = 16;
    cfg.model.dec_blocks = 1;
    cfg.model.dec_heads = 2;
    cfg.model.dec_dff = 32;
    cfg.model.pooled_tokens = 8;
    cfg.model.context_cap = 256;
    return cfg;
}

std::vector<json> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in);
    std::vector<json> rows;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) rows.push_back(json::parse(line));
    return rows;
}

}  // namespace

TEST_CASE("train: runs, logs schedule exactly, reproduces digests") {
    TmpDataset data(12, 99);
    fs::path out = fs::temp_directory_path() / "lofi_train_out";
    fs::remove_all(out);

    TrainConfig cfg = tiny_train_config(data.manifest, (out / "r1").string());
    TrainResult r1 = train(cfg);
    CHECK(fs::exists(r1.checkpoint_path));
    CHECK(r1.steps == 6);  // 12 samples / batch 4 * 2 epochs

    auto rows = read_jsonl(r1.metrics_path);
    REQUIRE(rows.size() == 6);
    for (const auto& row : rows) {
        CHECK(std::isfinite(row.at("loss").get<double>()));
        double lr = row.at("lr").get<double>();
        CHECK(std::fabs(lr - cosine_lr(row.at("step").get<int>(), 6, cfg.lr0)) <= 1e-12);
        for (char t : row.at("tau").get<std::string>()) CHECK((t == 'c' || t == 'g' || t == 'd'));
    }

    // bit-identical rerun
    cfg.out_dir = (out / "r2").string();
    TrainResult r2 = train(cfg);
    CHECK(r1.checkpoint_digest == r2.checkpoint_digest);

    // different seed diverges
    cfg.out_dir = (out / "r3").string();
    cfg.seed = 4;
    TrainResult r3 = train(cfg);
    CHECK(r3.checkpoint_digest != r1.checkpoint_digest);

    // per-epoch checkpoints exist
    CHECK(fs::exists(fs::path(cfg.out_dir) / "checkpoint_epoch0.ckpt"));
    CHECK(fs::exists(fs::path(cfg.out_dir) / "checkpoint_epoch1.ckpt"));

    // checkpoint roundtrip: two loads agree on an embedding
    auto m1 = load_checkpoint(r1.checkpoint_path);
    auto m2 = load_checkpoint(r1.checkpoint_path);
    auto samples = synth::load_dataset(data.manifest);
    Mat e1, p1, e2, p2;
    m1->encode_image(samples[0].image, e1, p1);
    m2->encode_image(samples[0].image, e2, p2);
    CHECK(e1.a == e2.a);

    fs::remove_all(out);
}

TEST_CASE("train: loss variants restrict tau draws") {
    TmpDataset data(8, 123, 0.0);
    fs::path out = fs::temp_directory_path() / "lofi_train_variants";
    fs::remove_all(out);

    TrainConfig cfg = tiny_train_config(data.manifest, (out / "no_gd").string());
    cfg.epochs = 1;
    cfg.loss_variant = LossVariant::no_gd;
    TrainResult r = train(cfg);
    for (const auto& row : read_jsonl(r.metrics_path)) {
        std::string taus = row.at("tau").get<std::string>();
        CHECK(taus.find('g') == std::string::npos);
        CHECK(taus.find('d') == std::string::npos);
    }

    cfg.out_dir = (out / "sig").string();
    cfg.loss_variant = LossVariant::sigmoid_only;
    r = train(cfg);
    for (const auto& row : read_jsonl(r.metrics_path))
        CHECK(row.at("autoregressive").get<double>() == 0.0);

    fs::remove_all(out);
}

TEST_CASE("train: max_steps caps the run (overfit harness hook)") {
    TmpDataset data(8, 7, 0.0);
    fs::path out = fs::temp_directory_path() / "lofi_train_cap";
    fs::remove_all(out);
    TrainConfig cfg = tiny_train_config(data.manifest, out.string());
    cfg.epochs = 1;
    cfg.max_steps = 3;
    TrainResult r = train(cfg);
    CHECK(r.steps == 3);
    CHECK(read_jsonl(r.metrics_path).size() == 3);
    fs::remove_all(out);
}

TEST_CASE("train config from kv and echo defaults") {
    KvConfig kv;
    TrainConfig t = train_config_from_kv(kv);
    CHECK(t.epochs == 10);
    CHECK(t.batch_size == 16);
    CHECK(t.lr0 == 3e-4);
    CHECK(t.lambda == 5.0);
    resolve_into_kv(kv, t);
    CHECK(kv.get("train.epochs", "") == "10");
    CHECK(kv.get("train.batch_size", "") == "16");
    CHECK(kv.get("train.lr0", "") == "0.0003");
    CHECK(kv.get("train.lambda", "") == "5");
    std::string echo = make_run_echo("lofi train", kv, t.seed);
    CHECK(echo.find("\"version\"") != std::string::npos);
    CHECK(echo.find("lofi-0.1.0") != std::string::npos);
}
