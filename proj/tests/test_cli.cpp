#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lofi/model.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

static std::string lofi_bin() {
    const char* b = std::getenv("LOFI_BIN");
    REQUIRE(b != nullptr);
    return b;
}

static int run(const std::string& args) {
    std::string cmd = lofi_bin() + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

TEST_CASE("gen-data: exit codes and byte-identical reruns") {
    fs::path tmp = fs::temp_directory_path() / "lofi_cli_gen";
    fs::remove_all(tmp);

    std::string common = "gen-data --seed 7 --train 6 --test 3 --pool 3 "
                         "--set gen.image_w=32 --set gen.image_h=32 --set gen.max_objects=2 ";
    CHECK(run(common + "--out " + (tmp / "a").string()) == 0);
    CHECK(run(common + "--out " + (tmp / "b").string()) == 0);

    for (const char* f : {"train.jsonl", "test.jsonl", "pool.jsonl"}) {
        CHECK(fs::exists(tmp / "a" / f));
        CHECK(slurp(tmp / "a" / f) == slurp(tmp / "b" / f));
    }
    // images byte-identical too
    CHECK(slurp(tmp / "a" / "images" / "train_000000.png") ==
          slurp(tmp / "b" / "images" / "train_000000.png"));

    // resolved config echoed
    json echo = json::parse(slurp(tmp / "a" / "run_config.json"));
    CHECK(echo.at("version") == "lofi-0.1.0");
    CHECK(echo.at("seed") == 7);
    CHECK(echo.at("config").at("gen.p_nobox") == "0.3");

    // bad output path -> exit 2
    CHECK(run("gen-data --train 1 --out /dev/null/nope") == 2);
    // nothing to generate -> exit 2
    CHECK(run(std::string("gen-data --out ") + (tmp / "c").string()) == 2);
    // unknown flag -> exit 2
    CHECK(run("gen-data --bogus 1") == 2);

    fs::remove_all(tmp);
}

TEST_CASE("train + eval CLI pipeline on a tiny config") {
    fs::path tmp = fs::temp_directory_path() / "lofi_cli_train";
    fs::remove_all(tmp);

    REQUIRE(run("gen-data --seed 11 --train 8 --test 4 --pool 4 --out " + (tmp / "data").string() +
                " --set gen.image_w=32 --set gen.image_h=32 --set gen.max_objects=2 "
                "--set gen.p_nobox=0") == 0);

    std::string tiny_model =
        "--set model.image_w=32 --set model.image_h=32 --set model.d=16 "
        "--set model.enc_blocks=1 --set model.enc_heads=2 --set model.enc_dff=32 "
        "--set model.d_dec=16 --set model.dec_blocks=1 --set model.dec_heads=2 "
        "--set model.dec_dff=32 --set model.pooled_tokens=8 --set model.context_cap=512 ";

    CHECK(run("train --manifest " + (tmp / "data" / "train.jsonl").string() + " --epochs 1 " +
              "--batch-size 4 --seed 5 " + tiny_model + "--out " + (tmp / "run").string()) == 0);
    CHECK(fs::exists(tmp / "run" / "checkpoint_final.ckpt"));
    CHECK(fs::exists(tmp / "run" / "metrics.jsonl"));

    // config echo carries the paper-default keys even when unset on the command line
    json echo = json::parse(slurp(tmp / "run" / "run_config.json"));
    CHECK(echo.at("config").at("train.lr0") == "0.0003");
    CHECK(echo.at("config").at("train.lambda") == "5");

    std::string ckpt = (tmp / "run" / "checkpoint_final.ckpt").string();
    CHECK(run("eval-retrieval --checkpoint " + ckpt + " --manifest " +
              (tmp / "data" / "test.jsonl").string() + " --out " + (tmp / "evr").string()) == 0);
    json retr = json::parse(slurp(tmp / "evr" / "retrieval.json"));
    CHECK(retr.at("i2t").contains("R@1"));
    CHECK(retr.at("i2t").contains("R@40"));
    CHECK(retr.at("t2i").contains("R@5"));

    CHECK(run("eval-ground --checkpoint " + ckpt + " --manifest " +
              (tmp / "data" / "test.jsonl").string() + " --out " + (tmp / "evg").string()) == 0);
    json ground = json::parse(slurp(tmp / "evg" / "grounding.json"));
    CHECK(ground.contains("RoL"));
    CHECK(ground.contains("F05"));
    CHECK(ground.at("counts").contains("n_malformed"));

    CHECK(run("icl-ground --checkpoint " + ckpt + " --manifest " +
              (tmp / "data" / "test.jsonl").string() + " --pool " +
              (tmp / "data" / "pool.jsonl").string() + " --k 2 --trace trace.jsonl --out " +
              (tmp / "icl").string()) == 0);
    CHECK(fs::exists(tmp / "icl" / "trace.jsonl"));

    // icl-ground with k 0 equals plain grounding metrics
    CHECK(run("icl-ground --checkpoint " + ckpt + " --manifest " +
              (tmp / "data" / "test.jsonl").string() + " --pool " +
              (tmp / "data" / "pool.jsonl").string() + " --k 0 --out " +
              (tmp / "icl0").string()) == 0);
    json g0 = json::parse(slurp(tmp / "icl0" / "grounding.json"));
    CHECK(g0.at("F05") == ground.at("F05"));
    CHECK(g0.at("RoL") == ground.at("RoL"));

    // missing checkpoint -> runtime failure (1)
    CHECK(run("eval-retrieval --checkpoint /nonexistent.ckpt --manifest " +
              (tmp / "data" / "test.jsonl").string() + " --out " + (tmp / "evx").string()) == 1);
    // missing required option -> config error (2)
    CHECK(run("eval-retrieval --manifest " + (tmp / "data" / "test.jsonl").string() + " --out " +
              (tmp / "evy").string()) == 2);

    fs::remove_all(tmp);
}

TEST_CASE("fuse-boxes CLI over a manifest") {
    fs::path tmp = fs::temp_directory_path() / "lofi_cli_fuse";
    fs::remove_all(tmp);
    REQUIRE(run("gen-data --seed 3 --train 5 --out " + (tmp / "data").string() +
                " --set gen.image_w=32 --set gen.image_h=32 --set gen.max_objects=3 "
                "--set gen.p_nobox=0") == 0);
    CHECK(run("fuse-boxes --input " + (tmp / "data" / "train.jsonl").string() + " --output " +
              (tmp / "fused.jsonl").string() + " --scope sentence") == 0);
    CHECK(fs::exists(tmp / "fused.jsonl"));

    std::ifstream in(tmp / "fused.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(in, line))
        if (!line.empty()) {
            json rec = json::parse(line);
            CHECK(rec.contains("boxes"));
            ++lines;
        }
    CHECK(lines == 5);

    CHECK(run("fuse-boxes --input " + (tmp / "data" / "train.jsonl").string() + " --output " +
              (tmp / "fused2.jsonl").string() + " --scope bogus") == 2);
    fs::remove_all(tmp);
}

TEST_CASE("LOFI_OUT overrides relative output roots") {
    fs::path tmp = fs::temp_directory_path() / "lofi_cli_outroot";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    std::string cmd = "LOFI_OUT=" + tmp.string() + " " + lofi_bin() +
                      " gen-data --seed 1 --train 2 --out sub/data"
                      " --set gen.image_w=32 --set gen.image_h=32 --set gen.max_objects=1 "
                      ">/dev/null 2>&1";
    CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 0);
    CHECK(fs::exists(tmp / "sub" / "data" / "train.jsonl"));
    fs::remove_all(tmp);
}
