// Command-line entry point: synthetic data generation, training, retrieval
// and grounding evaluation, ICL grounding, ablations, and box fusion.
#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "lofi/config.hpp"
#include "lofi/iclground.hpp"
#include "lofi/losses.hpp"
#include "lofi/retrieval.hpp"
#include "lofi/synthgen.hpp"
#include "lofi/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace lofi;

namespace {

std::string resolve_out(const std::string& path) {
    const char* root = std::getenv("LOFI_OUT");
    if (root && *root && fs::path(path).is_relative()) return (fs::path(root) / path).string();
    return path;
}

std::string join_args(int argc, char** argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) {
        if (i) s += ' ';
        s += argv[i];
    }
    return s;
}

void write_run_echo(const std::string& out_dir, const std::string& echo) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    std::ofstream f(fs::path(out_dir) / "run_config.json");
    if (ec || !f) throw std::invalid_argument("cannot write into output directory " + out_dir);
    f << echo << "\n";
}

KvConfig load_kv(const std::string& config_path, const std::vector<std::string>& overrides) {
    KvConfig kv;
    if (!config_path.empty()) kv = KvConfig::from_file(config_path);
    for (const auto& o : overrides) kv.apply_override(o);
    return kv;
}

json report_header(const std::string& echo) { return json::parse(echo); }

int cmd_gen_data(const KvConfig& kv, const std::string& cmdline) {
    uint64_t seed = kv.get_u64("gen.seed", 0);
    int n_train = kv.get_int("gen.train", 0);
    int n_test = kv.get_int("gen.test", 0);
    int n_pool = kv.get_int("gen.pool", 0);
    std::string out_dir = resolve_out(kv.get("gen.out", "data"));
    if (n_train + n_test + n_pool <= 0)
        throw std::invalid_argument("gen-data: nothing to generate (set gen.train/test/pool)");

    synth::GenConfig gen = gen_config_from_kv(kv);
    KvConfig resolved = kv;
    resolve_into_kv(resolved, gen);
    std::string echo = make_run_echo(cmdline, resolved, seed);
    write_run_echo(out_dir, echo);

    uint64_t base = 0;
    for (auto [split, count] : {std::pair<const char*, int>{"train", n_train},
                                {"test", n_test},
                                {"pool", n_pool}}) {
        if (count == 0) continue;
        synth::DatasetConfig dc;
        dc.split = split;
        dc.count = count;
        dc.seed = seed;
        dc.base_index = base;
        dc.out_dir = out_dir;
        dc.gen = gen;
        synth::DatasetManifest man = synth::build_dataset(dc);
        std::cout << split << ": " << man.samples.size() << " samples -> " << man.manifest_path
                  << "\n";
        base += static_cast<uint64_t>(count);
    }
    return 0;
}

int cmd_train(const KvConfig& kv, const std::string& cmdline) {
    TrainConfig cfg = train_config_from_kv(kv);
    cfg.manifest_path = kv.get("train.manifest", "");
    if (cfg.manifest_path.empty()) throw std::invalid_argument("train: set train.manifest");
    cfg.out_dir = resolve_out(kv.get("train.out", "runs/train"));
    KvConfig resolved = kv;
    resolve_into_kv(resolved, cfg);
    cfg.config_echo = make_run_echo(cmdline, resolved, cfg.seed);
    write_run_echo(cfg.out_dir, cfg.config_echo);

    TrainResult r = train(cfg);
    json out;
    out["checkpoint"] = r.checkpoint_path;
    out["metrics"] = r.metrics_path;
    out["checkpoint_digest"] = hex64(r.checkpoint_digest);
    out["final_loss"] = r.final_loss;
    out["steps"] = r.steps;
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_eval_retrieval(const KvConfig& kv, const std::string& cmdline) {
    std::string ckpt = kv.get("eval.checkpoint", "");
    std::string manifest = kv.get("eval.manifest", "");
    if (ckpt.empty() || manifest.empty())
        throw std::invalid_argument("eval-retrieval: set eval.checkpoint and eval.manifest");
    std::string out_dir = resolve_out(kv.get("eval.out", "runs/eval_retrieval"));
    uint64_t seed = kv.get_u64("eval.seed", 0);
    std::string echo = make_run_echo(cmdline, kv, seed);
    write_run_echo(out_dir, echo);

    auto state = load_checkpoint(ckpt);
    auto samples = synth::load_dataset(manifest);
    RetrievalEval ev = evaluate_retrieval(*state, samples);

    json out;
    out["run"] = report_header(echo);
    for (auto [dir_name, table] :
         {std::pair<const char*, const std::map<int, double>*>{"i2t", &ev.i2t},
          {"t2i", &ev.t2i}}) {
        json d;
        d["direction"] = dir_name;
        for (const auto& [k, v] : *table) d["R@" + std::to_string(k)] = v;
        out[dir_name] = d;
    }
    std::ofstream f(fs::path(out_dir) / "retrieval.json");
    f << out.dump(2) << "\n";
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_eval_ground(const KvConfig& kv, const std::string& cmdline, bool icl_mode) {
    std::string ckpt = kv.get("eval.checkpoint", "");
    std::string manifest = kv.get("eval.manifest", "");
    if (ckpt.empty() || manifest.empty())
        throw std::invalid_argument("eval-ground: set eval.checkpoint and eval.manifest");
    std::string out_dir =
        resolve_out(kv.get("eval.out", icl_mode ? "runs/icl_ground" : "runs/eval_ground"));
    int k = kv.get_int("eval.k", icl_mode ? 4 : 0);
    uint64_t seed = kv.get_u64("eval.seed", 0);
    std::string echo = make_run_echo(cmdline, kv, seed);
    write_run_echo(out_dir, echo);

    auto state = load_checkpoint(ckpt);
    auto samples = synth::load_dataset(manifest);

    GroundEvalOptions opt;
    opt.k = k;
    opt.max_gen = kv.get_int("eval.max_gen", 48);
    std::string trace = kv.get("eval.trace", "");
    if (!trace.empty()) opt.trace_path = (fs::path(out_dir) / trace).string();

    std::unique_ptr<ModelState> selector;
    if (kv.has("eval.selector_checkpoint")) {
        selector = load_checkpoint(kv.get("eval.selector_checkpoint", ""));
        opt.selector = selector.get();
    }

    EvalReport rep;
    if (k > 0) {
        std::string pool_path = kv.get("eval.pool", "");
        if (pool_path.empty()) throw std::invalid_argument("grounding with k > 0: set eval.pool");
        auto pool_samples = synth::load_dataset(pool_path);
        IclPool pool =
            build_icl_pool(pool_samples, opt.selector ? *opt.selector : *state, *state);
        rep = evaluate_grounding(*state, samples, &pool, opt);
    } else {
        rep = evaluate_grounding(*state, samples, nullptr, opt);
    }
    rep.config_echo = echo;

    std::ofstream f(fs::path(out_dir) / "grounding.json");
    f << rep.to_json_string() << "\n";
    std::cout << rep.to_json_string() << "\n";
    return 0;
}

int cmd_ablate(const KvConfig& kv, const std::string& cmdline) {
    TrainConfig base = train_config_from_kv(kv);
    base.manifest_path = kv.get("train.manifest", "");
    if (base.manifest_path.empty()) throw std::invalid_argument("ablate: set train.manifest");
    base.out_dir = resolve_out(kv.get("ablate.out", "runs/ablate"));
    KvConfig resolved = kv;
    resolve_into_kv(resolved, base);
    base.config_echo = make_run_echo(cmdline, resolved, base.seed);
    write_run_echo(base.out_dir, base.config_echo);

    AblateSpec spec;
    spec.eval_manifest = kv.get("ablate.eval_manifest", "");
    spec.pool_manifest = kv.get("ablate.pool_manifest", "");
    spec.icl_k = kv.get_int("ablate.icl_k", 4);
    if (spec.eval_manifest.empty()) throw std::invalid_argument("ablate: set ablate.eval_manifest");

    auto split_list = [](const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : s) {
            if (c == ',') {
                if (!cur.empty()) out.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        if (!cur.empty()) out.push_back(cur);
        return out;
    };
    for (const auto& v : split_list(kv.get("ablate.variants", ""))) spec.variants.push_back(v);
    for (const auto& l : split_list(kv.get("ablate.lambdas", ""))) spec.lambdas.push_back(std::stod(l));
    for (const auto& s : split_list(kv.get("ablate.seeds", "0"))) spec.seeds.push_back(std::stoull(s));

    AblationReport rep = ablate(base, spec);
    std::ofstream f(fs::path(base.out_dir) / "ablation.json");
    f << rep.to_json_string() << "\n";
    std::cout << rep.to_json_string() << "\n";
    return 0;
}

int cmd_fuse_boxes(const KvConfig& kv, const std::string& cmdline) {
    std::string input = kv.get("fuse.input", "");
    std::string output = resolve_out(kv.get("fuse.output", ""));
    if (input.empty() || output.empty())
        throw std::invalid_argument("fuse-boxes: set fuse.input and fuse.output");
    double thresh = kv.get_double("fuse.iou_thresh", 0.55);
    std::string scope = kv.get("fuse.scope", "sentence");
    if (scope != "sentence" && scope != "sample")
        throw std::invalid_argument("fuse-boxes: scope must be sentence or sample");

    auto samples = synth::load_dataset(input);
    fs::create_directories(fs::path(output).parent_path().empty()
                               ? "."
                               : fs::path(output).parent_path().string());
    std::ofstream out(output);
    if (!out) throw std::invalid_argument("fuse-boxes: cannot write " + output);

    for (const auto& s : samples) {
        json rec;
        rec["id"] = s.id;
        rec["image_path"] = s.image_path;
        rec["sentences"] = s.sentences;
        if (!s.has_boxes) {
            rec["boxes"] = nullptr;
        } else if (scope == "sentence") {
            json all = json::array();
            for (const auto& lst : s.boxes) {
                json fused = json::array();
                for (const auto& b : weighted_box_fusion(lst, {}, thresh))
                    fused.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
                all.push_back(fused);
            }
            rec["boxes"] = all;
        } else {
            std::vector<PixelBox> merged;
            for (const auto& lst : s.boxes) merged.insert(merged.end(), lst.begin(), lst.end());
            json fused = json::array();
            for (const auto& b : weighted_box_fusion(merged, {}, thresh))
                fused.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
            rec["fused_boxes"] = fused;
        }
        out << rec.dump() << "\n";
    }
    std::cout << "fused " << samples.size() << " records -> " << output << "\n";
    (void)cmdline;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lofi: joint sigmoid + captioning + location-aware captioning training on "
                 "synthetic image-report-box triplets, with retrieval-based in-context grounding"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "key = value config file");
    app.add_option("--set", overrides, "override: dotted.key=value (repeatable)");

    struct Cmd {
        CLI::App* sub;
        std::vector<std::pair<std::string, std::string>> direct;  // flag -> config key
        std::map<std::string, std::string> captured;
    };
    std::vector<std::shared_ptr<Cmd>> cmds;

    auto add_cmd = [&](const std::string& name, const std::string& desc,
                       std::vector<std::tuple<std::string, std::string, std::string>> flags) {
        auto c = std::make_shared<Cmd>();
        c->sub = app.add_subcommand(name, desc);
        c->sub->fallthrough();  // global --config/--set may follow the subcommand
        for (auto& [flag, key, help] : flags) {
            std::string k = key;
            auto cc = c;
            c->sub
                ->add_option_function<std::string>(
                    flag, [cc, k](const std::string& v) { cc->captured[k] = v; }, help)
                ->take_last();
        }
        cmds.push_back(c);
        return c;
    };

    auto gen = add_cmd("gen-data", "generate synthetic image-report-box datasets",
                       {{"--seed", "gen.seed", "master seed"},
                        {"--train", "gen.train", "train split size"},
                        {"--test", "gen.test", "test split size"},
                        {"--pool", "gen.pool", "pool split size"},
                        {"--p-nobox", "gen.p_nobox", "fraction of samples without boxes"},
                        {"--min-objects", "gen.min_objects", "min objects per scene"},
                        {"--max-objects", "gen.max_objects", "max objects per scene"},
                        {"--out", "gen.out", "output directory"}});
    auto tr = add_cmd("train", "train a model on a generated dataset",
                      {{"--seed", "train.seed", "training seed"},
                       {"--manifest", "train.manifest", "train manifest path"},
                       {"--epochs", "train.epochs", "epochs"},
                       {"--batch-size", "train.batch_size", "batch size"},
                       {"--lr0", "train.lr0", "initial learning rate"},
                       {"--lambda", "train.lambda", "autoregressive loss weight"},
                       {"--loss-variant", "train.loss_variant", "full | no_gd | sigmoid_only"},
                       {"--max-steps", "train.max_steps", "hard step cap (0 = epochs)"},
                       {"--lora", "train.lora", "true to train with LoRA adapters"},
                       {"--out", "train.out", "output directory"}});
    auto evr = add_cmd("eval-retrieval", "image<->text retrieval R@K on a manifest",
                       {{"--checkpoint", "eval.checkpoint", "model checkpoint"},
                        {"--manifest", "eval.manifest", "eval manifest"},
                        {"--seed", "eval.seed", "seed echoed into the report"},
                        {"--out", "eval.out", "output directory"}});
    auto evg = add_cmd("eval-ground", "phrase grounding metrics on a manifest",
                       {{"--checkpoint", "eval.checkpoint", "model checkpoint"},
                        {"--manifest", "eval.manifest", "eval manifest"},
                        {"--pool", "eval.pool", "demo pool manifest (k > 0)"},
                        {"--k", "eval.k", "demonstrations per query (default 0)"},
                        {"--selector", "eval.selector_checkpoint", "separate selector checkpoint"},
                        {"--trace", "eval.trace", "per-query trace file name"},
                        {"--seed", "eval.seed", "seed echoed into the report"},
                        {"--out", "eval.out", "output directory"}});
    auto icl = add_cmd("icl-ground", "retrieval-based in-context grounding evaluation",
                       {{"--checkpoint", "eval.checkpoint", "model checkpoint"},
                        {"--manifest", "eval.manifest", "eval manifest"},
                        {"--pool", "eval.pool", "demo pool manifest"},
                        {"--k", "eval.k", "demonstrations per query (default 4)"},
                        {"--selector", "eval.selector_checkpoint", "separate selector checkpoint"},
                        {"--trace", "eval.trace", "per-query trace file name"},
                        {"--seed", "eval.seed", "seed echoed into the report"},
                        {"--out", "eval.out", "output directory"}});
    auto abl = add_cmd("ablate", "loss-variant and lambda ablations",
                       {{"--manifest", "train.manifest", "train manifest"},
                        {"--eval-manifest", "ablate.eval_manifest", "held-out manifest"},
                        {"--pool-manifest", "ablate.pool_manifest", "demo pool manifest"},
                        {"--variants", "ablate.variants", "comma list: full,no_gd,sigmoid_only"},
                        {"--lambdas", "ablate.lambdas", "comma list of lambda values"},
                        {"--seeds", "ablate.seeds", "comma list of seeds"},
                        {"--out", "ablate.out", "output directory"}});
    auto fus = add_cmd("fuse-boxes", "weighted box fusion over a manifest",
                       {{"--input", "fuse.input", "input manifest"},
                        {"--output", "fuse.output", "output path"},
                        {"--iou-thresh", "fuse.iou_thresh", "cluster threshold (default 0.55)"},
                        {"--scope", "fuse.scope", "sentence | sample"}});

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    std::string cmdline = join_args(argc, argv);
    try {
        KvConfig kv = load_kv(config_path, overrides);
        for (const auto& c : cmds)
            for (const auto& [k, v] : c->captured) kv.set(k, v);

        if (gen->sub->parsed()) return cmd_gen_data(kv, cmdline);
        if (tr->sub->parsed()) return cmd_train(kv, cmdline);
        if (evr->sub->parsed()) return cmd_eval_retrieval(kv, cmdline);
        if (evg->sub->parsed()) return cmd_eval_ground(kv, cmdline, false);
        if (icl->sub->parsed()) return cmd_eval_ground(kv, cmdline, true);
        if (abl->sub->parsed()) return cmd_ablate(kv, cmdline);
        if (fus->sub->parsed()) return cmd_fuse_boxes(kv, cmdline);
        std::cerr << "no subcommand\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
