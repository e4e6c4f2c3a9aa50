#include "lofi/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "lofi/iclground.hpp"
#include "lofi/retrieval.hpp"

namespace lofi {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

double cosine_lr(int step, int total_steps, double lr0) {
    if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be > 0");
    if (step < 0 || step > total_steps) throw std::invalid_argument("cosine_lr: step out of range");
    return lr0 * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
}

void Adam::step(ParamStore& store, const GradSink& grads, double lr) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& p : store.items) {
        if (!p->trainable) continue;
        if (p->m.size() != p->w.size()) {
            p->m.resize(p->w.rows, p->w.cols);
            p->v.resize(p->w.rows, p->w.cols);
        }
        const Mat& g = grads.g[static_cast<size_t>(p->index)];
        for (size_t i = 0; i < p->w.size(); ++i) {
            double gi = g.a[i];
            p->m.a[i] = beta1 * p->m.a[i] + (1.0 - beta1) * gi;
            p->v.a[i] = beta2 * p->v.a[i] + (1.0 - beta2) * gi * gi;
            double mhat = p->m.a[i] / bc1;
            double vhat = p->v.a[i] / bc2;
            p->w.a[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

LossVariant variant_from_string(const std::string& s) {
    if (s == "full") return LossVariant::full;
    if (s == "no_gd") return LossVariant::no_gd;
    if (s == "sigmoid_only") return LossVariant::sigmoid_only;
    throw std::invalid_argument("unknown loss variant: " + s);
}

const char* variant_to_string(LossVariant v) {
    switch (v) {
        case LossVariant::full: return "full";
        case LossVariant::no_gd: return "no_gd";
        case LossVariant::sigmoid_only: return "sigmoid_only";
    }
    return "?";
}

TrainResult train(const TrainConfig& cfg) {
    if (cfg.epochs <= 0 || cfg.batch_size <= 1 || cfg.lr0 <= 0 || cfg.lambda < 0)
        throw std::invalid_argument("train: invalid config");
    std::vector<synth::Sample> samples = synth::load_dataset(cfg.manifest_path);
    if (static_cast<int>(samples.size()) < cfg.batch_size)
        throw std::invalid_argument("train: dataset smaller than one batch");

    fs::create_directories(cfg.out_dir);
    std::string metrics_path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
    std::ofstream log(metrics_path);
    if (!log) throw std::runtime_error("train: cannot write " + metrics_path);

    auto state = ModelState::create(cfg.model, cfg.prompts, cfg.seed);
    if (cfg.lora) state->apply_lora(*cfg.lora);

    const int n = static_cast<int>(samples.size());
    const int batches_per_epoch = n / cfg.batch_size;  // equal-size batches, tail dropped
    if (batches_per_epoch == 0) throw std::invalid_argument("train: dataset smaller than one batch");
    int total_steps = cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * batches_per_epoch;
    int epochs = cfg.max_steps > 0
                     ? (cfg.max_steps + batches_per_epoch - 1) / batches_per_epoch
                     : cfg.epochs;

    std::vector<GradSink> sinks(static_cast<size_t>(cfg.batch_size));
    for (auto& s : sinks) s.init(state->store);
    GradSink total_grads;
    total_grads.init(state->store);
    Adam adam;
    adam.beta1 = cfg.adam_beta1;
    adam.beta2 = cfg.adam_beta2;
    adam.eps = cfg.adam_eps;

    TrainResult result;
    int step = 0;
    auto t0 = std::chrono::steady_clock::now();
    for (int epoch = 0; epoch < epochs && step < total_steps; ++epoch) {
        // seeded epoch shuffle
        std::vector<int> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
        Rng erng(mix_seed(cfg.seed, static_cast<uint64_t>(epoch), 31));
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)],
                      order[static_cast<size_t>(erng.uniform_int(0, i))]);

        for (int bi = 0; bi < batches_per_epoch && step < total_steps; ++bi, ++step) {
            std::vector<const synth::Sample*> batch_samples;
            batch_samples.reserve(static_cast<size_t>(cfg.batch_size));
            for (int i = 0; i < cfg.batch_size; ++i)
                batch_samples.push_back(
                    &samples[static_cast<size_t>(order[static_cast<size_t>(bi * cfg.batch_size + i)])]);

            uint64_t step_seed = mix_seed(cfg.seed, static_cast<uint64_t>(step), 33);
            LossBatch batch = build_loss_batch(batch_samples, step_seed, cfg.sent_min, cfg.sent_max);

            for (auto& s : sinks) s.zero();
            BatchLoss bl = total_loss(*state, batch, cfg.lambda, step_seed, cfg.tau_strategy,
                                      cfg.loss_variant, &sinks);
            // τ ∈ {g, d} must never be drawn for box-free samples
            for (int i = 0; i < batch.size(); ++i)
                if (!batch.items[static_cast<size_t>(i)].has_boxes &&
                    bl.taus.taus[static_cast<size_t>(i)] != 'c')
                    throw std::logic_error("train: tau sampled on box-free sample");

            double lr = cosine_lr(step, total_steps, cfg.lr0);
            if (!std::isfinite(bl.total)) {
                json abort_rec;
                abort_rec["event"] = "abort";
                abort_rec["step"] = step;
                abort_rec["batch_id"] = step;  // step index identifies the batch deterministically
                log << abort_rec.dump() << "\n";
                log.flush();
                throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
            }

            // reduce per-sample sinks in sample order (deterministic)
            total_grads.zero();
            for (const auto& s : sinks) total_grads.add_from(s);
            if (cfg.grad_clip > 0) {
                double norm = total_grads.global_norm(state->store);
                if (norm > cfg.grad_clip) {
                    double scale = cfg.grad_clip / norm;
                    for (auto& m : total_grads.g)
                        for (double& v : m.a) v *= scale;
                }
            }
            adam.step(state->store, total_grads, lr);

            auto now = std::chrono::steady_clock::now();
            json rec;
            rec["step"] = step;
            rec["epoch"] = epoch;
            rec["loss"] = bl.total;
            rec["sigmoid"] = bl.sigmoid_part;
            rec["autoregressive"] = bl.autoregressive_part;
            rec["tau"] = bl.taus.str();
            rec["lr"] = lr;
            rec["wall_ms"] =
                std::chrono::duration_cast<std::chrono::milliseconds>(now - t0).count();
            log << rec.dump() << "\n";
            result.final_loss = bl.total;
        }

        std::string epoch_path =
            (fs::path(cfg.out_dir) / ("checkpoint_epoch" + std::to_string(epoch) + ".ckpt")).string();
        save_checkpoint(*state, epoch_path, cfg.config_echo);
    }

    result.steps = step;
    result.checkpoint_path = (fs::path(cfg.out_dir) / "checkpoint_final.ckpt").string();
    save_checkpoint(*state, result.checkpoint_path, cfg.config_echo);
    result.checkpoint_digest = file_digest(result.checkpoint_path);
    result.metrics_path = metrics_path;
    log.flush();
    return result;
}

// ---------------------------------------------------------------------------
// ablation harness

std::string AblationReport::to_json_string() const {
    auto row_json = [](const AblationRow& r) {
        return json{{"variant", r.variant}, {"lambda", r.lambda},   {"seed", r.seed},
                    {"R@1", r.r1},          {"R@40", r.r40},        {"F05", r.f05},
                    {"RoL", r.rol},         {"ground_mode", r.ground_mode},
                    {"checkpoint", r.checkpoint}};
    };
    json j;
    j["rows"] = json::array();
    for (const auto& r : rows) j["rows"].push_back(row_json(r));
    j["means"] = json::array();
    for (const auto& r : means) j["means"].push_back(row_json(r));
    return j.dump(2);
}

AblationReport ablate(const TrainConfig& base, const AblateSpec& spec) {
    if (spec.variants.size() + spec.lambdas.size() < 2)
        throw std::invalid_argument("ablate: need >= 2 variants or >= 2 lambda values");
    if (spec.seeds.empty()) throw std::invalid_argument("ablate: need at least one seed");

    std::vector<synth::Sample> eval_samples = synth::load_dataset(spec.eval_manifest);
    std::vector<synth::Sample> pool_samples;
    if (!spec.pool_manifest.empty()) pool_samples = synth::load_dataset(spec.pool_manifest);

    struct Condition {
        std::string variant;
        double lambda;
    };
    std::vector<Condition> conditions;
    for (const auto& v : spec.variants) conditions.push_back({v, base.lambda});
    for (double l : spec.lambdas) conditions.push_back({"full", l});

    AblationReport report;
    for (const auto& cond : conditions) {
        AblationRow mean_row;
        mean_row.variant = cond.variant;
        mean_row.lambda = cond.lambda;
        int count = 0;
        for (uint64_t seed : spec.seeds) {
            TrainConfig cfg = base;
            cfg.loss_variant = variant_from_string(cond.variant);
            cfg.lambda = cond.lambda;
            cfg.seed = seed;
            cfg.out_dir = (fs::path(base.out_dir) /
                           (cond.variant + "_lambda" + std::to_string(cond.lambda) + "_seed" +
                            std::to_string(seed)))
                              .string();
            TrainResult tr = train(cfg);
            auto state = load_checkpoint(tr.checkpoint_path);

            AblationRow row;
            row.variant = cond.variant;
            row.lambda = cond.lambda;
            row.seed = seed;
            row.checkpoint = tr.checkpoint_path;

            RetrievalEval rev = evaluate_retrieval(*state, eval_samples, {1, 40});
            row.r1 = rev.i2t.at(1);
            row.r40 = rev.i2t.at(40);

            // grounding-trained conditions are evaluated directly, the rest via ICL
            bool trains_grounding = cfg.loss_variant == LossVariant::full && cfg.lambda > 0;
            GroundEvalOptions gopt;
            gopt.k = trains_grounding ? 0 : spec.icl_k;
            EvalReport ground;
            if (gopt.k > 0) {
                if (pool_samples.empty())
                    throw std::invalid_argument("ablate: ICL grounding requires a pool manifest");
                IclPool pool = build_icl_pool(pool_samples, *state, *state);
                ground = evaluate_grounding(*state, eval_samples, &pool, gopt);
            } else {
                ground = evaluate_grounding(*state, eval_samples, nullptr, gopt);
            }
            row.f05 = ground.F05;
            row.rol = ground.RoL;
            row.ground_mode = gopt.k > 0 ? "icl" : "direct";

            mean_row.r1 += row.r1;
            mean_row.r40 += row.r40;
            mean_row.f05 += row.f05;
            mean_row.rol += row.rol;
            mean_row.ground_mode = row.ground_mode;
            ++count;
            report.rows.push_back(std::move(row));
        }
        mean_row.r1 /= count;
        mean_row.r40 /= count;
        mean_row.f05 /= count;
        mean_row.rol /= count;
        report.means.push_back(std::move(mean_row));
    }
    return report;
}

}  // namespace lofi
