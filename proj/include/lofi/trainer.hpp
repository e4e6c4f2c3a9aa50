#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lofi/losses.hpp"
#include "lofi/model.hpp"
#include "lofi/synthgen.hpp"

namespace lofi {

struct TrainConfig {
    int epochs = 10;
    int batch_size = 16;
    double lr0 = 3e-4;
    double lambda = 5.0;
    uint64_t seed = 0;
    LossVariant loss_variant = LossVariant::full;
    TauStrategy tau_strategy = TauStrategy::sampled;
    std::optional<LoraSpec> lora;
    ModelConfig model;
    PromptSet prompts;
    std::string manifest_path;
    std::string out_dir;

    // optimizer (documented defaults; the schedule and lr0 are the pinned part)
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;  // global norm, 0 disables

    int sent_min = 4;   // contrastive sentence subset bounds
    int sent_max = 8;
    int max_steps = 0;  // 0 = epochs * batches; > 0 caps total steps (overfit harness)
    std::string config_echo;  // resolved config text mirrored into artifacts
};

struct TrainResult {
    std::string checkpoint_path;
    std::string metrics_path;
    uint64_t checkpoint_digest = 0;
    double final_loss = 0;
    int steps = 0;
};

// lr0 · ½(1 + cos(π·step/total_steps))
double cosine_lr(int step, int total_steps, double lr0);

// Seeded training loop; writes per-epoch checkpoints, a final checkpoint, and
// a JSON-lines metrics log. Aborts (throws) on a non-finite loss, recording
// the offending batch id in the log.
TrainResult train(const TrainConfig& cfg);

// Adam over the trainable parameters of a store (exposed for harnesses).
struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long t = 0;

    void step(ParamStore& store, const GradSink& grads, double lr);
};

// ---------------------------------------------------------------------------
// ablation harness

struct AblationRow {
    std::string variant;  // full | no_gd | sigmoid_only
    double lambda = 0;
    uint64_t seed = 0;
    double r1 = 0, r40 = 0, f05 = 0, rol = 0;
    std::string ground_mode;  // direct | icl
    std::string checkpoint;
};

struct AblationReport {
    std::vector<AblationRow> rows;
    std::vector<AblationRow> means;  // one aggregate row per (variant, lambda)

    std::string to_json_string() const;
};

struct AblateSpec {
    std::vector<std::string> variants;  // loss variants to train
    std::vector<double> lambdas;        // λ grid (trained with the full variant)
    std::vector<uint64_t> seeds;
    std::string eval_manifest;  // held-out samples for retrieval + grounding
    std::string pool_manifest;  // demonstration pool for ICL-mode grounding
    int icl_k = 4;
};

// Trains every (condition, seed) and evaluates retrieval R@{1,40} plus
// grounding F@0.5 / Ro-L. Conditions whose training includes the grounding
// loss are evaluated with plain grounding; the rest go through ICL (they have
// no grounding head training).
AblationReport ablate(const TrainConfig& base, const AblateSpec& spec);

LossVariant variant_from_string(const std::string& s);
const char* variant_to_string(LossVariant v);

}  // namespace lofi
