#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lofi/boxkit.hpp"
#include "lofi/evalmetrics.hpp"
#include "lofi/model.hpp"
#include "lofi/retrieval.hpp"
#include "lofi/synthgen.hpp"

namespace lofi {

// One candidate demonstration: a box-bearing (image, sentence, boxes) triple.
// A pool sample with several box-bearing sentences contributes one triple per
// sentence.
struct DemoTriple {
    const synth::Sample* sample = nullptr;
    int sentence = -1;
    std::string id;  // "<sample_id>#<sentence>"
    double score = 0;
};

struct DemonstrationSet {
    std::vector<DemoTriple> triples;  // descending retrieval score
};

// Demonstration pool with per-sample image embeddings (from the selector
// encoder) and per-sample pooled tokens (from the demonstrator model).
struct IclPool {
    std::vector<const synth::Sample*> samples;
    std::vector<std::pair<int, int>> triples;  // (sample index, sentence index)
    EmbeddingIndex index;                      // one entry per triple
    std::vector<Mat> pooled;                   // per sample, from the demonstrator
};

// selector provides E_I for retrieval; demonstrator provides the pooled tokens
// placed in the decoder context (they may be the same model)
IclPool build_icl_pool(const std::vector<synth::Sample>& pool_samples,
                       const ModelState& selector, const ModelState& demonstrator);

// Top-k triples by cos(E_I(query), E_I(pool image)). exclude_id is the eval
// leakage guard: triples of that sample id are never returned.
DemonstrationSet select_demonstrations(const Mat& query_embed, const IclPool& pool, int k,
                                       const std::string& exclude_id = "");

// Per-demo blocks [pooled, prompt, sentence, SEP, boxes, SEP] then the query
// block [pooled, prompt, sentence, SEP]. Drops lowest-ranked demos on context
// overflow, reporting how many were dropped.
Condition assemble_context(const ModelState& model, const IclPool& pool,
                           const DemonstrationSet& demos, const Mat& query_pooled,
                           const std::string& query_sentence, int gen_reserve, int* dropped);

struct IclPrediction {
    std::vector<NormBox> boxes;
    bool malformed = false;
    std::string raw;
    int demos_used = 0;
    int context_len = 0;
};

IclPrediction ground_with_icl(const ModelState& model, const IclPool& pool,
                              const DemonstrationSet& demos, const GrayImage& query_image,
                              const std::string& query_sentence, int max_gen = 48);

// Grounding evaluation over a sample set. k = 0 evaluates plain (no-context)
// grounding; k > 0 retrieves demonstrations from the pool with the selector
// encoder. The query sample id is always excluded from the demonstrations.
struct GroundEvalOptions {
    int k = 0;
    int max_gen = 48;
    const ModelState* selector = nullptr;  // defaults to the demonstrator model
    std::string trace_path;                // optional JSONL per-query trace
};

EvalReport evaluate_grounding(const ModelState& model, const std::vector<synth::Sample>& eval_samples,
                              const IclPool* pool, const GroundEvalOptions& opt);

}  // namespace lofi
