#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lofi/boxkit.hpp"
#include "lofi/model.hpp"
#include "lofi/synthgen.hpp"

namespace lofi {

// Pairwise sigmoid contrastive loss: mean over all B² (image, text) pairs of
// -log σ(δ·(scale·zᵢ·zₜ + bias)), diagonal pairs positive. Rows must be unit.
double sigmoid_loss(const Mat& z_img, const Mat& z_txt, double scale, double bias);

// Same, also accumulating gradients (of the loss itself, unweighted).
double sigmoid_loss_grad(const Mat& z_img, const Mat& z_txt, double scale, double bias, Mat& g_img,
                         Mat& g_txt, double& g_scale, double& g_bias);

// condition token runs appended after the pooled image tokens
std::vector<int> caption_cond_tokens(const ModelState& state);
std::vector<int> ground_cond_tokens(const ModelState& state, const std::string& sentence);
std::vector<int> dense_cond_tokens(const ModelState& state, const std::string& box_string);

// serialize a sentence's pixel boxes into the normalized grounding target
std::string boxes_to_target_string(const std::vector<PixelBox>& boxes, int image_w, int image_h);

// Per-token mean NLL objectives (inference path, no gradients). Prompts come
// from state.prompts.
double captioning_loss(const ModelState& state, const GrayImage& image, const std::string& text);
double grounding_loss(const ModelState& state, const GrayImage& image, const std::string& sentence,
                      const std::vector<PixelBox>& boxes);
double dense_captioning_loss(const ModelState& state, const GrayImage& image,
                             const std::vector<PixelBox>& boxes, const std::string& sentence);

// ---------------------------------------------------------------------------
// batched total loss

struct LossBatch {
    struct Item {
        const synth::Sample* sample = nullptr;
        std::string text;  // sampled sentence subset, joined
        bool has_boxes = false;
        int ground_sentence = -1;  // sentence index used for L_g / L_d
        std::string box_string;    // normalized box target for that sentence
    };
    std::vector<Item> items;
    Mat delta;  // B×B sign matrix, +1 on the diagonal

    int size() const { return static_cast<int>(items.size()); }
};

// Samples each item's contrastive text (paper-style 4..8 sentence subsets,
// clamped to report length) and the grounding sentence. Deterministic in seed.
LossBatch build_loss_batch(const std::vector<const synth::Sample*>& samples, uint64_t seed,
                           int n_min = 4, int n_max = 8);

struct TauChoice {
    std::vector<char> taus;  // per sample: c, g, d ('s' when the summed strategy is active)

    std::string str() const { return std::string(taus.begin(), taus.end()); }
};

enum class TauStrategy { sampled, summed };
enum class LossVariant { full, no_gd, sigmoid_only };

struct BatchLoss {
    double total = 0;
    double sigmoid_part = 0;
    double autoregressive_part = 0;  // mean over samples of L_τ
    TauChoice taus;
};

// L_t = L_s + λ · mean_i L_τ(i). τ per box-bearing sample: c w.p. 1/2,
// g w.p. 1/4, d w.p. 1/4; always c without boxes. Deterministic in seed.
// With gradients when sinks != nullptr (one sink per sample, reduced by the
// caller in sample order).
BatchLoss total_loss(const ModelState& state, const LossBatch& batch, double lambda, uint64_t seed,
                     TauStrategy strategy = TauStrategy::sampled,
                     LossVariant variant = LossVariant::full,
                     std::vector<GradSink>* sinks = nullptr);

// the per-sample τ draw used by total_loss (exposed for its frequency tests)
char draw_tau(uint64_t seed, int sample_index, bool has_boxes);

// Single-sample objective with full parameter gradients (image encoder,
// pooler, decoder). Gradient-check harness hook; returns per-token mean NLL.
double objective_with_grads(const ModelState& state, const LossBatch::Item& item, char tau,
                            GradSink& sink);

}  // namespace lofi
