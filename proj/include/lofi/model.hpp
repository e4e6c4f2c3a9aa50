#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lofi/common.hpp"
#include "lofi/png_io.hpp"
#include "lofi/tensor.hpp"
#include "lofi/tokenizer.hpp"

namespace lofi {

struct ModelConfig {
    int image_w = 128, image_h = 128, patch = 16;
    int d = 64;  // encoder width = contrastive embedding dim
    int enc_blocks = 2;
    int enc_heads = 4;
    int enc_dff = 128;
    int txt_max_len = 64;
    int d_dec = 64;  // decoder width
    int dec_blocks = 4;
    int dec_heads = 4;
    int dec_dff = 128;
    int pooled_tokens = 64;  // attention pooling queries
    int context_cap = 640;
    int attn_window = 0;          // decoder attention span, 0 = unlimited
    double alibi_max_exp = 8.0;   // head h slope = 2^(-alibi_max_exp*(h+1)/heads)
    double logit_scale_init = 10.0;
    double logit_bias_init = -10.0;
    bool literal_sigmoid = false;  // freeze scale=1 bias=0 (plain dot-product form)
    // image patch position embeddings start position-dominant so the pooler
    // can key on location from the first step
    double img_pos_init_std = 0.5;
    // fixed inverse softmax temperature on decoder logits; amplifies the
    // margin reachable per unit of weight movement in short training runs
    double logit_mult = 8.0;
    // same idea for attention scores (applied on top of 1/sqrt(head_dim))
    double attn_score_mult = 2.0;

    int patches_x() const { return image_w / patch; }
    int patches_y() const { return image_h / patch; }
    int n_patches() const { return patches_x() * patches_y(); }
};

struct LoraSpec {
    int encoder_rank = 16;
    int decoder_rank = 4;
    std::vector<std::string> encoder_targets = {"q", "k", "v", "o"};
    std::vector<std::string> decoder_targets = {"q", "v"};
    double scaling = 1.0;
};

struct Param {
    std::string name;
    Mat w;
    Mat m, v;  // Adam moments, allocated lazily by the optimizer
    bool trainable = true;
    int index = -1;
};

struct ParamStore {
    std::vector<std::unique_ptr<Param>> items;

    Param* create(const std::string& name, int rows, int cols);
    Param* find(const std::string& name) const;
    size_t scalar_count(bool trainable_only = false) const;
};

// Per-sample gradient buffer aligned with a ParamStore.
struct GradSink {
    std::vector<Mat> g;

    void init(const ParamStore& store);
    void zero();
    Mat& of(const Param* p) { return g[static_cast<size_t>(p->index)]; }
    const Mat& of(const Param* p) const { return g[static_cast<size_t>(p->index)]; }
    void add_from(const GradSink& other);
    double global_norm(const ParamStore& store) const;  // over trainable params
};

// ---------------------------------------------------------------------------
// layers

struct Linear {
    Param* W = nullptr;  // out×in
    Param* b = nullptr;
    Param* A = nullptr;  // LoRA factors: W + scale·B·A
    Param* B = nullptr;
    double lora_scale = 1.0;

    void init(ParamStore& s, const std::string& name, int in, int out, Rng& rng, double std_dev,
              bool bias = true);
    int in_dim() const { return W->w.cols; }
    int out_dim() const { return W->w.rows; }

    void forward(const Mat& x, Mat& y) const;
    void backward(const Mat& x, const Mat& gy, Mat* gx, GradSink& sink) const;

    void add_lora(ParamStore& s, const std::string& name, int rank, double scaling, Rng& rng);
    void merge_lora();  // fold adapters into W and detach them
};

struct LayerNorm {
    Param* gamma = nullptr;
    Param* beta = nullptr;

    void init(ParamStore& s, const std::string& name, int d);
    void forward(const Mat& x, Mat& y, Mat* xhat, std::vector<double>* rstd) const;
    void backward(const Mat& xhat, const std::vector<double>& rstd, const Mat& gy, Mat* gx,
                  GradSink& sink) const;
};

struct AttnCache {
    Mat q, k, v;       // T×d
    Mat attn;          // (heads·Tq)×Tk softmax weights
    Mat attn_out;      // Tq×d pre-output-projection
};

struct Attention {
    Linear q, k, v, o;
    int heads = 1;
    int head_dim = 0;
    double score_mult = 1.0;  // extra factor on qk scores
    bool causal = false;
    std::vector<double> slopes;  // per-head ALiBi slopes; empty = no position bias
    int window = 0;              // max lookback for causal attention, 0 = unlimited

    void init(ParamStore& s, const std::string& name, int d_in, int d_qk, int d_out, int n_heads,
              Rng& rng, double std_dev, double out_std);
    // soft_keys marks position-neutral keys (pooled image rows): they carry no
    // distance bias and ignore the window
    Mat forward(const Mat& xq, const Mat& xkv, AttnCache* cache,
                const std::vector<uint8_t>* soft_keys = nullptr) const;
    void backward(const Mat& xq, const Mat& xkv, const AttnCache& cache, const Mat& gy, Mat* gxq,
                  Mat* gxkv, GradSink& sink,
                  const std::vector<uint8_t>* soft_keys = nullptr) const;
};

struct BlockCache {
    Mat x_in;
    Mat ln1_xhat, ln1_out;
    std::vector<double> ln1_rstd;
    AttnCache attn;
    Mat mid;  // x + attn out
    Mat ln2_xhat, ln2_out;
    std::vector<double> ln2_rstd;
    Mat fc1_out;  // pre-activation
};

struct Block {
    LayerNorm ln1, ln2;
    Attention attn;
    Linear fc1, fc2;

    void init(ParamStore& s, const std::string& name, int d, int dff, int heads, bool causal,
              const std::vector<double>& slopes, int window, Rng& rng, double out_std);
    Mat forward(const Mat& x, BlockCache* cache,
                const std::vector<uint8_t>* soft_keys = nullptr) const;
    Mat backward(const BlockCache& cache, const Mat& gy, GradSink& sink,
                 const std::vector<uint8_t>* soft_keys = nullptr) const;
};

// ---------------------------------------------------------------------------
// towers

struct ImgCache {
    Mat patches;  // N×patch²
    Mat embed_in;
    std::vector<BlockCache> blocks;
    Mat lnf_xhat, tokens;
    std::vector<double> lnf_rstd;
    Mat mean, head_out;  // 1×d each
    double inv_norm = 0;
};

struct ImageEncoder {
    const ModelConfig* cfg = nullptr;
    Linear patch_proj;
    Param* pos = nullptr;
    std::vector<Block> blocks;
    LayerNorm lnf;
    Linear head;

    void init(ParamStore& s, const ModelConfig& cfg, Rng& rng);
    // tokens: N×d (LayerNormed), embed: 1×d unit row
    void forward(const GrayImage& img, Mat& tokens, Mat& embed, ImgCache* cache) const;
    void backward(const ImgCache& cache, const Mat* g_tokens, const Mat* g_embed,
                  GradSink& sink) const;
};

struct TxtCache {
    std::vector<int> tokens;
    Mat embed_in;
    std::vector<BlockCache> blocks;
    Mat lnf_xhat, out_tokens;
    std::vector<double> lnf_rstd;
    Mat mean, head_out;
    double inv_norm = 0;
};

struct TextEncoder {
    const ModelConfig* cfg = nullptr;
    Param* emb = nullptr;  // V×d
    Param* pos = nullptr;  // max_len×d
    std::vector<Block> blocks;
    LayerNorm lnf;
    Linear head;

    void init(ParamStore& s, const ModelConfig& cfg, int vocab, Rng& rng);
    void forward(const std::vector<int>& tokens, Mat& embed, TxtCache* cache) const;
    void backward(const TxtCache& cache, const Mat& g_embed, GradSink& sink) const;
};

struct PoolerCache {
    AttnCache attn;
    Mat attn_y;  // Q×d_dec
};

// 64 learned queries cross-attending over image tokens, then a projection.
struct Pooler {
    const ModelConfig* cfg = nullptr;
    Param* queries = nullptr;  // pooled_tokens×d
    Attention attn;
    Linear proj;

    // pos_pattern: image position embeddings; when one query per patch is
    // configured, queries start as a patch selector over them
    void init(ParamStore& s, const ModelConfig& cfg, const Mat* pos_pattern, Rng& rng);
    Mat forward(const Mat& img_tokens, PoolerCache* cache) const;
    // returns gradient w.r.t. img_tokens
    Mat backward(const Mat& img_tokens, const PoolerCache& cache, const Mat& g_out,
                 GradSink& sink) const;
};

struct DecCache {
    Mat embeds;
    std::vector<uint8_t> soft;  // per-row: pooled image token?
    std::vector<BlockCache> blocks;
    Mat hidden;  // last block output, pre final-LN
};

struct KvState {
    struct PerBlock {
        Mat k, v;  // grows one row per step
        int len = 0;
    };
    std::vector<PerBlock> blocks;
    std::vector<uint8_t> soft;  // per cached position
};

struct Decoder {
    const ModelConfig* cfg = nullptr;
    Param* emb = nullptr;  // V×d_dec
    std::vector<Block> blocks;
    LayerNorm final_ln;
    Linear lm_head;

    void init(ParamStore& s, const ModelConfig& cfg, int vocab, Rng& rng);
    std::vector<double> alibi() const;

    // training path: full-sequence forward, loss positions handled by caller
    Mat forward(const Mat& embeds, DecCache* cache,
                const std::vector<uint8_t>* soft = nullptr) const;
    Mat backward(const DecCache& cache, const Mat& g_hidden, GradSink& sink) const;

    // inference path with KV cache; returns hidden row (pre final-LN) of the
    // last position
    Mat prefill(const Mat& embeds, const std::vector<uint8_t>& soft, KvState& kv) const;
    Mat step(const Mat& embed_row, KvState& kv) const;
    // final LN + head on a row
    Mat head_logits_row(const Mat& hidden_row) const;
};

// ---------------------------------------------------------------------------
// assembled model

// Decoder conditioning: interleaved soft-token blocks (pooled image tokens)
// and token-id runs, sufficient for both plain prompting and ICL contexts.
struct Condition {
    struct Seg {
        bool soft = false;
        Mat soft_rows;
        std::vector<int> tokens;
    };
    std::vector<Seg> segs;

    void add_soft(Mat rows);
    void add_tokens(std::vector<int> toks);
    int length() const;
    std::vector<uint8_t> soft_mask() const;
};

struct ModelState {
    ModelConfig cfg;
    PromptSet prompts;
    Tokenizer tok;
    ParamStore store;
    ImageEncoder img;
    TextEncoder txt;
    Pooler pooler;
    Decoder dec;
    Param* logit_scale = nullptr;
    Param* logit_bias = nullptr;
    std::optional<LoraSpec> lora;

    static std::unique_ptr<ModelState> create(const ModelConfig& cfg, const PromptSet& prompts,
                                              uint64_t seed);

    double scale_value() const { return cfg.literal_sigmoid ? 1.0 : logit_scale->w.a[0]; }
    double bias_value() const { return cfg.literal_sigmoid ? 0.0 : logit_bias->w.a[0]; }

    // spec surface -------------------------------------------------------
    // contrastive embedding (1×d unit) + pooled tokens (pooled_tokens×d_dec)
    void encode_image(const GrayImage& image, Mat& embed, Mat& pooled) const;
    Mat encode_text(const std::string& text) const;  // 1×d unit row

    // sum of target log-probs (<= 0), teacher forced
    double decoder_logprob(const Condition& cond, const std::vector<int>& target) const;
    // greedy decode; stops at EOS or max_len; returns decoded text
    std::string generate(const Condition& cond, int max_len) const;

    void apply_lora(const LoraSpec& spec);
    void merge_lora();

    Mat condition_embeds(const Condition& cond) const;
};

// checkpoint I/O: binary file with a JSON header (version, config, prompts,
// lora, named shapes) followed by raw parameter data
void save_checkpoint(const ModelState& state, const std::string& path,
                     const std::string& config_echo = "");
std::unique_ptr<ModelState> load_checkpoint(const std::string& path,
                                            std::string* config_echo = nullptr);
uint64_t file_digest(const std::string& path);

}  // namespace lofi
