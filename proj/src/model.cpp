#include "lofi/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace lofi {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// parameter store

Param* ParamStore::create(const std::string& name, int rows, int cols) {
    if (find(name)) throw std::logic_error("ParamStore: duplicate param " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->w.resize(rows, cols);
    p->index = static_cast<int>(items.size());
    items.push_back(std::move(p));
    return items.back().get();
}

Param* ParamStore::find(const std::string& name) const {
    for (const auto& p : items)
        if (p->name == name) return p.get();
    return nullptr;
}

size_t ParamStore::scalar_count(bool trainable_only) const {
    size_t n = 0;
    for (const auto& p : items)
        if (!trainable_only || p->trainable) n += p->w.size();
    return n;
}

void GradSink::init(const ParamStore& store) {
    g.clear();
    g.reserve(store.items.size());
    for (const auto& p : store.items) g.emplace_back(p->w.rows, p->w.cols);
}

void GradSink::zero() {
    for (auto& m : g) m.zero();
}

void GradSink::add_from(const GradSink& other) {
    for (size_t i = 0; i < g.size(); ++i) axpy(1.0, other.g[i], g[i]);
}

double GradSink::global_norm(const ParamStore& store) const {
    double s = 0;
    for (const auto& p : store.items) {
        if (!p->trainable) continue;
        const Mat& m = g[static_cast<size_t>(p->index)];
        s += dot(m.data(), m.data(), static_cast<int>(m.size()));
    }
    return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// linear

void Linear::init(ParamStore& s, const std::string& name, int in, int out, Rng& rng,
                  double std_dev, bool bias) {
    W = s.create(name + ".w", out, in);
    for (double& v : W->w.a) v = rng.normal() * std_dev;
    if (bias) b = s.create(name + ".b", 1, out);
}

void Linear::forward(const Mat& x, Mat& y) const {
    y.resize(x.rows, W->w.rows);
    matmul_nt_acc(x, W->w, y);
    if (b)
        for (int i = 0; i < y.rows; ++i)
            for (int j = 0; j < y.cols; ++j) y.at(i, j) += b->w.a[static_cast<size_t>(j)];
    if (A && B) {
        Mat u(x.rows, A->w.rows);
        matmul_nt_acc(x, A->w, u);
        Mat yl(x.rows, B->w.rows);
        matmul_nt_acc(u, B->w, yl);
        axpy(lora_scale, yl, y);
    }
}

void Linear::backward(const Mat& x, const Mat& gy, Mat* gx, GradSink& sink) const {
    matmul_tn_acc(gy, x, sink.of(W));
    if (b) {
        Mat& gb = sink.of(b);
        for (int i = 0; i < gy.rows; ++i)
            for (int j = 0; j < gy.cols; ++j) gb.a[static_cast<size_t>(j)] += gy.at(i, j);
    }
    if (gx) matmul_acc(gy, W->w, *gx);
    if (A && B) {
        Mat u(x.rows, A->w.rows);
        matmul_nt_acc(x, A->w, u);
        Mat gu(x.rows, A->w.rows);
        matmul_acc(gy, B->w, gu);
        for (double& v : gu.a) v *= lora_scale;
        Mat gB(B->w.rows, B->w.cols);
        matmul_tn_acc(gy, u, gB);
        axpy(lora_scale, gB, sink.of(B));
        matmul_tn_acc(gu, x, sink.of(A));
        if (gx) matmul_acc(gu, A->w, *gx);
    }
}

void Linear::add_lora(ParamStore& s, const std::string& name, int rank, double scaling, Rng& rng) {
    int in = in_dim(), out = out_dim();
    if (rank < 1 || rank > std::min(in, out))
        throw std::invalid_argument("add_lora: rank out of range for " + name);
    A = s.create(name + ".lora_a", rank, in);
    B = s.create(name + ".lora_b", out, rank);  // zero-initialized second factor
    for (double& v : A->w.a) v = rng.normal() * 0.02;
    lora_scale = scaling;
}

void Linear::merge_lora() {
    if (!A || !B) return;
    Mat delta(W->w.rows, W->w.cols);
    matmul_acc(B->w, A->w, delta);
    axpy(lora_scale, delta, W->w);
    A->w.zero();
    B->w.zero();
    A = nullptr;
    B = nullptr;
}

// ---------------------------------------------------------------------------
// layer norm

namespace {
constexpr double kLnEps = 1e-5;
}

void LayerNorm::init(ParamStore& s, const std::string& name, int d) {
    gamma = s.create(name + ".g", 1, d);
    beta = s.create(name + ".b", 1, d);
    for (double& v : gamma->w.a) v = 1.0;
}

void LayerNorm::forward(const Mat& x, Mat& y, Mat* xhat, std::vector<double>* rstd) const {
    int d = x.cols;
    y.resize(x.rows, d);
    if (xhat) xhat->resize(x.rows, d);
    if (rstd) rstd->assign(static_cast<size_t>(x.rows), 0.0);
    const double* g = gamma->w.data();
    const double* be = beta->w.data();
    for (int i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double mu = 0;
        for (int j = 0; j < d; ++j) mu += xi[j];
        mu /= d;
        double var = 0;
        for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= d;
        double r = 1.0 / std::sqrt(var + kLnEps);
        if (rstd) (*rstd)[static_cast<size_t>(i)] = r;
        double* yi = y.row(i);
        double* xh = xhat ? xhat->row(i) : nullptr;
        for (int j = 0; j < d; ++j) {
            double h = (xi[j] - mu) * r;
            if (xh) xh[j] = h;
            yi[j] = g[j] * h + be[j];
        }
    }
}

void LayerNorm::backward(const Mat& xhat, const std::vector<double>& rstd, const Mat& gy, Mat* gx,
                         GradSink& sink) const {
    int d = xhat.cols;
    Mat& ggamma = sink.of(gamma);
    Mat& gbeta = sink.of(beta);
    const double* g = gamma->w.data();
    for (int i = 0; i < xhat.rows; ++i) {
        const double* xh = xhat.row(i);
        const double* gyi = gy.row(i);
        double mean_gh = 0, mean_ghx = 0;
        for (int j = 0; j < d; ++j) {
            double gh = gyi[j] * g[j];
            mean_gh += gh;
            mean_ghx += gh * xh[j];
            ggamma.a[static_cast<size_t>(j)] += gyi[j] * xh[j];
            gbeta.a[static_cast<size_t>(j)] += gyi[j];
        }
        mean_gh /= d;
        mean_ghx /= d;
        if (gx) {
            double* gxi = gx->row(i);
            double r = rstd[static_cast<size_t>(i)];
            for (int j = 0; j < d; ++j)
                gxi[j] += r * (gyi[j] * g[j] - mean_gh - xh[j] * mean_ghx);
        }
    }
}

// ---------------------------------------------------------------------------
// attention

void Attention::init(ParamStore& s, const std::string& name, int d_in, int d_qk, int d_out,
                     int n_heads, Rng& rng, double std_dev, double out_std) {
    heads = n_heads;
    head_dim = d_qk / n_heads;
    if (head_dim * n_heads != d_qk)
        throw std::invalid_argument("Attention: width not divisible by heads");
    q.init(s, name + ".q", d_in, d_qk, rng, std_dev);
    k.init(s, name + ".k", d_in, d_qk, rng, std_dev);
    v.init(s, name + ".v", d_in, d_qk, rng, std_dev);
    o.init(s, name + ".o", d_qk, d_out, rng, out_std);
}

Mat Attention::forward(const Mat& xq, const Mat& xkv, AttnCache* cache,
                       const std::vector<uint8_t>* soft_keys) const {
    Mat qm, km, vm;
    q.forward(xq, qm);
    k.forward(xkv, km);
    v.forward(xkv, vm);
    const int tq = qm.rows, tk = km.rows;
    const double scale = score_mult / std::sqrt(static_cast<double>(head_dim));

    Mat attn(heads * tq, tk);
    Mat attn_out(tq, qm.cols);
    std::vector<double> srow(static_cast<size_t>(tk));
    for (int h = 0; h < heads; ++h) {
        const int off = h * head_dim;
        const double slope = slopes.empty() ? 0.0 : slopes[static_cast<size_t>(h)];
        for (int i = 0; i < tq; ++i) {
            int hi = causal ? i + 1 : tk;
            int lo = (causal && window > 0) ? std::max(0, i - window + 1) : 0;
            double mx = -1e300;
            for (int j = 0; j < hi; ++j) {
                bool soft = soft_keys && (*soft_keys)[static_cast<size_t>(j)];
                if (j < lo && !soft) {
                    srow[static_cast<size_t>(j)] = -1e300;
                    continue;
                }
                double v = scale * dot(qm.row(i) + off, km.row(j) + off, head_dim);
                if (!soft) v -= slope * (i - j);
                srow[static_cast<size_t>(j)] = v;
                mx = std::max(mx, v);
            }
            double* arow = attn.row(h * tq + i);
            double sum = 0;
            for (int j = 0; j < hi; ++j) {
                double e = srow[static_cast<size_t>(j)] <= -1e299
                               ? 0.0
                               : std::exp(srow[static_cast<size_t>(j)] - mx);
                arow[j] = e;
                sum += e;
            }
            for (int j = hi; j < tk; ++j) arow[j] = 0.0;
            double inv = 1.0 / sum;
            double* out = attn_out.row(i) + off;
            for (int j = 0; j < hi; ++j) {
                arow[j] *= inv;
                double w = arow[j];
                if (w == 0.0) continue;
                const double* vj = vm.row(j) + off;
                for (int c = 0; c < head_dim; ++c) out[c] += w * vj[c];
            }
        }
    }

    Mat y;
    o.forward(attn_out, y);
    if (cache) {
        cache->q = std::move(qm);
        cache->k = std::move(km);
        cache->v = std::move(vm);
        cache->attn = std::move(attn);
        cache->attn_out = std::move(attn_out);
    }
    return y;
}

void Attention::backward(const Mat& xq, const Mat& xkv, const AttnCache& cache, const Mat& gy,
                         Mat* gxq, Mat* gxkv, GradSink& sink,
                         const std::vector<uint8_t>* soft_keys) const {
    const int tq = cache.q.rows, tk = cache.k.rows;
    const double scale = score_mult / std::sqrt(static_cast<double>(head_dim));

    Mat g_attn_out(tq, cache.q.cols);
    o.backward(cache.attn_out, gy, &g_attn_out, sink);

    Mat gq(tq, cache.q.cols), gk(tk, cache.k.cols), gv(tk, cache.v.cols);
    std::vector<double> g_attn(static_cast<size_t>(tk));
    (void)soft_keys;  // bias is constant w.r.t. parameters; mask already baked into attn
    for (int h = 0; h < heads; ++h) {
        const int off = h * head_dim;
        for (int i = 0; i < tq; ++i) {
            int lo = 0;
            int hi = causal ? i + 1 : tk;
            const double* arow = cache.attn.row(h * tq + i);
            const double* go = g_attn_out.row(i) + off;

            double dot_aw = 0;
            for (int j = lo; j < hi; ++j) {
                if (arow[j] == 0.0) {
                    g_attn[static_cast<size_t>(j)] = 0.0;
                    continue;
                }
                g_attn[static_cast<size_t>(j)] = dot(go, cache.v.row(j) + off, head_dim);
                dot_aw += arow[j] * g_attn[static_cast<size_t>(j)];
            }
            double* gqi = gq.row(i) + off;
            const double* qi = cache.q.row(i) + off;
            for (int j = lo; j < hi; ++j) {
                double w = arow[j];
                if (w == 0.0) continue;
                // dL/dv
                double* gvj = gv.row(j) + off;
                for (int c = 0; c < head_dim; ++c) gvj[c] += w * go[c];
                // softmax backward -> score grad
                double gs = w * (g_attn[static_cast<size_t>(j)] - dot_aw) * scale;
                if (gs == 0.0) continue;
                const double* kj = cache.k.row(j) + off;
                double* gkj = gk.row(j) + off;
                for (int c = 0; c < head_dim; ++c) {
                    gqi[c] += gs * kj[c];
                    gkj[c] += gs * qi[c];
                }
            }
        }
    }
    q.backward(xq, gq, gxq, sink);
    k.backward(xkv, gk, gxkv, sink);
    v.backward(xkv, gv, gxkv, sink);
}

// ---------------------------------------------------------------------------
// transformer block

void Block::init(ParamStore& s, const std::string& name, int d, int dff, int heads, bool causal,
                 const std::vector<double>& alibi, int attn_window, Rng& rng, double out_std) {
    ln1.init(s, name + ".ln1", d);
    ln2.init(s, name + ".ln2", d);
    // Xavier-scale q/k/v so attention logits are trainable within short runs
    double qkv_std = 1.0 / std::sqrt(static_cast<double>(d));
    attn.init(s, name + ".attn", d, d, d, heads, rng, qkv_std, out_std);
    attn.causal = causal;
    attn.slopes = alibi;
    attn.window = attn_window;
    fc1.init(s, name + ".fc1", d, dff, rng, qkv_std);
    fc2.init(s, name + ".fc2", dff, d, rng, out_std);
}

Mat Block::forward(const Mat& x, BlockCache* c, const std::vector<uint8_t>* soft_keys) const {
    Mat ln1_out;
    Mat xhat1;
    std::vector<double> rstd1;
    ln1.forward(x, ln1_out, c ? &xhat1 : nullptr, c ? &rstd1 : nullptr);

    Mat a = attn.forward(ln1_out, ln1_out, c ? &c->attn : nullptr, soft_keys);
    Mat mid = x;
    axpy(1.0, a, mid);

    Mat ln2_out;
    Mat xhat2;
    std::vector<double> rstd2;
    ln2.forward(mid, ln2_out, c ? &xhat2 : nullptr, c ? &rstd2 : nullptr);

    Mat h1;
    fc1.forward(ln2_out, h1);
    Mat act(h1.rows, h1.cols);
    for (size_t i = 0; i < h1.a.size(); ++i) act.a[i] = gelu(h1.a[i]);
    Mat h2;
    fc2.forward(act, h2);

    Mat out = mid;
    axpy(1.0, h2, out);

    if (c) {
        c->x_in = x;
        c->ln1_xhat = std::move(xhat1);
        c->ln1_rstd = std::move(rstd1);
        c->ln1_out = std::move(ln1_out);
        c->mid = std::move(mid);
        c->ln2_xhat = std::move(xhat2);
        c->ln2_rstd = std::move(rstd2);
        c->ln2_out = std::move(ln2_out);
        c->fc1_out = std::move(h1);
    }
    return out;
}

Mat Block::backward(const BlockCache& c, const Mat& gy, GradSink& sink,
                    const std::vector<uint8_t>* soft_keys) const {
    // mlp path
    Mat act(c.fc1_out.rows, c.fc1_out.cols);
    for (size_t i = 0; i < act.a.size(); ++i) act.a[i] = gelu(c.fc1_out.a[i]);
    Mat g_act(act.rows, act.cols);
    fc2.backward(act, gy, &g_act, sink);
    Mat g_h1(act.rows, act.cols);
    for (size_t i = 0; i < act.a.size(); ++i) g_h1.a[i] = g_act.a[i] * gelu_grad(c.fc1_out.a[i]);
    Mat g_ln2out(c.ln2_out.rows, c.ln2_out.cols);
    fc1.backward(c.ln2_out, g_h1, &g_ln2out, sink);

    Mat g_mid = gy;  // residual
    ln2.backward(c.ln2_xhat, c.ln2_rstd, g_ln2out, &g_mid, sink);

    // attention path
    Mat g_ln1out(c.ln1_out.rows, c.ln1_out.cols);
    attn.backward(c.ln1_out, c.ln1_out, c.attn, g_mid, &g_ln1out, &g_ln1out, sink, soft_keys);

    Mat gx = g_mid;  // residual
    ln1.backward(c.ln1_xhat, c.ln1_rstd, g_ln1out, &gx, sink);
    return gx;
}

// ---------------------------------------------------------------------------
// image encoder

void ImageEncoder::init(ParamStore& s, const ModelConfig& config, Rng& rng) {
    cfg = &config;
    int pdim = config.patch * config.patch;
    patch_proj.init(s, "img.patch", pdim, config.d, rng, 0.08);
    pos = s.create("img.pos", config.n_patches(), config.d);
    for (double& v : pos->w.a) v = rng.normal() * config.img_pos_init_std;
    double out_std = 0.02;
    blocks.resize(static_cast<size_t>(config.enc_blocks));
    for (int i = 0; i < config.enc_blocks; ++i)
        blocks[static_cast<size_t>(i)].init(s, "img.block" + std::to_string(i), config.d,
                                            config.enc_dff, config.enc_heads, false, {}, 0, rng,
                                            out_std);
    lnf.init(s, "img.lnf", config.d);
    head.init(s, "img.head", config.d, config.d, rng, 0.02);
}

namespace {

Mat patchify(const GrayImage& img, const ModelConfig& cfg) {
    const int p = cfg.patch, nx = cfg.patches_x(), ny = cfg.patches_y();
    Mat out(nx * ny, p * p);
    for (int py = 0; py < ny; ++py)
        for (int px = 0; px < nx; ++px) {
            double* row = out.row(py * nx + px);
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    row[dy * p + dx] = img.at(px * p + dx, py * p + dy);
        }
    return out;
}

// y = u / ||u||; returns inv_norm
double l2_normalize_row(const Mat& u, Mat& y) {
    y.resize(1, u.cols);
    double inv = 1.0 / (l2_norm(u.data(), u.cols) + 1e-12);
    for (int j = 0; j < u.cols; ++j) y.at(0, j) = u.at(0, j) * inv;
    return inv;
}

// gu += inv * (gy - y * (y·gy))
void l2_normalize_backward(const Mat& y, double inv, const Mat& gy, Mat& gu) {
    double yg = dot(y.data(), gy.data(), y.cols);
    for (int j = 0; j < y.cols; ++j) gu.at(0, j) += inv * (gy.at(0, j) - y.at(0, j) * yg);
}

}  // namespace

void ImageEncoder::forward(const GrayImage& image, Mat& tokens, Mat& embed, ImgCache* c) const {
    if (image.width != cfg->image_w || image.height != cfg->image_h)
        throw std::invalid_argument("encode_image: wrong image size");
    Mat patches = patchify(image, *cfg);
    Mat x;
    patch_proj.forward(patches, x);
    axpy(1.0, pos->w, x);

    if (c) c->blocks.resize(blocks.size());
    Mat embed_in = c ? x : Mat();
    for (size_t i = 0; i < blocks.size(); ++i) x = blocks[i].forward(x, c ? &c->blocks[i] : nullptr);

    Mat xhat;
    std::vector<double> rstd;
    lnf.forward(x, tokens, c ? &xhat : nullptr, c ? &rstd : nullptr);

    Mat mean(1, cfg->d);
    for (int i = 0; i < tokens.rows; ++i)
        for (int j = 0; j < cfg->d; ++j) mean.at(0, j) += tokens.at(i, j);
    for (double& v : mean.a) v /= tokens.rows;

    Mat head_out;
    head.forward(mean, head_out);
    double inv = l2_normalize_row(head_out, embed);

    if (c) {
        c->patches = std::move(patches);
        c->embed_in = std::move(embed_in);
        c->lnf_xhat = std::move(xhat);
        c->lnf_rstd = std::move(rstd);
        c->tokens = tokens;
        c->mean = std::move(mean);
        c->head_out = std::move(head_out);
        c->inv_norm = inv;
    }
}

void ImageEncoder::backward(const ImgCache& c, const Mat* g_tokens, const Mat* g_embed,
                            GradSink& sink) const {
    int n = c.tokens.rows, d = cfg->d;
    Mat g_tok(n, d);
    if (g_tokens) axpy(1.0, *g_tokens, g_tok);

    if (g_embed) {
        Mat embed;
        l2_normalize_row(c.head_out, embed);
        Mat g_head_out(1, d);
        l2_normalize_backward(embed, c.inv_norm, *g_embed, g_head_out);
        Mat g_mean(1, d);
        head.backward(c.mean, g_head_out, &g_mean, sink);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) g_tok.at(i, j) += g_mean.at(0, j) / n;
    }

    Mat g_blocks_out(n, d);
    lnf.backward(c.lnf_xhat, c.lnf_rstd, g_tok, &g_blocks_out, sink);

    Mat g = std::move(g_blocks_out);
    for (size_t i = blocks.size(); i-- > 0;) g = blocks[i].backward(c.blocks[i], g, sink);

    axpy(1.0, g, sink.of(pos));
    patch_proj.backward(c.patches, g, nullptr, sink);
}

// ---------------------------------------------------------------------------
// text encoder

void TextEncoder::init(ParamStore& s, const ModelConfig& config, int vocab, Rng& rng) {
    cfg = &config;
    emb = s.create("txt.emb", vocab, config.d);
    for (double& v : emb->w.a) v = rng.normal() * 0.02;
    pos = s.create("txt.pos", config.txt_max_len, config.d);
    for (double& v : pos->w.a) v = rng.normal() * 0.02;
    double out_std = 0.02;
    blocks.resize(static_cast<size_t>(config.enc_blocks));
    for (int i = 0; i < config.enc_blocks; ++i)
        blocks[static_cast<size_t>(i)].init(s, "txt.block" + std::to_string(i), config.d,
                                            config.enc_dff, config.enc_heads, false, {}, 0, rng,
                                            out_std);
    lnf.init(s, "txt.lnf", config.d);
    head.init(s, "txt.head", config.d, config.d, rng, 0.02);
}

void TextEncoder::forward(const std::vector<int>& tokens_in, Mat& embed, TxtCache* c) const {
    std::vector<int> toks = tokens_in;
    if (static_cast<int>(toks.size()) > cfg->txt_max_len)
        toks.resize(static_cast<size_t>(cfg->txt_max_len));
    if (toks.empty()) throw std::invalid_argument("encode_text: empty token list");

    int n = static_cast<int>(toks.size()), d = cfg->d;
    Mat x(n, d);
    for (int i = 0; i < n; ++i) {
        const double* e = emb->w.row(toks[static_cast<size_t>(i)]);
        const double* p = pos->w.row(i);
        double* xi = x.row(i);
        for (int j = 0; j < d; ++j) xi[j] = e[j] + p[j];
    }

    if (c) {
        c->tokens = toks;
        c->embed_in = x;
        c->blocks.resize(blocks.size());
    }
    for (size_t i = 0; i < blocks.size(); ++i) x = blocks[i].forward(x, c ? &c->blocks[i] : nullptr);

    Mat out_tokens, xhat;
    std::vector<double> rstd;
    lnf.forward(x, out_tokens, c ? &xhat : nullptr, c ? &rstd : nullptr);

    Mat mean(1, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) mean.at(0, j) += out_tokens.at(i, j);
    for (double& v : mean.a) v /= n;

    Mat head_out;
    head.forward(mean, head_out);
    double inv = l2_normalize_row(head_out, embed);

    if (c) {
        c->lnf_xhat = std::move(xhat);
        c->lnf_rstd = std::move(rstd);
        c->out_tokens = std::move(out_tokens);
        c->mean = std::move(mean);
        c->head_out = std::move(head_out);
        c->inv_norm = inv;
    }
}

void TextEncoder::backward(const TxtCache& c, const Mat& g_embed, GradSink& sink) const {
    int n = c.out_tokens.rows, d = cfg->d;
    Mat embed;
    l2_normalize_row(c.head_out, embed);
    Mat g_head_out(1, d);
    l2_normalize_backward(embed, c.inv_norm, g_embed, g_head_out);
    Mat g_mean(1, d);
    head.backward(c.mean, g_head_out, &g_mean, sink);

    Mat g_tok(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) g_tok.at(i, j) = g_mean.at(0, j) / n;

    Mat g_blocks_out(n, d);
    lnf.backward(c.lnf_xhat, c.lnf_rstd, g_tok, &g_blocks_out, sink);

    Mat g = std::move(g_blocks_out);
    for (size_t i = blocks.size(); i-- > 0;) g = blocks[i].backward(c.blocks[i], g, sink);

    Mat& gemb = sink.of(emb);
    Mat& gpos = sink.of(pos);
    for (int i = 0; i < n; ++i) {
        double* ge = gemb.row(c.tokens[static_cast<size_t>(i)]);
        double* gp = gpos.row(i);
        const double* gi = g.row(i);
        for (int j = 0; j < d; ++j) {
            ge[j] += gi[j];
            gp[j] += gi[j];
        }
    }
}

// ---------------------------------------------------------------------------
// attention pooler

namespace {

// W = I + noise for square matrices, plain gaussian otherwise
void identity_init(Mat& w, Rng& rng, double noise) {
    for (double& v : w.a) v = rng.normal() * noise;
    if (w.rows == w.cols)
        for (int i = 0; i < w.rows; ++i) w.at(i, i) += 1.0;
}

}  // namespace

void Pooler::init(ParamStore& s, const ModelConfig& config, const Mat* pos_pattern, Rng& rng) {
    cfg = &config;
    queries = s.create("pooler.queries", config.pooled_tokens, config.d);
    attn.init(s, "pooler.attn", config.d, config.d, config.d_dec, config.enc_heads, rng, 0.02,
              0.02);
    attn.causal = false;
    proj.init(s, "pooler.proj", config.d_dec, config.d_dec, rng, 0.02);

    // spatial-identity start: query i selects patch i, values pass through,
    // so pooled tokens carry per-patch features from the first step
    bool spatial = pos_pattern && config.pooled_tokens == config.n_patches() &&
                   pos_pattern->cols == config.d;
    if (spatial) {
        queries->w = *pos_pattern;
        identity_init(attn.q.W->w, rng, 0.02);
        identity_init(attn.k.W->w, rng, 0.02);
        identity_init(attn.v.W->w, rng, 0.02);
        identity_init(attn.o.W->w, rng, 0.02);
        identity_init(proj.W->w, rng, 0.02);
    } else {
        for (double& v : queries->w.a) v = rng.normal();
    }
}

Mat Pooler::forward(const Mat& img_tokens, PoolerCache* c) const {
    Mat y = attn.forward(queries->w, img_tokens, c ? &c->attn : nullptr);
    Mat pooled;
    proj.forward(y, pooled);
    if (c) c->attn_y = std::move(y);
    return pooled;
}

Mat Pooler::backward(const Mat& img_tokens, const PoolerCache& c, const Mat& g_out,
                     GradSink& sink) const {
    Mat g_attn_y(c.attn_y.rows, c.attn_y.cols);
    proj.backward(c.attn_y, g_out, &g_attn_y, sink);
    Mat g_queries(queries->w.rows, queries->w.cols);
    Mat g_tokens(img_tokens.rows, img_tokens.cols);
    attn.backward(queries->w, img_tokens, c.attn, g_attn_y, &g_queries, &g_tokens, sink);
    axpy(1.0, g_queries, sink.of(queries));
    return g_tokens;
}

// ---------------------------------------------------------------------------
// decoder

std::vector<double> Decoder::alibi() const {
    std::vector<double> s(static_cast<size_t>(cfg->dec_heads));
    for (int h = 0; h < cfg->dec_heads; ++h)
        s[static_cast<size_t>(h)] =
            std::pow(2.0, -cfg->alibi_max_exp * (h + 1) / cfg->dec_heads);
    return s;
}

void Decoder::init(ParamStore& s, const ModelConfig& config, int vocab, Rng& rng) {
    cfg = &config;
    emb = s.create("dec.emb", vocab, config.d_dec);
    for (double& v : emb->w.a) v = rng.normal() * 0.02;
    double out_std = 0.0625;
    blocks.resize(static_cast<size_t>(config.dec_blocks));
    std::vector<double> slopes = [&] {
        std::vector<double> v(static_cast<size_t>(config.dec_heads));
        for (int h = 0; h < config.dec_heads; ++h)
            v[static_cast<size_t>(h)] =
                std::pow(2.0, -config.alibi_max_exp * (h + 1) / config.dec_heads);
        return v;
    }();
    for (int i = 0; i < config.dec_blocks; ++i) {
        blocks[static_cast<size_t>(i)].init(s, "dec.block" + std::to_string(i), config.d_dec,
                                            config.dec_dff, config.dec_heads, true, slopes,
                                            config.attn_window, rng, out_std);
        blocks[static_cast<size_t>(i)].attn.score_mult = config.attn_score_mult;
    }
    final_ln.init(s, "dec.lnf", config.d_dec);
    lm_head.init(s, "dec.head", config.d_dec, vocab, rng, 0.02);
}

Mat Decoder::forward(const Mat& embeds, DecCache* c, const std::vector<uint8_t>* soft) const {
    static const std::vector<uint8_t> kNoSoft;
    std::vector<uint8_t> local;
    if (!soft) {
        local.assign(static_cast<size_t>(embeds.rows), 0);
        soft = &local;
    }
    if (c) {
        c->embeds = embeds;
        c->soft = *soft;
        c->blocks.resize(blocks.size());
    }
    Mat x = embeds;
    for (size_t i = 0; i < blocks.size(); ++i)
        x = blocks[i].forward(x, c ? &c->blocks[i] : nullptr, soft);
    if (c) c->hidden = x;
    return x;
}

Mat Decoder::backward(const DecCache& c, const Mat& g_hidden, GradSink& sink) const {
    Mat g = g_hidden;
    for (size_t i = blocks.size(); i-- > 0;) g = blocks[i].backward(c.blocks[i], g, sink, &c.soft);
    return g;
}

namespace {

// single-block inference step over cached K/V with soft-key flags
void block_infer_rows(const Block& blk, const Mat& x, KvState::PerBlock& kv,
                      const std::vector<uint8_t>& soft, int pos0, Mat& out) {
    // pos0: sequence position of x's first row
    Mat ln1_out;
    blk.ln1.forward(x, ln1_out, nullptr, nullptr);
    Mat qm, km, vm;
    blk.attn.q.forward(ln1_out, qm);
    blk.attn.k.forward(ln1_out, km);
    blk.attn.v.forward(ln1_out, vm);
    // append k/v
    int old = kv.len;
    Mat nk(old + km.rows, km.cols), nv(old + vm.rows, vm.cols);
    if (old) {
        std::copy(kv.k.a.begin(), kv.k.a.end(), nk.a.begin());
        std::copy(kv.v.a.begin(), kv.v.a.end(), nv.a.begin());
    }
    std::copy(km.a.begin(), km.a.end(), nk.a.begin() + static_cast<long>(old) * km.cols);
    std::copy(vm.a.begin(), vm.a.end(), nv.a.begin() + static_cast<long>(old) * vm.cols);
    kv.k = std::move(nk);
    kv.v = std::move(nv);
    kv.len += km.rows;

    const int heads = blk.attn.heads, hd = blk.attn.head_dim;
    const double scale = blk.attn.score_mult / std::sqrt(static_cast<double>(hd));
    Mat attn_out(x.rows, qm.cols);
    std::vector<double> srow(static_cast<size_t>(kv.len));
    for (int h = 0; h < heads; ++h) {
        const int off = h * hd;
        const double slope = blk.attn.slopes.empty() ? 0.0 : blk.attn.slopes[static_cast<size_t>(h)];
        for (int r = 0; r < x.rows; ++r) {
            int qpos = pos0 + r;
            int lo = blk.attn.window > 0 ? std::max(0, qpos - blk.attn.window + 1) : 0;
            int hi = qpos + 1;
            const double* qi = qm.row(r) + off;
            double mx = -1e300;
            for (int j = 0; j < hi; ++j) {
                bool sf = soft[static_cast<size_t>(j)] != 0;
                if (j < lo && !sf) {
                    srow[static_cast<size_t>(j)] = -1e300;
                    continue;
                }
                double v = scale * dot(qi, kv.k.row(j) + off, hd);
                if (!sf) v -= slope * (qpos - j);
                srow[static_cast<size_t>(j)] = v;
                mx = std::max(mx, v);
            }
            double sum = 0;
            for (int j = 0; j < hi; ++j) {
                double e = srow[static_cast<size_t>(j)] <= -1e299
                               ? 0.0
                               : std::exp(srow[static_cast<size_t>(j)] - mx);
                srow[static_cast<size_t>(j)] = e;
                sum += e;
            }
            double inv = 1.0 / sum;
            double* outp = attn_out.row(r) + off;
            for (int j = 0; j < hi; ++j) {
                double w = srow[static_cast<size_t>(j)] * inv;
                if (w == 0.0) continue;
                const double* vj = kv.v.row(j) + off;
                for (int cdim = 0; cdim < hd; ++cdim) outp[cdim] += w * vj[cdim];
            }
        }
    }
    Mat a;
    blk.attn.o.forward(attn_out, a);
    out = x;
    axpy(1.0, a, out);

    Mat ln2_out;
    blk.ln2.forward(out, ln2_out, nullptr, nullptr);
    Mat h1;
    blk.fc1.forward(ln2_out, h1);
    for (double& vv : h1.a) vv = gelu(vv);
    Mat h2;
    blk.fc2.forward(h1, h2);
    axpy(1.0, h2, out);
}

}  // namespace

Mat Decoder::prefill(const Mat& embeds, const std::vector<uint8_t>& soft, KvState& kv) const {
    kv.blocks.assign(blocks.size(), {});
    kv.soft = soft;
    Mat x = embeds;
    for (size_t i = 0; i < blocks.size(); ++i) {
        Mat out;
        block_infer_rows(blocks[i], x, kv.blocks[i], kv.soft, 0, out);
        x = std::move(out);
    }
    Mat last(1, x.cols);
    std::copy(x.row(x.rows - 1), x.row(x.rows - 1) + x.cols, last.row(0));
    return last;
}

Mat Decoder::step(const Mat& embed_row, KvState& kv) const {
    kv.soft.push_back(0);
    Mat x = embed_row;
    for (size_t i = 0; i < blocks.size(); ++i) {
        Mat out;
        block_infer_rows(blocks[i], x, kv.blocks[i], kv.soft, kv.blocks[i].len, out);
        x = std::move(out);
    }
    return x;
}

Mat Decoder::head_logits_row(const Mat& hidden_row) const {
    Mat ln_out;
    final_ln.forward(hidden_row, ln_out, nullptr, nullptr);
    Mat logits;
    lm_head.forward(ln_out, logits);
    for (double& v : logits.a) v *= cfg->logit_mult;
    return logits;
}

// ---------------------------------------------------------------------------
// condition

void Condition::add_soft(Mat rows) {
    Seg s;
    s.soft = true;
    s.soft_rows = std::move(rows);
    segs.push_back(std::move(s));
}

void Condition::add_tokens(std::vector<int> toks) {
    if (toks.empty()) return;
    Seg s;
    s.soft = false;
    s.tokens = std::move(toks);
    segs.push_back(std::move(s));
}

int Condition::length() const {
    int n = 0;
    for (const auto& s : segs) n += s.soft ? s.soft_rows.rows : static_cast<int>(s.tokens.size());
    return n;
}

std::vector<uint8_t> Condition::soft_mask() const {
    std::vector<uint8_t> mask;
    mask.reserve(static_cast<size_t>(length()));
    for (const auto& s : segs) {
        if (s.soft)
            mask.insert(mask.end(), static_cast<size_t>(s.soft_rows.rows), 1);
        else
            mask.insert(mask.end(), s.tokens.size(), 0);
    }
    return mask;
}

// ---------------------------------------------------------------------------
// model state

std::unique_ptr<ModelState> ModelState::create(const ModelConfig& cfg, const PromptSet& prompts,
                                               uint64_t seed) {
    auto st = std::make_unique<ModelState>();
    st->cfg = cfg;
    st->prompts = prompts;
    st->tok = Tokenizer::build(prompts);
    Rng rng(mix_seed(seed, 0xC0DEULL));
    st->img.init(st->store, st->cfg, rng);
    st->txt.init(st->store, st->cfg, st->tok.size(), rng);
    st->pooler.init(st->store, st->cfg, &st->img.pos->w, rng);
    st->dec.init(st->store, st->cfg, st->tok.size(), rng);
    st->logit_scale = st->store.create("logit_scale", 1, 1);
    st->logit_scale->w.a[0] = cfg.logit_scale_init;
    st->logit_bias = st->store.create("logit_bias", 1, 1);
    st->logit_bias->w.a[0] = cfg.logit_bias_init;
    if (cfg.literal_sigmoid) {
        st->logit_scale->w.a[0] = 1.0;
        st->logit_bias->w.a[0] = 0.0;
        st->logit_scale->trainable = false;
        st->logit_bias->trainable = false;
    }
    return st;
}

void ModelState::encode_image(const GrayImage& image, Mat& embed, Mat& pooled) const {
    Mat tokens;
    img.forward(image, tokens, embed, nullptr);
    pooled = pooler.forward(tokens, nullptr);
}

Mat ModelState::encode_text(const std::string& text) const {
    Mat embed;
    txt.forward(tok.encode(text), embed, nullptr);
    return embed;
}

Mat ModelState::condition_embeds(const Condition& cond) const {
    int n = cond.length();
    Mat out(n, cfg.d_dec);
    int r = 0;
    for (const auto& seg : cond.segs) {
        if (seg.soft) {
            if (seg.soft_rows.cols != cfg.d_dec)
                throw std::invalid_argument("condition: soft token width mismatch");
            for (int i = 0; i < seg.soft_rows.rows; ++i, ++r)
                std::copy(seg.soft_rows.row(i), seg.soft_rows.row(i) + cfg.d_dec, out.row(r));
        } else {
            for (int t : seg.tokens) {
                std::copy(dec.emb->w.row(t), dec.emb->w.row(t) + cfg.d_dec, out.row(r));
                ++r;
            }
        }
    }
    return out;
}

double ModelState::decoder_logprob(const Condition& cond, const std::vector<int>& target) const {
    if (target.empty()) return 0.0;
    int c_len = cond.length();
    int total = c_len + static_cast<int>(target.size());
    if (total > cfg.context_cap) throw std::invalid_argument("decoder_logprob: context overflow");

    Mat embeds(c_len + static_cast<int>(target.size()) - 1, cfg.d_dec);
    Mat ce = condition_embeds(cond);
    std::copy(ce.a.begin(), ce.a.end(), embeds.a.begin());
    for (size_t t = 0; t + 1 < target.size(); ++t)
        std::copy(dec.emb->w.row(target[t]), dec.emb->w.row(target[t]) + cfg.d_dec,
                  embeds.row(c_len + static_cast<int>(t)));

    std::vector<uint8_t> soft = cond.soft_mask();
    soft.resize(static_cast<size_t>(embeds.rows), 0);
    Mat hidden = dec.forward(embeds, nullptr, &soft);
    double lp = 0;
    Mat row(1, cfg.d_dec);
    for (size_t t = 0; t < target.size(); ++t) {
        int pos = c_len - 1 + static_cast<int>(t);
        std::copy(hidden.row(pos), hidden.row(pos) + cfg.d_dec, row.row(0));
        Mat logits = dec.head_logits_row(row);
        // log softmax at target id
        double mx = logits.a[0];
        for (double v : logits.a) mx = std::max(mx, v);
        double lse = 0;
        for (double v : logits.a) lse += std::exp(v - mx);
        lse = mx + std::log(lse);
        lp += logits.a[static_cast<size_t>(target[t])] - lse;
    }
    return lp;
}

std::string ModelState::generate(const Condition& cond, int max_len) const {
    if (max_len < 0) throw std::invalid_argument("generate: negative max_len");
    int c_len = cond.length();
    if (c_len >= cfg.context_cap) throw std::invalid_argument("generate: context overflow");
    if (max_len == 0) return "";
    max_len = std::min(max_len, cfg.context_cap - c_len);

    Mat embeds = condition_embeds(cond);
    KvState kv;
    Mat hidden = dec.prefill(embeds, cond.soft_mask(), kv);

    std::vector<int> out_tokens;
    for (int stepn = 0; stepn < max_len; ++stepn) {
        Mat logits = dec.head_logits_row(hidden);
        int best = 0;
        for (int j = 1; j < logits.cols; ++j)
            if (logits.a[static_cast<size_t>(j)] > logits.a[static_cast<size_t>(best)]) best = j;
        if (best == tok.eos) break;
        out_tokens.push_back(best);
        if (static_cast<int>(out_tokens.size()) >= max_len) break;
        Mat row(1, cfg.d_dec);
        std::copy(dec.emb->w.row(best), dec.emb->w.row(best) + cfg.d_dec, row.row(0));
        hidden = dec.step(row, kv);
    }
    return out_tokens.empty() ? std::string() : tok.decode(out_tokens);
}

namespace {

bool name_matches_target(const std::string& name, const std::string& tower,
                         const std::vector<std::string>& targets) {
    if (name.rfind(tower, 0) != 0) return false;
    if (name.find(".attn.") == std::string::npos) return false;
    for (const auto& t : targets)
        if (name.size() >= t.size() + 2 &&
            name.compare(name.size() - t.size() - 2, t.size() + 2, "." + t + ".w") == 0)
            return true;
    return false;
}

}  // namespace

void ModelState::apply_lora(const LoraSpec& spec) {
    if (lora) throw std::logic_error("apply_lora: adapters already applied");
    if (spec.encoder_rank < 1 || spec.decoder_rank < 1)
        throw std::invalid_argument("apply_lora: rank must be >= 1");
    if (spec.encoder_targets.empty() || spec.decoder_targets.empty())
        throw std::invalid_argument("apply_lora: empty target set");
    Rng rng(mix_seed(0x10aaULL, spec.encoder_rank, spec.decoder_rank));

    auto adapt_block = [&](Block& blk, const std::string& prefix,
                           const std::vector<std::string>& targets, int rank) {
        auto do_one = [&](Linear& lin, const char* tag) {
            if (std::find(targets.begin(), targets.end(), tag) == targets.end()) return;
            lin.add_lora(store, prefix + ".attn." + tag, rank, spec.scaling, rng);
        };
        do_one(blk.attn.q, "q");
        do_one(blk.attn.k, "k");
        do_one(blk.attn.v, "v");
        do_one(blk.attn.o, "o");
    };

    for (size_t i = 0; i < img.blocks.size(); ++i)
        adapt_block(img.blocks[i], "img.block" + std::to_string(i), spec.encoder_targets,
                    spec.encoder_rank);
    for (size_t i = 0; i < txt.blocks.size(); ++i)
        adapt_block(txt.blocks[i], "txt.block" + std::to_string(i), spec.encoder_targets,
                    spec.encoder_rank);
    for (size_t i = 0; i < dec.blocks.size(); ++i)
        adapt_block(dec.blocks[i], "dec.block" + std::to_string(i), spec.decoder_targets,
                    spec.decoder_rank);

    // freeze base weights; adapters, pooler, and the contrastive scale/bias train
    for (auto& p : store.items) {
        bool is_adapter = p->name.find(".lora_") != std::string::npos;
        bool is_pooler = p->name.rfind("pooler.", 0) == 0;
        bool is_logit = p->name == "logit_scale" || p->name == "logit_bias";
        p->trainable = is_adapter || is_pooler || (is_logit && !cfg.literal_sigmoid);
    }
    lora = spec;
}

void ModelState::merge_lora() {
    if (!lora) return;
    auto merge_block = [&](Block& blk) {
        blk.attn.q.merge_lora();
        blk.attn.k.merge_lora();
        blk.attn.v.merge_lora();
        blk.attn.o.merge_lora();
    };
    for (auto& b : img.blocks) merge_block(b);
    for (auto& b : txt.blocks) merge_block(b);
    for (auto& b : dec.blocks) merge_block(b);
}

// ---------------------------------------------------------------------------
// checkpoint I/O

namespace cfgjson {

json to_json(const ModelConfig& c) {
    return json{{"image_w", c.image_w},
                {"image_h", c.image_h},
                {"patch", c.patch},
                {"d", c.d},
                {"enc_blocks", c.enc_blocks},
                {"enc_heads", c.enc_heads},
                {"enc_dff", c.enc_dff},
                {"txt_max_len", c.txt_max_len},
                {"d_dec", c.d_dec},
                {"dec_blocks", c.dec_blocks},
                {"dec_heads", c.dec_heads},
                {"dec_dff", c.dec_dff},
                {"pooled_tokens", c.pooled_tokens},
                {"context_cap", c.context_cap},
                {"attn_window", c.attn_window},
                {"alibi_max_exp", c.alibi_max_exp},
                {"logit_scale_init", c.logit_scale_init},
                {"logit_bias_init", c.logit_bias_init},
                {"literal_sigmoid", c.literal_sigmoid},
                {"img_pos_init_std", c.img_pos_init_std},
                {"logit_mult", c.logit_mult},
                {"attn_score_mult", c.attn_score_mult}};
}

ModelConfig model_from_json(const json& j) {
    ModelConfig c;
    c.image_w = j.at("image_w");
    c.image_h = j.at("image_h");
    c.patch = j.at("patch");
    c.d = j.at("d");
    c.enc_blocks = j.at("enc_blocks");
    c.enc_heads = j.at("enc_heads");
    c.enc_dff = j.at("enc_dff");
    c.txt_max_len = j.at("txt_max_len");
    c.d_dec = j.at("d_dec");
    c.dec_blocks = j.at("dec_blocks");
    c.dec_heads = j.at("dec_heads");
    c.dec_dff = j.at("dec_dff");
    c.pooled_tokens = j.at("pooled_tokens");
    c.context_cap = j.at("context_cap");
    c.attn_window = j.at("attn_window");
    c.alibi_max_exp = j.at("alibi_max_exp");
    c.logit_scale_init = j.at("logit_scale_init");
    c.logit_bias_init = j.at("logit_bias_init");
    c.literal_sigmoid = j.at("literal_sigmoid");
    if (j.contains("img_pos_init_std")) c.img_pos_init_std = j.at("img_pos_init_std");
    if (j.contains("logit_mult")) c.logit_mult = j.at("logit_mult");
    if (j.contains("attn_score_mult")) c.attn_score_mult = j.at("attn_score_mult");
    return c;
}

json to_json(const PromptSet& p) {
    return json{{"caption", p.caption}, {"ground", p.ground}, {"dense", p.dense}};
}

PromptSet prompts_from_json(const json& j) {
    PromptSet p;
    p.caption = j.at("caption");
    p.ground = j.at("ground");
    p.dense = j.at("dense");
    return p;
}

json to_json(const LoraSpec& s) {
    return json{{"encoder_rank", s.encoder_rank},
                {"decoder_rank", s.decoder_rank},
                {"encoder_targets", s.encoder_targets},
                {"decoder_targets", s.decoder_targets},
                {"scaling", s.scaling}};
}

LoraSpec lora_from_json(const json& j) {
    LoraSpec s;
    s.encoder_rank = j.at("encoder_rank");
    s.decoder_rank = j.at("decoder_rank");
    s.encoder_targets = j.at("encoder_targets").get<std::vector<std::string>>();
    s.decoder_targets = j.at("decoder_targets").get<std::vector<std::string>>();
    s.scaling = j.at("scaling");
    return s;
}

}  // namespace cfgjson

void save_checkpoint(const ModelState& state, const std::string& path,
                     const std::string& config_echo) {
    json header;
    header["version"] = "lofi-ckpt-1";
    header["config"] = cfgjson::to_json(state.cfg);
    header["prompts"] = cfgjson::to_json(state.prompts);
    header["lora"] = state.lora ? cfgjson::to_json(*state.lora) : json(nullptr);
    header["config_echo"] = config_echo;
    json params = json::array();
    for (const auto& p : state.store.items)
        params.push_back(json{{"name", p->name}, {"rows", p->w.rows}, {"cols", p->w.cols}});
    header["params"] = params;

    std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
    out.write("LOFICKPT", 8);
    uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& p : state.store.items)
        out.write(reinterpret_cast<const char*>(p->w.data()),
                  static_cast<std::streamsize>(p->w.size() * sizeof(double)));
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

std::unique_ptr<ModelState> load_checkpoint(const std::string& path, std::string* config_echo) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (std::memcmp(magic, "LOFICKPT", 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    json header = json::parse(hs);
    if (header.at("version") != "lofi-ckpt-1")
        throw std::runtime_error("load_checkpoint: unsupported version");

    ModelConfig cfg = cfgjson::model_from_json(header.at("config"));
    PromptSet prompts = cfgjson::prompts_from_json(header.at("prompts"));
    auto state = ModelState::create(cfg, prompts, 0);
    if (!header.at("lora").is_null()) state->apply_lora(cfgjson::lora_from_json(header.at("lora")));
    if (config_echo) *config_echo = header.at("config_echo").get<std::string>();

    for (const auto& pj : header.at("params")) {
        std::string name = pj.at("name");
        Param* p = state->store.find(name);
        if (!p) throw std::runtime_error("load_checkpoint: unknown param " + name);
        int rows = pj.at("rows"), cols = pj.at("cols");
        if (p->w.rows != rows || p->w.cols != cols)
            throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
        in.read(reinterpret_cast<char*>(p->w.data()),
                static_cast<std::streamsize>(p->w.size() * sizeof(double)));
    }
    if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path);
    return state;
}

uint64_t file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("file_digest: cannot open " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
    }
    return h;
}

}  // namespace lofi
