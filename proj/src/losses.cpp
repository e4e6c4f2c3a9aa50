#include "lofi/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "lofi/common.hpp"

namespace lofi {

namespace {

double softplus(double u) {
    if (u > 30) return u;
    if (u < -30) return std::exp(u);
    return std::log1p(std::exp(u));
}

double sigmoid(double u) {
    if (u >= 0) return 1.0 / (1.0 + std::exp(-u));
    double e = std::exp(u);
    return e / (1.0 + e);
}

void check_finite(const Mat& m, const char* what) {
    for (double v : m.a)
        if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

}  // namespace

double sigmoid_loss(const Mat& z_img, const Mat& z_txt, double scale, double bias) {
    Mat gi, gt;
    double gs = 0, gb = 0;
    return sigmoid_loss_grad(z_img, z_txt, scale, bias, gi, gt, gs, gb);
}

double sigmoid_loss_grad(const Mat& z_img, const Mat& z_txt, double scale, double bias, Mat& g_img,
                         Mat& g_txt, double& g_scale, double& g_bias) {
    if (z_img.rows != z_txt.rows || z_img.cols != z_txt.cols)
        throw std::invalid_argument("sigmoid_loss: shape mismatch");
    if (z_img.rows < 2) throw std::invalid_argument("sigmoid_loss: need B >= 2 for negatives");
    check_finite(z_img, "sigmoid_loss");
    check_finite(z_txt, "sigmoid_loss");

    const int b = z_img.rows, d = z_img.cols;
    g_img.resize(b, d);
    g_txt.resize(b, d);
    const double inv_pairs = 1.0 / (static_cast<double>(b) * b);

    double loss = 0;
    for (int i = 0; i < b; ++i) {
        for (int j = 0; j < b; ++j) {
            double delta = (i == j) ? 1.0 : -1.0;
            double dp = dot(z_img.row(i), z_txt.row(j), d);
            double logit = scale * dp + bias;
            loss += softplus(-delta * logit) * inv_pairs;
            // d loss / d logit
            double gl = -delta * sigmoid(-delta * logit) * inv_pairs;
            g_scale += gl * dp;
            g_bias += gl;
            double gd = gl * scale;
            const double* zi = z_img.row(i);
            const double* zt = z_txt.row(j);
            double* gi = g_img.row(i);
            double* gt = g_txt.row(j);
            for (int c = 0; c < d; ++c) {
                gi[c] += gd * zt[c];
                gt[c] += gd * zi[c];
            }
        }
    }
    return loss;
}

std::vector<int> caption_cond_tokens(const ModelState& state) {
    auto toks = state.tok.encode(state.prompts.caption);
    toks.push_back(state.tok.sep);
    return toks;
}

std::vector<int> ground_cond_tokens(const ModelState& state, const std::string& sentence) {
    auto toks = state.tok.encode(state.prompts.ground);
    auto s = state.tok.encode(sentence);
    toks.insert(toks.end(), s.begin(), s.end());
    toks.push_back(state.tok.sep);
    return toks;
}

std::vector<int> dense_cond_tokens(const ModelState& state, const std::string& box_string) {
    auto toks = state.tok.encode(state.prompts.dense);
    auto bstr = state.tok.encode(box_string);
    toks.insert(toks.end(), bstr.begin(), bstr.end());
    toks.push_back(state.tok.sep);
    return toks;
}

std::string boxes_to_target_string(const std::vector<PixelBox>& boxes, int image_w, int image_h) {
    std::vector<NormBox> norm;
    norm.reserve(boxes.size());
    for (const auto& b : boxes) norm.push_back(normalize_box(b, image_w, image_h));
    return boxes_to_string(norm);
}

namespace {

double mean_nll(const ModelState& state, const Condition& cond, const std::vector<int>& target) {
    if (target.empty()) return 0.0;
    double lp = state.decoder_logprob(cond, target);
    return -lp / static_cast<double>(target.size());
}

std::vector<int> with_eos(const ModelState& state, const std::string& text) {
    auto toks = state.tok.encode(text);
    toks.push_back(state.tok.eos);
    return toks;
}

}  // namespace

double captioning_loss(const ModelState& state, const GrayImage& image, const std::string& text) {
    Mat embed, pooled;
    state.encode_image(image, embed, pooled);
    Condition cond;
    cond.add_soft(std::move(pooled));
    cond.add_tokens(caption_cond_tokens(state));
    return mean_nll(state, cond, with_eos(state, text));
}

double grounding_loss(const ModelState& state, const GrayImage& image, const std::string& sentence,
                      const std::vector<PixelBox>& boxes) {
    if (boxes.empty()) throw std::invalid_argument("grounding_loss: sample without boxes");
    Mat embed, pooled;
    state.encode_image(image, embed, pooled);
    Condition cond;
    cond.add_soft(std::move(pooled));
    cond.add_tokens(ground_cond_tokens(state, sentence));
    return mean_nll(state, cond, with_eos(state, boxes_to_target_string(boxes, image.width, image.height)));
}

double dense_captioning_loss(const ModelState& state, const GrayImage& image,
                             const std::vector<PixelBox>& boxes, const std::string& sentence) {
    if (boxes.empty()) throw std::invalid_argument("dense_captioning_loss: sample without boxes");
    Mat embed, pooled;
    state.encode_image(image, embed, pooled);
    Condition cond;
    cond.add_soft(std::move(pooled));
    cond.add_tokens(dense_cond_tokens(state, boxes_to_target_string(boxes, image.width, image.height)));
    return mean_nll(state, cond, with_eos(state, sentence));
}

LossBatch build_loss_batch(const std::vector<const synth::Sample*>& samples, uint64_t seed,
                           int n_min, int n_max) {
    LossBatch batch;
    batch.items.reserve(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        const synth::Sample* s = samples[i];
        LossBatch::Item item;
        item.sample = s;
        auto subset = synth::sample_sentences(s->sentences, n_min, n_max, mix_seed(seed, i, 11));
        std::string text;
        for (const auto& sent : subset) {
            if (!text.empty()) text += ' ';
            text += sent;
        }
        item.text = text;
        item.has_boxes = s->has_boxes;
        if (s->has_boxes) {
            std::vector<int> candidates;
            for (size_t k = 0; k < s->boxes.size(); ++k)
                if (!s->boxes[k].empty()) candidates.push_back(static_cast<int>(k));
            if (!candidates.empty()) {
                Rng rng(mix_seed(seed, i, 12));
                item.ground_sentence =
                    candidates[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(candidates.size()) - 1))];
                item.box_string = boxes_to_target_string(
                    s->boxes[static_cast<size_t>(item.ground_sentence)], s->image.width,
                    s->image.height);
            } else {
                item.has_boxes = false;
            }
        }
        batch.items.push_back(std::move(item));
    }
    int b = batch.size();
    batch.delta.resize(b, b);
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < b; ++j) batch.delta.at(i, j) = (i == j) ? 1.0 : -1.0;
    return batch;
}

namespace {

// teacher-forced CE over the target span; accumulates parameter grads and
// returns mean per-token NLL. g_embeds receives the gradient of
// (weight · mean NLL) w.r.t. the full input embedding matrix.
double decoder_ce_train(const ModelState& state, const Mat& embeds,
                        const std::vector<uint8_t>& soft, int cond_len,
                        const std::vector<int>& target, double weight, Mat* g_embeds,
                        GradSink* sink) {
    const int tlen = static_cast<int>(target.size());
    if (tlen == 0) return 0.0;
    const Decoder& dec = state.dec;
    const int v = dec.lm_head.out_dim();

    DecCache dcache;
    Mat hidden = dec.forward(embeds, sink ? &dcache : nullptr, &soft);

    Mat h_slice(tlen, state.cfg.d_dec);
    for (int t = 0; t < tlen; ++t) {
        const double* src = hidden.row(cond_len - 1 + t);
        std::copy(src, src + state.cfg.d_dec, h_slice.row(t));
    }
    Mat ln_out, xhat;
    std::vector<double> rstd;
    dec.final_ln.forward(h_slice, ln_out, sink ? &xhat : nullptr, sink ? &rstd : nullptr);
    Mat logits;
    dec.lm_head.forward(ln_out, logits);
    const double mult = state.cfg.logit_mult;
    for (double& lv : logits.a) lv *= mult;

    double nll = 0;
    Mat g_logits(tlen, v);
    for (int t = 0; t < tlen; ++t) {
        double* row = logits.row(t);
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (int j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
        double lse = mx + std::log(sum);
        int tgt = target[static_cast<size_t>(t)];
        nll += lse - row[tgt];
        if (sink) {
            double* g = g_logits.row(t);
            double w = weight / tlen;
            for (int j = 0; j < v; ++j) g[j] = std::exp(row[j] - lse) * w;
            g[tgt] -= w;
        }
    }
    nll /= tlen;

    if (sink) {
        for (double& gv : g_logits.a) gv *= mult;
        Mat g_ln_out(tlen, state.cfg.d_dec);
        dec.lm_head.backward(ln_out, g_logits, &g_ln_out, *sink);
        Mat g_h_slice(tlen, state.cfg.d_dec);
        dec.final_ln.backward(xhat, rstd, g_ln_out, &g_h_slice, *sink);
        Mat g_hidden(hidden.rows, hidden.cols);
        for (int t = 0; t < tlen; ++t) {
            double* dst = g_hidden.row(cond_len - 1 + t);
            const double* src = g_h_slice.row(t);
            for (int j = 0; j < state.cfg.d_dec; ++j) dst[j] += src[j];
        }
        *g_embeds = dec.backward(dcache, g_hidden, *sink);
    }
    return nll;
}

struct SampleState {
    ImgCache icache;
    TxtCache tcache;
    PoolerCache pcache;
    Mat img_tokens, img_embed, txt_embed, pooled;
    char tau = 'c';
    double dec_loss = 0;
};

// one autoregressive objective for one sample; returns per-token mean NLL and
// accumulates grads (scaled by weight) into the sink, including the path back
// through the pooler and image encoder token gradients.
double run_objective(const ModelState& state, const LossBatch::Item& item, SampleState& ss,
                     char tau, double weight, Mat* g_pooled_total, GradSink* sink) {
    std::vector<int> cond_toks;
    std::vector<int> target;
    const Tokenizer& tk = state.tok;
    switch (tau) {
        case 'c':
            cond_toks = caption_cond_tokens(state);
            target = tk.encode(item.text);
            break;
        case 'g':
            cond_toks = ground_cond_tokens(
                state, item.sample->sentences[static_cast<size_t>(item.ground_sentence)]);
            target = tk.encode(item.box_string);
            break;
        case 'd':
            cond_toks = dense_cond_tokens(state, item.box_string);
            target = tk.encode(
                item.sample->sentences[static_cast<size_t>(item.ground_sentence)]);
            break;
        default:
            throw std::logic_error("run_objective: bad tau");
    }
    target.push_back(tk.eos);

    const int p = ss.pooled.rows;
    const int cond_len = p + static_cast<int>(cond_toks.size());
    const int total = cond_len + static_cast<int>(target.size());
    if (total > state.cfg.context_cap)
        throw std::invalid_argument("total_loss: context overflow");

    Mat embeds(cond_len + static_cast<int>(target.size()) - 1, state.cfg.d_dec);
    std::vector<uint8_t> soft(static_cast<size_t>(embeds.rows), 0);
    for (int i = 0; i < p; ++i) {
        std::copy(ss.pooled.row(i), ss.pooled.row(i) + state.cfg.d_dec, embeds.row(i));
        soft[static_cast<size_t>(i)] = 1;
    }
    auto put_token = [&](int row, int id) {
        std::copy(state.dec.emb->w.row(id), state.dec.emb->w.row(id) + state.cfg.d_dec,
                  embeds.row(row));
    };
    for (size_t i = 0; i < cond_toks.size(); ++i)
        put_token(p + static_cast<int>(i), cond_toks[i]);
    for (size_t t = 0; t + 1 < target.size(); ++t)
        put_token(cond_len + static_cast<int>(t), target[t]);

    Mat g_embeds;
    double nll = decoder_ce_train(state, embeds, soft, cond_len, target, weight,
                                  sink ? &g_embeds : nullptr, sink);
    if (sink) {
        // pooled prefix rows
        for (int i = 0; i < p; ++i)
            for (int j = 0; j < state.cfg.d_dec; ++j)
                g_pooled_total->at(i, j) += g_embeds.at(i, j);
        // token rows scatter into the decoder embedding table
        Mat& gemb = sink->of(state.dec.emb);
        auto scatter = [&](int row, int id) {
            double* dst = gemb.row(id);
            const double* src = g_embeds.row(row);
            for (int j = 0; j < state.cfg.d_dec; ++j) dst[j] += src[j];
        };
        for (size_t i = 0; i < cond_toks.size(); ++i)
            scatter(p + static_cast<int>(i), cond_toks[i]);
        for (size_t t = 0; t + 1 < target.size(); ++t)
            scatter(cond_len + static_cast<int>(t), target[t]);
    }
    return nll;
}

}  // namespace

char draw_tau(uint64_t seed, int sample_index, bool has_boxes) {
    if (!has_boxes) return 'c';
    Rng rng(mix_seed(seed, static_cast<uint64_t>(sample_index), 21));
    double u = rng.uniform();
    return u < 0.5 ? 'c' : (u < 0.75 ? 'g' : 'd');
}

double objective_with_grads(const ModelState& state, const LossBatch::Item& item, char tau,
                            GradSink& sink) {
    SampleState ss;
    state.img.forward(item.sample->image, ss.img_tokens, ss.img_embed, &ss.icache);
    ss.pooled = state.pooler.forward(ss.img_tokens, &ss.pcache);
    Mat g_pooled(ss.pooled.rows, ss.pooled.cols);
    double nll = run_objective(state, item, ss, tau, 1.0, &g_pooled, &sink);
    Mat g_tokens = state.pooler.backward(ss.img_tokens, ss.pcache, g_pooled, sink);
    state.img.backward(ss.icache, &g_tokens, nullptr, sink);
    return nll;
}

BatchLoss total_loss(const ModelState& state, const LossBatch& batch, double lambda, uint64_t seed,
                     TauStrategy strategy, LossVariant variant, std::vector<GradSink>* sinks) {
    if (lambda < 0) throw std::invalid_argument("total_loss: lambda must be >= 0");
    const int b = batch.size();
    if (b < 2) throw std::invalid_argument("total_loss: need batch size >= 2");
    if (sinks && static_cast<int>(sinks->size()) != b)
        throw std::invalid_argument("total_loss: sink count mismatch");

    const bool want_dec = variant != LossVariant::sigmoid_only && lambda > 0;

    std::vector<SampleState> ss(static_cast<size_t>(b));
    std::vector<Mat> g_pooled(static_cast<size_t>(b));

    // τ draws are made serially up-front so parallel execution cannot change them
    BatchLoss result;
    result.taus.taus.resize(static_cast<size_t>(b), 'c');
    for (int i = 0; i < b; ++i) {
        const auto& item = batch.items[static_cast<size_t>(i)];
        char tau = 'c';
        if (want_dec && strategy == TauStrategy::sampled && item.has_boxes &&
            variant == LossVariant::full)
            tau = draw_tau(seed, i, true);
        if (want_dec && strategy == TauStrategy::summed && item.has_boxes &&
            variant == LossVariant::full)
            tau = 's';
        result.taus.taus[static_cast<size_t>(i)] = tau;
        ss[static_cast<size_t>(i)].tau = tau;
    }

    // pass 1: per-sample forwards, decoder loss + backward, pooler backward
    const double dec_weight = lambda / b;
    std::vector<std::string> errors(static_cast<size_t>(b));
    parallel_for(b, [&](int64_t i) {
        auto& s = ss[static_cast<size_t>(i)];
        const auto& item = batch.items[static_cast<size_t>(i)];
        GradSink* sink = sinks ? &(*sinks)[static_cast<size_t>(i)] : nullptr;
        try {
            state.img.forward(item.sample->image, s.img_tokens, s.img_embed,
                              sink ? &s.icache : nullptr);
            state.txt.forward(state.tok.encode(item.text), s.txt_embed,
                              sink ? &s.tcache : nullptr);
            s.pooled = state.pooler.forward(s.img_tokens, sink ? &s.pcache : nullptr);
            if (sink) g_pooled[static_cast<size_t>(i)].resize(s.pooled.rows, s.pooled.cols);

            if (want_dec) {
                if (s.tau == 's') {
                    double lc = run_objective(state, item, s, 'c', dec_weight * 0.5,
                                              &g_pooled[static_cast<size_t>(i)], sink);
                    double lg = run_objective(state, item, s, 'g', dec_weight * 0.25,
                                              &g_pooled[static_cast<size_t>(i)], sink);
                    double ld = run_objective(state, item, s, 'd', dec_weight * 0.25,
                                              &g_pooled[static_cast<size_t>(i)], sink);
                    s.dec_loss = 0.5 * lc + 0.25 * lg + 0.25 * ld;
                } else {
                    s.dec_loss = run_objective(state, item, s, s.tau, dec_weight,
                                               &g_pooled[static_cast<size_t>(i)], sink);
                }
            }
        } catch (const std::exception& e) {
            errors[static_cast<size_t>(i)] = e.what();
        }
    });
    for (const auto& e : errors)
        if (!e.empty()) throw std::runtime_error(e);

    // pass 2: batch-coupled sigmoid loss
    Mat zi(b, state.cfg.d), zt(b, state.cfg.d);
    for (int i = 0; i < b; ++i) {
        std::copy(ss[static_cast<size_t>(i)].img_embed.row(0),
                  ss[static_cast<size_t>(i)].img_embed.row(0) + state.cfg.d, zi.row(i));
        std::copy(ss[static_cast<size_t>(i)].txt_embed.row(0),
                  ss[static_cast<size_t>(i)].txt_embed.row(0) + state.cfg.d, zt.row(i));
    }
    Mat g_zi, g_zt;
    double g_scale = 0, g_bias = 0;
    result.sigmoid_part =
        sigmoid_loss_grad(zi, zt, state.scale_value(), state.bias_value(), g_zi, g_zt, g_scale,
                          g_bias);
    if (sinks && !state.cfg.literal_sigmoid) {
        // scale/bias grads to sample 0's sink (reduction order is fixed anyway)
        (*sinks)[0].of(state.logit_scale).a[0] += g_scale;
        (*sinks)[0].of(state.logit_bias).a[0] += g_bias;
    }

    // pass 3: encoder backward with combined gradient paths
    if (sinks) {
        parallel_for(b, [&](int64_t i) {
            auto& s = ss[static_cast<size_t>(i)];
            GradSink& sink = (*sinks)[static_cast<size_t>(i)];
            try {
                Mat g_img_embed(1, state.cfg.d), g_txt_embed(1, state.cfg.d);
                std::copy(g_zi.row(static_cast<int>(i)), g_zi.row(static_cast<int>(i)) + state.cfg.d,
                          g_img_embed.row(0));
                std::copy(g_zt.row(static_cast<int>(i)), g_zt.row(static_cast<int>(i)) + state.cfg.d,
                          g_txt_embed.row(0));

                const Mat* g_tokens = nullptr;
                Mat g_img_tokens;
                if (want_dec) {
                    g_img_tokens = state.pooler.backward(s.img_tokens, s.pcache,
                                                         g_pooled[static_cast<size_t>(i)], sink);
                    g_tokens = &g_img_tokens;
                }
                state.img.backward(s.icache, g_tokens, &g_img_embed, sink);
                state.txt.backward(s.tcache, g_txt_embed, sink);
            } catch (const std::exception& e) {
                errors[static_cast<size_t>(i)] = e.what();
            }
        });
        for (const auto& e : errors)
            if (!e.empty()) throw std::runtime_error(e);
    }

    double dec_mean = 0;
    for (const auto& s : ss) dec_mean += s.dec_loss;
    dec_mean /= b;
    result.autoregressive_part = dec_mean;
    result.total = result.sigmoid_part + lambda * dec_mean;
    return result;
}

}  // namespace lofi
