#include "lofi/iclground.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "lofi/losses.hpp"

namespace lofi {

using json = nlohmann::ordered_json;

IclPool build_icl_pool(const std::vector<synth::Sample>& pool_samples,
                       const ModelState& selector, const ModelState& demonstrator) {
    IclPool pool;
    std::vector<int> sample_of_triple;
    for (size_t i = 0; i < pool_samples.size(); ++i) {
        const synth::Sample& s = pool_samples[i];
        if (!s.has_boxes) continue;
        int si = -1;
        for (size_t k = 0; k < s.sentences.size(); ++k) {
            if (k >= s.boxes.size() || s.boxes[k].empty()) continue;
            if (si < 0) {
                si = static_cast<int>(pool.samples.size());
                pool.samples.push_back(&s);
            }
            pool.triples.emplace_back(si, static_cast<int>(k));
        }
    }
    if (pool.triples.empty()) throw std::invalid_argument("build_icl_pool: empty pool");

    // selector embeddings per sample, broadcast to triples
    Mat sample_embeds(static_cast<int>(pool.samples.size()), selector.cfg.d);
    pool.pooled.resize(pool.samples.size());
    parallel_for(static_cast<int64_t>(pool.samples.size()), [&](int64_t i) {
        Mat tokens, embed;
        selector.img.forward(pool.samples[static_cast<size_t>(i)]->image, tokens, embed, nullptr);
        std::copy(embed.row(0), embed.row(0) + selector.cfg.d, sample_embeds.row(static_cast<int>(i)));
        Mat dem_embed, dem_pooled;
        demonstrator.encode_image(pool.samples[static_cast<size_t>(i)]->image, dem_embed, dem_pooled);
        pool.pooled[static_cast<size_t>(i)] = std::move(dem_pooled);
    });

    Mat triple_embeds(static_cast<int>(pool.triples.size()), selector.cfg.d);
    std::vector<std::string> ids(pool.triples.size());
    for (size_t t = 0; t < pool.triples.size(); ++t) {
        auto [si, sent] = pool.triples[t];
        std::copy(sample_embeds.row(si), sample_embeds.row(si) + selector.cfg.d,
                  triple_embeds.row(static_cast<int>(t)));
        ids[t] = pool.samples[static_cast<size_t>(si)]->id + "#" + std::to_string(sent);
    }
    pool.index = build_index(triple_embeds, ids);
    return pool;
}

DemonstrationSet select_demonstrations(const Mat& query_embed, const IclPool& pool, int k,
                                       const std::string& exclude_id) {
    if (k < 1) throw std::invalid_argument("select_demonstrations: k must be >= 1");
    // over-fetch so the leakage guard cannot starve the request
    RankingResult r = topk(pool.index, query_embed, pool.index.size());
    DemonstrationSet out;
    for (const auto& [id, score] : r.ranked) {
        if (static_cast<int>(out.triples.size()) >= k) break;
        int row = pool.index.row_of.at(id);
        auto [si, sent] = pool.triples[static_cast<size_t>(row)];
        const synth::Sample* s = pool.samples[static_cast<size_t>(si)];
        if (!exclude_id.empty() && s->id == exclude_id) continue;
        DemoTriple t;
        t.sample = s;
        t.sentence = sent;
        t.id = id;
        t.score = score;
        out.triples.push_back(std::move(t));
    }
    return out;
}

namespace {

int pool_sample_index(const IclPool& pool, const DemoTriple& t) {
    int row = pool.index.row_of.at(t.id);
    return pool.triples[static_cast<size_t>(row)].first;
}

std::vector<int> demo_block_tokens(const ModelState& m, const DemoTriple& t) {
    const synth::Sample* s = t.sample;
    std::vector<int> toks = ground_cond_tokens(m, s->sentences[static_cast<size_t>(t.sentence)]);
    std::string bstr = boxes_to_target_string(s->boxes[static_cast<size_t>(t.sentence)],
                                              s->image.width, s->image.height);
    auto btoks = m.tok.encode(bstr);
    toks.insert(toks.end(), btoks.begin(), btoks.end());
    toks.push_back(m.tok.sep);
    return toks;
}

}  // namespace

Condition assemble_context(const ModelState& model, const IclPool& pool,
                           const DemonstrationSet& demos, const Mat& query_pooled,
                           const std::string& query_sentence, int gen_reserve, int* dropped) {
    std::vector<int> query_toks = ground_cond_tokens(model, query_sentence);

    int use = static_cast<int>(demos.triples.size());
    auto total_len = [&](int n_demos) {
        int len = query_pooled.rows + static_cast<int>(query_toks.size());
        for (int i = 0; i < n_demos; ++i)
            len += model.cfg.pooled_tokens +
                   static_cast<int>(demo_block_tokens(model, demos.triples[static_cast<size_t>(i)]).size());
        return len;
    };
    while (use > 0 && total_len(use) + gen_reserve > model.cfg.context_cap) --use;
    if (dropped) *dropped = static_cast<int>(demos.triples.size()) - use;
    if (total_len(use) + gen_reserve > model.cfg.context_cap)
        throw std::invalid_argument("assemble_context: query alone exceeds the context cap");

    Condition cond;
    for (int i = 0; i < use; ++i) {
        const DemoTriple& t = demos.triples[static_cast<size_t>(i)];
        cond.add_soft(pool.pooled[static_cast<size_t>(pool_sample_index(pool, t))]);
        cond.add_tokens(demo_block_tokens(model, t));
    }
    cond.add_soft(query_pooled);
    cond.add_tokens(query_toks);
    return cond;
}

IclPrediction ground_with_icl(const ModelState& model, const IclPool& pool,
                              const DemonstrationSet& demos, const GrayImage& query_image,
                              const std::string& query_sentence, int max_gen) {
    Mat embed, pooled;
    model.encode_image(query_image, embed, pooled);
    int dropped = 0;
    Condition cond = assemble_context(model, pool, demos, pooled, query_sentence, max_gen, &dropped);

    IclPrediction out;
    out.demos_used = static_cast<int>(demos.triples.size()) - dropped;
    out.context_len = cond.length();
    out.raw = model.generate(cond, max_gen);
    BoxParse parse = string_to_boxes(out.raw);
    out.boxes = std::move(parse.boxes);
    out.malformed = parse.malformed;
    return out;
}

EvalReport evaluate_grounding(const ModelState& model, const std::vector<synth::Sample>& eval_samples,
                              const IclPool* pool, const GroundEvalOptions& opt) {
    if (opt.k > 0 && !pool)
        throw std::invalid_argument("evaluate_grounding: k > 0 requires a demonstration pool");
    const ModelState* selector = opt.selector ? opt.selector : &model;

    struct Query {
        const synth::Sample* sample;
        int sentence;
    };
    std::vector<Query> queries;
    for (const auto& s : eval_samples) {
        if (!s.has_boxes) continue;
        for (size_t k = 0; k < s.sentences.size(); ++k)
            if (k < s.boxes.size() && !s.boxes[k].empty())
                queries.push_back({&s, static_cast<int>(k)});
    }

    std::vector<QueryBoxes> qb(queries.size());
    std::vector<int> malformed(queries.size(), 0);
    std::vector<json> traces(queries.size());
    const bool want_trace = !opt.trace_path.empty();

    // per-sample encodings shared across that sample's sentences
    std::map<const synth::Sample*, int> sample_slot;
    std::vector<const synth::Sample*> uniq;
    for (const auto& q : queries)
        if (sample_slot.emplace(q.sample, static_cast<int>(uniq.size())).second)
            uniq.push_back(q.sample);
    std::vector<Mat> query_pooled(uniq.size());
    std::vector<Mat> sel_embed(uniq.size());
    parallel_for(static_cast<int64_t>(uniq.size()), [&](int64_t i) {
        Mat embed;
        model.encode_image(uniq[static_cast<size_t>(i)]->image, embed,
                           query_pooled[static_cast<size_t>(i)]);
        if (opt.k > 0) {
            Mat tokens;
            selector->img.forward(uniq[static_cast<size_t>(i)]->image, tokens,
                                  sel_embed[static_cast<size_t>(i)], nullptr);
        }
    });

    parallel_for(static_cast<int64_t>(queries.size()), [&](int64_t qi) {
        const Query& q = queries[static_cast<size_t>(qi)];
        const synth::Sample& s = *q.sample;
        const std::string& sentence = s.sentences[static_cast<size_t>(q.sentence)];
        const int slot = sample_slot.at(q.sample);

        IclPrediction pred;
        DemonstrationSet demos;
        Condition cond;
        if (opt.k > 0) {
            demos = select_demonstrations(sel_embed[static_cast<size_t>(slot)], *pool, opt.k, s.id);
            int dropped = 0;
            cond = assemble_context(model, *pool, demos, query_pooled[static_cast<size_t>(slot)],
                                    sentence, opt.max_gen, &dropped);
            pred.demos_used = static_cast<int>(demos.triples.size()) - dropped;
        } else {
            cond.add_soft(query_pooled[static_cast<size_t>(slot)]);
            cond.add_tokens(ground_cond_tokens(model, sentence));
        }
        pred.raw = model.generate(cond, opt.max_gen);
        BoxParse parse = string_to_boxes(pred.raw);
        pred.boxes = std::move(parse.boxes);
        pred.malformed = parse.malformed;
        pred.context_len = cond.length();

        QueryBoxes& out = qb[static_cast<size_t>(qi)];
        out.pred = pred.boxes;
        for (const auto& b : s.boxes[static_cast<size_t>(q.sentence)])
            out.gt.push_back(normalize_box(b, s.image.width, s.image.height));
        malformed[static_cast<size_t>(qi)] = pred.malformed ? 1 : 0;

        if (want_trace) {
            json t;
            t["query_id"] = s.id + "#" + std::to_string(q.sentence);
            t["sentence"] = sentence;
            json demo_ids = json::array(), demo_scores = json::array();
            for (const auto& d : demos.triples) {
                demo_ids.push_back(d.id);
                demo_scores.push_back(d.score);
            }
            t["demo_ids"] = demo_ids;
            t["demo_scores"] = demo_scores;
            t["context_len"] = pred.context_len;
            t["raw"] = pred.raw;
            t["malformed"] = pred.malformed;
            json boxes = json::array();
            for (const auto& b : pred.boxes)
                boxes.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
            t["boxes"] = boxes;
            traces[static_cast<size_t>(qi)] = std::move(t);
        }
    });

    if (want_trace) {
        std::ofstream tf(opt.trace_path);
        if (!tf) throw std::runtime_error("evaluate_grounding: cannot write " + opt.trace_path);
        for (const auto& t : traces) tf << t.dump() << "\n";
    }

    Prf prf = prf_at_iou(qb, 0.5);
    RobustOutcome ro = robust_outcome(qb);
    EvalReport rep;
    rep.P05 = prf.precision;
    rep.R05 = prf.recall;
    rep.F05 = prf.f1;
    rep.RoL = ro.rol;
    rep.RoS = ro.ros;
    rep.n_images = static_cast<int>(eval_samples.size());
    for (const auto& q : qb) {
        rep.n_gt += static_cast<int>(q.gt.size());
        rep.n_pred += static_cast<int>(q.pred.size());
    }
    for (int m : malformed) rep.n_malformed += m;
    return rep;
}

}  // namespace lofi
