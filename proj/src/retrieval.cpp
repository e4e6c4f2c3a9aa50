#include "lofi/retrieval.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace lofi {

EmbeddingIndex build_index(const Mat& embeddings, const std::vector<std::string>& ids) {
    if (static_cast<size_t>(embeddings.rows) != ids.size())
        throw std::invalid_argument("build_index: ids/rows mismatch");
    EmbeddingIndex idx;
    idx.ids = ids;
    idx.vectors = embeddings;
    for (int i = 0; i < embeddings.rows; ++i) {
        double norm = l2_norm(idx.vectors.row(i), idx.vectors.cols);
        if (norm <= 0) throw std::invalid_argument("build_index: zero vector for id " + ids[static_cast<size_t>(i)]);
        double inv = 1.0 / norm;
        double* row = idx.vectors.row(i);
        for (int j = 0; j < idx.vectors.cols; ++j) row[j] *= inv;
        if (!idx.row_of.emplace(ids[static_cast<size_t>(i)], i).second)
            throw std::invalid_argument("build_index: duplicate id " + ids[static_cast<size_t>(i)]);
    }
    return idx;
}

RankingResult topk(const EmbeddingIndex& index, const Mat& query, int k,
                   const std::string& query_id) {
    if (index.size() == 0) throw std::runtime_error("topk: empty index");
    if (k < 1) throw std::invalid_argument("topk: k must be >= 1");
    if (query.cols != index.dim() || query.rows != 1)
        throw std::invalid_argument("topk: query dimension mismatch");

    double qnorm = l2_norm(query.row(0), query.cols);
    if (qnorm <= 0) throw std::invalid_argument("topk: zero query");
    std::vector<std::pair<double, int>> scored(static_cast<size_t>(index.size()));
    for (int i = 0; i < index.size(); ++i)
        scored[static_cast<size_t>(i)] = {dot(query.row(0), index.vectors.row(i), query.cols) / qnorm, i};

    int kk = std::min(k, index.size());
    auto cmp = [&](const std::pair<double, int>& a, const std::pair<double, int>& b) {
        if (a.first != b.first) return a.first > b.first;
        return index.ids[static_cast<size_t>(a.second)] < index.ids[static_cast<size_t>(b.second)];
    };
    std::partial_sort(scored.begin(), scored.begin() + kk, scored.end(), cmp);

    RankingResult r;
    r.query_id = query_id;
    r.ranked.reserve(static_cast<size_t>(kk));
    for (int i = 0; i < kk; ++i)
        r.ranked.emplace_back(index.ids[static_cast<size_t>(scored[static_cast<size_t>(i)].second)],
                              scored[static_cast<size_t>(i)].first);
    return r;
}

std::vector<std::vector<std::string>> split_subreports(const std::vector<std::string>& sentences,
                                                       int n) {
    if (sentences.empty()) throw std::invalid_argument("split_subreports: empty sentence list");
    if (n < 1) throw std::invalid_argument("split_subreports: n must be >= 1");
    std::vector<std::vector<std::string>> chunks;
    for (size_t i = 0; i < sentences.size(); i += static_cast<size_t>(n)) {
        size_t hi = std::min(sentences.size(), i + static_cast<size_t>(n));
        chunks.emplace_back(sentences.begin() + static_cast<long>(i),
                            sentences.begin() + static_cast<long>(hi));
    }
    return chunks;
}

namespace {

std::string parent_of(const std::string& id, const std::map<std::string, std::string>& parents) {
    auto it = parents.find(id);
    return it == parents.end() ? id : it->second;
}

}  // namespace

double recall_at_k(const std::vector<RankingResult>& rankings,
                   const std::map<std::string, std::set<std::string>>& relevant, int k,
                   const std::map<std::string, std::string>& candidate_parent,
                   const std::map<std::string, std::string>& query_parent) {
    if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
    // group rankings by report-level query unit
    std::map<std::string, bool> unit_hit;
    for (const auto& r : rankings) {
        std::string unit = parent_of(r.query_id, query_parent);
        auto rel = relevant.find(unit);
        if (rel == relevant.end() || rel->second.empty())
            throw std::invalid_argument("recall_at_k: query " + unit + " has no relevant set");
        bool& hit = unit_hit[unit];
        int upto = std::min<int>(k, static_cast<int>(r.ranked.size()));
        for (int i = 0; i < upto && !hit; ++i)
            if (rel->second.count(parent_of(r.ranked[static_cast<size_t>(i)].first, candidate_parent)))
                hit = true;
    }
    if (unit_hit.empty()) throw std::invalid_argument("recall_at_k: no queries");
    int hits = 0;
    for (const auto& [unit, hit] : unit_hit)
        if (hit) ++hits;
    return 100.0 * hits / static_cast<double>(unit_hit.size());
}

void save_index(const EmbeddingIndex& index, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_index: cannot write " + path);
    uint32_t version = 1;
    uint64_t n = static_cast<uint64_t>(index.size());
    uint64_t d = static_cast<uint64_t>(index.dim());
    out.write("LOFIIDX1", 8);
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(reinterpret_cast<const char*>(&d), 8);
    for (const auto& id : index.ids) {
        uint32_t len = static_cast<uint32_t>(id.size());
        out.write(reinterpret_cast<const char*>(&len), 4);
        out.write(id.data(), len);
    }
    out.write(reinterpret_cast<const char*>(index.vectors.data()),
              static_cast<std::streamsize>(index.vectors.size() * sizeof(double)));
    if (!out) throw std::runtime_error("save_index: write failed");
}

EmbeddingIndex load_index(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_index: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (std::memcmp(magic, "LOFIIDX1", 8) != 0) throw std::runtime_error("load_index: bad magic");
    uint32_t version = 0;
    uint64_t n = 0, d = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&n), 8);
    in.read(reinterpret_cast<char*>(&d), 8);
    EmbeddingIndex idx;
    idx.ids.resize(n);
    for (auto& id : idx.ids) {
        uint32_t len = 0;
        in.read(reinterpret_cast<char*>(&len), 4);
        id.resize(len);
        in.read(id.data(), len);
    }
    idx.vectors.resize(static_cast<int>(n), static_cast<int>(d));
    in.read(reinterpret_cast<char*>(idx.vectors.data()),
            static_cast<std::streamsize>(idx.vectors.size() * sizeof(double)));
    if (!in) throw std::runtime_error("load_index: truncated file");
    for (int i = 0; i < idx.size(); ++i)
        if (!idx.row_of.emplace(idx.ids[static_cast<size_t>(i)], i).second)
            throw std::runtime_error("load_index: duplicate id");
    return idx;
}

RetrievalEval evaluate_retrieval(const ModelState& state,
                                 const std::vector<synth::Sample>& samples,
                                 const std::vector<int>& ks, int subreport_n) {
    if (samples.empty()) throw std::invalid_argument("evaluate_retrieval: no samples");

    // image side: one embedding per sample
    Mat img_embeds(static_cast<int>(samples.size()), state.cfg.d);
    std::vector<std::string> img_ids(samples.size());
    parallel_for(static_cast<int64_t>(samples.size()), [&](int64_t i) {
        Mat embed, pooled;
        Mat tokens;
        state.img.forward(samples[static_cast<size_t>(i)].image, tokens, embed, nullptr);
        std::copy(embed.row(0), embed.row(0) + state.cfg.d, img_embeds.row(static_cast<int>(i)));
    });
    for (size_t i = 0; i < samples.size(); ++i) img_ids[i] = samples[i].id;

    // text side: sub-report embeddings with parent mapping
    std::vector<std::string> txt_ids;
    std::vector<std::pair<size_t, std::string>> txt_jobs;  // (sample, joined text)
    std::map<std::string, std::string> txt_parent;
    for (const auto& s : samples) {
        auto chunks = split_subreports(s.sentences, subreport_n);
        for (size_t c = 0; c < chunks.size(); ++c) {
            std::string id = s.id + "#" + std::to_string(c);
            std::string text;
            for (const auto& sent : chunks[c]) {
                if (!text.empty()) text += ' ';
                text += sent;
            }
            txt_ids.push_back(id);
            txt_parent[id] = s.id;
            txt_jobs.emplace_back(txt_ids.size() - 1, text);
        }
    }
    Mat txt_embeds(static_cast<int>(txt_ids.size()), state.cfg.d);
    parallel_for(static_cast<int64_t>(txt_jobs.size()), [&](int64_t i) {
        Mat e = state.encode_text(txt_jobs[static_cast<size_t>(i)].second);
        std::copy(e.row(0), e.row(0) + state.cfg.d,
                  txt_embeds.row(static_cast<int>(txt_jobs[static_cast<size_t>(i)].first)));
    });

    EmbeddingIndex img_index = build_index(img_embeds, img_ids);
    EmbeddingIndex txt_index = build_index(txt_embeds, txt_ids);
    int max_k = 1;
    for (int k : ks) max_k = std::max(max_k, k);

    // image -> text
    std::vector<RankingResult> i2t_rank(samples.size());
    parallel_for(static_cast<int64_t>(samples.size()), [&](int64_t i) {
        Mat q(1, state.cfg.d);
        std::copy(img_embeds.row(static_cast<int>(i)), img_embeds.row(static_cast<int>(i)) + state.cfg.d,
                  q.row(0));
        i2t_rank[static_cast<size_t>(i)] = topk(txt_index, q, max_k, samples[static_cast<size_t>(i)].id);
    });
    std::map<std::string, std::set<std::string>> i2t_rel;
    for (const auto& s : samples) i2t_rel[s.id] = {s.id};

    // text -> image (each sub-report queries separately; report-level pooling)
    std::vector<RankingResult> t2i_rank(txt_ids.size());
    parallel_for(static_cast<int64_t>(txt_ids.size()), [&](int64_t i) {
        Mat q(1, state.cfg.d);
        std::copy(txt_embeds.row(static_cast<int>(i)), txt_embeds.row(static_cast<int>(i)) + state.cfg.d,
                  q.row(0));
        t2i_rank[static_cast<size_t>(i)] = topk(img_index, q, max_k, txt_ids[static_cast<size_t>(i)]);
    });

    RetrievalEval ev;
    for (int k : ks) {
        ev.i2t[k] = recall_at_k(i2t_rank, i2t_rel, k, txt_parent, {});
        ev.t2i[k] = recall_at_k(t2i_rank, i2t_rel, k, {}, txt_parent);
    }
    return ev;
}

}  // namespace lofi
