#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "lofi/model.hpp"
#include "lofi/synthgen.hpp"
#include "lofi/tensor.hpp"

namespace lofi {

struct EmbeddingIndex {
    std::vector<std::string> ids;
    Mat vectors;  // N×d, unit rows
    std::map<std::string, int> row_of;

    int size() const { return vectors.rows; }
    int dim() const { return vectors.cols; }
};

// Rows are re-normalized on build; the index is immutable afterwards.
// Throws on duplicate ids or ragged dimensions.
EmbeddingIndex build_index(const Mat& embeddings, const std::vector<std::string>& ids);

struct RankingResult {
    std::string query_id;
    std::vector<std::pair<std::string, double>> ranked;  // (candidate id, cosine), descending
};

// k highest-cosine candidates, score descending, ties by ascending id;
// k > N clamps to N. Throws on an empty index or dimension mismatch.
RankingResult topk(const EmbeddingIndex& index, const Mat& query, int k,
                   const std::string& query_id = "");

// Consecutive chunks of n sentences, last chunk possibly shorter.
std::vector<std::vector<std::string>> split_subreports(const std::vector<std::string>& sentences,
                                                       int n = 5);

// Report-level Recall@K as a percentage. Queries and candidates may be
// sub-report units: parent maps collapse them to reports, and any sub-report
// hit counts as a report hit. relevant is keyed by (parent-collapsed) query.
double recall_at_k(const std::vector<RankingResult>& rankings,
                   const std::map<std::string, std::set<std::string>>& relevant, int k,
                   const std::map<std::string, std::string>& candidate_parent = {},
                   const std::map<std::string, std::string>& query_parent = {});

void save_index(const EmbeddingIndex& index, const std::string& path);
EmbeddingIndex load_index(const std::string& path);

// Table-1-style protocol on a sample set: texts split into five-sentence
// sub-reports, both directions, report-level scoring.
struct RetrievalEval {
    std::map<int, double> i2t;
    std::map<int, double> t2i;
};

RetrievalEval evaluate_retrieval(const ModelState& state,
                                 const std::vector<synth::Sample>& samples,
                                 const std::vector<int>& ks = {1, 5, 10, 20, 40},
                                 int subreport_n = 5);

}  // namespace lofi
