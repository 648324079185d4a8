#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "ratt/common.hpp"
#include "ratt/corpus.hpp"
#include "ratt/model.hpp"
#include "ratt/scoring.hpp"

namespace ratt {

// Flat store of retrieval-head key vectors for every non-pad document token.
// Rows are kept at float32 precision in memory as well as on disk, so scores
// do not depend on whether the index was freshly built or loaded back.
struct TokenIndex {
    int head_dim = 0; // e
    int heads = 0;    // H of the producing model
    int hstar = 0;    // retrieval head the rows were taken from
    std::uint64_t fingerprint = 0;
    Mat rows; // n x e
    std::vector<std::uint32_t> doc_id;
    std::vector<std::uint32_t> token_pos;
    // derived: per-document [begin, end) row ranges, index = dense doc id
    std::vector<std::pair<std::uint32_t, std::uint32_t>> doc_range;

    void rebuild_ranges() {
        doc_range.clear();
        std::uint32_t max_doc = 0;
        for (std::uint32_t d : doc_id) max_doc = std::max(max_doc, d);
        if (doc_id.empty()) return;
        doc_range.assign(max_doc + 1, {0, 0});
        std::size_t i = 0;
        while (i < doc_id.size()) {
            std::size_t j = i;
            while (j < doc_id.size() && doc_id[j] == doc_id[i]) ++j;
            doc_range[doc_id[i]] = {static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)};
            i = j;
        }
    }
};

inline TokenIndex build_index(const Corpus& corpus, const Model& m, std::uint64_t fingerprint) {
    if (corpus.docs.empty()) throw DataError("build_index: empty corpus");
    TokenIndex idx;
    idx.head_dim = m.cfg.head_dim;
    idx.heads = m.cfg.heads;
    idx.hstar = retrieval_head(m.params.w_head, m.cfg.tau);
    idx.fingerprint = fingerprint;
    std::size_t total = 0;
    for (const Document& d : corpus.docs)
        for (int t : d.tokens)
            if (t != Vocabulary::kPad) ++total;
    idx.rows = Mat(total, static_cast<std::size_t>(m.cfg.head_dim));
    idx.doc_id.reserve(total);
    idx.token_pos.reserve(total);
    std::size_t r = 0;
    for (const Document& d : corpus.docs) {
        EncodedSeq es = encode_bi_values(m, d.tokens, false);
        const Mat& k = es.heads[static_cast<std::size_t>(idx.hstar)];
        for (std::size_t t = 0; t < d.tokens.size(); ++t) {
            if (d.tokens[t] == Vocabulary::kPad) continue;
            for (std::size_t c = 0; c < k.cols(); ++c)
                idx.rows(r, c) = static_cast<double>(static_cast<float>(k(t, c)));
            idx.doc_id.push_back(static_cast<std::uint32_t>(d.doc_id));
            idx.token_pos.push_back(static_cast<std::uint32_t>(t));
            ++r;
        }
    }
    idx.rebuild_ranges();
    log_info("built token index: " + std::to_string(total) + " rows, head " +
             std::to_string(idx.hstar));
    return idx;
}

inline void save_index(const std::string& path, const TokenIndex& idx) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out.write("RATTIDX1", 8);
    io::write_u32(out, static_cast<std::uint32_t>(idx.head_dim));
    io::write_u32(out, static_cast<std::uint32_t>(idx.heads));
    io::write_u32(out, static_cast<std::uint32_t>(idx.hstar));
    io::write_u64(out, idx.rows.rows());
    io::write_u64(out, idx.fingerprint);
    for (double v : idx.rows.vec()) io::write_f32(out, static_cast<float>(v));
    for (std::uint32_t d : idx.doc_id) io::write_u32(out, d);
    for (std::uint32_t p : idx.token_pos) io::write_u32(out, p);
    if (!out) throw DataError("short write: " + path);
}

inline TokenIndex load_index(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    io::expect_magic(in, "RATTIDX1", path);
    TokenIndex idx;
    idx.head_dim = static_cast<int>(io::read_u32(in));
    idx.heads = static_cast<int>(io::read_u32(in));
    idx.hstar = static_cast<int>(io::read_u32(in));
    std::uint64_t n = io::read_u64(in);
    idx.fingerprint = io::read_u64(in);
    idx.rows = Mat(n, static_cast<std::size_t>(idx.head_dim));
    for (double& v : idx.rows.vec()) v = static_cast<double>(io::read_f32(in));
    idx.doc_id.resize(n);
    for (auto& d : idx.doc_id) d = io::read_u32(in);
    idx.token_pos.resize(n);
    for (auto& p : idx.token_pos) p = io::read_u32(in);
    if (!in) throw DataError("truncated file: " + path);
    idx.rebuild_ranges();
    return idx;
}

// Exact inner-product top-k over all rows; score desc, ties by ascending row.
inline std::vector<std::pair<std::size_t, double>> token_search(const TokenIndex& idx,
                                                                const double* qvec,
                                                                std::size_t kprime) {
    const std::size_t n = idx.rows.rows();
    const std::size_t e = static_cast<std::size_t>(idx.head_dim);
    if (kprime == 0 || n == 0) return {};
    std::vector<std::pair<std::size_t, double>> scored(n);
    for (std::size_t r = 0; r < n; ++r) scored[r] = {r, dot(qvec, idx.rows.row(r), e)};
    auto better = [](const std::pair<std::size_t, double>& a,
                     const std::pair<std::size_t, double>& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    };
    if (kprime >= n) {
        std::sort(scored.begin(), scored.end(), better);
        return scored;
    }
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(kprime),
                      scored.end(), better);
    scored.resize(kprime);
    return scored;
}

struct RetrievalResult {
    std::string query_id;
    std::vector<std::pair<int, double>> ranked; // (doc_id, r) score desc, doc_id asc on ties
    std::size_t k = 0;
    std::size_t kprime = 0;
};

// Stage 1: per non-pad query token, top-K' inner products over the token
// store; the union of hit documents forms the candidate set. Stage 2: full
// avg-max over every stored token of each candidate, ranked top-K.
inline RetrievalResult retrieve(const TokenIndex& idx, const Query& query, const Model& m,
                                std::size_t k, std::size_t kprime,
                                std::uint64_t params_fingerprint = 0) {
    if (params_fingerprint && idx.fingerprint && params_fingerprint != idx.fingerprint)
        throw DataError("retrieve: index was built from a different checkpoint");
    RetrievalResult res;
    res.query_id = query.ext_id;
    res.k = k;
    res.kprime = kprime;
    if (k == 0) return res;
    EncodedSeq qe = encode_bi_values(m, query.tokens, true);
    const Mat& qh = qe.heads[static_cast<std::size_t>(idx.hstar)];

    std::unordered_set<std::uint32_t> cand_set;
    for (std::size_t i = 0; i < query.tokens.size(); ++i) {
        if (!qe.mask[i]) continue;
        for (const auto& [row, score] : token_search(idx, qh.row(i), kprime))
            cand_set.insert(idx.doc_id[row]);
    }
    std::vector<std::uint32_t> cands(cand_set.begin(), cand_set.end());
    std::sort(cands.begin(), cands.end());

    res.ranked.reserve(cands.size());
    for (std::uint32_t d : cands) {
        const auto [begin, end] = idx.doc_range[d];
        if (begin == end) continue;
        double total = 0.0;
        std::size_t nq = 0;
        for (std::size_t i = 0; i < query.tokens.size(); ++i) {
            if (!qe.mask[i]) continue;
            const double* qrow = qh.row(i);
            double best = dot(qrow, idx.rows.row(begin), static_cast<std::size_t>(idx.head_dim));
            for (std::uint32_t r = begin + 1; r < end; ++r) {
                double s = dot(qrow, idx.rows.row(r), static_cast<std::size_t>(idx.head_dim));
                if (s > best) best = s;
            }
            total += best;
            ++nq;
        }
        res.ranked.emplace_back(static_cast<int>(d), total / static_cast<double>(nq));
    }
    std::sort(res.ranked.begin(), res.ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (res.ranked.size() > k) res.ranked.resize(k);
    return res;
}

inline TokenIndex reindex(const Corpus& corpus, const Model& m, std::uint64_t fingerprint = 0) {
    return build_index(corpus, m, fingerprint);
}

} // namespace ratt
