#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "ratt/common.hpp"
#include "ratt/mat.hpp"
#include "ratt/model.hpp"

namespace ratt {

// softmax(w / tau); shares the exact arithmetic of the tape softmax so the
// value path and the training path agree bit for bit.
inline std::vector<double> head_distribution(const Mat& w_head, double tau) {
    if (tau <= 0.0) throw NumericError("head_distribution: tau must be positive");
    const std::size_t h = w_head.cols();
    const double inv_tau = 1.0 / tau;
    std::vector<double> z(h);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < h; ++i) {
        z[i] = w_head(0, i) * inv_tau;
        mx = std::max(mx, z[i]);
    }
    double se = 0.0;
    for (std::size_t i = 0; i < h; ++i) {
        z[i] = std::exp(z[i] - mx);
        se += z[i];
    }
    const double inv = 1.0 / se;
    for (double& p : z) p *= inv;
    return z;
}

// argmax of P_head; ties take the lowest head index.
inline int retrieval_head(const Mat& w_head, double tau) {
    std::vector<double> p = head_distribution(w_head, tau);
    int best = 0;
    for (std::size_t i = 1; i < p.size(); ++i)
        if (p[i] > p[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

// A[i][j] = dot(query row i, doc key row j). Query rows carry the model's
// 1/sqrt(e) attention scaling, so these are the joint encoder's pre-softmax
// logits from query tokens to document tokens.
inline Mat attention_matrix(const EncodedSeq& q, const EncodedSeq& d, int head) {
    if (head < 0 || static_cast<std::size_t>(head) >= q.heads.size())
        throw DataError("attention_matrix: head index out of range");
    Mat a;
    matmul_nt_into(q.heads[static_cast<std::size_t>(head)],
                   d.heads[static_cast<std::size_t>(head)], a);
    return a;
}

// Mean over unmasked rows of the max over unmasked columns. Mirrors
// Tape::avg_max exactly (same accumulation order, first-max ties).
inline double avg_max(const Mat& a, const std::vector<char>& row_mask,
                      const std::vector<char>& col_mask) {
    double total = 0.0;
    std::size_t nrows = 0;
    for (std::size_t r = 0; r < a.rows(); ++r) {
        if (!row_mask.empty() && !row_mask[r]) continue;
        double best = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t c = 0; c < a.cols(); ++c) {
            if (!col_mask.empty() && !col_mask[c]) continue;
            if (!any || a(r, c) > best) {
                best = a(r, c);
                any = true;
            }
        }
        if (!any) throw NumericError("avg_max: no unmasked column");
        total += best;
        ++nrows;
    }
    if (nrows == 0) throw NumericError("avg_max: no unmasked row");
    return total / static_cast<double>(nrows);
}

struct RelevanceScore {
    std::vector<double> per_head;
    double combined = 0.0;
};

inline RelevanceScore relevance(const EncodedSeq& q, const EncodedSeq& d, const Mat& w_head,
                                double tau) {
    RelevanceScore rs;
    rs.per_head.reserve(q.heads.size());
    for (std::size_t h = 0; h < q.heads.size(); ++h)
        rs.per_head.push_back(avg_max(attention_matrix(q, d, static_cast<int>(h)), q.mask, d.mask));
    std::vector<double> p = head_distribution(w_head, tau);
    for (std::size_t h = 0; h < p.size(); ++h) rs.combined += p[h] * rs.per_head[h];
    return rs;
}

// Tape counterpart used in training; gradient reaches both token
// representations and the head logits.
inline ad::Var relevance_from(ad::Tape& t, const std::vector<ad::Var>& q_heads,
                              const std::vector<char>& q_mask,
                              const std::vector<ad::Var>& k_heads,
                              const std::vector<char>& k_mask, ad::Var w_head, double tau) {
    std::vector<ad::Var> rh;
    rh.reserve(q_heads.size());
    for (std::size_t h = 0; h < q_heads.size(); ++h)
        rh.push_back(t.avg_max(t.matmul_nt(q_heads[h], k_heads[h]), q_mask, k_mask));
    ad::Var stacked = t.stack_scalars(rh);
    ad::Var ph = t.softmax_rows(t.scale(w_head, 1.0 / tau));
    return t.matmul(ph, stacked); // 1x1
}

inline ad::Var relevance_var(Fwd& f, const BiEnc& q, const BiEnc& d) {
    return relevance_from(f.t, q.heads, q.mask, d.heads, d.mask, f.pv.w_head, f.cfg.tau);
}

// ----------------------------------------------------------------------
// Head probing: Pearson correlation between per-head relevance scores and
// binary labels, averaged over queries.
// ----------------------------------------------------------------------

struct HeadProbe {
    int head_id = 0;
    double correlation = 0.0;
    double weight = 0.0;
};

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return sxy / std::sqrt(sxx * syy);
}

// candidates[i] lists (doc index into corpus.docs, binary label) for query i.
inline std::vector<HeadProbe> probe_heads(const Model& m, const std::vector<Query>& queries,
                                          const std::vector<std::vector<std::pair<int, int>>>& candidates,
                                          const Corpus& corpus) {
    const std::size_t nh = static_cast<std::size_t>(m.cfg.heads);
    std::vector<double> corr_sum(nh, 0.0);
    std::vector<std::size_t> corr_n(nh, 0);
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        if (candidates[qi].size() < 2) continue;
        EncodedSeq qe = encode_bi_values(m, queries[qi].tokens, true);
        std::vector<std::vector<double>> scores(nh);
        std::vector<double> labels;
        for (const auto& [doc_idx, label] : candidates[qi]) {
            EncodedSeq de = encode_bi_values(m, corpus.docs[static_cast<std::size_t>(doc_idx)].tokens, false);
            for (std::size_t h = 0; h < nh; ++h)
                scores[h].push_back(avg_max(attention_matrix(qe, de, static_cast<int>(h)), qe.mask, de.mask));
            labels.push_back(label > 0 ? 1.0 : 0.0);
        }
        for (std::size_t h = 0; h < nh; ++h) {
            double c = pearson(scores[h], labels);
            if (std::isnan(c)) continue; // zero-variance query skipped for this head
            corr_sum[h] += c;
            ++corr_n[h];
        }
    }
    std::vector<double> weights = head_distribution(m.params.w_head, m.cfg.tau);
    std::vector<HeadProbe> out;
    for (std::size_t h = 0; h < nh; ++h)
        out.push_back({static_cast<int>(h),
                       corr_n[h] ? corr_sum[h] / static_cast<double>(corr_n[h]) : 0.0, weights[h]});
    std::sort(out.begin(), out.end(), [](const HeadProbe& a, const HeadProbe& b) {
        if (a.correlation != b.correlation) return a.correlation > b.correlation;
        return a.head_id < b.head_id;
    });
    return out;
}

inline void write_probe_report(const std::string& path, const std::vector<HeadProbe>& probes) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "# correlation is Pearson, between per-head relevance and binary labels\n";
    out << "head_id\tcorrelation\tweight\n";
    char buf[128];
    for (const HeadProbe& p : probes) {
        std::snprintf(buf, sizeof(buf), "%d\t%.6f\t%.6f\n", p.head_id, p.correlation, p.weight);
        out << buf;
    }
    if (!out) throw DataError("short write: " + path);
}

} // namespace ratt
