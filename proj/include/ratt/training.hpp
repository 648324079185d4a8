#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ratt/common.hpp"
#include "ratt/corpus.hpp"
#include "ratt/eval.hpp"
#include "ratt/index.hpp"
#include "ratt/model.hpp"
#include "ratt/scoring.hpp"

namespace ratt {

struct TrainConfig {
    double alpha = 8.0;
    int batch_queries = 8; // |Q|
    int k_close = 10;      // K close documents per query
    double lr = 5e-5;
    int warmup_steps = 0; // QA-only phase before the cross-document loss applies
    int steps_per_iter = 0;
    int iterations = 1;
    std::uint64_t seed = 1;
    int micro_batch = 0; // >0 switches steps to the two-pass gradient cache
    int kprime = 2048;   // stage-1 token budget when close sets refresh from the model
    double weight_decay = 0.0;
    int eval_every = 50; // dev R@1 cadence in the metrics log

    int total_steps() const { return warmup_steps + steps_per_iter * iterations; }

    void validate() const {
        if (alpha < 0.0) throw DataError("train config: alpha must be >= 0");
        if (batch_queries < 1) throw DataError("train config: batch_queries must be >= 1");
        if (k_close < 1) throw DataError("train config: k_close must be >= 1");
        if (lr <= 0.0) throw DataError("train config: lr must be positive");
        if (warmup_steps < 0 || steps_per_iter < 0 || iterations < 0)
            throw DataError("train config: step counts must be non-negative");
        if (micro_batch < 0) throw DataError("train config: micro_batch must be >= 0");
        if (kprime < 1) throw DataError("train config: kprime must be >= 1");
    }
};

struct LossReport {
    double l_qa = 0.0;
    double l_cross_doc = 0.0;
    double total = 0.0;
    double alpha = 0.0;
};

// ----------------------------------------------------------------------
// Distributions of the cross-document loss
// ----------------------------------------------------------------------

// Joint softmax per head over every valid (pair, token) logit, summed within
// each pair, averaged over heads. Output has one entry per fused pair.
inline std::vector<double> target_distribution(const TargetAttn& ta) {
    const std::size_t nh = ta.logits.rows();
    const std::size_t np = ta.pair_offsets.size() - 1;
    const std::size_t m = ta.logits.cols();
    std::vector<double> out(np, 0.0);
    for (std::size_t h = 0; h < nh; ++h) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < m; ++t)
            if (ta.mem_mask[t]) mx = std::max(mx, ta.logits(h, t));
        if (mx == -std::numeric_limits<double>::infinity())
            throw NumericError("target_distribution: no valid memory token");
        std::vector<double> pair_sum(np, 0.0);
        double z = 0.0;
        for (std::size_t p = 0; p < np; ++p)
            for (std::size_t t = ta.pair_offsets[p]; t < ta.pair_offsets[p + 1]; ++t) {
                if (!ta.mem_mask[t]) continue;
                double e = std::exp(ta.logits(h, t) - mx);
                pair_sum[p] += e;
                z += e;
            }
        for (std::size_t p = 0; p < np; ++p) out[p] += pair_sum[p] / z;
    }
    for (double& v : out) v /= static_cast<double>(nh);
    return out;
}

// Random documents carry exactly zero target mass.
inline std::vector<double> extend_with_randoms(std::vector<double> p_tgt_close,
                                               std::size_t n_random) {
    p_tgt_close.insert(p_tgt_close.end(), n_random, 0.0);
    return p_tgt_close;
}

inline std::vector<double> retrieval_distribution(const std::vector<double>& scores) {
    std::vector<double> p(scores.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (double s : scores) mx = std::max(mx, s);
    double se = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        p[i] = std::exp(scores[i] - mx);
        se += p[i];
    }
    const double inv = 1.0 / se;
    for (double& v : p) v *= inv;
    return p;
}

// KL(P^tgt || P^ret) with 0 ln 0 := 0. A tiny negative value from rounding
// (below 1e-12) is clamped to zero.
inline double cross_doc_loss(const std::vector<double>& p_tgt, const std::vector<double>& p_ret) {
    if (p_tgt.size() != p_ret.size())
        throw DataError("cross_doc_loss: distributions differ in length");
    double kl = 0.0;
    for (std::size_t i = 0; i < p_tgt.size(); ++i) {
        if (p_tgt[i] <= 0.0) continue;
        if (p_ret[i] <= 0.0) throw NumericError("cross_doc_loss: zero retrieval mass at a target");
        kl += p_tgt[i] * (std::log(p_tgt[i]) - std::log(p_ret[i]));
    }
    if (kl < 0.0 && kl > -1e-12) kl = 0.0;
    return kl;
}

// sum_i p_i ln p_i over positive entries (the constant part of the KL).
inline double entropy_term(const std::vector<double>& p) {
    double s = 0.0;
    for (double v : p)
        if (v > 0.0) s += v * std::log(v);
    return s;
}

// ----------------------------------------------------------------------
// Answer encoding
// ----------------------------------------------------------------------

inline std::vector<int> answer_token_ids(const std::string& answer, const Vocabulary& vocab,
                                         int max_dec_len) {
    std::vector<int> ids = tokenize(answer, vocab, static_cast<std::size_t>(max_dec_len - 1));
    if (ids.empty()) throw DataError("empty answer");
    ids.push_back(Vocabulary::kEos);
    return ids;
}

// Teacher forcing: PAD is the decoder start token.
inline std::vector<int> decoder_input_for(const std::vector<int>& answer_ids) {
    std::vector<int> in{Vocabulary::kPad};
    in.insert(in.end(), answer_ids.begin(), answer_ids.end() - 1);
    return in;
}

// ----------------------------------------------------------------------
// Optimizer
// ----------------------------------------------------------------------

class AdamW {
  public:
    AdamW() = default;
    AdamW(double beta1, double beta2, double eps, double weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

    void init(const ModelParams& p) {
        m_.clear();
        v_.clear();
        p.for_each([&](const std::string&, const Mat& t) {
            m_.emplace_back(t.rows(), t.cols());
            v_.emplace_back(t.rows(), t.cols());
        });
        t_ = 0;
    }

    // grads must follow for_each order; lr is the already-scheduled rate.
    void step(ModelParams& p, const std::vector<Mat>& grads, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        std::size_t i = 0;
        p.for_each([&](const std::string&, Mat& w) {
            Mat& m = m_[i];
            Mat& v = v_[i];
            const Mat& g = grads[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                double gj = g.vec()[j];
                m.vec()[j] = beta1_ * m.vec()[j] + (1.0 - beta1_) * gj;
                v.vec()[j] = beta2_ * v.vec()[j] + (1.0 - beta2_) * gj * gj;
                double mhat = m.vec()[j] / bc1;
                double vhat = v.vec()[j] / bc2;
                w.vec()[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w.vec()[j]);
            }
            ++i;
        });
    }

  private:
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    double wd_ = 0.0;
    std::vector<Mat> m_, v_;
    int t_ = 0;
};

// ----------------------------------------------------------------------
// Batches
// ----------------------------------------------------------------------

struct TrainExample {
    std::string ext_id;
    std::vector<int> q_tokens;
    std::vector<int> answer_ids; // EOS-terminated
    std::vector<std::string> answers;
};

struct TrainBatch {
    std::vector<int> ex;                 // indices into the example list
    std::vector<std::vector<int>> close; // per slot: K close doc ids
    std::vector<std::vector<int>> randoms;
};

// In-batch randoms: the union of the other slots' close documents, minus the
// slot's own close set, deduplicated, ascending doc id.
inline void derive_randoms(TrainBatch& b) {
    b.randoms.assign(b.close.size(), {});
    for (std::size_t i = 0; i < b.close.size(); ++i) {
        std::unordered_set<int> own(b.close[i].begin(), b.close[i].end());
        std::unordered_set<int> seen;
        for (std::size_t j = 0; j < b.close.size(); ++j) {
            if (j == i) continue;
            for (int d : b.close[j])
                if (!own.count(d) && seen.insert(d).second) b.randoms[i].push_back(d);
        }
        std::sort(b.randoms[i].begin(), b.randoms[i].end());
    }
}

// Tracks concurrently held joint (query+document) encodings so tests can
// bound the memory behaviour of the two-pass step.
struct CrossCounter {
    std::size_t live = 0;
    std::size_t peak = 0;
    void up() {
        ++live;
        peak = std::max(peak, live);
    }
    void release(std::size_t n) { live -= std::min(live, n); }
};

// ----------------------------------------------------------------------
// Trainer
// ----------------------------------------------------------------------

class Trainer {
  public:
    Trainer(Model& model, const Corpus& corpus, TrainConfig tc)
        : model_(model), corpus_(corpus), tc_(tc), rng_(tc.seed),
          opt_(0.9, 0.999, 1e-8, tc.weight_decay) {
        tc_.validate();
        opt_.init(model_.params);
        total_steps_ = std::max(1, tc_.total_steps());
    }

    const TrainConfig& config() const { return tc_; }
    int step_count() const { return global_step_; }
    const CrossCounter& cross_counter() const { return stats_; }
    void reset_cross_counter() { stats_ = CrossCounter{}; }

    void set_examples(std::vector<TrainExample> ex) {
        examples_ = std::move(ex);
        close_.assign(examples_.size(), {});
        order_.clear();
    }

    static std::vector<TrainExample> make_examples(const std::vector<Query>& queries,
                                                   const Model& m) {
        std::vector<TrainExample> out;
        out.reserve(queries.size());
        for (const Query& q : queries) {
            if (q.answers.empty()) throw DataError("query `" + q.ext_id + "` has no answer");
            TrainExample ex;
            ex.ext_id = q.ext_id;
            ex.q_tokens = q.tokens;
            ex.answers = q.answers;
            ex.answer_ids = answer_token_ids(q.answers[0], m.vocab, m.cfg.max_dec_len);
            out.push_back(std::move(ex));
        }
        return out;
    }

    std::vector<std::vector<int>>& close_sets() { return close_; }

    void bootstrap_close_bm25(const Bm25Index& bm25, const std::vector<Query>& queries) {
        for (std::size_t i = 0; i < queries.size(); ++i) {
            std::vector<int> ids;
            for (const auto& [doc, score] : bm25.search(queries[i].text,
                                                        static_cast<std::size_t>(tc_.k_close)))
                ids.push_back(doc);
            close_[i] = std::move(ids);
        }
    }

    void refresh_close_from_model(const std::vector<Query>& queries) {
        TokenIndex idx = build_index(corpus_, model_, 0);
        for (std::size_t i = 0; i < queries.size(); ++i) {
            std::vector<int> ids;
            RetrievalResult rr = retrieve(idx, queries[i], model_,
                                          static_cast<std::size_t>(tc_.k_close),
                                          static_cast<std::size_t>(tc_.kprime));
            for (const auto& [doc, score] : rr.ranked) ids.push_back(doc);
            close_[i] = std::move(ids);
        }
    }

    // Constant batch size; the example order reshuffles every epoch.
    TrainBatch next_batch() {
        if (examples_.size() < static_cast<std::size_t>(tc_.batch_queries))
            throw DataError("fewer training queries than batch_queries");
        TrainBatch b;
        while (b.ex.size() < static_cast<std::size_t>(tc_.batch_queries)) {
            if (order_.empty()) {
                order_.resize(examples_.size());
                for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
                rng_.shuffle(order_);
            }
            b.ex.push_back(order_.back());
            order_.pop_back();
        }
        for (int e : b.ex) {
            // When the retriever yields fewer than K close documents the rest
            // fill with fresh random documents each visit, so no non-answer
            // document is persistently presented as close.
            std::vector<int> ids = close_[static_cast<std::size_t>(e)];
            pad_close_set(ids);
            b.close.push_back(std::move(ids));
        }
        derive_randoms(b);
        return b;
    }

    // One optimizer step; the QA-only warm-up phase zeroes alpha.
    LossReport train_step(const TrainBatch& b) {
        const double alpha_eff = global_step_ < tc_.warmup_steps ? 0.0 : tc_.alpha;
        LossReport rep = (tc_.micro_batch > 0 &&
                          tc_.micro_batch < static_cast<int>(b.ex.size()))
                             ? step_cached(b, alpha_eff, tc_.micro_batch)
                             : step_naive(b, alpha_eff);
        ++global_step_;
        return rep;
    }

    // Exposed for equivalence tests: run one step at an explicit alpha with
    // either path, without advancing the schedule.
    LossReport step_naive_once(const TrainBatch& b, double alpha_eff) {
        return step_naive(b, alpha_eff);
    }
    LossReport step_cached_once(const TrainBatch& b, double alpha_eff, int micro_batch) {
        return step_cached(b, alpha_eff, micro_batch);
    }

    double current_lr() const {
        // 10% linear warm-up then linear decay toward zero
        const int t = global_step_;
        const int w = std::max(1, total_steps_ / 10);
        if (t < w) return tc_.lr * static_cast<double>(t + 1) / static_cast<double>(w);
        const double rest = static_cast<double>(total_steps_ - t) /
                            static_cast<double>(std::max(1, total_steps_ - w));
        return tc_.lr * std::max(0.0, rest);
    }

  private:
    void pad_close_set(std::vector<int>& ids) {
        std::unordered_set<int> have(ids.begin(), ids.end());
        while (ids.size() < static_cast<std::size_t>(tc_.k_close) &&
               have.size() < corpus_.docs.size()) {
            int d = static_cast<int>(rng_.next_index(corpus_.docs.size()));
            if (have.insert(d).second) ids.push_back(d);
        }
        if (ids.size() > static_cast<std::size_t>(tc_.k_close))
            ids.resize(static_cast<std::size_t>(tc_.k_close));
    }

    std::vector<int> batch_doc_ids(const TrainBatch& b) const {
        std::unordered_set<int> set;
        for (const auto& v : b.close) set.insert(v.begin(), v.end());
        for (const auto& v : b.randoms) set.insert(v.begin(), v.end());
        std::vector<int> ids(set.begin(), set.end());
        std::sort(ids.begin(), ids.end());
        return ids;
    }

    // Builds the per-query tape losses; shared by the naive step and the
    // finite-difference test harness.
    struct QueryLoss {
        ad::Var qa;
        ad::Var cd;
        double qa_value = 0.0;
        double cd_value = 0.0;
    };

    QueryLoss query_losses(Fwd& f, const TrainExample& ex, const std::vector<int>& close,
                           const std::vector<int>& randoms,
                           std::unordered_map<int, BiEnc>& docbi) {
        ad::Tape& t = f.t;
        BiEnc qb = encode_bi(f, ex.q_tokens, true);
        std::vector<CrossEnc> encs;
        encs.reserve(close.size());
        for (int d : close) {
            encs.push_back(encode_cross(f, qb, docbi.at(d)));
            stats_.up();
        }
        FidOut fid = decode_fid(f, decoder_input_for(ex.answer_ids), encs);
        QueryLoss ql;
        ql.qa = t.nll(t.log_softmax_rows(fid.logits), ex.answer_ids);
        ql.qa_value = t.val(ql.qa)(0, 0);

        std::vector<double> p_tgt = extend_with_randoms(target_distribution(fid.target),
                                                        randoms.size());
        std::vector<ad::Var> scores;
        scores.reserve(close.size() + randoms.size());
        for (int d : close) scores.push_back(relevance_var(f, qb, docbi.at(d)));
        for (int d : randoms) scores.push_back(relevance_var(f, qb, docbi.at(d)));
        ad::Var logq = t.log_softmax_rows(t.stack_scalars_row(scores));
        Mat w = Mat::from(1, p_tgt.size(), std::vector<double>(p_tgt.begin(), p_tgt.end()));
        Mat ent(1, 1);
        ent(0, 0) = entropy_term(p_tgt);
        ql.cd = t.add(t.constant(std::move(ent)), t.scale(t.dot_const(logq, std::move(w)), -1.0));
        ql.cd_value = t.val(ql.cd)(0, 0);
        return ql;
    }

    LossReport step_naive(const TrainBatch& b, double alpha_eff) {
        ad::Tape t(true);
        ParamVars pv = lift_params(t, model_.params, model_.cfg, true);
        Rng drop_rng(tc_.seed * 0x9e3779b9u + static_cast<std::uint64_t>(global_step_) + 1);
        Fwd f{t, pv, model_.cfg, model_.cfg.dropout > 0.0 ? &drop_rng : nullptr};

        std::unordered_map<int, BiEnc> docbi;
        for (int d : batch_doc_ids(b))
            docbi.emplace(d, encode_bi(f, corpus_.docs[static_cast<std::size_t>(d)].tokens, false));

        std::vector<ad::Var> qa_losses, cd_losses;
        LossReport rep;
        rep.alpha = alpha_eff;
        for (std::size_t i = 0; i < b.ex.size(); ++i) {
            QueryLoss ql = query_losses(f, examples_[static_cast<std::size_t>(b.ex[i])],
                                        b.close[i], b.randoms[i], docbi);
            qa_losses.push_back(ql.qa);
            cd_losses.push_back(ql.cd);
            rep.l_qa += ql.qa_value;
            rep.l_cross_doc += ql.cd_value;
        }
        const double invq = 1.0 / static_cast<double>(b.ex.size());
        rep.l_qa *= invq;
        rep.l_cross_doc *= invq;
        rep.total = rep.l_qa + alpha_eff * rep.l_cross_doc;

        ad::Var lsum = alpha_eff > 0.0
                           ? t.add(t.add_n(qa_losses), t.scale(t.add_n(cd_losses), alpha_eff))
                           : t.add_n(qa_losses);
        ad::Var total = t.scale(lsum, invq);
        check_finite(rep);
        t.backward(total);
        apply_grads(t, pv);
        stats_.release(stats_.live);
        return rep;
    }

    // Appendix-style two-pass step. Pass 1 (no recording) computes token
    // representations and attention targets, then differentiates the
    // cross-document loss with the representations as leaves. Pass 2 re-runs
    // micro-batches with recording, seeding the cached representation
    // gradients (each representation injected exactly once) alongside the QA
    // backward. The final update matches the naive step up to float
    // reassociation.
    LossReport step_cached(const TrainBatch& b, double alpha_eff, int micro_batch) {
        if (model_.cfg.dropout > 0.0)
            throw DataError("gradient-cache steps require dropout = 0");
        const std::size_t nq = b.ex.size();
        const double invq = 1.0 / static_cast<double>(nq);
        const std::vector<int> all_docs = batch_doc_ids(b);
        const std::uint64_t cache_version = params_version_;

        // pass 1: detached representations and targets
        std::unordered_map<int, std::vector<Mat>> krep;
        std::unordered_map<int, std::vector<char>> kmask;
        std::vector<std::vector<Mat>> qrep(nq);
        std::vector<std::vector<char>> qmask(nq);
        std::vector<std::vector<double>> p_tgt(nq);
        {
            ad::Tape t0(false);
            ParamVars pv0 = lift_params(t0, model_.params, model_.cfg, false);
            Fwd f0{t0, pv0, model_.cfg};
            std::unordered_map<int, BiEnc> docbi;
            for (int d : all_docs) {
                BiEnc be = encode_bi(f0, corpus_.docs[static_cast<std::size_t>(d)].tokens, false);
                std::vector<Mat> reps;
                for (ad::Var h : be.heads) reps.push_back(t0.val(h));
                krep.emplace(d, std::move(reps));
                kmask.emplace(d, be.mask);
                docbi.emplace(d, std::move(be));
            }
            const std::size_t mark = t0.size();
            for (std::size_t i = 0; i < nq; ++i) {
                const TrainExample& ex = examples_[static_cast<std::size_t>(b.ex[i])];
                BiEnc qb = encode_bi(f0, ex.q_tokens, true);
                for (ad::Var h : qb.heads) qrep[i].push_back(t0.val(h));
                qmask[i] = qb.mask;
                std::vector<CrossEnc> encs;
                for (int d : b.close[i]) {
                    encs.push_back(encode_cross(f0, qb, docbi.at(d)));
                    stats_.up();
                }
                FidOut fid = decode_fid(f0, decoder_input_for(ex.answer_ids), encs);
                p_tgt[i] = extend_with_randoms(target_distribution(fid.target),
                                               b.randoms[i].size());
                t0.truncate(mark);
                stats_.release(encs.size());
            }
        }

        // cross-document loss on a tape whose leaves are the representations
        LossReport rep;
        rep.alpha = alpha_eff;
        Mat whead_grad(1, static_cast<std::size_t>(model_.cfg.heads));
        std::vector<std::vector<Mat>> qgrad(nq);
        std::unordered_map<int, std::vector<Mat>> kgrad;
        {
            ad::Tape tr(true);
            ad::Var wh = tr.leaf(model_.params.w_head, true);
            std::unordered_map<int, std::vector<ad::Var>> kleaf;
            for (int d : all_docs) {
                std::vector<ad::Var> hs;
                for (const Mat& m : krep.at(d)) hs.push_back(tr.leaf(m, true));
                kleaf.emplace(d, std::move(hs));
            }
            std::vector<std::vector<ad::Var>> qleaf(nq);
            std::vector<ad::Var> cd_losses;
            for (std::size_t i = 0; i < nq; ++i) {
                for (const Mat& m : qrep[i]) qleaf[i].push_back(tr.leaf(m, true));
                std::vector<ad::Var> scores;
                auto score_doc = [&](int d) {
                    scores.push_back(relevance_from(tr, qleaf[i], qmask[i], kleaf.at(d),
                                                    kmask.at(d), wh, model_.cfg.tau));
                };
                for (int d : b.close[i]) score_doc(d);
                for (int d : b.randoms[i]) score_doc(d);
                ad::Var logq = tr.log_softmax_rows(tr.stack_scalars_row(scores));
                Mat w = Mat::from(1, p_tgt[i].size(),
                                  std::vector<double>(p_tgt[i].begin(), p_tgt[i].end()));
                Mat ent(1, 1);
                ent(0, 0) = entropy_term(p_tgt[i]);
                ad::Var cd = tr.add(tr.constant(std::move(ent)),
                                    tr.scale(tr.dot_const(logq, std::move(w)), -1.0));
                rep.l_cross_doc += tr.val(cd)(0, 0);
                cd_losses.push_back(cd);
            }
            if (alpha_eff > 0.0) {
                tr.backward(tr.scale(tr.add_n(cd_losses), alpha_eff * invq));
                whead_grad = tr.grad_or_zero(wh);
                for (std::size_t i = 0; i < nq; ++i)
                    for (ad::Var h : qleaf[i]) qgrad[i].push_back(tr.grad_or_zero(h));
                for (int d : all_docs) {
                    std::vector<Mat> gs;
                    for (ad::Var h : kleaf.at(d)) gs.push_back(tr.grad_or_zero(h));
                    kgrad.emplace(d, std::move(gs));
                }
            }
        }

        // pass 2: recorded micro-batches with gradient injection
        if (cache_version != params_version_)
            throw DataError("gradient cache is stale: parameters changed between passes");
        std::vector<Mat> grads;
        model_.params.for_each(
            [&](const std::string&, const Mat& m) { grads.emplace_back(m.rows(), m.cols()); });
        std::unordered_set<int> doc_injected;
        for (std::size_t lo = 0; lo < nq; lo += static_cast<std::size_t>(micro_batch)) {
            const std::size_t hi = std::min(nq, lo + static_cast<std::size_t>(micro_batch));
            ad::Tape t(true);
            ParamVars pv = lift_params(t, model_.params, model_.cfg, true);
            Fwd f{t, pv, model_.cfg};
            std::vector<std::pair<ad::Var, Mat>> seeds;

            std::unordered_set<int> need_cross;
            std::unordered_set<int> need_any;
            for (std::size_t i = lo; i < hi; ++i) {
                need_cross.insert(b.close[i].begin(), b.close[i].end());
                need_any.insert(b.close[i].begin(), b.close[i].end());
                need_any.insert(b.randoms[i].begin(), b.randoms[i].end());
            }
            std::vector<int> mb_docs(need_any.begin(), need_any.end());
            std::sort(mb_docs.begin(), mb_docs.end());
            std::unordered_map<int, BiEnc> docbi;
            for (int d : mb_docs) {
                const bool inject = alpha_eff > 0.0 && !doc_injected.count(d);
                if (!inject && !need_cross.count(d)) continue;
                BiEnc be = encode_bi(f, corpus_.docs[static_cast<std::size_t>(d)].tokens, false);
                if (inject) {
                    for (std::size_t h = 0; h < be.heads.size(); ++h)
                        seeds.emplace_back(be.heads[h], kgrad.at(d)[h]);
                    doc_injected.insert(d);
                }
                docbi.emplace(d, std::move(be));
            }

            std::vector<ad::Var> qa_losses;
            std::size_t live_here = 0;
            for (std::size_t i = lo; i < hi; ++i) {
                const TrainExample& ex = examples_[static_cast<std::size_t>(b.ex[i])];
                BiEnc qb = encode_bi(f, ex.q_tokens, true);
                if (alpha_eff > 0.0)
                    for (std::size_t h = 0; h < qb.heads.size(); ++h)
                        seeds.emplace_back(qb.heads[h], qgrad[i][h]);
                std::vector<CrossEnc> encs;
                for (int d : b.close[i]) {
                    encs.push_back(encode_cross(f, qb, docbi.at(d)));
                    stats_.up();
                    ++live_here;
                }
                FidOut fid = decode_fid(f, decoder_input_for(ex.answer_ids), encs);
                ad::Var qa = t.nll(t.log_softmax_rows(fid.logits), ex.answer_ids);
                rep.l_qa += t.val(qa)(0, 0);
                qa_losses.push_back(qa);
            }
            Mat one(1, 1);
            one(0, 0) = 1.0;
            seeds.emplace_back(t.scale(t.add_n(qa_losses), invq), std::move(one));
            t.backward(seeds);
            std::size_t gi = 0;
            pv.for_each([&](const std::string&, ad::Var& v) {
                const Mat& g = t.grad(v);
                if (!g.empty())
                    for (std::size_t j = 0; j < g.size(); ++j) grads[gi].vec()[j] += g.vec()[j];
                ++gi;
            });
            stats_.release(live_here);
        }
        if (alpha_eff > 0.0) {
            std::size_t gi = 0;
            model_.params.for_each([&](const std::string& name, const Mat&) {
                if (name == "head_logits")
                    for (std::size_t j = 0; j < whead_grad.size(); ++j)
                        grads[gi].vec()[j] += whead_grad.vec()[j];
                ++gi;
            });
        }
        rep.l_qa *= invq;
        rep.l_cross_doc *= invq;
        rep.total = rep.l_qa + alpha_eff * rep.l_cross_doc;
        check_finite(rep);
        opt_.step(model_.params, grads, current_lr());
        ++params_version_;
        return rep;
    }

    void check_finite(const LossReport& rep) const {
        if (std::isfinite(rep.l_qa) && std::isfinite(rep.l_cross_doc)) return;
        log_warn("non-finite loss: L_QA=" + std::to_string(rep.l_qa) +
                 " L_cross_doc=" + std::to_string(rep.l_cross_doc) + " at step " +
                 std::to_string(global_step_));
        throw NumericError("non-finite loss at step " + std::to_string(global_step_));
    }

    void apply_grads(ad::Tape& t, const ParamVars& pv) {
        std::vector<Mat> grads;
        pv.for_each([&](const std::string&, const ad::Var& v) { grads.push_back(t.grad_or_zero(v)); });
        opt_.step(model_.params, grads, current_lr());
        ++params_version_;
    }

    Model& model_;
    const Corpus& corpus_;
    TrainConfig tc_;
    Rng rng_;
    AdamW opt_;
    std::vector<TrainExample> examples_;
    std::vector<std::vector<int>> close_;
    std::vector<int> order_;
    int global_step_ = 0;
    int total_steps_ = 1;
    std::uint64_t params_version_ = 0;
    CrossCounter stats_;

    friend struct TrainerTestAccess;
};

// ----------------------------------------------------------------------
// Whole-run driver
// ----------------------------------------------------------------------

// Exhaustive relevance ranking of the whole corpus (no index), used for the
// dev metric and iteration bookkeeping.
inline RunFile exhaustive_search(const Model& m, const Corpus& corpus,
                                 const std::vector<Query>& queries, std::size_t k) {
    std::vector<EncodedSeq> docs;
    docs.reserve(corpus.docs.size());
    for (const Document& d : corpus.docs) docs.push_back(encode_bi_values(m, d.tokens, false));
    RunFile run;
    for (const Query& q : queries) {
        EncodedSeq qe = encode_bi_values(m, q.tokens, true);
        std::vector<std::pair<int, double>> scored;
        scored.reserve(docs.size());
        for (std::size_t di = 0; di < docs.size(); ++di)
            scored.emplace_back(static_cast<int>(di),
                                relevance(qe, docs[di], m.params.w_head, m.cfg.tau).combined);
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        if (scored.size() > k) scored.resize(k);
        run.add(q.ext_id, scored);
    }
    return run;
}

struct TrainResult {
    std::vector<double> dev_r5_per_iter; // held-out R@5 after each iteration
    double final_dev_r1 = -1.0;
};

// Warm-up, then the iteration schedule with close-set refresh between
// iterations. Writes metrics.jsonl and checkpoint files under out_dir when
// out_dir is non-empty.
inline TrainResult run_training(Model& model, const Corpus& corpus,
                                const std::vector<Query>& train_queries,
                                const std::vector<Query>& dev_queries, const TrainConfig& tc,
                                const std::string& out_dir = "") {
    Trainer trainer(model, corpus, tc);
    trainer.set_examples(Trainer::make_examples(train_queries, model));
    Bm25Index bm25(corpus);
    trainer.bootstrap_close_bm25(bm25, train_queries);

    std::ofstream metrics;
    if (!out_dir.empty()) {
        metrics.open(out_dir + "/metrics.jsonl");
        if (!metrics) throw DataError("cannot write metrics log under " + out_dir);
    }
    double dev_r1 = std::numeric_limits<double>::quiet_NaN();
    char buf[256];
    auto log_step = [&](int step, const LossReport& rep) {
        if (!out_dir.empty()) {
            if (std::isnan(dev_r1))
                std::snprintf(buf, sizeof(buf),
                              "{\"step\": %d, \"L_QA\": %.6f, \"L_cross_doc\": %.6f, "
                              "\"r_at_1_dev\": null}\n",
                              step, rep.l_qa, rep.l_cross_doc);
            else
                std::snprintf(buf, sizeof(buf),
                              "{\"step\": %d, \"L_QA\": %.6f, \"L_cross_doc\": %.6f, "
                              "\"r_at_1_dev\": %.6f}\n",
                              step, rep.l_qa, rep.l_cross_doc, dev_r1);
            metrics << buf;
        }
    };
    auto eval_dev = [&](std::size_t k) {
        if (dev_queries.empty()) return std::numeric_limits<double>::quiet_NaN();
        RunFile run = exhaustive_search(model, corpus, dev_queries, k);
        return recall_at_k_containment(run, dev_queries, corpus, k);
    };

    int step = 0;
    auto run_steps = [&](int n) {
        for (int s = 0; s < n; ++s) {
            TrainBatch b = trainer.next_batch();
            LossReport rep = trainer.train_step(b);
            ++step;
            if (!dev_queries.empty() && tc.eval_every > 0 && step % tc.eval_every == 0)
                dev_r1 = eval_dev(1);
            log_step(step, rep);
        }
    };

    run_steps(tc.warmup_steps);
    if (!out_dir.empty()) save_model(out_dir + "/ckpt_warmup.bin", model);

    TrainResult result;
    for (int it = 1; it <= tc.iterations; ++it) {
        if (it > 1) {
            log_info("refreshing close sets from the model (iteration " + std::to_string(it) + ")");
            trainer.refresh_close_from_model(train_queries);
        }
        run_steps(tc.steps_per_iter);
        if (!out_dir.empty()) save_model(out_dir + "/ckpt_iter" + std::to_string(it) + ".bin", model);
        if (!dev_queries.empty()) {
            RunFile run = exhaustive_search(model, corpus, dev_queries, 5);
            result.dev_r5_per_iter.push_back(recall_at_k_containment(run, dev_queries, corpus, 5));
            log_info("iteration " + std::to_string(it) +
                     ": held-out R@5 = " + std::to_string(result.dev_r5_per_iter.back()));
        }
    }
    if (!dev_queries.empty()) result.final_dev_r1 = eval_dev(1);
    return result;
}

} // namespace ratt
