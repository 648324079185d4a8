#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ratt/common.hpp"
#include "ratt/corpus.hpp"
#include "ratt/mat.hpp"
#include "ratt/tape.hpp"

namespace ratt {

struct ModelConfig {
    int enc_layers = 4; // L
    int bi_layers = 2;  // B: layers 0..B-1 run per-sequence, B..L-1 jointly
    int dec_layers = 2;
    int heads = 2;    // H
    int head_dim = 8; // e
    int ff_dim = 32;
    int vocab = 0;
    int max_query_len = 64;
    int max_doc_len = 256;
    int max_dec_len = 64;
    double tau = 0.001;
    double dropout = 0.0;

    int d_model() const { return heads * head_dim; }
    // documents always sit at a fixed position offset so their encodings do
    // not depend on which query they are paired with
    int max_pos() const { return max_query_len + max_doc_len; }

    void validate() const {
        if (bi_layers < 1 || bi_layers >= enc_layers)
            throw DataError("model config: need 1 <= bi_layers < enc_layers");
        if (dec_layers < 1 || heads < 1 || head_dim < 1 || ff_dim < 1)
            throw DataError("model config: layer/head/width fields must be positive");
        if (tau <= 0.0) throw DataError("model config: tau must be positive");
        if (vocab < 5) throw DataError("model config: vocab too small");
        if (max_query_len < 1 || max_doc_len < 1 || max_dec_len < 1)
            throw DataError("model config: length limits must be positive");
        if (dropout < 0.0 || dropout >= 1.0) throw DataError("model config: dropout outside [0,1)");
    }
};

// ----------------------------------------------------------------------
// Parameters, templated over the storage type so the same structure holds
// either raw matrices (ModelParams) or tape handles (ParamVars).
// ----------------------------------------------------------------------

template <class T>
struct AttnP {
    std::vector<T> wq, wk, wv, wo; // per head: d x e, d x e, d x e, e x d
};

template <class T>
struct EncLayerP {
    T ln1;
    AttnP<T> attn;
    T ln2, ff1, ff2;
};

template <class T>
struct DecLayerP {
    T ln1;
    AttnP<T> self;
    T ln2;
    AttnP<T> cross;
    T ln3, ff1, ff2;
};

template <class T>
struct Params {
    T embed;      // vocab x d (also the output projection)
    T pos_enc;    // (max_query_len + max_doc_len) x d
    T pos_dec;    // max_dec_len x d
    T ln_enc_out; // 1 x d
    T ln_dec_out; // 1 x d
    T w_head;     // 1 x H retrieval-head logits
    std::vector<EncLayerP<T>> enc;
    std::vector<DecLayerP<T>> dec;

    static Params shaped(const ModelConfig& cfg) {
        Params p;
        p.enc.resize(static_cast<std::size_t>(cfg.enc_layers));
        for (auto& l : p.enc) {
            l.attn.wq.resize(static_cast<std::size_t>(cfg.heads));
            l.attn.wk.resize(static_cast<std::size_t>(cfg.heads));
            l.attn.wv.resize(static_cast<std::size_t>(cfg.heads));
            l.attn.wo.resize(static_cast<std::size_t>(cfg.heads));
        }
        p.dec.resize(static_cast<std::size_t>(cfg.dec_layers));
        for (auto& l : p.dec) {
            for (auto* a : {&l.self, &l.cross}) {
                a->wq.resize(static_cast<std::size_t>(cfg.heads));
                a->wk.resize(static_cast<std::size_t>(cfg.heads));
                a->wv.resize(static_cast<std::size_t>(cfg.heads));
                a->wo.resize(static_cast<std::size_t>(cfg.heads));
            }
        }
        return p;
    }

    template <class F>
    void for_each(F&& fn) {
        visit(*this, fn);
    }
    template <class F>
    void for_each(F&& fn) const {
        visit(*this, fn);
    }

  private:
    template <class Self, class F>
    static void visit(Self& s, F& fn) {
        fn("embed", s.embed);
        fn("pos_enc", s.pos_enc);
        fn("pos_dec", s.pos_dec);
        fn("enc_out_norm", s.ln_enc_out);
        fn("dec_out_norm", s.ln_dec_out);
        fn("head_logits", s.w_head);
        for (std::size_t l = 0; l < s.enc.size(); ++l) {
            auto& e = s.enc[l];
            const std::string p = "enc" + std::to_string(l) + ".";
            fn(p + "attn_norm", e.ln1);
            visit_attn(p + "attn_", e.attn, fn);
            fn(p + "ff_norm", e.ln2);
            fn(p + "ff1", e.ff1);
            fn(p + "ff2", e.ff2);
        }
        for (std::size_t l = 0; l < s.dec.size(); ++l) {
            auto& d = s.dec[l];
            const std::string p = "dec" + std::to_string(l) + ".";
            fn(p + "self_norm", d.ln1);
            visit_attn(p + "self_", d.self, fn);
            fn(p + "cross_norm", d.ln2);
            visit_attn(p + "cross_", d.cross, fn);
            fn(p + "ff_norm", d.ln3);
            fn(p + "ff1", d.ff1);
            fn(p + "ff2", d.ff2);
        }
    }

    template <class A, class F>
    static void visit_attn(const std::string& prefix, A& a, F& fn) {
        for (std::size_t h = 0; h < a.wq.size(); ++h) {
            fn(prefix + "q" + std::to_string(h), a.wq[h]);
            fn(prefix + "k" + std::to_string(h), a.wk[h]);
            fn(prefix + "v" + std::to_string(h), a.wv[h]);
            fn(prefix + "o" + std::to_string(h), a.wo[h]);
        }
    }
};

using ModelParams = Params<Mat>;
using ParamVars = Params<ad::Var>;

inline ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
    const double std = 0.02;
    const int d = cfg.d_model();
    auto gauss = [&](int r, int c) {
        Mat m(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
        for (double& x : m.vec()) x = rng.next_gauss() * std;
        return m;
    };
    auto ones = [&](int c) { return Mat(1, static_cast<std::size_t>(c), 1.0); };

    ModelParams p = ModelParams::shaped(cfg);
    p.embed = gauss(cfg.vocab, d);
    p.pos_enc = gauss(cfg.max_pos(), d);
    p.pos_dec = gauss(cfg.max_dec_len, d);
    p.ln_enc_out = ones(d);
    p.ln_dec_out = ones(d);
    p.w_head = Mat(1, static_cast<std::size_t>(cfg.heads), 0.0); // uniform head prior
    for (auto& l : p.enc) {
        l.ln1 = ones(d);
        l.ln2 = ones(d);
        for (int h = 0; h < cfg.heads; ++h) {
            l.attn.wq[static_cast<std::size_t>(h)] = gauss(d, cfg.head_dim);
            l.attn.wk[static_cast<std::size_t>(h)] = gauss(d, cfg.head_dim);
            l.attn.wv[static_cast<std::size_t>(h)] = gauss(d, cfg.head_dim);
            l.attn.wo[static_cast<std::size_t>(h)] = gauss(cfg.head_dim, d);
        }
        l.ff1 = gauss(d, cfg.ff_dim);
        l.ff2 = gauss(cfg.ff_dim, d);
    }
    for (auto& l : p.dec) {
        l.ln1 = ones(d);
        l.ln2 = ones(d);
        l.ln3 = ones(d);
        for (auto* a : {&l.self, &l.cross}) {
            for (int h = 0; h < cfg.heads; ++h) {
                a->wq[static_cast<std::size_t>(h)] = gauss(d, cfg.head_dim);
                a->wk[static_cast<std::size_t>(h)] = gauss(d, cfg.head_dim);
                a->wv[static_cast<std::size_t>(h)] = gauss(d, cfg.head_dim);
                a->wo[static_cast<std::size_t>(h)] = gauss(cfg.head_dim, d);
            }
        }
        l.ff1 = gauss(d, cfg.ff_dim);
        l.ff2 = gauss(cfg.ff_dim, d);
    }
    return p;
}

// Registers every parameter as a tape leaf, preserving structure.
inline ParamVars lift_params(ad::Tape& t, const ModelParams& p, const ModelConfig& cfg,
                             bool requires_grad = true) {
    std::vector<ad::Var> vars;
    p.for_each([&](const std::string&, const Mat& m) { vars.push_back(t.leaf(m, requires_grad)); });
    ParamVars out = ParamVars::shaped(cfg);
    std::size_t i = 0;
    out.for_each([&](const std::string&, ad::Var& v) { v = vars[i++]; });
    return out;
}

// ----------------------------------------------------------------------
// Checkpoints: magic, version, config, vocabulary, named float32 tensors.
// ----------------------------------------------------------------------

struct Model {
    ModelConfig cfg;
    ModelParams params;
    Vocabulary vocab;
};

inline Model init_model(ModelConfig cfg, Vocabulary vocab, std::uint64_t seed) {
    cfg.vocab = vocab.size();
    cfg.validate();
    Rng rng(seed);
    return Model{cfg, init_params(cfg, rng), std::move(vocab)};
}

inline void save_model(const std::string& path, const Model& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out.write("RATTCKPT", 8);
    io::write_u32(out, 1); // format version
    const ModelConfig& c = m.cfg;
    for (int v : {c.enc_layers, c.bi_layers, c.dec_layers, c.heads, c.head_dim, c.ff_dim, c.vocab,
                  c.max_query_len, c.max_doc_len, c.max_dec_len})
        io::write_u32(out, static_cast<std::uint32_t>(v));
    io::write_f64(out, c.tau);
    io::write_f64(out, c.dropout);
    io::write_u64(out, static_cast<std::uint64_t>(m.vocab.size()));
    for (const std::string& tok : m.vocab.id_to_token) io::write_string(out, tok);
    std::uint64_t count = 0;
    m.params.for_each([&](const std::string&, const Mat&) { ++count; });
    io::write_u64(out, count);
    m.params.for_each([&](const std::string& name, const Mat& t) {
        io::write_string(out, name);
        io::write_u32(out, static_cast<std::uint32_t>(t.rows()));
        io::write_u32(out, static_cast<std::uint32_t>(t.cols()));
        for (double v : t.vec()) io::write_f32(out, static_cast<float>(v));
    });
    if (!out) throw DataError("short write: " + path);
}

inline Model load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    io::expect_magic(in, "RATTCKPT", path);
    std::uint32_t version = io::read_u32(in);
    if (version != 1) throw DataError(path + ": unsupported checkpoint version");
    Model m;
    ModelConfig& c = m.cfg;
    for (int* f : {&c.enc_layers, &c.bi_layers, &c.dec_layers, &c.heads, &c.head_dim, &c.ff_dim,
                   &c.vocab, &c.max_query_len, &c.max_doc_len, &c.max_dec_len})
        *f = static_cast<int>(io::read_u32(in));
    c.tau = io::read_f64(in);
    c.dropout = io::read_f64(in);
    c.validate();
    std::uint64_t vocab_size = io::read_u64(in);
    m.vocab.id_to_token.clear();
    m.vocab.token_to_id.clear();
    for (std::uint64_t i = 0; i < vocab_size; ++i) {
        std::string tok = io::read_string(in);
        m.vocab.id_to_token.push_back(tok);
        m.vocab.token_to_id.emplace(tok, static_cast<int>(i));
    }
    if (m.vocab.size() != c.vocab) throw DataError(path + ": vocab size mismatch");
    m.params = ModelParams::shaped(c);
    std::uint64_t count = io::read_u64(in);
    std::uint64_t loaded = 0;
    m.params.for_each([&](const std::string& name, Mat& t) {
        std::string got = io::read_string(in);
        if (got != name) throw DataError(path + ": tensor `" + got + "` where `" + name + "` expected");
        std::uint32_t rows = io::read_u32(in);
        std::uint32_t cols = io::read_u32(in);
        t = Mat(rows, cols);
        for (double& v : t.vec()) v = static_cast<double>(io::read_f32(in));
        ++loaded;
    });
    if (loaded != count) throw DataError(path + ": tensor count mismatch");
    if (!in) throw DataError("truncated file: " + path);
    return m;
}

// ----------------------------------------------------------------------
// Forward passes
// ----------------------------------------------------------------------

struct Fwd {
    ad::Tape& t;
    const ParamVars& pv;
    const ModelConfig& cfg;
    Rng* drop_rng = nullptr; // non-null enables dropout at cfg.dropout
};

inline ad::Var maybe_dropout(Fwd& f, ad::Var x) {
    if (!f.drop_rng || f.cfg.dropout <= 0.0) return x;
    const Mat& v = f.t.val(x);
    double keep = 1.0 - f.cfg.dropout;
    Mat mask(v.rows(), v.cols());
    for (double& m : mask.vec()) m = f.drop_rng->next_double() < keep ? 1.0 / keep : 0.0;
    return f.t.mul(x, f.t.constant(std::move(mask)));
}

inline bool all_set(const std::vector<char>& mask) {
    for (char c : mask)
        if (!c) return false;
    return true;
}

inline std::vector<char> nonpad_mask(const std::vector<int>& tokens) {
    std::vector<char> m(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) m[i] = tokens[i] != Vocabulary::kPad;
    return m;
}

inline ad::Var embed_seq(Fwd& f, const std::vector<int>& tokens, int pos_offset, bool decoder) {
    std::vector<int> pos(tokens.size());
    int limit = decoder ? f.cfg.max_dec_len : f.cfg.max_pos();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        pos[i] = pos_offset + static_cast<int>(i);
        if (pos[i] >= limit) throw DataError("sequence exceeds position table");
    }
    ad::Var te = f.t.embed(f.pv.embed, tokens);
    ad::Var pe = f.t.embed(decoder ? f.pv.pos_dec : f.pv.pos_enc, pos);
    return f.t.add(te, pe);
}

inline ad::Var self_attention(Fwd& f, ad::Var xn, const AttnP<ad::Var>& ap,
                              const std::vector<char>& key_mask, bool causal) {
    const double inv_sqrt_e = 1.0 / std::sqrt(static_cast<double>(f.cfg.head_dim));
    const bool plain = key_mask.empty() || all_set(key_mask);
    std::vector<ad::Var> outs;
    outs.reserve(static_cast<std::size_t>(f.cfg.heads));
    for (int h = 0; h < f.cfg.heads; ++h) {
        const auto hs = static_cast<std::size_t>(h);
        ad::Var q = f.t.matmul(xn, ap.wq[hs]);
        ad::Var k = f.t.matmul(xn, ap.wk[hs]);
        ad::Var v = f.t.matmul(xn, ap.wv[hs]);
        ad::Var logits = f.t.scale(f.t.matmul_nt(q, k), inv_sqrt_e);
        ad::Var p = causal ? f.t.softmax_rows_causal(logits)
                           : (plain ? f.t.softmax_rows(logits)
                                    : f.t.softmax_rows_masked(logits, key_mask));
        outs.push_back(f.t.matmul(f.t.matmul(p, v), ap.wo[hs]));
    }
    return f.t.add_n(outs);
}

// Decoder-to-memory attention. When capture is non-null, the pre-softmax
// logits of the first decoder position are copied out per head as plain
// values (no gradient flows back through the copy).
inline ad::Var cross_attention(Fwd& f, ad::Var xn, ad::Var memory,
                               const AttnP<ad::Var>& ap, const std::vector<char>& mem_mask,
                               Mat* capture) {
    const double inv_sqrt_e = 1.0 / std::sqrt(static_cast<double>(f.cfg.head_dim));
    const bool plain = mem_mask.empty() || all_set(mem_mask);
    if (capture) *capture = Mat(static_cast<std::size_t>(f.cfg.heads), f.t.val(memory).rows());
    std::vector<ad::Var> outs;
    outs.reserve(static_cast<std::size_t>(f.cfg.heads));
    for (int h = 0; h < f.cfg.heads; ++h) {
        const auto hs = static_cast<std::size_t>(h);
        ad::Var q = f.t.matmul(xn, ap.wq[hs]);
        ad::Var k = f.t.matmul(memory, ap.wk[hs]);
        ad::Var v = f.t.matmul(memory, ap.wv[hs]);
        ad::Var logits = f.t.scale(f.t.matmul_nt(q, k), inv_sqrt_e);
        if (capture) {
            const Mat& lv = f.t.val(logits);
            for (std::size_t c = 0; c < lv.cols(); ++c) (*capture)(hs, c) = lv(0, c);
        }
        ad::Var p = plain ? f.t.softmax_rows(logits) : f.t.softmax_rows_masked(logits, mem_mask);
        outs.push_back(f.t.matmul(f.t.matmul(p, v), ap.wo[hs]));
    }
    return f.t.add_n(outs);
}

inline ad::Var encoder_layer(Fwd& f, ad::Var x, const EncLayerP<ad::Var>& lp,
                             const std::vector<char>& mask) {
    ad::Var attn = self_attention(f, f.t.rmsnorm(x, lp.ln1), lp.attn, mask, false);
    x = f.t.add(x, maybe_dropout(f, attn));
    ad::Var h = f.t.matmul(f.t.relu(f.t.matmul(f.t.rmsnorm(x, lp.ln2), lp.ff1)), lp.ff2);
    return f.t.add(x, maybe_dropout(f, h));
}

// Output of the bi-encoder stage for one sequence: hidden states after the
// first B layers plus the per-head projections the next layer's attention
// would derive from them. Queries carry query-side rows pre-scaled by
// 1/sqrt(e) so that plain dot products against document key rows reproduce
// the joint encoder's attention logits.
struct BiEnc {
    ad::Var states;
    std::vector<int> tokens;
    std::vector<char> mask;
    bool is_query = false;
    std::vector<ad::Var> heads; // H matrices of shape |s| x e
};

inline BiEnc encode_bi(Fwd& f, const std::vector<int>& tokens, bool is_query) {
    if (tokens.empty()) throw DataError("encode_bi: empty sequence");
    const std::size_t limit = static_cast<std::size_t>(is_query ? f.cfg.max_query_len
                                                                : f.cfg.max_doc_len);
    if (tokens.size() > limit) throw DataError("encode_bi: sequence longer than configured max");
    BiEnc be;
    be.tokens = tokens;
    be.is_query = is_query;
    be.mask = nonpad_mask(tokens);
    ad::Var x = embed_seq(f, tokens, is_query ? 0 : f.cfg.max_query_len, false);
    for (int l = 0; l < f.cfg.bi_layers; ++l)
        x = encoder_layer(f, x, f.pv.enc[static_cast<std::size_t>(l)], be.mask);
    be.states = x;
    const auto& next = f.pv.enc[static_cast<std::size_t>(f.cfg.bi_layers)];
    ad::Var xn = f.t.rmsnorm(x, next.ln1);
    const double inv_sqrt_e = 1.0 / std::sqrt(static_cast<double>(f.cfg.head_dim));
    for (int h = 0; h < f.cfg.heads; ++h) {
        const auto hs = static_cast<std::size_t>(h);
        if (is_query)
            be.heads.push_back(f.t.scale(f.t.matmul(xn, next.attn.wq[hs]), inv_sqrt_e));
        else
            be.heads.push_back(f.t.matmul(xn, next.attn.wk[hs]));
    }
    return be;
}

struct CrossEnc {
    ad::Var out; // (|q|+|d|) x d, normalized encoder output
    std::vector<char> mask;
    std::size_t q_len = 0;
};

inline CrossEnc encode_cross(Fwd& f, const BiEnc& q, const BiEnc& d) {
    CrossEnc ce;
    ce.q_len = q.tokens.size();
    ce.mask = q.mask;
    ce.mask.insert(ce.mask.end(), d.mask.begin(), d.mask.end());
    ad::Var x = f.t.concat_rows({q.states, d.states});
    for (int l = f.cfg.bi_layers; l < f.cfg.enc_layers; ++l)
        x = encoder_layer(f, x, f.pv.enc[static_cast<std::size_t>(l)], ce.mask);
    ce.out = f.t.rmsnorm(x, f.pv.ln_enc_out);
    return ce;
}

// Pre-softmax target attention: first decoder position, last decoder layer,
// all heads, over the concatenated memory. Held as plain values, so the
// distillation target never backpropagates into the decoder.
struct TargetAttn {
    Mat logits;                             // H x total memory tokens
    std::vector<std::size_t> pair_offsets;  // size P+1
    std::vector<char> mem_mask;
};

struct FidOut {
    ad::Var logits; // T x vocab
    TargetAttn target;
};

inline FidOut decode_fid(Fwd& f, const std::vector<int>& dec_input,
                         const std::vector<CrossEnc>& encs) {
    if (encs.empty()) throw DataError("decode_fid: empty encoding list");
    if (dec_input.empty()) throw DataError("decode_fid: empty decoder input");
    if (dec_input.size() > static_cast<std::size_t>(f.cfg.max_dec_len))
        throw DataError("decode_fid: decoder input longer than max_dec_len");
    FidOut fo;
    std::vector<ad::Var> mems;
    mems.reserve(encs.size());
    fo.target.pair_offsets.push_back(0);
    for (const CrossEnc& e : encs) {
        mems.push_back(e.out);
        fo.target.mem_mask.insert(fo.target.mem_mask.end(), e.mask.begin(), e.mask.end());
        fo.target.pair_offsets.push_back(fo.target.mem_mask.size());
    }
    ad::Var memory = encs.size() == 1 ? mems[0] : f.t.concat_rows(mems);
    ad::Var x = embed_seq(f, dec_input, 0, true);
    for (int l = 0; l < f.cfg.dec_layers; ++l) {
        const auto& lp = f.pv.dec[static_cast<std::size_t>(l)];
        ad::Var sa = self_attention(f, f.t.rmsnorm(x, lp.ln1), lp.self, {}, true);
        x = f.t.add(x, maybe_dropout(f, sa));
        Mat* capture = (l == f.cfg.dec_layers - 1) ? &fo.target.logits : nullptr;
        ad::Var ca = cross_attention(f, f.t.rmsnorm(x, lp.ln2), memory, lp.cross,
                                     fo.target.mem_mask, capture);
        x = f.t.add(x, maybe_dropout(f, ca));
        ad::Var h = f.t.matmul(f.t.relu(f.t.matmul(f.t.rmsnorm(x, lp.ln3), lp.ff1)), lp.ff2);
        x = f.t.add(x, maybe_dropout(f, h));
    }
    fo.logits = f.t.matmul_nt(f.t.rmsnorm(x, f.pv.ln_dec_out), f.pv.embed);
    return fo;
}

// ----------------------------------------------------------------------
// Value-level encodings (no tape retained) and greedy generation
// ----------------------------------------------------------------------

struct EncodedSeq {
    std::vector<Mat> heads; // H matrices of shape |s| x e
    std::vector<char> mask;
    std::vector<int> tokens;
};

inline EncodedSeq encode_bi_values(const Model& m, const std::vector<int>& tokens, bool is_query) {
    ad::Tape t(false);
    ParamVars pv = lift_params(t, m.params, m.cfg, false);
    Fwd f{t, pv, m.cfg};
    BiEnc be = encode_bi(f, tokens, is_query);
    EncodedSeq es;
    es.mask = be.mask;
    es.tokens = tokens;
    for (ad::Var h : be.heads) es.heads.push_back(t.val(h));
    return es;
}

// Greedy decode up to max_new tokens, stopping at EOS. Deterministic;
// argmax ties resolve to the lowest token id.
inline std::vector<int> greedy_generate(const Model& m,
                                        const std::vector<int>& query_tokens,
                                        const std::vector<std::vector<int>>& doc_tokens,
                                        int max_new = 16) {
    ad::Tape t(false);
    ParamVars pv = lift_params(t, m.params, m.cfg, false);
    Fwd f{t, pv, m.cfg};
    BiEnc qb = encode_bi(f, query_tokens, true);
    std::vector<CrossEnc> encs;
    encs.reserve(doc_tokens.size());
    for (const auto& dt : doc_tokens) encs.push_back(encode_cross(f, qb, encode_bi(f, dt, false)));
    const std::size_t mark = t.size();
    std::vector<int> out;
    std::vector<int> dec_input{Vocabulary::kPad};
    max_new = std::min(max_new, m.cfg.max_dec_len - 1);
    for (int step = 0; step < max_new; ++step) {
        FidOut fo = decode_fid(f, dec_input, encs);
        const Mat& logits = t.val(fo.logits);
        const std::size_t last = logits.rows() - 1;
        int best = 0;
        double best_v = logits(last, 0);
        for (std::size_t c = 1; c < logits.cols(); ++c)
            if (logits(last, c) > best_v) {
                best_v = logits(last, c);
                best = static_cast<int>(c);
            }
        t.truncate(mark);
        if (best == Vocabulary::kEos) break;
        out.push_back(best);
        dec_input.push_back(best);
    }
    return out;
}

} // namespace ratt
