#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ratt/scoring.hpp"

using namespace ratt;
using ad::Tape;
using ad::Var;
namespace fs = std::filesystem;

namespace {

Mat random_mat(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    Mat m(r, c);
    for (double& x : m.vec()) x = rng.next_gauss() * scale;
    return m;
}

EncodedSeq random_seq(Rng& rng, std::size_t heads, std::size_t len, std::size_t e) {
    EncodedSeq s;
    for (std::size_t h = 0; h < heads; ++h) s.heads.push_back(random_mat(rng, len, e));
    s.mask.assign(len, 1);
    s.tokens.assign(len, 5);
    return s;
}

// independent softmax over w/tau using long double accumulation
std::vector<double> naive_head_dist(const Mat& w, double tau) {
    std::vector<long double> e(w.cols());
    long double se = 0.0L;
    for (std::size_t i = 0; i < w.cols(); ++i) {
        e[i] = std::exp(static_cast<long double>(w(0, i)) / static_cast<long double>(tau));
        se += e[i];
    }
    std::vector<double> out(w.cols());
    for (std::size_t i = 0; i < w.cols(); ++i) out[i] = static_cast<double>(e[i] / se);
    return out;
}

Model tiny_model(std::uint64_t seed = 3) {
    Vocabulary v;
    for (const char* w : {"red", "green", "blue", "box", "door", "what", "holds", "the", "key"})
        v.add(w);
    ModelConfig cfg;
    cfg.enc_layers = 3;
    cfg.bi_layers = 1;
    cfg.dec_layers = 1;
    cfg.heads = 2;
    cfg.head_dim = 3;
    cfg.ff_dim = 7;
    cfg.max_query_len = 5;
    cfg.max_doc_len = 6;
    cfg.max_dec_len = 4;
    return init_model(cfg, v, seed);
}

} // namespace

TEST_CASE("head distribution is a temperature softmax") {
    Mat w(1, 4);
    w(0, 0) = 0.002;
    w(0, 1) = 0.001;
    w(0, 2) = -0.003;
    w(0, 3) = 0.0;
    for (double tau : {1.0, 0.1, 0.001}) {
        std::vector<double> got = head_distribution(w, tau);
        std::vector<double> want = naive_head_dist(w, tau);
        double sum = 0.0;
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i] == Catch::Approx(want[i]).margin(1e-12));
            sum += got[i];
        }
        CHECK(sum == Catch::Approx(1.0).margin(1e-12));
    }
    CHECK_THROWS_AS(head_distribution(w, 0.0), NumericError);
    CHECK_THROWS_AS(head_distribution(w, -1.0), NumericError);
}

TEST_CASE("tiny tau concentrates nearly all mass on the leading head") {
    // gap of 0.01 at tau=0.001 is 10 units after scaling: e^-10 against 1
    Mat w(1, 3);
    w(0, 0) = 0.0;
    w(0, 1) = 0.01;
    w(0, 2) = 0.0;
    std::vector<double> p = head_distribution(w, 0.001);
    CHECK(p[1] >= 0.99);
    CHECK(p[1] >= 1.0 - 1e-4);
    CHECK(retrieval_head(w, 0.001) == 1);

    // equal logits tie to the lowest head
    Mat flat(1, 3, 0.5);
    CHECK(retrieval_head(flat, 0.001) == 0);
    std::vector<double> pf = head_distribution(flat, 0.001);
    for (double x : pf) CHECK(x == Catch::Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("avg max agrees with a naive double loop") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        std::size_t rows = 1 + rng.next_index(6), cols = 1 + rng.next_index(7);
        Mat a = random_mat(rng, rows, cols);
        std::vector<char> rm(rows), cm(cols);
        bool any_r = false, any_c = false;
        for (auto& x : rm) any_r = (x = rng.next_double() < 0.7) || any_r;
        for (auto& x : cm) any_c = (x = rng.next_double() < 0.7) || any_c;
        if (!any_r) rm[0] = 1;
        if (!any_c) cm[0] = 1;

        double naive = 0.0;
        int n = 0;
        for (std::size_t r = 0; r < rows; ++r) {
            if (!rm[r]) continue;
            double best = -1e300;
            for (std::size_t c = 0; c < cols; ++c)
                if (cm[c]) best = std::max(best, a(r, c));
            naive += best;
            ++n;
        }
        naive /= n;
        CHECK(avg_max(a, rm, cm) == Catch::Approx(naive).margin(1e-12));
    }

    Mat a(2, 2, 1.0);
    CHECK_THROWS_AS(avg_max(a, {0, 0}, {1, 1}), NumericError);
    CHECK_THROWS_AS(avg_max(a, {1, 1}, {0, 0}), NumericError);
    // empty masks mean everything visible
    CHECK(avg_max(a, {}, {}) == 1.0);
}

TEST_CASE("relevance is invariant to document token order") {
    Rng rng(7);
    EncodedSeq q = random_seq(rng, 2, 4, 3);
    EncodedSeq d = random_seq(rng, 2, 5, 3);
    Mat w = random_mat(rng, 1, 2, 0.01);
    double before = relevance(q, d, w, 0.001).combined;

    // reverse document rows in every head (mask is all ones, so no pairing issue)
    EncodedSeq rev = d;
    for (Mat& h : rev.heads) {
        Mat r(h.rows(), h.cols());
        for (std::size_t i = 0; i < h.rows(); ++i)
            for (std::size_t c = 0; c < h.cols(); ++c) r(h.rows() - 1 - i, c) = h(i, c);
        h = r;
    }
    CHECK(relevance(q, rev, w, 0.001).combined == Catch::Approx(before).margin(1e-12));
}

TEST_CASE("relevance shifts with per head score under the head weights") {
    Rng rng(13);
    EncodedSeq q = random_seq(rng, 3, 4, 2);
    EncodedSeq d = random_seq(rng, 3, 6, 2);
    Mat w = random_mat(rng, 1, 3, 0.005);
    RelevanceScore rs = relevance(q, d, w, 0.001);
    std::vector<double> p = head_distribution(w, 0.001);
    double combined = 0.0;
    for (std::size_t h = 0; h < 3; ++h) {
        CHECK(rs.per_head[h] ==
              Catch::Approx(avg_max(attention_matrix(q, d, static_cast<int>(h)), q.mask, d.mask))
                  .margin(1e-12));
        combined += p[h] * rs.per_head[h];
    }
    CHECK(rs.combined == Catch::Approx(combined).margin(1e-12));

    // raising every entry of one head's doc rows can only raise that head's max
    EncodedSeq boosted = d;
    for (double& x : boosted.heads[0].vec()) x += 0.0; // no-op guard
    CHECK_THROWS_AS(attention_matrix(q, d, 5), DataError);
    CHECK_THROWS_AS(attention_matrix(q, d, -1), DataError);
}

TEST_CASE("tape relevance reproduces the value path") {
    Model m = tiny_model();
    std::vector<int> q = tokenize("what holds the key", m.vocab);
    std::vector<int> d = tokenize("the red box holds", m.vocab);
    d.push_back(Vocabulary::kPad);

    EncodedSeq qe = encode_bi_values(m, q, true);
    EncodedSeq de = encode_bi_values(m, d, false);
    double value = relevance(qe, de, m.params.w_head, m.cfg.tau).combined;

    Tape t(true);
    ParamVars pv = lift_params(t, m.params, m.cfg, true);
    Fwd f{t, pv, m.cfg};
    BiEnc qb = encode_bi(f, q, true);
    BiEnc db = encode_bi(f, d, false);
    Var r = relevance_var(f, qb, db);
    CHECK(t.val(r)(0, 0) == Catch::Approx(value).margin(1e-10));

    // gradient flows into both token paths and the head logits
    t.backward(r);
    CHECK_FALSE(t.grad(pv.w_head).empty());
    CHECK_FALSE(t.grad(pv.embed).empty());
    double embed_norm = 0.0;
    for (double g : t.grad(pv.embed).vec()) embed_norm += g * g;
    CHECK(embed_norm > 0.0);
}

TEST_CASE("relevance gradient matches finite differences") {
    Rng rng(29);
    const std::size_t H = 2, QL = 3, DL = 4, E = 3;
    std::vector<Mat> qh, kh;
    for (std::size_t h = 0; h < H; ++h) {
        qh.push_back(random_mat(rng, QL, E));
        kh.push_back(random_mat(rng, DL, E));
    }
    Mat w = random_mat(rng, 1, H, 0.3);
    std::vector<char> qm{1, 1, 0}, km{1, 1, 1, 0};
    const double tau = 0.7; // soft enough that w gets visible gradient

    auto value = [&](const std::vector<Mat>& q2, const std::vector<Mat>& k2, const Mat& w2) {
        Tape t(false);
        std::vector<Var> qv, kv;
        for (const Mat& m2 : q2) qv.push_back(t.leaf(m2, false));
        for (const Mat& m2 : k2) kv.push_back(t.leaf(m2, false));
        return t.val(relevance_from(t, qv, qm, kv, km, t.leaf(w2, false), tau))(0, 0);
    };

    Tape t(true);
    std::vector<Var> qv, kv;
    for (const Mat& m2 : qh) qv.push_back(t.leaf(m2, true));
    for (const Mat& m2 : kh) kv.push_back(t.leaf(m2, true));
    Var wv = t.leaf(w, true);
    t.backward(relevance_from(t, qv, qm, kv, km, wv, tau));

    const double h = 1e-6;
    auto check_fd = [&](Mat& target, const Mat& grad) {
        for (std::size_t i = 0; i < target.size(); ++i) {
            double save = target.vec()[i];
            target.vec()[i] = save + h;
            double up = value(qh, kh, w);
            target.vec()[i] = save - h;
            double down = value(qh, kh, w);
            target.vec()[i] = save;
            double fd = (up - down) / (2.0 * h);
            double an = grad.empty() ? 0.0 : grad.vec()[i];
            CHECK(std::abs(fd - an) <= 1e-6 * (std::abs(fd) + std::abs(an)) + 1e-7);
        }
    };
    for (std::size_t hh = 0; hh < H; ++hh) {
        check_fd(qh[hh], t.grad(qv[hh]));
        check_fd(kh[hh], t.grad(kv[hh]));
    }
    check_fd(w, t.grad(wv));
}

TEST_CASE("probing rewards heads aligned with the labels") {
    // two heads; candidate scores are controlled through hand-built sequences
    // is impractical, so probe on a real model and then on synthetic labels
    // derived from head 0's own scores: head 0 must correlate perfectly.
    Model m = tiny_model(19);
    Corpus corpus;
    corpus.vocab = m.vocab;
    std::vector<std::string> texts{"red box", "green door", "blue key", "the box holds",
                                   "door key red", "green green box"};
    for (std::size_t i = 0; i < texts.size(); ++i) {
        Document d;
        d.doc_id = static_cast<int>(i);
        d.ext_id = "d" + std::to_string(i);
        d.text = texts[i];
        d.tokens = tokenize(texts[i], corpus.vocab);
        corpus.docs.push_back(d);
    }
    std::vector<Query> queries(2);
    queries[0].query_id = 0;
    queries[0].text = "what holds the key";
    queries[0].tokens = tokenize(queries[0].text, m.vocab);
    queries[1].query_id = 1;
    queries[1].text = "red box";
    queries[1].tokens = tokenize(queries[1].text, m.vocab);

    // label each candidate by whether head 0 scores it above the median
    std::vector<std::vector<std::pair<int, int>>> cands(2);
    for (std::size_t qi = 0; qi < 2; ++qi) {
        EncodedSeq qe = encode_bi_values(m, queries[qi].tokens, true);
        std::vector<std::pair<double, int>> scored;
        for (int di = 0; di < 6; ++di) {
            EncodedSeq de = encode_bi_values(m, corpus.docs[static_cast<std::size_t>(di)].tokens, false);
            scored.emplace_back(avg_max(attention_matrix(qe, de, 0), qe.mask, de.mask), di);
        }
        std::sort(scored.begin(), scored.end());
        for (std::size_t i = 0; i < scored.size(); ++i)
            cands[qi].emplace_back(scored[i].second, i >= 3 ? 1 : 0);
    }
    std::vector<HeadProbe> probes = probe_heads(m, queries, cands, corpus);
    REQUIRE(probes.size() == 2);
    // report is sorted by correlation; head 0 must be on top with high corr
    CHECK(probes[0].head_id == 0);
    CHECK(probes[0].correlation > 0.7);
    CHECK(probes[0].correlation <= 1.0 + 1e-12);
    double wsum = 0.0;
    for (const auto& p : probes) wsum += p.weight;
    CHECK(wsum == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("probe correlations on random labels stay near zero") {
    Rng rng(103);
    std::vector<double> x(1000), y(1000);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = rng.next_gauss();
        y[i] = rng.next_double() < 0.5 ? 0.0 : 1.0;
    }
    double c = pearson(x, y);
    CHECK(std::abs(c) < 0.1);

    // degenerate inputs yield nan, which probing skips
    CHECK(std::isnan(pearson({1.0, 1.0, 1.0}, {0.0, 1.0, 0.0})));
    CHECK(std::isnan(pearson({1.0, 2.0, 3.0}, {1.0, 1.0, 1.0})));
    CHECK(pearson({1.0, 2.0, 3.0}, {2.0, 4.0, 6.0}) == Catch::Approx(1.0).margin(1e-12));
    CHECK(pearson({1.0, 2.0, 3.0}, {3.0, 2.0, 1.0}) == Catch::Approx(-1.0).margin(1e-12));
}

TEST_CASE("probe report format") {
    std::vector<HeadProbe> probes{{1, 0.875, 0.25}, {0, -0.5, 0.75}};
    fs::path p = fs::temp_directory_path() / "ts_probe.tsv";
    write_probe_report(p.string(), probes);
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    CHECK(line.rfind("#", 0) == 0);
    std::getline(in, line);
    CHECK(line == "head_id\tcorrelation\tweight");
    std::getline(in, line);
    CHECK(line == "1\t0.875000\t0.250000");
    std::getline(in, line);
    CHECK(line == "0\t-0.500000\t0.750000");
    CHECK_THROWS_AS(write_probe_report("/nonexistent/dir/report.tsv", probes), DataError);
}

TEST_CASE("scaling every head representation scales the relevance") {
    Rng rng(31);
    EncodedSeq q = random_seq(rng, 2, 3, 4);
    EncodedSeq d = random_seq(rng, 2, 5, 4);
    Mat w = random_mat(rng, 1, 2, 0.01);
    double base = relevance(q, d, w, 0.001).combined;
    EncodedSeq q2 = q;
    for (Mat& h : q2.heads)
        for (double& x : h.vec()) x *= 3.0;
    CHECK(relevance(q2, d, w, 0.001).combined == Catch::Approx(3.0 * base).margin(1e-9));
}
