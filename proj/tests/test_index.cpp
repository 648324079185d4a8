#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "ratt/index.hpp"

using namespace ratt;
namespace fs = std::filesystem;

namespace {

Model small_model(std::uint64_t seed, const std::vector<std::string>& texts, Corpus& corpus) {
    std::string body;
    for (std::size_t i = 0; i < texts.size(); ++i)
        body += "{\"id\": \"d" + std::to_string(i) + "\", \"text\": \"" + texts[i] + "\"}\n";
    fs::path p = fs::temp_directory_path() / "ti_corpus.jsonl";
    std::ofstream(p) << body;
    corpus = ingest_corpus(p.string(), 8, 6);
    ModelConfig cfg;
    cfg.enc_layers = 3;
    cfg.bi_layers = 1;
    cfg.dec_layers = 1;
    cfg.heads = 2;
    cfg.head_dim = 4;
    cfg.ff_dim = 8;
    cfg.max_query_len = 6;
    cfg.max_doc_len = 8;
    cfg.max_dec_len = 4;
    return init_model(cfg, corpus.vocab, seed);
}

std::vector<std::string> fixture_texts() {
    return {"the amber key opens the north gate", "a copper coin buys one loaf",
            "the north tower watches the road",   "amber beads on a copper wire",
            "one road leads to the gate",         "the loaf sits on the table",
            "a key ring of copper and amber",     "watch the tower at dawn",
            "dawn light on the north road",       "the table by the gate"};
}

Query make_query(const std::string& text, const Vocabulary& vocab, const std::string& id = "q0") {
    Query q;
    q.ext_id = id;
    q.text = text;
    q.tokens = tokenize(text, vocab, 6);
    return q;
}

// brute force: avg-max relevance of the retrieval head over f32-rounded doc
// rows, computed straight from the encoded sequences
std::vector<std::pair<int, double>> exhaustive_head(const Model& m, const Corpus& corpus,
                                                    const Query& q, std::size_t k) {
    int hstar = retrieval_head(m.params.w_head, m.cfg.tau);
    EncodedSeq qe = encode_bi_values(m, q.tokens, true);
    const Mat& qh = qe.heads[static_cast<std::size_t>(hstar)];
    std::vector<std::pair<int, double>> out;
    for (const Document& d : corpus.docs) {
        EncodedSeq de = encode_bi_values(m, d.tokens, false);
        Mat k32 = de.heads[static_cast<std::size_t>(hstar)];
        for (double& v : k32.vec()) v = static_cast<double>(static_cast<float>(v));
        double total = 0.0;
        std::size_t nq = 0;
        for (std::size_t i = 0; i < q.tokens.size(); ++i) {
            if (!qe.mask[i]) continue;
            double best = -1e300;
            for (std::size_t t = 0; t < d.tokens.size(); ++t) {
                if (d.tokens[t] == Vocabulary::kPad) continue;
                double s = 0.0;
                for (std::size_t c = 0; c < k32.cols(); ++c) s += qh(i, c) * k32(t, c);
                best = std::max(best, s);
            }
            total += best;
            ++nq;
        }
        out.emplace_back(d.doc_id, total / static_cast<double>(nq));
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (out.size() > k) out.resize(k);
    return out;
}

} // namespace

TEST_CASE("index stores one f32 row per non pad token") {
    Corpus corpus;
    Model m = small_model(3, fixture_texts(), corpus);
    TokenIndex idx = build_index(corpus, m, 0xabcdef);

    std::size_t want = 0;
    for (const Document& d : corpus.docs) want += d.tokens.size(); // no pads in these texts
    CHECK(idx.rows.rows() == want);
    CHECK(idx.doc_id.size() == want);
    CHECK(idx.token_pos.size() == want);
    CHECK(idx.head_dim == m.cfg.head_dim);
    CHECK(idx.heads == m.cfg.heads);
    CHECK(idx.fingerprint == 0xabcdef);
    CHECK(idx.hstar == retrieval_head(m.params.w_head, m.cfg.tau));

    // each row equals the f32 rounding of the bi-encoder key row
    for (const Document& d : corpus.docs) {
        EncodedSeq de = encode_bi_values(m, d.tokens, false);
        const Mat& k = de.heads[static_cast<std::size_t>(idx.hstar)];
        auto [begin, end] = idx.doc_range[static_cast<std::size_t>(d.doc_id)];
        REQUIRE(end - begin == d.tokens.size());
        for (std::uint32_t r = begin; r < end; ++r) {
            std::uint32_t t = idx.token_pos[r];
            for (std::size_t c = 0; c < k.cols(); ++c)
                CHECK(idx.rows(r, c) == static_cast<double>(static_cast<float>(k(t, c))));
        }
    }
    CHECK_THROWS_AS(build_index(Corpus{}, m, 0), DataError);
}

TEST_CASE("pad tokens never enter the index") {
    Corpus corpus;
    Model m = small_model(5, {"amber key", "copper coin loaf"}, corpus);
    corpus.docs[0].tokens.push_back(Vocabulary::kPad);
    corpus.docs[0].tokens.push_back(Vocabulary::kPad);
    TokenIndex idx = build_index(corpus, m, 0);
    CHECK(idx.rows.rows() == 5); // 2 + 3 real tokens
    for (std::size_t r = 0; r < idx.doc_id.size(); ++r)
        CHECK(corpus.docs[idx.doc_id[r]].tokens[idx.token_pos[r]] != Vocabulary::kPad);
}

TEST_CASE("token search equals a naive full scan with tie order") {
    Corpus corpus;
    Model m = small_model(7, fixture_texts(), corpus);
    TokenIndex idx = build_index(corpus, m, 0);

    Rng rng(23);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> qv(static_cast<std::size_t>(idx.head_dim));
        for (double& x : qv) x = rng.next_gauss();
        for (std::size_t kprime : {std::size_t{1}, std::size_t{5}, idx.rows.rows() / 2,
                                   idx.rows.rows(), idx.rows.rows() + 10}) {
            auto got = token_search(idx, qv.data(), kprime);
            std::vector<std::pair<std::size_t, double>> want(idx.rows.rows());
            for (std::size_t r = 0; r < idx.rows.rows(); ++r)
                want[r] = {r, dot(qv.data(), idx.rows.row(r), qv.size())};
            std::stable_sort(want.begin(), want.end(),
                             [](const auto& a, const auto& b) { return a.second > b.second; });
            if (want.size() > kprime) want.resize(kprime);
            REQUIRE(got.size() == want.size());
            for (std::size_t i = 0; i < got.size(); ++i) {
                CHECK(got[i].first == want[i].first);
                CHECK(got[i].second == want[i].second);
            }
        }
    }
    std::vector<double> qv(static_cast<std::size_t>(idx.head_dim), 1.0);
    CHECK(token_search(idx, qv.data(), 0).empty());
}

TEST_CASE("token search breaks exact ties by ascending row") {
    TokenIndex idx;
    idx.head_dim = 2;
    idx.heads = 1;
    idx.rows = Mat(4, 2);
    // rows 1 and 3 identical, rows 0 and 2 identical
    idx.rows(0, 0) = 1.0;
    idx.rows(1, 0) = 2.0;
    idx.rows(2, 0) = 1.0;
    idx.rows(3, 0) = 2.0;
    idx.doc_id = {0, 0, 1, 1};
    idx.token_pos = {0, 1, 0, 1};
    idx.rebuild_ranges();
    double q[2] = {1.0, 0.0};
    auto hits = token_search(idx, q, 4);
    REQUIRE(hits.size() == 4);
    CHECK(hits[0].first == 1);
    CHECK(hits[1].first == 3);
    CHECK(hits[2].first == 0);
    CHECK(hits[3].first == 2);
}

TEST_CASE("retrieval with full kprime equals exhaustive scoring") {
    Corpus corpus;
    Model m = small_model(11, fixture_texts(), corpus);
    TokenIndex idx = build_index(corpus, m, 0);

    for (const char* qt : {"amber key", "the north road", "copper", "loaf by the gate",
                           "dawn watch tower"}) {
        Query q = make_query(qt, corpus.vocab);
        RetrievalResult res = retrieve(idx, q, m, 10, idx.rows.rows());
        auto want = exhaustive_head(m, corpus, q, 10);
        REQUIRE(res.ranked.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) {
            CHECK(res.ranked[i].first == want[i].first);
            CHECK(res.ranked[i].second == Catch::Approx(want[i].second).margin(1e-12));
        }
    }
}

TEST_CASE("small kprime retrieves a subset scored identically") {
    Corpus corpus;
    Model m = small_model(13, fixture_texts(), corpus);
    TokenIndex idx = build_index(corpus, m, 0);
    Query q = make_query("amber copper road", corpus.vocab);

    auto full = exhaustive_head(m, corpus, q, corpus.docs.size());
    std::map<int, double> full_score(full.begin(), full.end());

    RetrievalResult res = retrieve(idx, q, m, 10, 2);
    CHECK(res.ranked.size() <= 10);
    CHECK(!res.ranked.empty());
    // stage 2 rescoring is exact for whatever stage 1 surfaced
    for (const auto& [d, s] : res.ranked)
        CHECK(s == Catch::Approx(full_score.at(d)).margin(1e-12));
    // candidates are ranked in the same relative order as the full scan
    for (std::size_t i = 1; i < res.ranked.size(); ++i)
        CHECK(res.ranked[i - 1].second >= res.ranked[i].second);

    CHECK(retrieve(idx, q, m, 0, 5).ranked.empty());
}

TEST_CASE("index round trip is exact") {
    Corpus corpus;
    Model m = small_model(17, fixture_texts(), corpus);
    TokenIndex idx = build_index(corpus, m, 0x1122334455667788ull);
    fs::path p = fs::temp_directory_path() / "ti_index.bin";
    save_index(p.string(), idx);
    TokenIndex back = load_index(p.string());

    CHECK(back.head_dim == idx.head_dim);
    CHECK(back.heads == idx.heads);
    CHECK(back.hstar == idx.hstar);
    CHECK(back.fingerprint == idx.fingerprint);
    REQUIRE(back.rows.rows() == idx.rows.rows());
    for (std::size_t i = 0; i < idx.rows.size(); ++i)
        CHECK(back.rows.vec()[i] == idx.rows.vec()[i]); // f32 in memory both sides
    CHECK(back.doc_id == idx.doc_id);
    CHECK(back.token_pos == idx.token_pos);
    CHECK(back.doc_range == idx.doc_range);

    // identical retrieval before and after the round trip
    Query q = make_query("north gate", corpus.vocab);
    RetrievalResult a = retrieve(idx, q, m, 5, 20);
    RetrievalResult b = retrieve(back, q, m, 5, 20);
    REQUIRE(a.ranked.size() == b.ranked.size());
    for (std::size_t i = 0; i < a.ranked.size(); ++i) {
        CHECK(a.ranked[i].first == b.ranked[i].first);
        CHECK(a.ranked[i].second == b.ranked[i].second);
    }

    {
        std::ofstream badf(p, std::ios::binary);
        badf << "WRONGIDX" << std::string(32, '\0');
    }
    CHECK_THROWS_AS(load_index(p.string()), DataError);
    CHECK_THROWS_AS(load_index("/nonexistent/idx.bin"), DataError);
    CHECK_THROWS_AS(save_index("/nonexistent/dir/idx.bin", idx), DataError);
}

TEST_CASE("fingerprint mismatch is refused") {
    Corpus corpus;
    Model m = small_model(19, fixture_texts(), corpus);
    TokenIndex idx = build_index(corpus, m, 111);
    Query q = make_query("amber", corpus.vocab);
    CHECK_THROWS_MATCHES(retrieve(idx, q, m, 5, 10, 222), DataError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("different checkpoint")));
    CHECK_NOTHROW(retrieve(idx, q, m, 5, 10, 111));
    CHECK_NOTHROW(retrieve(idx, q, m, 5, 10, 0)); // unmarked callers skip the check
    TokenIndex unmarked = build_index(corpus, m, 0);
    CHECK_NOTHROW(retrieve(unmarked, q, m, 5, 10, 222)); // unmarked index too
}

TEST_CASE("rebuilding the index is deterministic") {
    Corpus corpus;
    Model m = small_model(23, fixture_texts(), corpus);
    TokenIndex a = build_index(corpus, m, 9);
    TokenIndex b = reindex(corpus, m, 9);
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) CHECK(a.rows.vec()[i] == b.rows.vec()[i]);
    CHECK(a.doc_id == b.doc_id);
    CHECK(a.token_pos == b.token_pos);
}
