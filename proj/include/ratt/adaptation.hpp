#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ratt/common.hpp"
#include "ratt/corpus.hpp"
#include "ratt/training.hpp"

namespace ratt {

inline constexpr const char* kMaskSentinel = "MASK";

// ----------------------------------------------------------------------
// Salient-span mining
// ----------------------------------------------------------------------

inline std::vector<std::string> split_sentences(const std::string& text) {
    auto strip = [](const std::string& s) {
        std::size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return std::string();
        std::size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    };
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if (c != '.' && c != '!' && c != '?') continue;
        while (i + 1 < text.size() &&
               (text[i + 1] == '.' || text[i + 1] == '!' || text[i + 1] == '?'))
            ++i;
        std::string s = strip(text.substr(start, i + 1 - start));
        if (!s.empty()) out.push_back(std::move(s));
        start = i + 1;
    }
    std::string tail = strip(text.substr(start));
    if (!tail.empty()) out.push_back(std::move(tail));
    return out;
}

struct EntitySpan {
    std::size_t begin = 0; // char offsets into the sentence
    std::size_t end = 0;
};

// Maximal runs of capitalized words (original casing) and standalone numbers
// of 4+ digits. Spans exclude surrounding punctuation.
inline std::vector<EntitySpan> detect_entities(const std::string& s) {
    struct Tok {
        std::size_t cb, ce;
        bool cap, num;
    };
    std::vector<Tok> toks;
    std::size_t i = 0;
    const std::size_t n = s.size();
    while (i < n) {
        while (i < n && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        if (i >= n) break;
        std::size_t b = i;
        while (i < n && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        std::size_t cb = b, ce = i;
        while (cb < ce && !std::isalnum(static_cast<unsigned char>(s[cb]))) ++cb;
        while (ce > cb && !std::isalnum(static_cast<unsigned char>(s[ce - 1]))) --ce;
        if (cb >= ce) continue;
        bool num = ce - cb >= 4;
        for (std::size_t j = cb; j < ce && num; ++j)
            num = std::isdigit(static_cast<unsigned char>(s[j])) != 0;
        bool cap = !num && std::isupper(static_cast<unsigned char>(s[cb]));
        toks.push_back({cb, ce, cap, num});
    }
    std::vector<EntitySpan> out;
    std::size_t k = 0;
    while (k < toks.size()) {
        if (toks[k].cap) {
            std::size_t j = k;
            while (j + 1 < toks.size() && toks[j + 1].cap) ++j;
            out.push_back({toks[k].cb, toks[j].ce});
            k = j + 1;
        } else {
            if (toks[k].num) out.push_back({toks[k].cb, toks[k].ce});
            ++k;
        }
    }
    return out;
}

struct SsmExample {
    int doc_id = -1;
    std::string query;  // sentence with one entity replaced by the sentinel
    std::string answer; // the masked entity
};

inline bool contains_standalone(const std::string& s, const std::string& word) {
    std::size_t p = 0;
    while ((p = s.find(word, p)) != std::string::npos) {
        const bool left_ok = p == 0 || !std::isalnum(static_cast<unsigned char>(s[p - 1]));
        const std::size_t after = p + word.size();
        const bool right_ok = after >= s.size() ||
                              !std::isalnum(static_cast<unsigned char>(s[after]));
        if (left_ok && right_ok) return true;
        ++p;
    }
    return false;
}

// Deterministic under (corpus, sample_count, seed). Sentences that already
// contain the sentinel word are skipped to keep the unmask round trip exact.
inline std::vector<SsmExample> mine_ssm(const Corpus& corpus, std::size_t sample_count,
                                        std::uint64_t seed) {
    struct Cand {
        int doc_id;
        std::string sentence;
        std::vector<EntitySpan> spans;
    };
    std::vector<Cand> cands;
    for (const Document& d : corpus.docs)
        for (std::string& s : split_sentences(d.text)) {
            if (split_words(s).size() < 3) continue;
            if (contains_standalone(s, kMaskSentinel)) continue;
            std::vector<EntitySpan> spans = detect_entities(s);
            if (spans.empty()) continue;
            cands.push_back({d.doc_id, std::move(s), std::move(spans)});
        }
    Rng rng(seed);
    std::vector<std::size_t> pick(cands.size());
    for (std::size_t i = 0; i < pick.size(); ++i) pick[i] = i;
    if (sample_count < cands.size()) {
        rng.shuffle(pick);
        pick.resize(sample_count);
        std::sort(pick.begin(), pick.end());
    }
    std::vector<SsmExample> out;
    out.reserve(pick.size());
    for (std::size_t ci : pick) {
        const Cand& c = cands[ci];
        const EntitySpan& sp = c.spans[rng.next_index(c.spans.size())];
        SsmExample ex;
        ex.doc_id = c.doc_id;
        ex.answer = c.sentence.substr(sp.begin, sp.end - sp.begin);
        ex.query = c.sentence.substr(0, sp.begin) + kMaskSentinel + c.sentence.substr(sp.end);
        out.push_back(std::move(ex));
    }
    return out;
}

inline std::string unmask(const std::string& query, const std::string& answer) {
    std::size_t p = query.find(kMaskSentinel);
    if (p == std::string::npos) throw DataError("masked query lacks the sentinel");
    std::string s = query;
    return s.replace(p, std::string(kMaskSentinel).size(), answer);
}

inline void save_ssm_examples(const std::string& path, const std::vector<SsmExample>& exs) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    for (const SsmExample& ex : exs) {
        nlohmann::json j{{"doc_id", ex.doc_id}, {"query", ex.query}, {"answer", ex.answer}};
        out << j.dump() << "\n";
    }
}

inline std::vector<SsmExample> load_ssm_examples(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::vector<SsmExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = parse_jsonl_line(line, path, line_no);
        if (!j.contains("doc_id") || !j.contains("query") || !j.contains("answer"))
            throw DataError(path + ":" + std::to_string(line_no) +
                            ": missing `doc_id`, `query` or `answer`");
        SsmExample ex;
        try {
            ex.doc_id = j["doc_id"].get<int>();
            ex.query = j["query"].get<std::string>();
            ex.answer = j["answer"].get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        out.push_back(std::move(ex));
    }
    return out;
}

// ----------------------------------------------------------------------
// Tokenization against a frozen vocabulary
// ----------------------------------------------------------------------

// Re-tokenizes a freshly ingested corpus with a checkpoint's vocabulary so
// document token ids match the model (unknown words become UNK).
inline void retokenize(Corpus& corpus, const Vocabulary& vocab) {
    corpus.vocab = vocab;
    for (Document& d : corpus.docs) {
        d.tokens = tokenize(d.text, corpus.vocab, corpus.max_doc_len);
        if (d.tokens.empty()) throw DataError("document `" + d.ext_id + "` tokenizes to nothing");
    }
}

// The sentinel maps to the MASK token id; everything else tokenizes normally.
inline std::vector<int> tokenize_masked(const std::string& text, const Vocabulary& vocab,
                                        std::size_t max_len = 0) {
    std::vector<int> ids;
    const std::string sent = kMaskSentinel;
    std::size_t pos = 0;
    auto emit = [&](const std::string& seg) {
        for (int id : tokenize(seg, vocab)) ids.push_back(id);
    };
    while (pos < text.size()) {
        std::size_t p = text.find(sent, pos);
        while (p != std::string::npos) {
            const bool left_ok = p == 0 || !std::isalnum(static_cast<unsigned char>(text[p - 1]));
            const std::size_t after = p + sent.size();
            const bool right_ok = after >= text.size() ||
                                  !std::isalnum(static_cast<unsigned char>(text[after]));
            if (left_ok && right_ok) break;
            p = text.find(sent, p + 1);
        }
        if (p == std::string::npos) {
            emit(text.substr(pos));
            break;
        }
        emit(text.substr(pos, p - pos));
        ids.push_back(Vocabulary::kMask);
        pos = p + sent.size();
    }
    if (max_len && ids.size() > max_len) ids.resize(max_len);
    return ids;
}

// ----------------------------------------------------------------------
// Adaptation drivers
// ----------------------------------------------------------------------

inline std::vector<Query> ssm_queries(const std::vector<SsmExample>& exs, const Vocabulary& vocab,
                                      std::size_t max_query_len) {
    std::vector<Query> qs;
    qs.reserve(exs.size());
    for (std::size_t i = 0; i < exs.size(); ++i) {
        Query q;
        q.query_id = static_cast<int>(i);
        q.ext_id = "ssm" + std::to_string(i);
        q.text = exs[i].query;
        q.tokens = tokenize_masked(exs[i].query, vocab, max_query_len);
        if (q.tokens.empty()) throw DataError("SSM query tokenizes to nothing");
        q.answers.push_back(exs[i].answer);
        qs.push_back(std::move(q));
    }
    return qs;
}

// Single iteration over mined (masked sentence, entity) pairs with BM25
// close documents. Returns false (and leaves the model untouched) when
// nothing could be mined.
inline bool adapt_unsupervised(Model& model, const Corpus& corpus, TrainConfig tc,
                               std::size_t sample_count, const std::string& out_dir = "") {
    std::vector<SsmExample> exs = mine_ssm(corpus, sample_count, tc.seed);
    if (exs.empty()) {
        log_warn("no salient spans found; adaptation is a no-op");
        return false;
    }
    tc.iterations = 1;
    std::vector<Query> qs = ssm_queries(exs, corpus.vocab, corpus.max_query_len);
    run_training(model, corpus, qs, {}, tc, out_dir);
    return true;
}

// ----------------------------------------------------------------------
// Retrieval adaptation via generative relevance targets
// ----------------------------------------------------------------------

struct IrTriple {
    std::string query_id;
    std::string query_text;
    int doc_id = -1;
    int grade = 0;
};

struct IrExample {
    std::string query_id;
    std::string query_text;
    std::string target; // "relevance: {grade}. {document text}"
};

inline std::string format_ir_target(int grade, const std::string& doc_text) {
    return "relevance: " + std::to_string(grade) + ". " + doc_text;
}

inline std::pair<int, std::string> parse_ir_target(const std::string& target) {
    const std::string prefix = "relevance: ";
    if (target.compare(0, prefix.size(), prefix) != 0)
        throw DataError("relevance target lacks its prefix");
    std::size_t p = prefix.size();
    std::size_t q = p;
    if (q < target.size() && target[q] == '-') ++q;
    while (q < target.size() && std::isdigit(static_cast<unsigned char>(target[q]))) ++q;
    if (q == p || q + 2 > target.size() || target[q] != '.' || target[q + 1] != ' ')
        throw DataError("relevance target grade is malformed");
    return {std::stoi(target.substr(p, q - p)), target.substr(q + 2)};
}

inline std::vector<IrTriple> load_ir_triples(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::vector<IrTriple> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = parse_jsonl_line(line, path, line_no);
        if (!j.contains("query_id") || !j.contains("query") || !j.contains("doc_id") ||
            !j.contains("grade"))
            throw DataError(path + ":" + std::to_string(line_no) +
                            ": missing `query_id`, `query`, `doc_id` or `grade`");
        IrTriple t;
        try {
            t.query_id = j["query_id"].is_string() ? j["query_id"].get<std::string>()
                                                   : j["query_id"].dump();
            t.query_text = j["query"].get<std::string>();
            t.doc_id = j["doc_id"].get<int>();
            t.grade = j["grade"].get<int>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        out.push_back(std::move(t));
    }
    return out;
}

// One example per query holding a positive; when several positives exist one
// is sampled uniformly (deterministic under seed).
inline std::vector<IrExample> make_ir_examples(const std::vector<IrTriple>& triples,
                                               const Corpus& corpus, std::uint64_t seed) {
    std::vector<std::string> order;
    std::unordered_map<std::string, std::vector<const IrTriple*>> pos;
    for (const IrTriple& t : triples) {
        if (t.grade <= 0) continue;
        if (t.doc_id < 0 || static_cast<std::size_t>(t.doc_id) >= corpus.docs.size())
            throw DataError("relevance triple names unknown doc id " + std::to_string(t.doc_id));
        if (!pos.count(t.query_id)) order.push_back(t.query_id);
        pos[t.query_id].push_back(&t);
    }
    Rng rng(seed);
    std::vector<IrExample> out;
    for (const std::string& qid : order) {
        const auto& ps = pos[qid];
        const IrTriple* t = ps[rng.next_index(ps.size())];
        IrExample ex;
        ex.query_id = qid;
        ex.query_text = t->query_text;
        ex.target = format_ir_target(t->grade,
                                     corpus.docs[static_cast<std::size_t>(t->doc_id)].text);
        out.push_back(std::move(ex));
    }
    return out;
}

inline constexpr std::size_t kIrTargetTokens = 64;

inline std::vector<Query> ir_queries(const std::vector<IrExample>& exs, const Vocabulary& vocab,
                                     std::size_t max_query_len) {
    std::vector<Query> qs;
    qs.reserve(exs.size());
    for (std::size_t i = 0; i < exs.size(); ++i) {
        Query q;
        q.query_id = static_cast<int>(i);
        q.ext_id = exs[i].query_id;
        q.text = exs[i].query_text;
        q.tokens = tokenize(exs[i].query_text, vocab, max_query_len);
        if (q.tokens.empty()) throw DataError("IR query tokenizes to nothing");
        q.answers.push_back(exs[i].target);
        qs.push_back(std::move(q));
    }
    return qs;
}

inline bool adapt_ir(Model& model, const Corpus& corpus, TrainConfig tc,
                     const std::vector<IrTriple>& triples, const std::string& out_dir = "") {
    std::vector<IrExample> exs = make_ir_examples(triples, corpus, tc.seed);
    if (exs.empty()) {
        log_warn("no positive relevance triples; adaptation is a no-op");
        return false;
    }
    tc.iterations = 1;
    std::vector<Query> qs = ir_queries(exs, corpus.vocab, corpus.max_query_len);

    Trainer trainer(model, corpus, tc);
    std::vector<TrainExample> tex;
    tex.reserve(qs.size());
    const int budget = std::min<int>(static_cast<int>(kIrTargetTokens),
                                     model.cfg.max_dec_len - 1);
    for (const Query& q : qs) {
        TrainExample ex;
        ex.ext_id = q.ext_id;
        ex.q_tokens = q.tokens;
        ex.answers = q.answers;
        ex.answer_ids = tokenize(q.answers[0], model.vocab, static_cast<std::size_t>(budget));
        if (ex.answer_ids.empty()) throw DataError("empty relevance target");
        ex.answer_ids.push_back(Vocabulary::kEos);
        tex.push_back(std::move(ex));
    }
    trainer.set_examples(std::move(tex));
    Bm25Index bm25(corpus);
    trainer.bootstrap_close_bm25(bm25, qs);
    std::ofstream metrics;
    if (!out_dir.empty()) metrics.open(out_dir + "/metrics.jsonl");
    const int steps = tc.warmup_steps + tc.steps_per_iter;
    for (int s = 0; s < steps; ++s) {
        TrainBatch b = trainer.next_batch();
        LossReport rep = trainer.train_step(b);
        if (metrics.is_open())
            metrics << "{\"step\": " << (s + 1) << ", \"L_QA\": " << rep.l_qa
                    << ", \"L_cross_doc\": " << rep.l_cross_doc << ", \"r_at_1_dev\": null}\n";
    }
    return true;
}

} // namespace ratt
