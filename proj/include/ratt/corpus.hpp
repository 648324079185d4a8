#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "ratt/common.hpp"

namespace ratt {

// ----------------------------------------------------------------------
// Tokenization: lowercase word-level. Runs of alphanumerics (bytes >= 0x80
// count as letters so UTF-8 stays intact) form words; every other non-space
// byte is a single-character token.
// ----------------------------------------------------------------------

inline bool is_word_byte(unsigned char c) {
    return std::isalnum(c) || c >= 0x80;
}

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        if (is_word_byte(c)) {
            cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
        } else {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
            if (!std::isspace(c)) out.push_back(std::string(1, static_cast<char>(c)));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

struct Vocabulary {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kEos = 2;
    static constexpr int kMask = 3;

    std::vector<std::string> id_to_token{"<pad>", "<unk>", "<eos>", "<mask>"};
    std::unordered_map<std::string, int> token_to_id;

    Vocabulary() {
        for (std::size_t i = 0; i < id_to_token.size(); ++i)
            token_to_id.emplace(id_to_token[i], static_cast<int>(i));
    }

    int size() const { return static_cast<int>(id_to_token.size()); }

    int add(const std::string& tok) {
        auto it = token_to_id.find(tok);
        if (it != token_to_id.end()) return it->second;
        int id = size();
        id_to_token.push_back(tok);
        token_to_id.emplace(tok, id);
        return id;
    }

    int lookup(const std::string& tok) const {
        auto it = token_to_id.find(tok);
        return it == token_to_id.end() ? kUnk : it->second;
    }

    const std::string& token(int id) const { return id_to_token[static_cast<std::size_t>(id)]; }
};

// max_len 0 means unlimited.
inline std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab,
                                 std::size_t max_len = 0) {
    std::vector<int> ids;
    for (const std::string& w : split_words(text)) {
        if (max_len && ids.size() >= max_len) break;
        ids.push_back(vocab.lookup(w));
    }
    return ids;
}

inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::string out;
    for (int id : ids) {
        if (id == Vocabulary::kPad || id == Vocabulary::kEos) continue;
        if (!out.empty()) out.push_back(' ');
        out += vocab.token(id);
    }
    return out;
}

// ----------------------------------------------------------------------
// Documents, queries, corpus ingestion
// ----------------------------------------------------------------------

struct Document {
    int doc_id = -1;          // dense, file order
    std::string ext_id;       // `id` field from the source file
    std::string text;
    std::vector<int> tokens;
};

struct Query {
    int query_id = -1;
    std::string ext_id;
    std::string text;
    std::vector<int> tokens;
    std::vector<std::string> answers;
};

struct Corpus {
    Vocabulary vocab;
    std::vector<Document> docs;
    std::size_t max_doc_len = 256;
    std::size_t max_query_len = 64;
};

inline nlohmann::json parse_jsonl_line(const std::string& line, const std::string& path,
                                       std::size_t line_no) {
    nlohmann::json obj = nlohmann::json::parse(line, nullptr, false);
    if (obj.is_discarded() || !obj.is_object())
        throw DataError(path + ":" + std::to_string(line_no) + ": malformed JSON object");
    return obj;
}

// Builds the vocabulary from document text in file order, so token ids are
// reproducible for a given corpus file.
inline Corpus ingest_corpus(const std::string& path, std::size_t max_doc_len = 256,
                            std::size_t max_query_len = 64) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file: " + path);
    Corpus corpus;
    corpus.max_doc_len = max_doc_len;
    corpus.max_query_len = max_query_len;
    std::unordered_map<std::string, int> seen_ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json obj = parse_jsonl_line(line, path, line_no);
        if (!obj.contains("id") || !obj.contains("text"))
            throw DataError(path + ":" + std::to_string(line_no) + ": missing `id` or `text`");
        Document d;
        d.doc_id = static_cast<int>(corpus.docs.size());
        d.ext_id = obj["id"].is_string() ? obj["id"].get<std::string>() : obj["id"].dump();
        d.text = obj["text"].get<std::string>();
        if (!seen_ids.emplace(d.ext_id, d.doc_id).second)
            throw DataError(path + ":" + std::to_string(line_no) + ": duplicate id `" + d.ext_id + "`");
        for (const std::string& w : split_words(d.text)) {
            int id = corpus.vocab.add(w);
            if (d.tokens.size() < max_doc_len) d.tokens.push_back(id);
        }
        if (d.tokens.empty())
            throw DataError(path + ":" + std::to_string(line_no) + ": document tokenizes to nothing");
        corpus.docs.push_back(std::move(d));
    }
    log_info("ingested " + std::to_string(corpus.docs.size()) + " documents, vocab " +
             std::to_string(corpus.vocab.size()));
    return corpus;
}

inline std::vector<Query> load_queries(const std::string& path, const Vocabulary& vocab,
                                       std::size_t max_query_len = 64) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open query file: " + path);
    std::vector<Query> queries;
    std::unordered_map<std::string, int> seen_ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json obj = parse_jsonl_line(line, path, line_no);
        if (!obj.contains("id") || !obj.contains("text"))
            throw DataError(path + ":" + std::to_string(line_no) + ": missing `id` or `text`");
        Query q;
        q.query_id = static_cast<int>(queries.size());
        q.ext_id = obj["id"].is_string() ? obj["id"].get<std::string>() : obj["id"].dump();
        q.text = obj["text"].get<std::string>();
        if (!seen_ids.emplace(q.ext_id, q.query_id).second)
            throw DataError(path + ":" + std::to_string(line_no) + ": duplicate id `" + q.ext_id + "`");
        if (obj.contains("answers"))
            for (const auto& a : obj["answers"]) q.answers.push_back(a.get<std::string>());
        q.tokens = tokenize(q.text, vocab, max_query_len);
        if (q.tokens.empty())
            throw DataError(path + ":" + std::to_string(line_no) + ": query tokenizes to nothing");
        queries.push_back(std::move(q));
    }
    return queries;
}

// ----------------------------------------------------------------------
// Okapi BM25
// ----------------------------------------------------------------------

class Bm25Index {
  public:
    struct Posting {
        std::uint32_t doc_id;
        std::uint32_t tf;
    };

    Bm25Index() = default;

    Bm25Index(const Corpus& corpus, double k1 = 0.9, double b = 0.4) : k1_(k1), b_(b) {
        doc_len_.reserve(corpus.docs.size());
        std::unordered_map<int, std::uint32_t> tf; // term id -> count in current doc
        for (const Document& d : corpus.docs) {
            tf.clear();
            for (const std::string& w : split_words(d.text)) {
                auto it = term_to_id_.find(w);
                int tid;
                if (it == term_to_id_.end()) {
                    tid = static_cast<int>(terms_.size());
                    term_to_id_.emplace(w, tid);
                    terms_.push_back(w);
                    postings_.emplace_back();
                } else {
                    tid = it->second;
                }
                ++tf[tid];
            }
            std::uint32_t len = 0;
            for (const auto& [tid, count] : tf) len += count;
            // appended in doc order, so postings stay sorted by doc_id
            for (const auto& [tid, count] : tf)
                postings_[static_cast<std::size_t>(tid)].push_back(
                    {static_cast<std::uint32_t>(d.doc_id), count});
            doc_len_.push_back(len);
        }
        for (auto& plist : postings_)
            std::sort(plist.begin(), plist.end(),
                      [](const Posting& a, const Posting& b) { return a.doc_id < b.doc_id; });
        double total = 0.0;
        for (std::uint32_t l : doc_len_) total += l;
        avgdl_ = doc_len_.empty() ? 0.0 : total / static_cast<double>(doc_len_.size());
    }

    std::size_t num_docs() const { return doc_len_.size(); }
    std::size_t num_terms() const { return terms_.size(); }
    double k1() const { return k1_; }
    double b() const { return b_; }
    double avgdl() const { return avgdl_; }

    double idf(const std::string& term) const {
        auto it = term_to_id_.find(term);
        if (it == term_to_id_.end()) return 0.0;
        double df = static_cast<double>(postings_[static_cast<std::size_t>(it->second)].size());
        double n = static_cast<double>(num_docs());
        return std::log((n - df + 0.5) / (df + 0.5));
    }

    // Sums the BM25 contribution of every query token occurrence (a repeated
    // query term counts each time). Unknown terms contribute nothing. Returns
    // every document matching at least one query term (even with a negative
    // score from a high-df term), sorted by score desc then doc_id asc,
    // truncated to k.
    std::vector<std::pair<int, double>> search(const std::string& query_text, std::size_t k) const {
        std::vector<double> score(num_docs(), 0.0);
        std::vector<char> matched(num_docs(), 0);
        for (const std::string& w : split_words(query_text)) {
            auto it = term_to_id_.find(w);
            if (it == term_to_id_.end()) continue;
            const auto& plist = postings_[static_cast<std::size_t>(it->second)];
            double df = static_cast<double>(plist.size());
            double n = static_cast<double>(num_docs());
            double idf = std::log((n - df + 0.5) / (df + 0.5));
            for (const Posting& p : plist) {
                double tf = static_cast<double>(p.tf);
                double dl = static_cast<double>(doc_len_[p.doc_id]);
                double denom = tf + k1_ * (1.0 - b_ + b_ * dl / avgdl_);
                score[p.doc_id] += idf * tf * (k1_ + 1.0) / denom;
                matched[p.doc_id] = 1;
            }
        }
        std::vector<std::pair<int, double>> hits;
        for (std::size_t d = 0; d < score.size(); ++d)
            if (matched[d]) hits.emplace_back(static_cast<int>(d), score[d]);
        std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        if (hits.size() > k) hits.resize(k);
        return hits;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot write " + path);
        out.write("RATTBM25", 8);
        io::write_f64(out, k1_);
        io::write_f64(out, b_);
        io::write_f64(out, avgdl_);
        io::write_u64(out, doc_len_.size());
        for (std::uint32_t l : doc_len_) io::write_u32(out, l);
        io::write_u64(out, terms_.size());
        for (std::size_t t = 0; t < terms_.size(); ++t) {
            io::write_string(out, terms_[t]);
            const auto& plist = postings_[t];
            io::write_u64(out, plist.size());
            for (const Posting& p : plist) {
                io::write_u32(out, p.doc_id);
                io::write_u32(out, p.tf);
            }
        }
        if (!out) throw DataError("short write: " + path);
    }

    static Bm25Index load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError("cannot open " + path);
        io::expect_magic(in, "RATTBM25", path);
        Bm25Index idx;
        idx.k1_ = io::read_f64(in);
        idx.b_ = io::read_f64(in);
        idx.avgdl_ = io::read_f64(in);
        std::uint64_t ndocs = io::read_u64(in);
        idx.doc_len_.resize(ndocs);
        for (auto& l : idx.doc_len_) l = io::read_u32(in);
        std::uint64_t nterms = io::read_u64(in);
        idx.terms_.resize(nterms);
        idx.postings_.resize(nterms);
        for (std::uint64_t t = 0; t < nterms; ++t) {
            idx.terms_[t] = io::read_string(in);
            idx.term_to_id_.emplace(idx.terms_[t], static_cast<int>(t));
            std::uint64_t np = io::read_u64(in);
            idx.postings_[t].resize(np);
            for (auto& p : idx.postings_[t]) {
                p.doc_id = io::read_u32(in);
                p.tf = io::read_u32(in);
            }
        }
        if (!in) throw DataError("truncated file: " + path);
        return idx;
    }

  private:
    double k1_ = 0.9;
    double b_ = 0.4;
    double avgdl_ = 0.0;
    std::vector<std::uint32_t> doc_len_;
    std::vector<std::string> terms_;
    std::vector<std::vector<Posting>> postings_;
    std::unordered_map<std::string, int> term_to_id_;
};

} // namespace ratt
