#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ratt/common.hpp"
#include "ratt/corpus.hpp"

namespace ratt {

// ----------------------------------------------------------------------
// Run files (TSV: query_id doc_id rank score) and qrels (query_id doc_id grade)
// ----------------------------------------------------------------------

struct RunFile {
    std::vector<std::string> query_order;
    std::unordered_map<std::string, std::vector<std::pair<int, double>>> ranked; // rank order

    void add(const std::string& qid, const std::vector<std::pair<int, double>>& docs) {
        if (!ranked.count(qid)) query_order.push_back(qid);
        ranked[qid] = docs;
    }
};

inline void save_run(const std::string& path, const RunFile& run) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    char buf[160];
    for (const std::string& qid : run.query_order) {
        const auto& docs = run.ranked.at(qid);
        for (std::size_t r = 0; r < docs.size(); ++r) {
            std::snprintf(buf, sizeof(buf), "%s\t%d\t%zu\t%.9g\n", qid.c_str(), docs[r].first,
                          r + 1, docs[r].second);
            out << buf;
        }
    }
    if (!out) throw DataError("short write: " + path);
}

inline RunFile load_run(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    RunFile run;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string qid;
        int doc_id = 0;
        std::size_t rank = 0;
        double score = 0.0;
        if (!(ss >> qid >> doc_id >> rank >> score))
            throw DataError(path + ":" + std::to_string(line_no) + ": bad run line");
        if (!run.ranked.count(qid)) run.query_order.push_back(qid);
        run.ranked[qid].emplace_back(doc_id, score);
    }
    return run;
}

// query_id -> doc_id -> grade
using Qrels = std::unordered_map<std::string, std::unordered_map<int, int>>;

inline void save_qrels(const std::string& path, const Qrels& qrels,
                       const std::vector<std::string>& query_order) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    for (const std::string& qid : query_order) {
        auto it = qrels.find(qid);
        if (it == qrels.end()) continue;
        std::vector<std::pair<int, int>> docs(it->second.begin(), it->second.end());
        std::sort(docs.begin(), docs.end());
        for (const auto& [doc, grade] : docs) out << qid << '\t' << doc << '\t' << grade << '\n';
    }
    if (!out) throw DataError("short write: " + path);
}

inline Qrels load_qrels(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    Qrels qrels;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string qid;
        int doc_id = 0, grade = 0;
        if (!(ss >> qid >> doc_id >> grade))
            throw DataError(path + ":" + std::to_string(line_no) + ": bad qrels line");
        qrels[qid][doc_id] = grade;
    }
    return qrels;
}

// ----------------------------------------------------------------------
// Metrics
// ----------------------------------------------------------------------

inline std::string fold_whitespace(const std::string& s) {
    std::string out;
    bool in_space = true; // trims leading space
    for (unsigned char c : s) {
        if (std::isspace(c)) {
            in_space = true;
        } else {
            if (in_space && !out.empty()) out.push_back(' ');
            in_space = false;
            out.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    return out;
}

// A hit is a top-k document whose text contains any gold answer,
// case-insensitively with whitespace runs collapsed.
inline bool contains_answer(const std::string& doc_text, const std::vector<std::string>& answers) {
    const std::string hay = fold_whitespace(doc_text);
    for (const std::string& a : answers) {
        const std::string needle = fold_whitespace(a);
        if (!needle.empty() && hay.find(needle) != std::string::npos) return true;
    }
    return false;
}

inline double recall_at_k_containment(const RunFile& run, const std::vector<Query>& queries,
                                      const Corpus& corpus, std::size_t k) {
    if (queries.empty()) return 0.0;
    std::size_t hits = 0;
    for (const Query& q : queries) {
        auto it = run.ranked.find(q.ext_id);
        if (it == run.ranked.end()) continue; // missing query counts as a miss
        const auto& docs = it->second;
        for (std::size_t r = 0; r < docs.size() && r < k; ++r) {
            int d = docs[r].first;
            if (d < 0 || static_cast<std::size_t>(d) >= corpus.docs.size()) continue;
            if (contains_answer(corpus.docs[static_cast<std::size_t>(d)].text, q.answers)) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(queries.size());
}

inline double recall_at_k_qrels(const RunFile& run, const Qrels& qrels, std::size_t k) {
    if (qrels.empty()) return 0.0;
    std::size_t hits = 0;
    for (const auto& [qid, docs] : qrels) {
        auto it = run.ranked.find(qid);
        if (it == run.ranked.end()) continue;
        const auto& ranked = it->second;
        for (std::size_t r = 0; r < ranked.size() && r < k; ++r) {
            auto dit = docs.find(ranked[r].first);
            if (dit != docs.end() && dit->second > 0) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(qrels.size());
}

// lowercase, strip punctuation, drop article tokens (a/an/the), collapse
// whitespace; idempotent.
inline std::string normalize_answer(const std::string& s) {
    std::string lowered;
    for (unsigned char c : s) {
        if (c < 0x80 && std::ispunct(c)) continue;
        lowered.push_back(static_cast<char>(std::tolower(c)));
    }
    std::istringstream ss(lowered);
    std::string word, out;
    while (ss >> word) {
        if (word == "a" || word == "an" || word == "the") continue;
        if (!out.empty()) out.push_back(' ');
        out += word;
    }
    return out;
}

// predictions: query ext_id -> generated answer string
inline double exact_match(const std::unordered_map<std::string, std::string>& predictions,
                          const std::vector<Query>& queries) {
    if (queries.empty()) return 0.0;
    std::size_t hits = 0;
    for (const Query& q : queries) {
        auto it = predictions.find(q.ext_id);
        if (it == predictions.end()) continue;
        const std::string pred = normalize_answer(it->second);
        for (const std::string& gold : q.answers)
            if (pred == normalize_answer(gold)) {
                ++hits;
                break;
            }
    }
    return static_cast<double>(hits) / static_cast<double>(queries.size());
}

// Gain 2^rel - 1, discount log2(rank+1), ideal from grades sorted
// descending; queries whose qrels carry no positive gain are skipped.
inline double ndcg_at_10(const RunFile& run, const Qrels& qrels) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& [qid, docs] : qrels) {
        std::vector<int> grades;
        for (const auto& [doc, grade] : docs) grades.push_back(grade);
        std::sort(grades.begin(), grades.end(), std::greater<int>());
        double idcg = 0.0;
        for (std::size_t i = 0; i < grades.size() && i < 10; ++i)
            idcg += (std::exp2(static_cast<double>(grades[i])) - 1.0) /
                    std::log2(static_cast<double>(i) + 2.0);
        if (idcg <= 0.0) continue;
        double dcg = 0.0;
        auto it = run.ranked.find(qid);
        if (it != run.ranked.end()) {
            const auto& ranked = it->second;
            for (std::size_t i = 0; i < ranked.size() && i < 10; ++i) {
                auto dit = docs.find(ranked[i].first);
                if (dit == docs.end()) continue;
                dcg += (std::exp2(static_cast<double>(dit->second)) - 1.0) /
                       std::log2(static_cast<double>(i) + 2.0);
            }
        }
        total += dcg / idcg;
        ++n;
    }
    return n ? total / static_cast<double>(n) : 0.0;
}

// ----------------------------------------------------------------------
// Synthetic benchmark: each keyed document pairs a unique key token with a
// value word; the query asks what the key holds. Distractor documents reuse
// the template and value vocabulary but carry no key.
// ----------------------------------------------------------------------

struct SyntheticTask {
    struct Doc {
        std::string id;
        std::string text;
    };
    struct Q {
        std::string id;
        std::string text;
        std::string answer;
        int gold_doc = -1; // dense doc index
    };
    std::vector<Doc> docs;
    std::vector<Q> queries;
    std::size_t n_keyed = 0;
    std::uint64_t seed = 0;
};

inline const std::vector<std::string>& synthetic_value_pool() {
    static const std::vector<std::string> pool = {
        "amber", "basalt", "cedar",  "dahlia", "ebony",   "fennel", "garnet", "hazel",
        "indigo", "jasper", "kelp",   "larch",  "maple",   "nectar", "onyx",   "poplar",
        "quartz", "rowan",  "saffron", "teak",  "umber",   "violet", "walnut", "yarrow"};
    return pool;
}

inline SyntheticTask make_synthetic(std::size_t n_docs, std::size_t n_queries,
                                    double distractor_rate, std::uint64_t seed) {
    if (distractor_rate < 0.0 || distractor_rate >= 1.0)
        throw DataError("make_synthetic: distractor rate outside [0,1)");
    std::size_t n_distract = static_cast<std::size_t>(distractor_rate * static_cast<double>(n_docs));
    std::size_t n_keyed = n_docs - n_distract;
    if (n_queries > n_keyed)
        throw DataError("make_synthetic: more queries than keyed documents");
    Rng rng(seed);
    // scatter distractors among the keyed documents so doc order carries no signal
    std::vector<char> is_distractor(n_docs, 0);
    for (std::size_t i = n_keyed; i < n_docs; ++i) is_distractor[i] = 1;
    rng.shuffle(is_distractor);

    const auto& values = synthetic_value_pool();
    SyntheticTask task;
    task.seed = seed;
    task.n_keyed = n_keyed;
    std::size_t key_no = 0;
    std::vector<int> keyed_doc_of_key;
    for (std::size_t d = 0; d < n_docs; ++d) {
        const std::string value = values[rng.next_index(values.size())];
        SyntheticTask::Doc doc;
        doc.id = std::to_string(d);
        if (is_distractor[d]) {
            doc.text = "nothing holds " + value;
        } else {
            doc.text = "k" + std::to_string(key_no) + " holds " + value;
            keyed_doc_of_key.push_back(static_cast<int>(d));
            ++key_no;
        }
        task.docs.push_back(std::move(doc));
    }
    for (std::size_t qi = 0; qi < n_queries; ++qi) {
        int gold = keyed_doc_of_key[qi];
        SyntheticTask::Q q;
        q.id = "q" + std::to_string(qi);
        // the key alone: filler words would be identical across queries and
        // give every document a query-independent score component
        q.text = "k" + std::to_string(qi);
        // value word is the third token of the gold document
        std::istringstream ss(task.docs[static_cast<std::size_t>(gold)].text);
        std::string w1, w2, w3;
        ss >> w1 >> w2 >> w3;
        q.answer = w3;
        q.gold_doc = gold;
        task.queries.push_back(std::move(q));
    }
    return task;
}

inline void save_synthetic(const SyntheticTask& task, const std::string& docs_path,
                           const std::string& queries_path, const std::string& qrels_path) {
    {
        std::ofstream out(docs_path);
        if (!out) throw DataError("cannot write " + docs_path);
        for (const auto& d : task.docs)
            out << "{\"id\": \"" << d.id << "\", \"text\": \"" << d.text << "\"}\n";
    }
    {
        std::ofstream out(queries_path);
        if (!out) throw DataError("cannot write " + queries_path);
        for (const auto& q : task.queries)
            out << "{\"id\": \"" << q.id << "\", \"text\": \"" << q.text
                << "\", \"answers\": [\"" << q.answer << "\"]}\n";
    }
    {
        std::ofstream out(qrels_path);
        if (!out) throw DataError("cannot write " + qrels_path);
        for (const auto& q : task.queries) out << q.id << '\t' << q.gold_doc << "\t1\n";
    }
}

} // namespace ratt
