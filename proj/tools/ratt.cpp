#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ratt/adaptation.hpp"
#include "ratt/config.hpp"
#include "ratt/corpus.hpp"
#include "ratt/eval.hpp"
#include "ratt/index.hpp"
#include "ratt/model.hpp"
#include "ratt/scoring.hpp"
#include "ratt/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ratt;

static const char* kVersion = "0.1.0";

// ----------------------------------------------------------------------
// Run manifest: enough to re-run a command bit-identically.
// ----------------------------------------------------------------------

struct Manifest {
    std::string command;
    std::vector<std::string> argv;
    json config = json::object();
    std::uint64_t seed = 0;
    json inputs = json::object();
    std::string started;

    void input(const std::string& path) {
        char hex[32];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(fingerprint_file(path)));
        inputs[path] = hex;
    }

    // dir outputs get dir/manifest.json, file outputs get <file>.manifest.json
    void write(const std::string& out_path, bool is_dir) const {
        json j;
        j["command"] = command;
        j["argv"] = argv;
        j["config"] = config;
        j["seed"] = seed;
        j["code_version"] = kVersion;
        j["inputs"] = inputs;
        j["started"] = started;
        j["finished"] = now();
        const std::string path = is_dir ? out_path + "/manifest.json"
                                        : out_path + ".manifest.json";
        std::ofstream out(path);
        if (!out) throw DataError("cannot write " + path);
        out << j.dump(2) << "\n";
    }

    static std::string now() {
        const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        char buf[32];
        std::tm tm{};
        gmtime_r(&t, &tm);
        std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
        return buf;
    }
};

static Manifest make_manifest(const std::string& command, int argc, char** argv) {
    Manifest m;
    m.command = command;
    for (int i = 0; i < argc; ++i) m.argv.push_back(argv[i]);
    m.started = Manifest::now();
    return m;
}

static void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());
}

// ----------------------------------------------------------------------
// Config plumbing
// ----------------------------------------------------------------------

static ModelConfig model_config_from(const KvConfig& cfg) {
    ModelConfig mc;
    mc.enc_layers = static_cast<int>(cfg.get_int("enc_layers", mc.enc_layers));
    mc.bi_layers = static_cast<int>(cfg.get_int("bi_layers", mc.bi_layers));
    mc.dec_layers = static_cast<int>(cfg.get_int("dec_layers", mc.dec_layers));
    mc.heads = static_cast<int>(cfg.get_int("heads", mc.heads));
    mc.head_dim = static_cast<int>(cfg.get_int("head_dim", mc.head_dim));
    mc.ff_dim = static_cast<int>(cfg.get_int("ff_dim", mc.ff_dim));
    mc.max_query_len = static_cast<int>(cfg.get_int("max_query_len", mc.max_query_len));
    mc.max_doc_len = static_cast<int>(cfg.get_int("max_doc_len", mc.max_doc_len));
    mc.max_dec_len = static_cast<int>(cfg.get_int("max_dec_len", mc.max_dec_len));
    mc.tau = cfg.get_double("tau", mc.tau);
    mc.dropout = cfg.get_double("dropout", mc.dropout);
    return mc;
}

static TrainConfig train_config_from(const KvConfig& cfg) {
    TrainConfig tc;
    tc.alpha = cfg.get_double("alpha", tc.alpha);
    tc.batch_queries = static_cast<int>(cfg.get_int("batch_queries", tc.batch_queries));
    tc.k_close = static_cast<int>(cfg.get_int("k_close", tc.k_close));
    tc.lr = cfg.get_double("lr", tc.lr);
    tc.warmup_steps = static_cast<int>(cfg.get_int("warmup_steps", tc.warmup_steps));
    tc.steps_per_iter = static_cast<int>(cfg.get_int("steps_per_iter", tc.steps_per_iter));
    tc.iterations = static_cast<int>(cfg.get_int("iterations", tc.iterations));
    tc.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
    tc.micro_batch = static_cast<int>(cfg.get_int("micro_batch", tc.micro_batch));
    tc.kprime = static_cast<int>(cfg.get_int("kprime", tc.kprime));
    tc.weight_decay = cfg.get_double("weight_decay", tc.weight_decay);
    tc.eval_every = static_cast<int>(cfg.get_int("eval_every", tc.eval_every));
    return tc;
}

static json config_snapshot(const KvConfig& cfg) {
    json j = json::object();
    for (const std::string& k : cfg.keys()) j[k] = cfg.get_string(k);
    return j;
}

// ----------------------------------------------------------------------
// Subcommand bodies
// ----------------------------------------------------------------------

static void cmd_ingest(const std::string& corpus_path, const std::string& out, int argc,
                       char** argv) {
    Manifest man = make_manifest("ingest", argc, argv);
    man.input(corpus_path);
    Corpus corpus = ingest_corpus(corpus_path);
    std::size_t total_tokens = 0;
    for (const Document& d : corpus.docs) total_tokens += d.tokens.size();
    json stats;
    stats["docs"] = corpus.docs.size();
    stats["vocab"] = corpus.vocab.size();
    stats["tokens"] = total_tokens;
    std::ofstream os(out);
    if (!os) throw DataError("cannot write " + out);
    os << stats.dump(2) << "\n";
    man.write(out, false);
    std::cout << stats.dump() << "\n";
}

static void cmd_bm25(const std::string& corpus_path, const std::string& out, double k1, double b,
                     const std::string& queries_path, int k, const std::string& run_path,
                     int argc, char** argv) {
    Manifest man = make_manifest("bm25", argc, argv);
    man.input(corpus_path);
    man.config = {{"k1", k1}, {"b", b}, {"k", k}};
    Corpus corpus = ingest_corpus(corpus_path);
    Bm25Index bm25(corpus, k1, b);
    bm25.save(out);
    if (!queries_path.empty()) {
        if (run_path.empty()) throw UsageError("--queries requires --run");
        man.input(queries_path);
        RunFile run;
        for (const Query& q : load_queries(queries_path, corpus.vocab, corpus.max_query_len))
            run.add(q.ext_id, bm25.search(q.text, static_cast<std::size_t>(k)));
        save_run(run_path, run);
    }
    man.write(out, false);
}

static void cmd_build_index(const std::string& corpus_path, const std::string& ckpt,
                            const std::string& out, int argc, char** argv) {
    Manifest man = make_manifest("build-index", argc, argv);
    man.input(corpus_path);
    man.input(ckpt);
    Model model = load_model(ckpt);
    Corpus corpus = ingest_corpus(corpus_path, static_cast<std::size_t>(model.cfg.max_doc_len),
                                  static_cast<std::size_t>(model.cfg.max_query_len));
    retokenize(corpus, model.vocab);
    TokenIndex idx = build_index(corpus, model, fingerprint_file(ckpt));
    save_index(out, idx);
    log_info("indexed " + std::to_string(idx.rows.rows()) + " tokens, retrieval head " +
             std::to_string(idx.hstar));
    man.write(out, false);
}

static void cmd_retrieve(const std::string& index_path, const std::string& ckpt,
                         const std::string& queries_path, int k, int kprime,
                         const std::string& out, const std::string& answers_out, int gen_docs,
                         const std::string& corpus_path, int argc, char** argv) {
    Manifest man = make_manifest("retrieve", argc, argv);
    man.input(index_path);
    man.input(ckpt);
    man.input(queries_path);
    man.config = {{"k", k}, {"kprime", kprime}, {"gen_docs", gen_docs}};
    Model model = load_model(ckpt);
    TokenIndex idx = load_index(index_path);
    const std::uint64_t fp = fingerprint_file(ckpt);
    std::vector<Query> queries =
        load_queries(queries_path, model.vocab, static_cast<std::size_t>(model.cfg.max_query_len));
    RunFile run;
    std::ofstream ans;
    Corpus corpus;
    if (!answers_out.empty()) {
        if (corpus_path.empty()) throw UsageError("--answers-out requires --corpus");
        man.input(corpus_path);
        corpus = ingest_corpus(corpus_path, static_cast<std::size_t>(model.cfg.max_doc_len),
                               static_cast<std::size_t>(model.cfg.max_query_len));
        retokenize(corpus, model.vocab);
        ans.open(answers_out);
        if (!ans) throw DataError("cannot write " + answers_out);
    }
    for (const Query& q : queries) {
        RetrievalResult rr = retrieve(idx, q, model, static_cast<std::size_t>(k),
                                      static_cast<std::size_t>(kprime), fp);
        run.add(q.ext_id, rr.ranked);
        if (ans.is_open()) {
            std::vector<std::vector<int>> doc_tokens;
            for (std::size_t i = 0; i < rr.ranked.size() &&
                                    i < static_cast<std::size_t>(gen_docs); ++i) {
                const int d = rr.ranked[i].first;
                if (d < 0 || static_cast<std::size_t>(d) >= corpus.docs.size())
                    throw DataError("run references doc id outside the corpus");
                doc_tokens.push_back(corpus.docs[static_cast<std::size_t>(d)].tokens);
            }
            std::string text;
            if (!doc_tokens.empty())
                text = detokenize(greedy_generate(model, q.tokens, doc_tokens), model.vocab);
            json j{{"id", q.ext_id}, {"answer", text}};
            ans << j.dump() << "\n";
        }
    }
    save_run(out, run);
    man.write(out, false);
}

static void cmd_synth(std::size_t n_docs, std::size_t n_queries, double rate, std::uint64_t seed,
                      std::size_t heldout, const std::string& out, int argc, char** argv) {
    Manifest man = make_manifest("synth", argc, argv);
    man.seed = seed;
    man.config = {{"docs", n_docs}, {"queries", n_queries}, {"distractor_rate", rate},
                  {"heldout", heldout}};
    ensure_dir(out);
    SyntheticTask task = make_synthetic(n_docs, n_queries, rate, seed);
    save_synthetic(task, out + "/docs.jsonl", out + "/queries.jsonl", out + "/qrels.tsv");
    if (heldout > 0) {
        if (heldout >= task.queries.size())
            throw UsageError("--heldout must be smaller than --queries");
        auto dump = [&](const std::string& path, std::size_t lo, std::size_t hi) {
            std::ofstream os(path);
            if (!os) throw DataError("cannot write " + path);
            for (std::size_t i = lo; i < hi; ++i)
                os << "{\"id\": \"" << task.queries[i].id << "\", \"text\": \""
                   << task.queries[i].text << "\", \"answers\": [\"" << task.queries[i].answer
                   << "\"]}\n";
        };
        dump(out + "/queries_train.jsonl", 0, task.queries.size() - heldout);
        dump(out + "/queries_heldout.jsonl", task.queries.size() - heldout, task.queries.size());
    }
    man.write(out, true);
}

static void cmd_train(const std::string& config_path, const std::string& out_dir, int argc,
                      char** argv) {
    Manifest man = make_manifest("train", argc, argv);
    man.input(config_path);
    KvConfig cfg = KvConfig::parse_file(config_path);
    man.config = config_snapshot(cfg);

    const std::string corpus_path = cfg.get_string("corpus");
    const std::string train_q_path = cfg.get_string("train_queries");
    const std::string dev_q_path = cfg.get_string("dev_queries", "");
    man.input(corpus_path);
    man.input(train_q_path);
    if (!dev_q_path.empty()) man.input(dev_q_path);

    ModelConfig mc = model_config_from(cfg);
    TrainConfig tc = train_config_from(cfg);
    man.seed = tc.seed;
    ensure_dir(out_dir);

    Corpus corpus = ingest_corpus(corpus_path, static_cast<std::size_t>(mc.max_doc_len),
                                  static_cast<std::size_t>(mc.max_query_len));
    Model model;
    if (cfg.has("init_ckpt")) {
        man.input(cfg.get_string("init_ckpt"));
        model = load_model(cfg.get_string("init_ckpt"));
        retokenize(corpus, model.vocab);
    } else {
        model = init_model(mc, corpus.vocab,
                           static_cast<std::uint64_t>(cfg.get_int("model_seed", 1)));
    }
    std::vector<Query> train_q = load_queries(train_q_path, model.vocab,
                                              static_cast<std::size_t>(model.cfg.max_query_len));
    std::vector<Query> dev_q;
    if (!dev_q_path.empty())
        dev_q = load_queries(dev_q_path, model.vocab,
                             static_cast<std::size_t>(model.cfg.max_query_len));

    TrainResult res = run_training(model, corpus, train_q, dev_q, tc, out_dir);
    save_model(out_dir + "/model.bin", model);
    json summary;
    summary["dev_r5_per_iter"] = res.dev_r5_per_iter;
    if (res.final_dev_r1 >= 0.0) summary["final_dev_r1"] = res.final_dev_r1;
    std::ofstream os(out_dir + "/summary.json");
    os << summary.dump(2) << "\n";
    man.write(out_dir, true);
    std::cout << summary.dump() << "\n";
}

static void cmd_adapt(const std::string& mode, const std::string& corpus_path,
                      const std::string& ckpt, const std::string& out,
                      const std::string& config_path, const std::string& triples_path,
                      const std::string& queries_path, std::size_t samples, int argc,
                      char** argv) {
    Manifest man = make_manifest("adapt", argc, argv);
    man.input(corpus_path);
    man.input(ckpt);
    KvConfig cfg;
    if (!config_path.empty()) {
        man.input(config_path);
        cfg = KvConfig::parse_file(config_path);
    }
    man.config = config_snapshot(cfg);
    man.config["mode"] = mode;
    TrainConfig tc = train_config_from(cfg);
    man.seed = tc.seed;

    Model model = load_model(ckpt);
    Corpus corpus = ingest_corpus(corpus_path, static_cast<std::size_t>(model.cfg.max_doc_len),
                                  static_cast<std::size_t>(model.cfg.max_query_len));
    retokenize(corpus, model.vocab);

    bool did = false;
    if (mode == "ssm") {
        did = adapt_unsupervised(model, corpus, tc, samples);
    } else if (mode == "ir") {
        if (triples_path.empty()) throw UsageError("--mode ir requires --triples");
        man.input(triples_path);
        did = adapt_ir(model, corpus, tc, load_ir_triples(triples_path));
    } else if (mode == "qa") {
        if (queries_path.empty()) throw UsageError("--mode qa requires --queries");
        man.input(queries_path);
        std::vector<Query> qs = load_queries(queries_path, model.vocab,
                                             static_cast<std::size_t>(model.cfg.max_query_len));
        tc.iterations = 1;
        run_training(model, corpus, qs, {}, tc);
        did = true;
    } else {
        throw UsageError("unknown adapt mode: " + mode);
    }
    save_model(out, model); // input checkpoint is never rewritten
    if (!did) log_warn("adaptation made no updates; output equals the input checkpoint");
    man.write(out, false);
}

static void cmd_eval(const std::string& metric, const std::string& run_path,
                     const std::string& qrels_path, const std::string& corpus_path,
                     const std::string& queries_path, const std::string& preds_path,
                     const std::string& out, int argc, char** argv) {
    Manifest man = make_manifest("eval", argc, argv);
    man.config = {{"metric", metric}};
    double value = 0.0;
    if (metric.rfind("r@", 0) == 0) {
        std::size_t k = 0;
        try {
            k = static_cast<std::size_t>(std::stoul(metric.substr(2)));
        } catch (const std::exception&) {
            throw UsageError("bad recall metric: " + metric);
        }
        if (run_path.empty()) throw UsageError("recall needs --run");
        man.input(run_path);
        RunFile run = load_run(run_path);
        if (!qrels_path.empty()) {
            man.input(qrels_path);
            value = recall_at_k_qrels(run, load_qrels(qrels_path), k);
        } else {
            if (corpus_path.empty() || queries_path.empty())
                throw UsageError("containment recall needs --corpus and --queries");
            man.input(corpus_path);
            man.input(queries_path);
            Corpus corpus = ingest_corpus(corpus_path);
            std::vector<Query> queries =
                load_queries(queries_path, corpus.vocab, corpus.max_query_len);
            value = recall_at_k_containment(run, queries, corpus, k);
        }
    } else if (metric == "em") {
        if (preds_path.empty() || queries_path.empty())
            throw UsageError("em needs --preds and --queries");
        man.input(preds_path);
        man.input(queries_path);
        Vocabulary dummy;
        std::vector<Query> queries = load_queries(queries_path, dummy, 0);
        std::unordered_map<std::string, std::string> preds;
        std::ifstream in(preds_path);
        if (!in) throw DataError("cannot open " + preds_path);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            json j = parse_jsonl_line(line, preds_path, line_no);
            preds[j.at("id").get<std::string>()] = j.at("answer").get<std::string>();
        }
        value = exact_match(preds, queries);
    } else if (metric == "ndcg@10") {
        if (run_path.empty() || qrels_path.empty())
            throw UsageError("ndcg@10 needs --run and --qrels");
        man.input(run_path);
        man.input(qrels_path);
        value = ndcg_at_10(load_run(run_path), load_qrels(qrels_path));
    } else {
        throw UsageError("unknown metric: " + metric + " (expected r@k, em, or ndcg@10)");
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", value);
    std::cout << metric << "\t" << buf << "\n";
    if (!out.empty()) {
        json j{{"metric", metric}, {"value", value}};
        std::ofstream os(out);
        if (!os) throw DataError("cannot write " + out);
        os << j.dump() << "\n";
        man.write(out, false);
    }
}

static void cmd_probe_heads(const std::string& corpus_path, const std::string& ckpt,
                            const std::string& queries_path, const std::string& qrels_path,
                            int negatives, std::uint64_t seed, const std::string& out, int argc,
                            char** argv) {
    Manifest man = make_manifest("probe-heads", argc, argv);
    man.seed = seed;
    man.config = {{"negatives", negatives}};
    man.input(corpus_path);
    man.input(ckpt);
    man.input(queries_path);
    man.input(qrels_path);
    Model model = load_model(ckpt);
    Corpus corpus = ingest_corpus(corpus_path, static_cast<std::size_t>(model.cfg.max_doc_len),
                                  static_cast<std::size_t>(model.cfg.max_query_len));
    retokenize(corpus, model.vocab);
    std::vector<Query> queries =
        load_queries(queries_path, model.vocab, static_cast<std::size_t>(model.cfg.max_query_len));
    Qrels qrels = load_qrels(qrels_path);

    Rng rng(seed);
    std::vector<std::vector<std::pair<int, int>>> candidates(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
        auto it = qrels.find(queries[i].ext_id);
        if (it == qrels.end()) continue;
        std::unordered_set<int> used;
        std::vector<int> pos_ids;
        for (const auto& [doc, grade] : it->second)
            if (grade > 0) pos_ids.push_back(doc);
        std::sort(pos_ids.begin(), pos_ids.end());
        for (int doc : pos_ids) {
            candidates[i].emplace_back(doc, 1);
            used.insert(doc);
        }
        int want = negatives;
        while (want > 0 && used.size() < corpus.docs.size()) {
            int d = static_cast<int>(rng.next_index(corpus.docs.size()));
            if (!used.insert(d).second) continue;
            candidates[i].emplace_back(d, 0);
            --want;
        }
    }
    std::vector<HeadProbe> probes = probe_heads(model, queries, candidates, corpus);
    write_probe_report(out, probes);
    man.write(out, false);
}

// ----------------------------------------------------------------------

int main(int argc, char** argv) {
    CLI::App app{"token-level dense retrieval with fused answer generation"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    int threads = 1; // caps internal workers; execution is single-threaded at this scale
    app.add_option("--threads", threads, "worker cap")->capture_default_str();

    // ingest
    auto* ing = app.add_subcommand("ingest", "validate a corpus file and report stats");
    std::string ing_corpus, ing_out;
    ing->add_option("--corpus", ing_corpus, "corpus JSONL")->required();
    ing->add_option("--out", ing_out, "stats JSON path")->required();

    // bm25
    auto* bm = app.add_subcommand("bm25", "build (and optionally query) a lexical index");
    std::string bm_corpus, bm_out, bm_queries, bm_run;
    double bm_k1 = 0.9, bm_b = 0.4;
    int bm_k = 10;
    bm->add_option("--corpus", bm_corpus, "corpus JSONL")->required();
    bm->add_option("--out", bm_out, "index output path")->required();
    bm->add_option("--k1", bm_k1)->capture_default_str();
    bm->add_option("--b", bm_b)->capture_default_str();
    bm->add_option("--queries", bm_queries, "queries JSONL to search");
    bm->add_option("--k", bm_k, "results per query")->capture_default_str();
    bm->add_option("--run", bm_run, "run TSV output for --queries");

    // build-index
    auto* bi = app.add_subcommand("build-index", "encode documents into a token index");
    std::string bi_corpus, bi_ckpt, bi_out;
    bi->add_option("--corpus", bi_corpus, "corpus JSONL")->required();
    bi->add_option("--ckpt", bi_ckpt, "model checkpoint")->required();
    bi->add_option("--out", bi_out, "index output path")->required();

    // retrieve
    auto* re = app.add_subcommand("retrieve", "two-stage search over a token index");
    std::string re_index, re_ckpt, re_queries, re_out, re_answers, re_corpus;
    int re_k = 100, re_kprime = 2048, re_gen_docs = 5;
    re->add_option("--index", re_index, "token index")->required();
    re->add_option("--ckpt", re_ckpt, "model checkpoint (must match the index)")->required();
    re->add_option("--queries", re_queries, "queries JSONL")->required();
    re->add_option("--k", re_k, "documents per query")->capture_default_str();
    re->add_option("--kprime", re_kprime, "stage-1 tokens per query token")->capture_default_str();
    re->add_option("--out", re_out, "run TSV output")->required();
    re->add_option("--answers-out", re_answers, "also generate answers (JSONL)");
    re->add_option("--gen-docs", re_gen_docs, "documents fed to the decoder")
        ->capture_default_str();
    re->add_option("--corpus", re_corpus, "corpus JSONL (needed for --answers-out)");

    // train
    auto* tr = app.add_subcommand("train", "end-to-end training from a config file");
    std::string tr_config, tr_out;
    tr->add_option("--config", tr_config, "key=value config file")->required();
    tr->add_option("--out", tr_out, "output directory")->required();

    // adapt
    auto* ad_ = app.add_subcommand("adapt", "domain adaptation of an existing checkpoint");
    std::string ad_mode, ad_corpus, ad_ckpt, ad_out, ad_config, ad_triples, ad_queries;
    std::size_t ad_samples = 256;
    ad_->add_option("--mode", ad_mode, "ssm|ir|qa")->required();
    ad_->add_option("--corpus", ad_corpus, "corpus JSONL")->required();
    ad_->add_option("--ckpt", ad_ckpt, "input checkpoint")->required();
    ad_->add_option("--out", ad_out, "output checkpoint")->required();
    ad_->add_option("--config", ad_config, "training config");
    ad_->add_option("--triples", ad_triples, "relevance triples JSONL (ir mode)");
    ad_->add_option("--queries", ad_queries, "queries JSONL (qa mode)");
    ad_->add_option("--samples", ad_samples, "masked examples to mine (ssm mode)")
        ->capture_default_str();

    // eval
    auto* ev = app.add_subcommand("eval", "score a run file or predictions");
    std::string ev_metric, ev_run, ev_qrels, ev_corpus, ev_queries, ev_preds, ev_out;
    ev->add_option("--metric", ev_metric, "r@k | em | ndcg@10")->required();
    ev->add_option("--run", ev_run, "run TSV");
    ev->add_option("--qrels", ev_qrels, "qrels TSV");
    ev->add_option("--corpus", ev_corpus, "corpus JSONL (containment recall)");
    ev->add_option("--queries", ev_queries, "queries JSONL");
    ev->add_option("--preds", ev_preds, "predictions JSONL (em)");
    ev->add_option("--out", ev_out, "metric JSON output");

    // probe-heads
    auto* ph = app.add_subcommand("probe-heads", "per-head relevance correlation report");
    std::string ph_corpus, ph_ckpt, ph_queries, ph_qrels, ph_out;
    int ph_negatives = 9;
    std::uint64_t ph_seed = 1;
    ph->add_option("--corpus", ph_corpus, "corpus JSONL")->required();
    ph->add_option("--ckpt", ph_ckpt, "model checkpoint")->required();
    ph->add_option("--queries", ph_queries, "queries JSONL")->required();
    ph->add_option("--qrels", ph_qrels, "qrels TSV with positive labels")->required();
    ph->add_option("--negatives", ph_negatives, "sampled negatives per query")
        ->capture_default_str();
    ph->add_option("--seed", ph_seed)->capture_default_str();
    ph->add_option("--out", ph_out, "TSV report path")->required();

    // synth
    auto* sy = app.add_subcommand("synth", "generate the synthetic key-value task");
    std::size_t sy_docs = 50, sy_queries = 20, sy_heldout = 0;
    double sy_rate = 0.0;
    std::uint64_t sy_seed = 7;
    std::string sy_out;
    sy->add_option("--docs", sy_docs)->capture_default_str();
    sy->add_option("--queries", sy_queries)->capture_default_str();
    sy->add_option("--distractor-rate", sy_rate)->capture_default_str();
    sy->add_option("--seed", sy_seed)->capture_default_str();
    sy->add_option("--heldout", sy_heldout, "also write a train/heldout query split")
        ->capture_default_str();
    sy->add_option("--out", sy_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (threads < 1) throw UsageError("--threads must be >= 1");
        if (*ing) cmd_ingest(ing_corpus, ing_out, argc, argv);
        else if (*bm) cmd_bm25(bm_corpus, bm_out, bm_k1, bm_b, bm_queries, bm_k, bm_run, argc, argv);
        else if (*bi) cmd_build_index(bi_corpus, bi_ckpt, bi_out, argc, argv);
        else if (*re) cmd_retrieve(re_index, re_ckpt, re_queries, re_k, re_kprime, re_out,
                                   re_answers, re_gen_docs, re_corpus, argc, argv);
        else if (*tr) cmd_train(tr_config, tr_out, argc, argv);
        else if (*ad_) cmd_adapt(ad_mode, ad_corpus, ad_ckpt, ad_out, ad_config, ad_triples,
                                 ad_queries, ad_samples, argc, argv);
        else if (*ev) cmd_eval(ev_metric, ev_run, ev_qrels, ev_corpus, ev_queries, ev_preds,
                               ev_out, argc, argv);
        else if (*ph) cmd_probe_heads(ph_corpus, ph_ckpt, ph_queries, ph_qrels, ph_negatives,
                                      ph_seed, ph_out, argc, argv);
        else if (*sy) cmd_synth(sy_docs, sy_queries, sy_rate, sy_seed, sy_heldout, sy_out,
                                argc, argv);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
