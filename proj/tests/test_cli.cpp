#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "json.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string& bin() {
    static const std::string b = [] {
        const char* v = std::getenv("RATT_BIN");
        return v ? std::string(v) : std::string();
    }();
    REQUIRE_FALSE(b.empty()); // RATT_BIN must point at the built binary
    return b;
}

const fs::path& base_dir() {
    static const fs::path p = [] {
        fs::path d = fs::temp_directory_path() / "tc_cli";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t line_count(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++n;
    return n;
}

struct CmdResult {
    int code = -1;
    std::string out;
    std::string err;
};

CmdResult run_cli(const std::string& args, const std::string& env = "") {
    static int counter = 0;
    fs::path so = base_dir() / ("out" + std::to_string(counter));
    fs::path se = base_dir() / ("err" + std::to_string(counter));
    ++counter;
    std::string cmd = env + " \"" + bin() + "\" " + args + " > " + so.string() + " 2> " +
                      se.string();
    int status = std::system(cmd.c_str());
    CmdResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(so);
    r.err = slurp(se);
    return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// one synthetic task plus one trained model, built on first use
struct Pipeline {
    fs::path synth;
    fs::path run;
    fs::path docs, queries, qrels, train_q, heldout_q, model;
};

const Pipeline& pipeline() {
    static const Pipeline p = [] {
        Pipeline pl;
        pl.synth = base_dir() / "synth";
        pl.run = base_dir() / "run";
        pl.docs = pl.synth / "docs.jsonl";
        pl.queries = pl.synth / "queries.jsonl";
        pl.qrels = pl.synth / "qrels.tsv";
        pl.train_q = pl.synth / "queries_train.jsonl";
        pl.heldout_q = pl.synth / "queries_heldout.jsonl";
        pl.model = pl.run / "model.bin";

        CmdResult synth = run_cli("synth --docs 12 --queries 8 --distractor-rate 0 --seed 5 "
                                  "--heldout 3 --out " + q(pl.synth));
        REQUIRE(synth.code == 0);

        std::ofstream cfg(base_dir() / "train.kv");
        cfg << "corpus = " << pl.docs.string() << "\n"
            << "train_queries = " << pl.train_q.string() << "\n"
            << "dev_queries = " << pl.heldout_q.string() << "\n"
            << "enc_layers = 2\nbi_layers = 1\ndec_layers = 1\nheads = 2\nhead_dim = 3\n"
            << "ff_dim = 7\nmax_query_len = 8\nmax_doc_len = 8\nmax_dec_len = 4\n"
            << "alpha = 1.0\nbatch_queries = 2\nk_close = 2\nlr = 1e-3\nwarmup_steps = 1\n"
            << "steps_per_iter = 1\niterations = 1\neval_every = 1\nseed = 1\nkprime = 64\n";
        cfg.close();
        CmdResult train = run_cli("train --config " + q(base_dir() / "train.kv") + " --out " +
                                  q(pl.run));
        REQUIRE(train.code == 0);
        return pl;
    }();
    return p;
}

} // namespace

TEST_CASE("version flag and usage errors") {
    CmdResult v = run_cli("--version");
    CHECK(v.code == 0);
    CHECK(v.out.find("0.1.0") != std::string::npos);

    CHECK(run_cli("").code == 1);                      // a subcommand is required
    CHECK(run_cli("frobnicate").code == 1);            // unknown subcommand
    CHECK(run_cli("ingest").code == 1);                // missing required options
    CHECK(run_cli("eval --metric r@zz --run x").code == 1);
    CHECK(run_cli("eval --metric banana --run x").code == 1);
    CHECK(run_cli("eval --metric em").code == 1);      // em needs --preds and --queries
    CHECK(run_cli("--threads 0 ingest --corpus x --out y").code == 1);
}

TEST_CASE("synthetic generation writes a complete task directory") {
    const Pipeline& pl = pipeline();
    CHECK(fs::exists(pl.docs));
    CHECK(fs::exists(pl.queries));
    CHECK(fs::exists(pl.qrels));
    CHECK(line_count(pl.docs) == 12);
    CHECK(line_count(pl.queries) == 8);
    CHECK(line_count(pl.qrels) == 8);
    CHECK(line_count(pl.train_q) == 5);
    CHECK(line_count(pl.heldout_q) == 3);

    json man = json::parse(slurp(pl.synth / "manifest.json"));
    CHECK(man.at("command") == "synth");
    CHECK(man.at("seed") == 5);
    CHECK(man.at("config").at("docs") == 12);
    CHECK(man.contains("started"));
    CHECK(man.contains("finished"));

    // the held-out split must stay smaller than the query set
    CHECK(run_cli("synth --docs 12 --queries 8 --heldout 8 --out " +
                  q(base_dir() / "synth_bad")).code == 1);
}

TEST_CASE("ingest validates a corpus and reports statistics") {
    const Pipeline& pl = pipeline();
    fs::path stats = base_dir() / "stats.json";
    CmdResult r = run_cli("ingest --corpus " + q(pl.docs) + " --out " + q(stats));
    REQUIRE(r.code == 0);
    json printed = json::parse(r.out);
    CHECK(printed.at("docs") == 12);
    CHECK(printed.at("vocab").get<int>() > 4); // reserved ids plus corpus words
    json written = json::parse(slurp(stats));
    CHECK(written == printed);

    json man = json::parse(slurp(base_dir() / "stats.json.manifest.json"));
    CHECK(man.at("command") == "ingest");
    CHECK(man.at("inputs").contains(pl.docs.string()));

    CmdResult missing = run_cli("ingest --corpus /nonexistent.jsonl --out " + q(stats));
    CHECK(missing.code == 2);
    CHECK(missing.err.find("data error") != std::string::npos);

    fs::path bad = base_dir() / "bad.jsonl";
    std::ofstream(bad) << "{\"id\": \"a\"}\n";
    CmdResult malformed = run_cli("ingest --corpus " + q(bad) + " --out " + q(stats));
    CHECK(malformed.code == 2);
    CHECK(malformed.err.find(":1") != std::string::npos);
}

TEST_CASE("lexical search solves the distractor free task") {
    const Pipeline& pl = pipeline();
    fs::path index = base_dir() / "bm25.bin";
    fs::path run1 = base_dir() / "run_bm25.tsv";
    CmdResult r = run_cli("bm25 --corpus " + q(pl.docs) + " --out " + q(index) + " --queries " +
                          q(pl.queries) + " --k 3 --run " + q(run1));
    REQUIRE(r.code == 0);
    CHECK(fs::exists(index));
    CHECK(line_count(run1) >= 8); // every query matches at least its key document

    CmdResult ev = run_cli("eval --metric r@1 --run " + q(run1) + " --qrels " + q(pl.qrels));
    REQUIRE(ev.code == 0);
    CHECK(ev.out == "r@1\t1.000000\n");

    CmdResult cont = run_cli("eval --metric r@1 --run " + q(run1) + " --corpus " + q(pl.docs) +
                             " --queries " + q(pl.queries));
    REQUIRE(cont.code == 0);
    CHECK(cont.out == "r@1\t1.000000\n");

    fs::path metric = base_dir() / "metric.json";
    CmdResult withq = run_cli("eval --metric ndcg@10 --run " + q(run1) + " --qrels " +
                              q(pl.qrels) + " --out " + q(metric));
    REQUIRE(withq.code == 0);
    json mj = json::parse(slurp(metric));
    CHECK(mj.at("metric") == "ndcg@10");
    CHECK(mj.at("value").get<double>() == Catch::Approx(1.0));
    CHECK(fs::exists(base_dir() / "metric.json.manifest.json"));

    // usage: a query set without a run target is rejected
    CHECK(run_cli("bm25 --corpus " + q(pl.docs) + " --out " + q(index) + " --queries " +
                  q(pl.queries)).code == 1);

    // the run is reproducible byte for byte
    fs::path run2 = base_dir() / "run_bm25_again.tsv";
    REQUIRE(run_cli("bm25 --corpus " + q(pl.docs) + " --out " + q(index) + " --queries " +
                    q(pl.queries) + " --k 3 --run " + q(run2)).code == 0);
    CHECK(slurp(run1) == slurp(run2));
}

TEST_CASE("training writes checkpoints metrics and a summary") {
    const Pipeline& pl = pipeline();
    CHECK(fs::exists(pl.model));
    CHECK(fs::exists(pl.run / "ckpt_warmup.bin"));
    CHECK(fs::exists(pl.run / "ckpt_iter1.bin"));
    CHECK(fs::exists(pl.run / "manifest.json"));

    std::ifstream metrics(pl.run / "metrics.jsonl");
    REQUIRE(metrics.good());
    std::string line;
    std::size_t lines = 0;
    while (std::getline(metrics, line)) {
        json j = json::parse(line);
        CHECK(j.contains("step"));
        CHECK(j.contains("L_QA"));
        CHECK(j.contains("L_cross_doc"));
        CHECK(j.contains("r_at_1_dev"));
        ++lines;
    }
    CHECK(lines == 2); // one warm-up step plus one training step

    json summary = json::parse(slurp(pl.run / "summary.json"));
    REQUIRE(summary.at("dev_r5_per_iter").size() == 1);
    double r5 = summary.at("dev_r5_per_iter")[0].get<double>();
    CHECK(r5 >= 0.0);
    CHECK(r5 <= 1.0);
    CHECK(summary.contains("final_dev_r1"));

    json man = json::parse(slurp(pl.run / "manifest.json"));
    CHECK(man.at("command") == "train");
    CHECK(man.at("config").at("corpus") == pl.docs.string());
    CHECK(man.at("seed") == 1);
}

TEST_CASE("train rejects broken configs with the data exit code") {
    const Pipeline& pl = pipeline();
    fs::path nocorpus = base_dir() / "nocorpus.kv";
    std::ofstream(nocorpus) << "train_queries = " << pl.train_q.string() << "\n";
    CmdResult r = run_cli("train --config " + q(nocorpus) + " --out " + q(base_dir() / "bad_run"));
    CHECK(r.code == 2);
    CHECK(r.err.find("`corpus`") != std::string::npos);

    fs::path badint = base_dir() / "badint.kv";
    std::ofstream(badint) << "corpus = " << pl.docs.string() << "\ntrain_queries = "
                          << pl.train_q.string() << "\nsteps_per_iter = many\n";
    CmdResult r2 = run_cli("train --config " + q(badint) + " --out " + q(base_dir() / "bad_run"));
    CHECK(r2.code == 2);
    CHECK(r2.err.find("`steps_per_iter`") != std::string::npos);

    CHECK(run_cli("train --config /nonexistent.kv --out " + q(base_dir() / "bad_run")).code == 2);
}

TEST_CASE("index build and retrieval round trip") {
    const Pipeline& pl = pipeline();
    fs::path index = base_dir() / "neural.idx";
    CmdResult built = run_cli("build-index --corpus " + q(pl.docs) + " --ckpt " + q(pl.model) +
                              " --out " + q(index));
    REQUIRE(built.code == 0);
    CHECK(fs::exists(index));
    CHECK(fs::exists(base_dir() / "neural.idx.manifest.json"));

    fs::path run1 = base_dir() / "run_neural.tsv";
    CmdResult ret = run_cli("retrieve --index " + q(index) + " --ckpt " + q(pl.model) +
                            " --queries " + q(pl.queries) + " --k 3 --kprime 500 --out " +
                            q(run1));
    REQUIRE(ret.code == 0);
    CHECK(line_count(run1) == 24); // 8 queries x 3 ranked documents

    std::ifstream in(run1);
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        std::string qid;
        int doc = -1;
        std::size_t rank = 0;
        double score = 0.0;
        REQUIRE(static_cast<bool>(ss >> qid >> doc >> rank >> score));
        CHECK(doc >= 0);
        CHECK(doc < 12);
        CHECK(rank >= 1);
        CHECK(rank <= 3);
    }

    CmdResult ev = run_cli("eval --metric r@3 --run " + q(run1) + " --qrels " + q(pl.qrels));
    REQUIRE(ev.code == 0);
    double value = std::stod(ev.out.substr(ev.out.find('\t') + 1));
    CHECK(value >= 0.0);
    CHECK(value <= 1.0);

    fs::path run2 = base_dir() / "run_neural_again.tsv";
    REQUIRE(run_cli("retrieve --index " + q(index) + " --ckpt " + q(pl.model) + " --queries " +
                    q(pl.queries) + " --k 3 --kprime 500 --out " + q(run2)).code == 0);
    CHECK(slurp(run1) == slurp(run2));

    // an index only serves the checkpoint it was built from
    CmdResult mismatch = run_cli("retrieve --index " + q(index) + " --ckpt " +
                                 q(pl.run / "ckpt_warmup.bin") + " --queries " + q(pl.queries) +
                                 " --k 3 --kprime 500 --out " + q(base_dir() / "run_bad.tsv"));
    CHECK(mismatch.code == 2);
    CHECK(mismatch.err.find("different checkpoint") != std::string::npos);
}

TEST_CASE("retrieval can generate answers from the top documents") {
    const Pipeline& pl = pipeline();
    fs::path index = base_dir() / "neural.idx";
    if (!fs::exists(index))
        REQUIRE(run_cli("build-index --corpus " + q(pl.docs) + " --ckpt " + q(pl.model) +
                        " --out " + q(index)).code == 0);

    fs::path answers = base_dir() / "answers.jsonl";
    CmdResult r = run_cli("retrieve --index " + q(index) + " --ckpt " + q(pl.model) +
                          " --queries " + q(pl.queries) + " --k 3 --kprime 500 --gen-docs 2 " +
                          "--out " + q(base_dir() / "run_gen.tsv") + " --answers-out " +
                          q(answers) + " --corpus " + q(pl.docs));
    REQUIRE(r.code == 0);
    REQUIRE(line_count(answers) == 8);
    std::ifstream in(answers);
    std::string line;
    while (std::getline(in, line)) {
        json j = json::parse(line);
        CHECK(j.contains("id"));
        CHECK(j.contains("answer"));
    }

    CmdResult em = run_cli("eval --metric em --preds " + q(answers) + " --queries " +
                           q(pl.queries));
    REQUIRE(em.code == 0);
    double value = std::stod(em.out.substr(em.out.find('\t') + 1));
    CHECK(value >= 0.0);
    CHECK(value <= 1.0);

    // generation requires the corpus text
    CHECK(run_cli("retrieve --index " + q(index) + " --ckpt " + q(pl.model) + " --queries " +
                  q(pl.queries) + " --out " + q(base_dir() / "run_gen2.tsv") +
                  " --answers-out " + q(answers)).code == 1);
}

TEST_CASE("adaptation modes update a checkpoint copy") {
    const Pipeline& pl = pipeline();
    fs::path entity = base_dir() / "entity.jsonl";
    std::ofstream(entity) << "{\"id\": \"e0\", \"text\": \"Curator Almar guards the opal room.\"}\n"
                          << "{\"id\": \"e1\", \"text\": \"Captain Belor sails the tall ship.\"}\n"
                          << "{\"id\": \"e2\", \"text\": \"Warden Cidra keeps the garnet hall.\"}\n"
                          << "{\"id\": \"e3\", \"text\": \"Pilot Doral flies the copper glider.\"}\n";
    fs::path acfg = base_dir() / "adapt.kv";
    std::ofstream(acfg) << "alpha = 1.0\nbatch_queries = 2\nk_close = 2\nlr = 1e-3\n"
                        << "warmup_steps = 0\nsteps_per_iter = 1\niterations = 1\nseed = 3\n";

    fs::path adapted = base_dir() / "adapted_ssm.bin";
    CmdResult ssm = run_cli("adapt --mode ssm --corpus " + q(entity) + " --ckpt " + q(pl.model) +
                            " --out " + q(adapted) + " --config " + q(acfg) + " --samples 4");
    REQUIRE(ssm.code == 0);
    REQUIRE(fs::exists(adapted));
    CHECK(slurp(adapted) != slurp(pl.model)); // parameters moved
    CHECK(fs::exists(base_dir() / "adapted_ssm.bin.manifest.json"));

    // relevance-target adaptation on the synthetic gold pairs
    fs::path triples = base_dir() / "triples.jsonl";
    std::ofstream(triples)
        << "{\"query_id\": \"q0\", \"query\": \"what does k0 hold\", \"doc_id\": 0, \"grade\": 2}\n"
        << "{\"query_id\": \"q1\", \"query\": \"what does k1 hold\", \"doc_id\": 1, \"grade\": 1}\n";
    fs::path adapted_ir = base_dir() / "adapted_ir.bin";
    CmdResult ir = run_cli("adapt --mode ir --corpus " + q(pl.docs) + " --ckpt " + q(pl.model) +
                           " --out " + q(adapted_ir) + " --config " + q(acfg) + " --triples " +
                           q(triples));
    REQUIRE(ir.code == 0);
    CHECK(slurp(adapted_ir) != slurp(pl.model));

    // supervised continuation on qa pairs
    fs::path adapted_qa = base_dir() / "adapted_qa.bin";
    CmdResult qa = run_cli("adapt --mode qa --corpus " + q(pl.docs) + " --ckpt " + q(pl.model) +
                           " --out " + q(adapted_qa) + " --config " + q(acfg) + " --queries " +
                           q(pl.queries));
    REQUIRE(qa.code == 0);
    CHECK(slurp(adapted_qa) != slurp(pl.model));

    CHECK(run_cli("adapt --mode bogus --corpus " + q(pl.docs) + " --ckpt " + q(pl.model) +
                  " --out " + q(adapted)).code == 1);
    CHECK(run_cli("adapt --mode ir --corpus " + q(pl.docs) + " --ckpt " + q(pl.model) +
                  " --out " + q(adapted)).code == 1);
    CHECK(run_cli("adapt --mode qa --corpus " + q(pl.docs) + " --ckpt " + q(pl.model) +
                  " --out " + q(adapted)).code == 1);
}

TEST_CASE("head probing writes a ranked correlation report") {
    const Pipeline& pl = pipeline();
    fs::path report = base_dir() / "probes.tsv";
    CmdResult r = run_cli("probe-heads --corpus " + q(pl.docs) + " --ckpt " + q(pl.model) +
                          " --queries " + q(pl.queries) + " --qrels " + q(pl.qrels) +
                          " --negatives 3 --seed 2 --out " + q(report));
    REQUIRE(r.code == 0);

    std::ifstream in(report);
    std::string comment, header;
    REQUIRE(std::getline(in, comment));
    CHECK(comment.rfind("#", 0) == 0);
    REQUIRE(std::getline(in, header));
    CHECK(header == "head_id\tcorrelation\tweight");
    std::string line;
    std::size_t rows = 0;
    double prev_corr = 2.0, weight_sum = 0.0;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        int head = -1;
        double corr = 0.0, weight = 0.0;
        REQUIRE(static_cast<bool>(ss >> head >> corr >> weight));
        CHECK(head >= 0);
        CHECK(head < 2);
        CHECK(corr <= prev_corr); // sorted by correlation, best first
        prev_corr = corr;
        weight_sum += weight;
        ++rows;
    }
    CHECK(rows == 2); // one row per attention head
    CHECK(weight_sum == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("log verbosity follows the environment") {
    const Pipeline& pl = pipeline();
    fs::path index = base_dir() / "quiet.idx";
    CmdResult quiet = run_cli("build-index --corpus " + q(pl.docs) + " --ckpt " + q(pl.model) +
                              " --out " + q(index));
    REQUIRE(quiet.code == 0);
    CHECK(quiet.err.find("[ratt:info]") == std::string::npos);

    CmdResult loud = run_cli("build-index --corpus " + q(pl.docs) + " --ckpt " + q(pl.model) +
                             " --out " + q(index), "RATT_LOG=info");
    REQUIRE(loud.code == 0);
    CHECK(loud.err.find("[ratt:info] indexed") != std::string::npos);
}
