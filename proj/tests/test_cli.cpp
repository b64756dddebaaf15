#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "qchunk/cli.hpp"
#include "qchunk/http_replay.hpp"
#include "support.hpp"

using namespace qchunk;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run_cli(std::vector<std::string> args, cli::TransportFactory transport = nullptr) {
  args.insert(args.begin(), "qchunk");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const cli::Context ctx{out, err, std::move(transport)};
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), ctx);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<json> jsonl(const fs::path& p) {
  std::vector<json> out;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

// Rows of a tab-separated table, header included.
std::vector<std::vector<std::string>> table(const std::string& s) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(s);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream cs(line);
    std::string cell;
    while (std::getline(cs, cell, '\t')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / (std::string("qchunk_cli_") + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string write(const std::string& name, const std::string& body) const {
    const auto p = dir / name;
    std::ofstream(p, std::ios::binary) << body;
    return p.string();
  }
  std::string path(const std::string& name) const { return (dir / name).string(); }

  std::string corpus() const {
    return write("corpus.jsonl",
                 json{{"id", "two-topic"}, {"text", qtest::kTwoTopic}}.dump() + "\n" +
                     json{{"id", "halves"}, {"text", qtest::kDisjointHalves}}.dump() + "\n");
  }

  fs::path dir;
};

}  // namespace

// ---------------------------------------------------------------------------
// chunk

TEST_F(CliTest, ChunkFixedWritesOneLinePerDocument) {
  const auto r = run_cli({"chunk", "--input", corpus(), "--strategy", "fixed", "--out", path("f.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = jsonl(path("f.jsonl"));
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0]["doc_id"], "two-topic");
  EXPECT_EQ(lines[1]["doc_id"], "halves");
  for (const auto& l : lines) {
    EXPECT_TRUE(l.contains("strategy"));
    EXPECT_TRUE(l["boundaries"].is_array());
    std::string joined;
    for (const auto& c : l["chunks"]) {
      EXPECT_LT(c["start_sentence"].get<std::size_t>(), c["end_sentence"].get<std::size_t>());
      joined += c["text"].get<std::string>();
    }
    EXPECT_EQ(joined, l["doc_id"] == "halves" ? qtest::kDisjointHalves : qtest::kTwoTopic);
  }
}

TEST_F(CliTest, UnknownStrategyIsAUsageError) {
  const auto r = run_cli({"chunk", "--input", corpus(), "--strategy", "magic", "--out", path("x")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  EXPECT_NE(r.err.find("--strategy"), std::string::npos);
}

TEST_F(CliTest, MissingCorpusIsExitOne) {
  const auto r = run_cli({"chunk", "--input", path("nope.jsonl"), "--strategy", "sentence", "--out",
                      path("x")});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST_F(CliTest, QchunkerIsByteDeterministic) {
  const auto in = corpus();
  const std::vector<std::string> base = {"chunk", "--input", in, "--strategy", "qchunker", "--seed", "42",
                                         "--config", write("c.json", R"({"chunker":{"target_len":60}})")};
  auto a = base, b = base;
  a.insert(a.end(), {"--out", path("a.jsonl")});
  b.insert(b.end(), {"--out", path("b.jsonl")});
  ASSERT_EQ(run_cli(a).code, 0);
  ASSERT_EQ(run_cli(b).code, 0);
  const auto la = jsonl(path("a.jsonl")), lb = jsonl(path("b.jsonl"));
  ASSERT_EQ(la.size(), 2u);
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_EQ(la[i]["strategy"], "qchunker");
    EXPECT_TRUE(la[i]["completed"].is_array());
    const auto ra = slurp(la[i]["result_path"].get<std::string>());
    const auto rb = slurp(lb[i]["result_path"].get<std::string>());
    EXPECT_FALSE(ra.empty());
    EXPECT_EQ(ra, rb);
    auto strip = [](json j) {
      j.erase("result_path");
      return j;
    };
    EXPECT_EQ(strip(la[i]).dump(), strip(lb[i]).dump());
  }
  EXPECT_EQ(la[0]["boundaries"], json::array({qtest::kTwoTopicShift}));
}

// ---------------------------------------------------------------------------
// score

TEST_F(CliTest, ScoreSingleChunkAndLambdaZero) {
  const auto chunks = write(
      "c.jsonl",
      json{{"doc_id", "one"}, {"strategy", "s"}, {"chunks", {{{"text", "Only one chunk here."}}}}}
              .dump() +
          "\n" +
          json{{"doc_id", "two"},
               {"strategy", "s"},
               {"chunks", {{{"text", "Granite cliffs tower. "}}, {{"text", "Violin strings hum."}}}}}
              .dump() +
          "\n");
  const auto r = run_cli({"score", "--chunks", chunks, "--lambda", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = table(r.out);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"doc_id", "K", "phi_li", "phi_sd", "phi_cs"}));
  EXPECT_EQ(rows[1][1], "1");
  EXPECT_EQ(rows[1][2], "1");
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i][4], rows[i][3]);
  // Default output sits next to the input.
  const auto scored = jsonl(path("c.scored.jsonl"));
  ASSERT_EQ(scored.size(), 2u);
  EXPECT_EQ(scored[1]["score"]["k"], 2);
  EXPECT_DOUBLE_EQ(scored[0]["score"]["phi_li"].get<double>(), 1.0);
}

TEST_F(CliTest, ScoreUsesStoredEmbeddings) {
  const double a = 1 / std::sqrt(2.0), b = 1 / std::sqrt(6.0);
  const auto chunks = write(
      "c.jsonl", json{{"doc_id", "o"},
                      {"chunks",
                       {{{"text", "First chunk. "}, {"embedding", {a, -a, 0.0}}},
                        {{"text", "Second chunk."}, {"embedding", {b, b, -2 * b}}}}}}
                         .dump() +
                     "\n");
  const auto r = run_cli({"score", "--chunks", chunks, "--out", path("s.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = table(r.out);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_NEAR(std::stod(rows[1][3]), 9.995e-4, 1e-6);
  EXPECT_NEAR(std::stod(rows[1][3]), std::log(1.001), 1e-9);
}

TEST_F(CliTest, ScoreNamesTheMalformedLine) {
  const auto chunks = write("bad.jsonl", json{{"doc_id", "x"}, {"chunks", {{{"text", "A."}}}}}.dump() +
                                             "\n{\"doc_id\": 3}\n");
  const auto r = run_cli({"score", "--chunks", chunks});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("bad.jsonl:2"), std::string::npos);
}

// ---------------------------------------------------------------------------
// compare

TEST_F(CliTest, CompareSameFileTwiceHasNoDifference) {
  ASSERT_EQ(run_cli({"chunk", "--input", corpus(), "--strategy", "sentence", "--out", path("s.jsonl")}).code,
            0);
  const auto r = run_cli({"compare", "--chunks", path("s.jsonl"), "--chunks", path("s.jsonl"), "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  ASSERT_EQ(j["documents"].size(), 2u);
  for (const auto& d : j["documents"]) {
    ASSERT_EQ(d["strategies"].size(), 2u);
    EXPECT_EQ(d["strategies"][0]["score"]["phi_cs"], d["strategies"][1]["score"]["phi_cs"]);
    // Scores parse back into breakdowns.
    const auto s = score_breakdown_from_json(d["strategies"][0]["score"]);
    EXPECT_EQ(to_json(s), d["strategies"][0]["score"]);
  }
}

TEST_F(CliTest, SemanticBeatsFixedOnTheTwoTopicDocument) {
  const auto in = write("tt.jsonl", json{{"id", "tt"}, {"text", qtest::kTwoTopic}}.dump() + "\n");
  const auto cfg = write("c.json", R"({"chunker":{"target_len":350,"similarity_threshold":0.05}})");
  ASSERT_EQ(run_cli({"chunk", "--input", in, "--strategy", "fixed", "--config", cfg, "--out",
                 path("fixed.jsonl")})
                .code,
            0);
  ASSERT_EQ(run_cli({"chunk", "--input", in, "--strategy", "semantic", "--config", cfg, "--out",
                 path("sem.jsonl")})
                .code,
            0);
  const auto r = run_cli({"compare", "--chunks", path("fixed.jsonl"), "--chunks", path("sem.jsonl"),
                      "--config", cfg, "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  const auto& d = j["documents"][0];
  // Semantic cuts at the topic shift; fixed cuts by length one sentence later.
  EXPECT_EQ(jsonl(path("sem.jsonl"))[0]["boundaries"], json::array({qtest::kTwoTopicShift}));
  EXPECT_EQ(jsonl(path("fixed.jsonl"))[0]["boundaries"], json::array({qtest::kTwoTopicShift + 1}));

  // Recompute both breakdowns directly with the stub backends.
  const auto doc = qtest::two_topic_doc();
  const stub::StubScorer scorer(doc.text);
  const stub::StubEmbedder emb(0);
  std::vector<double> cs;
  for (const auto& file : {"fixed.jsonl", "sem.jsonl"}) {
    std::vector<std::string> texts;
    const auto lines = jsonl(path(file));
    for (const auto& c : lines[0]["chunks"]) texts.push_back(c["text"]);
    cs.push_back(chunk_score(texts, scorer, emb).phi_cs);
  }
  EXPECT_DOUBLE_EQ(d["strategies"][0]["score"]["phi_cs"].get<double>(), cs[0]);
  EXPECT_DOUBLE_EQ(d["strategies"][1]["score"]["phi_cs"].get<double>(), cs[1]);
  EXPECT_GT(cs[1], cs[0]);
  EXPECT_EQ(d["winner"], "semantic");
}

TEST_F(CliTest, CompareRejectsMismatchedCorpora) {
  const auto a = write("a.jsonl", json{{"doc_id", "x"}, {"chunks", {{{"text", "A."}}}}}.dump() + "\n");
  const auto b = write("b.jsonl", json{{"doc_id", "y"}, {"chunks", {{{"text", "A."}}}}}.dump() + "\n");
  const auto r = run_cli({"compare", "--chunks", a, "--chunks", b});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("mismatch"), std::string::npos);
}

// ---------------------------------------------------------------------------
// sweep

class SweepTest : public CliTest {
 protected:
  // Twelve schemes with spread-out components; returns the scores path.
  std::string schemes() {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> li(0.5, 1.0), sd(-4.0, -1.0);
    std::string body;
    for (int i = 0; i < 12; ++i) {
      li_.push_back(li(rng));
      sd_.push_back(sd(rng));
      body += json{{"phi_li", li_.back()}, {"phi_sd", sd_.back()}}.dump() + "\n";
    }
    return write("scores.jsonl", body);
  }
  std::string downstream(double w_li, double w_sd) {
    std::string body;
    for (std::size_t i = 0; i < li_.size(); ++i) body += cli::fmt(w_li * li_[i] + w_sd * sd_[i], "%.17g") + "\n";
    return write("down.txt", body);
  }
  static std::string argmax_lambda(const std::string& out) {
    for (const auto& row : table(out))
      if (row.size() == 3 && row[2] == "*") return row[0];
    return "none";
  }
  std::vector<double> li_, sd_;
};

TEST_F(SweepTest, RecoversTheConstructedWeight) {
  const auto s = schemes();
  const auto r = run_cli({"sweep", "--scores", s, "--downstream", downstream(0.3, 0.7)});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(table(r.out).size(), 102u);
  EXPECT_EQ(argmax_lambda(r.out), "0.3000");
}

TEST_F(SweepTest, SdOnlyDownstreamPeaksAtZero) {
  const auto s = schemes();
  const auto r = run_cli({"sweep", "--scores", s, "--downstream", downstream(0.0, 1.0)});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(argmax_lambda(r.out), "0.0000");
}

TEST_F(SweepTest, CoarseGridJsonAndPlot) {
  const auto s = schemes();
  const auto r = run_cli({"sweep", "--scores", s, "--downstream", downstream(0.3, 0.7), "--grid",
                      "0:1:0.5", "--json", "--plot", path("sweep.svg")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["rows"].size(), 3u);
  EXPECT_EQ(j["rows"][1]["lambda"], 0.5);
  const auto svg = slurp(path("sweep.svg"));
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("<polyline"), std::string::npos);
}

TEST_F(SweepTest, LengthMismatchAndBadGrid) {
  const auto s = schemes();
  const auto short_down = write("short.txt", "1\n2\n");
  EXPECT_EQ(run_cli({"sweep", "--scores", s, "--downstream", short_down}).code, 1);
  EXPECT_EQ(run_cli({"sweep", "--scores", s, "--downstream", downstream(1, 1), "--grid", "0:2:0.1"}).code, 1);
  EXPECT_EQ(run_cli({"sweep", "--scores", s, "--downstream", downstream(1, 1), "--grid", "oops"}).code, 1);
}

TEST_F(SweepTest, DegenerateRowsAreMarkedNotFatal) {
  std::string body;
  for (int i = 0; i < 4; ++i) body += json{{"phi_li", 0.5}, {"phi_sd", -1.0}}.dump() + "\n";
  const auto s = write("flat.jsonl", body);
  const auto r = run_cli({"sweep", "--scores", s, "--downstream", write("d.txt", "1\n2\n3\n4\n"), "--grid",
                      "0:1:0.5"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("degenerate"), std::string::npos);
}

// ---------------------------------------------------------------------------
// ppl-report

TEST_F(CliTest, PplReportAfterCompletion) {
  const auto in = write("tt.jsonl", json{{"id", "tt"}, {"text", qtest::kTwoTopic}}.dump() + "\n");
  ASSERT_EQ(run_cli({"chunk", "--input", in, "--strategy", "qchunker", "--seed", "42", "--config",
                 write("c.json", R"({"chunker":{"target_len":60}})"), "--out", path("q.jsonl")})
                .code,
            0);
  const auto result = jsonl(path("q.jsonl"))[0]["result_path"].get<std::string>();
  const auto r = run_cli({"ppl-report", "--result", result, "--seed", "42"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = table(r.out);
  ASSERT_EQ(rows.size(), 5u);  // header, two chunks, mean, variance
  EXPECT_EQ(rows[2][3], "yes");
  EXPECT_EQ(rows[3][0], "mean");
  EXPECT_LE(std::stod(rows[3][2]), std::stod(rows[3][1]));
  EXPECT_EQ(r.out.find("no completions performed"), std::string::npos);
}

TEST_F(CliTest, PplReportWithoutCompletions) {
  const auto in = write("h.jsonl", json{{"id", "h"}, {"text", qtest::kDisjointHalves}}.dump() + "\n");
  ASSERT_EQ(run_cli({"chunk", "--input", in, "--strategy", "qchunker", "--out", path("q.jsonl")}).code, 0);
  const auto result = jsonl(path("q.jsonl"))[0]["result_path"].get<std::string>();
  const auto r = run_cli({"ppl-report", "--result", result});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const auto& row : table(r.out))
    if (row.size() == 4 && row[0] != "chunk") {
      EXPECT_EQ(row[1], row[2]);
    }
  EXPECT_NE(r.out.find("no completions performed"), std::string::npos);
}

TEST_F(CliTest, PplReportRejectsMalformedResult) {
  EXPECT_EQ(run_cli({"ppl-report", "--result", write("r.json", "{\"doc_id\": ")}).code, 1);
  EXPECT_EQ(run_cli({"ppl-report", "--result", write("r2.json", "{\"doc_id\": \"x\"}")}).code, 1);
}

// ---------------------------------------------------------------------------
// configuration and backends

TEST_F(CliTest, ConfigErrors) {
  const auto in = corpus();
  EXPECT_EQ(run_cli({"chunk", "--input", in, "--strategy", "sentence", "--out", path("o"), "--config",
                 write("c.json", R"({"lamda": 0.3})")})
                .code,
            1);
  EXPECT_EQ(run_cli({"chunk", "--input", in, "--strategy", "sentence", "--out", path("o"), "--config",
                 write("c2.json", R"({"chunker": {"similarity_threshold": 2}, "lambda": 0.3})")})
                .code,
            0);  // threshold only matters for the semantic strategy
  EXPECT_EQ(run_cli({"chunk", "--input", in, "--strategy", "semantic", "--out", path("o"), "--config",
                 path("c2.json")})
                .code,
            1);
  EXPECT_EQ(run_cli({"score", "--chunks", path("o"), "--lambda", "1.5"}).code, 1);
}

TEST_F(CliTest, ConfigFileDefaultsAndFlagOverrides) {
  const auto c = cli::config_from_json(json::parse(R"({"seed": 9, "sampling": {"temperature": 0.2}})"));
  EXPECT_EQ(c.seed, 9u);
  EXPECT_DOUBLE_EQ(c.sampling.temperature, 0.2);
  EXPECT_DOUBLE_EQ(c.sampling.top_p, 0.8);
  EXPECT_DOUBLE_EQ(c.lambda, 0.3);
  EXPECT_DOUBLE_EQ(c.alpha, 1e-3);
  EXPECT_EQ(c.candidates_p, 5u);
  EXPECT_THROW(cli::config_from_json(json::parse(R"({"http": {"modle": "x"}})")), ConfigError);
}

TEST_F(CliTest, HttpBackendNeedsBaseUrl) {
  ::unsetenv("MODEL_API_BASE");
  const auto r = run_cli({"chunk", "--input", corpus(), "--strategy", "semantic", "--backend", "http",
                      "--out", path("o")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("MODEL_API_BASE"), std::string::npos);
}

TEST_F(CliTest, HttpBackendFailureIsExitTwo) {
  ::setenv("MODEL_API_BASE", "http://fixture.invalid", 1);
  const auto fixtures = fs::path(QCHUNK_FIXTURE_DIR) / "http" / "bad_request";
  const auto r = run_cli({"chunk", "--input", corpus(), "--strategy", "semantic", "--backend", "http",
                      "--out", path("o")},
                     [fixtures](const http::Config&) -> std::shared_ptr<http::Transport> {
                       return http::ReplayTransport::from_directory(fixtures);
                     });
  ::unsetenv("MODEL_API_BASE");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("HTTP 400"), std::string::npos);
}

TEST_F(CliTest, HttpBackendServesSemanticChunking) {
  ::setenv("MODEL_API_BASE", "http://fixture.invalid", 1);
  const auto in = write("ab.jsonl", json{{"id", "ab"}, {"text", "First one. Second one."}}.dump() + "\n");
  const auto fixtures = fs::path(QCHUNK_FIXTURE_DIR) / "http" / "embeddings";
  const auto cfg = write("c.json", R"({"http": {"embedding_model": "embed-model"}})");
  const auto r = run_cli({"chunk", "--input", in, "--strategy", "semantic", "--backend", "http", "--out",
                      path("o.jsonl"), "--config", cfg},
                     [fixtures](const http::Config&) -> std::shared_ptr<http::Transport> {
                       return http::ReplayTransport::from_directory(fixtures);
                     });
  ::unsetenv("MODEL_API_BASE");
  ASSERT_EQ(r.code, 0) << r.err;
  // The fixture vectors are orthogonal, so the two sentences are split.
  EXPECT_EQ(jsonl(path("o.jsonl"))[0]["boundaries"], json::array({1}));
}
