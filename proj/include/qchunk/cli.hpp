#pragma once

// Subcommands behind the `qchunk` binary. Each command reads files, writes
// files and reports on the given streams, so tests can drive it in-process.
//
// Exit codes: 0 success, 1 usage/config/I/O/parse error, 2 backend failure.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qchunk/chunkers.hpp"
#include "qchunk/corpus.hpp"
#include "qchunk/errors.hpp"
#include "qchunk/http_backend.hpp"
#include "qchunk/metrics.hpp"
#include "qchunk/pipeline.hpp"
#include "qchunk/serialization.hpp"
#include "qchunk/stub_backend.hpp"

namespace qchunk::cli {

using nlohmann::json;

enum class BackendKind { stub, http };

struct HttpSettings {
  std::string generation_model = "default";
  std::string embedding_model = "default";
  std::string scoring_model = "default";
  std::size_t embedding_dim = 0;  // 0: whatever the server returns
  double timeout_seconds = 60.0;
  std::size_t max_retries = 3;
  std::size_t max_context_tokens = 8192;
  double chars_per_token = 4.0;
  std::size_t embed_batch_size = 64;
};

struct AppConfig {
  BackendKind backend = BackendKind::stub;
  std::uint64_t seed = 0;
  double lambda = kDefaultLambda;
  double alpha = kDefaultAlpha;
  std::size_t candidates_p = kDefaultCandidates;
  SamplingParams sampling;
  ChunkerConfig chunker;
  std::size_t parallelism = 1;
  std::size_t review_context_tokens = 0;
  bool record_timings = false;
  std::size_t stub_embed_dim = stub::kStubEmbedDim;
  HttpSettings http;
};

namespace detail {

template <typename T>
void take(const json& obj, const char* key, T& dst) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: bad value for '") + key + "'");
  }
}

inline void reject_unknown(const json& obj, std::initializer_list<const char*> keys,
                           const std::string& where) {
  for (const auto& [k, v] : obj.items())
    if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; }))
      throw ConfigError("config: unknown key '" + where + k + "'");
}

}  // namespace detail

inline Strategy parse_strategy(const std::string& s) {
  if (s == "fixed") return Strategy::fixed;
  if (s == "sentence") return Strategy::sentence;
  if (s == "semantic") return Strategy::semantic;
  throw ConfigError("unknown strategy '" + s + "'");
}

inline BackendKind parse_backend(const std::string& s) {
  if (s == "stub") return BackendKind::stub;
  if (s == "http") return BackendKind::http;
  throw ConfigError("unknown backend '" + s + "'");
}

// Absent fields keep their defaults; unknown keys are rejected.
inline AppConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  detail::reject_unknown(j,
                         {"backend", "seed", "lambda", "alpha", "candidates_p", "sampling",
                          "chunker", "parallelism", "review_context_tokens", "record_timings",
                          "stub", "http"},
                         "");
  AppConfig c;
  std::string backend = "stub";
  detail::take(j, "backend", backend);
  c.backend = parse_backend(backend);
  detail::take(j, "seed", c.seed);
  detail::take(j, "lambda", c.lambda);
  detail::take(j, "alpha", c.alpha);
  detail::take(j, "candidates_p", c.candidates_p);
  detail::take(j, "parallelism", c.parallelism);
  detail::take(j, "review_context_tokens", c.review_context_tokens);
  detail::take(j, "record_timings", c.record_timings);
  if (j.contains("sampling")) {
    const auto& s = j["sampling"];
    detail::reject_unknown(s, {"temperature", "top_p"}, "sampling.");
    detail::take(s, "temperature", c.sampling.temperature);
    detail::take(s, "top_p", c.sampling.top_p);
  }
  if (j.contains("chunker")) {
    const auto& s = j["chunker"];
    detail::reject_unknown(s, {"strategy", "target_len", "similarity_threshold", "token_rule"},
                           "chunker.");
    std::string strategy = strategy_label(c.chunker.strategy), rule = "whitespace";
    detail::take(s, "strategy", strategy);
    detail::take(s, "target_len", c.chunker.target_len);
    detail::take(s, "similarity_threshold", c.chunker.similarity_threshold);
    detail::take(s, "token_rule", rule);
    c.chunker.strategy = parse_strategy(strategy);
    if (rule == "whitespace") c.chunker.token_rule = text::TokenRule::whitespace;
    else if (rule == "cjk_char") c.chunker.token_rule = text::TokenRule::cjk_char;
    else throw ConfigError("unknown token_rule '" + rule + "'");
  }
  if (j.contains("stub")) {
    detail::reject_unknown(j["stub"], {"embed_dim"}, "stub.");
    detail::take(j["stub"], "embed_dim", c.stub_embed_dim);
  }
  if (j.contains("http")) {
    const auto& h = j["http"];
    detail::reject_unknown(h,
                           {"generation_model", "embedding_model", "scoring_model",
                            "embedding_dim", "timeout_seconds", "max_retries",
                            "max_context_tokens", "chars_per_token", "embed_batch_size"},
                           "http.");
    detail::take(h, "generation_model", c.http.generation_model);
    detail::take(h, "embedding_model", c.http.embedding_model);
    detail::take(h, "scoring_model", c.http.scoring_model);
    detail::take(h, "embedding_dim", c.http.embedding_dim);
    detail::take(h, "timeout_seconds", c.http.timeout_seconds);
    detail::take(h, "max_retries", c.http.max_retries);
    detail::take(h, "max_context_tokens", c.http.max_context_tokens);
    detail::take(h, "chars_per_token", c.http.chars_per_token);
    detail::take(h, "embed_batch_size", c.http.embed_batch_size);
  }
  return c;
}

inline void validate(const AppConfig& c) {
  validate_weights(c.lambda, c.alpha);
  if (c.candidates_p == 0) throw ConfigError("candidates_p must be >= 1");
  if (c.parallelism == 0) throw ConfigError("parallelism must be >= 1");
  if (c.stub_embed_dim == 0) throw ConfigError("stub.embed_dim must be >= 1");
  if (c.http.chars_per_token <= 0.0) throw ConfigError("http.chars_per_token must be positive");
  try {
    c.sampling.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  c.chunker.validate();
}

using TransportFactory =
    std::function<std::shared_ptr<http::Transport>(const http::Config&)>;

// Process-wide I/O and the live-transport factory (injected so this header
// does not depend on a particular HTTP library).
struct Context {
  std::ostream& out;
  std::ostream& err;
  TransportFactory transport;
};

inline Backends make_backends(const AppConfig& c, const Context& ctx) {
  if (c.backend == BackendKind::stub) {
    stub::StubBackend sb{c.seed, c.stub_embed_dim};
    return {"stub", sb.generator(), sb.embedder(),
            [sb](const Document& d) { return sb.scorer(d.text); }};
  }
  http::Config hc;
  hc.generation_model = c.http.generation_model;
  hc.embedding_model = c.http.embedding_model;
  hc.scoring_model = c.http.scoring_model;
  hc.timeout_seconds = c.http.timeout_seconds;
  hc.retry.max_retries = c.http.max_retries;
  hc.max_context_tokens = c.http.max_context_tokens;
  hc.chars_per_token = c.http.chars_per_token;
  hc.embed_batch_size = c.http.embed_batch_size;
  hc.seed = c.seed;
  hc = http::config_from_env(hc);
  if (!ctx.transport) throw ConfigError("no HTTP transport available");
  auto client = std::make_shared<const http::Client>(ctx.transport(hc), hc);
  auto scorer = std::make_shared<const http::HttpScorer>(client);
  bool probed = false;
  return {"http", std::make_shared<const http::HttpGenerator>(client),
          std::make_shared<const http::HttpEmbedder>(client, c.http.embedding_dim),
          [scorer, probed](const Document&) mutable -> std::shared_ptr<const TokenScorer> {
            if (!probed) {
              scorer->probe();
              probed = true;
            }
            return scorer;
          }};
}

// Embedder that serves vectors stored alongside chunk texts.
class StoredEmbedder final : public Embedder {
 public:
  StoredEmbedder(std::unordered_map<std::string, std::vector<double>> table, std::size_t dim)
      : table_(std::move(table)), dim_(dim) {}
  std::size_t dimension() const override { return dim_; }
  std::vector<std::vector<double>> embed_raw(std::span<const std::string> texts) const override {
    std::vector<std::vector<double>> out;
    for (const auto& t : texts) {
      const auto it = table_.find(t);
      if (it == table_.end()) throw ValidationError("no stored embedding for chunk");
      out.push_back(it->second);
    }
    return out;
  }

 private:
  std::unordered_map<std::string, std::vector<double>> table_;
  std::size_t dim_;
};

// ---------------------------------------------------------------------------
// Chunk files

struct ChunkLine {
  std::string doc_id;
  std::string strategy;
  std::vector<std::string> texts;
  std::vector<std::vector<double>> embeddings;  // empty unless every chunk has one
  json raw;
};

inline std::vector<ChunkLine> read_chunk_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<ChunkLine> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (text::trim(line).empty()) continue;
    const std::string where = path + ":" + std::to_string(no);
    ChunkLine cl;
    try {
      cl.raw = json::parse(line);
      cl.doc_id = cl.raw.at("doc_id").get<std::string>();
      cl.strategy = cl.raw.value("strategy", std::string());
      std::size_t with_vec = 0;
      for (const auto& c : cl.raw.at("chunks")) {
        cl.texts.push_back(c.at("text").get<std::string>());
        if (c.contains("embedding")) {
          cl.embeddings.push_back(c["embedding"].get<std::vector<double>>());
          ++with_vec;
        }
      }
      if (cl.texts.empty()) throw ParseError("no chunks");
      if (with_vec != 0 && with_vec != cl.texts.size())
        throw ParseError("embedding present on some chunks only");
    } catch (const json::exception& e) {
      throw ParseError(where + ": malformed chunk line (" + e.what() + ")");
    } catch (const ParseError& e) {
      throw ParseError(where + ": malformed chunk line (" + e.what() + ")");
    }
    out.push_back(std::move(cl));
  }
  return out;
}

inline ScoreBreakdown score_line(const ChunkLine& cl, const AppConfig& cfg, const Backends& be) {
  std::string joined;
  for (const auto& t : cl.texts) joined += t;
  const auto doc = make_document(cl.doc_id, joined);
  const auto scorer = be.scorer_for(doc);
  if (!cl.embeddings.empty()) {
    std::unordered_map<std::string, std::vector<double>> table;
    for (std::size_t i = 0; i < cl.texts.size(); ++i) {
      const auto [it, fresh] = table.emplace(cl.texts[i], cl.embeddings[i]);
      if (!fresh && it->second != cl.embeddings[i])
        throw ValidationError(cl.doc_id + ": identical chunk texts with different embeddings");
    }
    const StoredEmbedder emb(std::move(table), cl.embeddings.front().size());
    return chunk_score(cl.texts, *scorer, emb, cfg.lambda, cfg.alpha, cfg.parallelism);
  }
  return chunk_score(cl.texts, *scorer, *be.embedder, cfg.lambda, cfg.alpha, cfg.parallelism);
}

inline std::string fmt(double v, const char* spec = "%.9g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

inline void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << body;
  if (!out) throw IoError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_chunk(const AppConfig& cfg, const Context& ctx, const std::string& input,
                     const std::string& strategy, const std::string& out_path) {
  const bool pipeline = strategy == "qchunker";
  AppConfig c = cfg;
  if (!pipeline) c.chunker.strategy = parse_strategy(strategy);
  validate(c);
  const auto docs = load_jsonl(input);
  const auto be = make_backends(c, ctx);
  std::string body;
  const std::filesystem::path results_dir = out_path + ".results";
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto& doc = docs[i];
    if (!pipeline) {
      const auto p = run_chunker(doc, c.chunker, be.embedder.get());
      body += partition_line(p, strategy_label(c.chunker.strategy)).dump() + "\n";
      continue;
    }
    PipelineConfig pc;
    pc.backends = be;
    pc.seed = c.seed;
    pc.candidates_p = c.candidates_p;
    pc.sampling = c.sampling;
    pc.lambda = c.lambda;
    pc.alpha = c.alpha;
    pc.chunk_target_tokens = c.chunker.target_len;
    pc.review_context_tokens = c.review_context_tokens;
    pc.parallelism = c.parallelism;
    pc.record_timings = c.record_timings;
    const auto res = run_pipeline(doc, pc);
    std::filesystem::create_directories(results_dir);
    char name[32];
    std::snprintf(name, sizeof name, "%05zu.json", i);
    const auto result_path = (results_dir / name).string();
    write_text(result_path, to_json(res).dump(2) + "\n");
    auto line = partition_line(res.candidates.candidates[res.selection.selected_index], "qchunker");
    json completed = json::array();
    for (const auto& f : res.completed) completed.push_back(f.text());
    line["completed"] = completed;
    line["result_path"] = result_path;
    body += line.dump() + "\n";
  }
  write_text(out_path, body);
  ctx.out << "wrote " << docs.size() << " documents to " << out_path << "\n";
  return 0;
}

inline int cmd_score(const AppConfig& cfg, const Context& ctx, const std::string& chunks_path,
                     const std::string& out_path) {
  validate(cfg);
  const auto lines = read_chunk_file(chunks_path);
  const auto be = make_backends(cfg, ctx);
  std::string body;
  ctx.out << "doc_id\tK\tphi_li\tphi_sd\tphi_cs\n";
  for (const auto& cl : lines) {
    const auto s = score_line(cl, cfg, be);
    json line = cl.raw;
    line["score"] = to_json(s);
    body += line.dump() + "\n";
    ctx.out << cl.doc_id << "\t" << s.k << "\t" << fmt(s.phi_li) << "\t" << fmt(s.phi_sd) << "\t"
            << fmt(s.phi_cs) << "\n";
  }
  write_text(out_path, body);
  return 0;
}

inline json compare_json(const AppConfig& cfg, const Context& ctx,
                         const std::vector<std::string>& paths) {
  if (paths.size() < 2) throw ConfigError("compare needs at least two --chunks files");
  validate(cfg);
  const auto be = make_backends(cfg, ctx);
  std::vector<std::map<std::string, ChunkLine>> sets;
  std::vector<std::string> labels;
  for (const auto& p : paths) {
    std::map<std::string, ChunkLine> by_id;
    std::string strategy;
    for (auto& cl : read_chunk_file(p)) {
      if (strategy.empty()) strategy = cl.strategy;
      const std::string id = cl.doc_id;
      if (!by_id.emplace(id, std::move(cl)).second)
        throw ValidationError(p + ": duplicate doc_id '" + id + "'");
    }
    std::string label = strategy.empty() ? p : strategy;
    if (std::find(labels.begin(), labels.end(), label) != labels.end()) label += " (" + p + ")";
    labels.push_back(label);
    if (!sets.empty()) {
      std::set<std::string> a, b;
      for (const auto& [k, v] : sets.front()) a.insert(k);
      for (const auto& [k, v] : by_id) b.insert(k);
      if (a != b) throw ValidationError("corpora mismatch: " + paths.front() + " vs " + p);
    }
    sets.push_back(std::move(by_id));
  }
  json docs = json::array();
  for (const auto& [id, first] : sets.front()) {
    json entry = {{"doc_id", id}, {"strategies", json::array()}};
    std::size_t best = 0;
    double best_cs = 0.0;
    for (std::size_t s = 0; s < sets.size(); ++s) {
      const auto score = score_line(sets[s].at(id), cfg, be);
      if (s == 0 || score.phi_cs > best_cs) {
        best = s;
        best_cs = score.phi_cs;
      }
      entry["strategies"].push_back({{"strategy", labels[s]}, {"score", to_json(score)}});
    }
    entry["winner"] = labels[best];
    docs.push_back(std::move(entry));
  }
  return {{"lambda", cfg.lambda}, {"alpha", cfg.alpha}, {"documents", docs}};
}

inline int cmd_compare(const AppConfig& cfg, const Context& ctx,
                       const std::vector<std::string>& paths, bool as_json) {
  const auto j = compare_json(cfg, ctx, paths);
  if (as_json) {
    ctx.out << j.dump(2) << "\n";
    return 0;
  }
  ctx.out << "doc_id\tstrategy\tK\tphi_li\tphi_sd\tphi_cs\n";
  for (const auto& d : j["documents"]) {
    for (const auto& s : d["strategies"]) {
      const auto& sc = s["score"];
      ctx.out << d["doc_id"].get<std::string>() << "\t" << s["strategy"].get<std::string>() << "\t"
              << sc["k"].get<std::size_t>() << "\t" << fmt(sc["phi_li"].get<double>()) << "\t"
              << fmt(sc["phi_sd"].get<double>()) << "\t" << fmt(sc["phi_cs"].get<double>()) << "\n";
    }
    ctx.out << d["doc_id"].get<std::string>() << "\twinner\t" << d["winner"].get<std::string>()
            << "\n";
  }
  return 0;
}

inline LambdaGrid parse_grid(const std::string& spec) {
  LambdaGrid g;
  char tail = 0;
  if (std::sscanf(spec.c_str(), "%lf:%lf:%lf%c", &g.start, &g.end, &g.step, &tail) != 3)
    throw ConfigError("grid must look like start:end:step, got '" + spec + "'");
  try {
    g.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  return g;
}

// Scheme scores: JSONL lines carrying phi_li/phi_sd at top level or under
// `score` (the output of `score`).
inline std::vector<SchemeScores> read_scheme_scores(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<SchemeScores> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (text::trim(line).empty()) continue;
    try {
      auto j = json::parse(line);
      const auto& s = j.contains("score") ? j["score"] : j;
      out.push_back({s.at("phi_li").get<double>(), s.at("phi_sd").get<double>()});
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(no) + ": " + e.what());
    }
  }
  return out;
}

// One number per line, or a single JSON array.
inline std::vector<double> read_numbers(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string body = ss.str();
  if (!text::trim(body).empty() && text::trim(body).front() == '[') {
    try {
      return json::parse(body).get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw ParseError(path + ": " + e.what());
    }
  }
  std::vector<double> out;
  std::istringstream lines(body);
  std::string line;
  std::size_t no = 0;
  while (std::getline(lines, line)) {
    ++no;
    const auto t = text::trim(line);
    if (t.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(std::string(t), &used));
      if (used != t.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ParseError(path + ":" + std::to_string(no) + ": not a number");
    }
  }
  return out;
}

// Line chart of r against lambda; undefined rows leave gaps.
inline std::string sweep_svg(const std::vector<SweepRow>& rows, std::optional<std::size_t> best) {
  const double w = 640, h = 400, m = 50;
  double lo = 1.0, hi = -1.0;
  for (const auto& r : rows)
    if (r.r) {
      lo = std::min(lo, *r.r);
      hi = std::max(hi, *r.r);
    }
  if (lo > hi) lo = -1.0, hi = 1.0;
  if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
  const double x0 = rows.empty() ? 0.0 : rows.front().lambda;
  const double x1 = rows.empty() ? 1.0 : rows.back().lambda;
  auto px = [&](double l) { return m + (x1 > x0 ? (l - x0) / (x1 - x0) : 0.5) * (w - 2 * m); };
  auto py = [&](double r) { return h - m - (r - lo) / (hi - lo) * (h - 2 * m); };
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" "
                  "viewBox=\"0 0 640 400\">\n";
  s += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  s += "<line x1=\"50\" y1=\"350\" x2=\"590\" y2=\"350\" stroke=\"black\"/>\n";
  s += "<line x1=\"50\" y1=\"50\" x2=\"50\" y2=\"350\" stroke=\"black\"/>\n";
  s += "<text x=\"320\" y=\"385\" text-anchor=\"middle\" font-size=\"14\">lambda</text>\n";
  s += "<text x=\"15\" y=\"200\" font-size=\"14\" transform=\"rotate(-90 15 200)\" "
       "text-anchor=\"middle\">pearson r</text>\n";
  s += "<text x=\"45\" y=\"" + fmt(py(hi) + 4, "%.2f") + "\" text-anchor=\"end\" font-size=\"11\">" +
       fmt(hi, "%.3f") + "</text>\n";
  s += "<text x=\"45\" y=\"" + fmt(py(lo) + 4, "%.2f") + "\" text-anchor=\"end\" font-size=\"11\">" +
       fmt(lo, "%.3f") + "</text>\n";
  s += "<text x=\"50\" y=\"365\" text-anchor=\"middle\" font-size=\"11\">" + fmt(x0, "%.2f") +
       "</text>\n";
  s += "<text x=\"590\" y=\"365\" text-anchor=\"middle\" font-size=\"11\">" + fmt(x1, "%.2f") +
       "</text>\n";
  std::string pts;
  auto flush = [&] {
    if (!pts.empty())
      s += "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"" + pts +
           "\"/>\n";
    pts.clear();
  };
  for (const auto& r : rows) {
    if (!r.r) {
      flush();
      continue;
    }
    if (!pts.empty()) pts += " ";
    pts += fmt(px(r.lambda), "%.2f") + "," + fmt(py(*r.r), "%.2f");
  }
  flush();
  if (best) {
    const auto& r = rows[*best];
    s += "<circle cx=\"" + fmt(px(r.lambda), "%.2f") + "\" cy=\"" + fmt(py(*r.r), "%.2f") +
         "\" r=\"4\" fill=\"crimson\"/>\n";
    s += "<text x=\"" + fmt(px(r.lambda), "%.2f") + "\" y=\"" + fmt(py(*r.r) - 8, "%.2f") +
         "\" text-anchor=\"middle\" font-size=\"11\">lambda=" + fmt(r.lambda, "%.2f") + "</text>\n";
  }
  return s + "</svg>\n";
}

inline int cmd_sweep(const Context& ctx, const std::string& scores_path,
                     const std::string& downstream_path, const std::string& grid_spec,
                     const std::string& plot_path, bool as_json) {
  const auto grid = parse_grid(grid_spec);
  const auto schemes = read_scheme_scores(scores_path);
  const auto downstream = read_numbers(downstream_path);
  if (schemes.size() != downstream.size())
    throw ValidationError("length mismatch: " + std::to_string(schemes.size()) + " schemes vs " +
                          std::to_string(downstream.size()) + " downstream values");
  const auto rows = lambda_sweep(schemes, downstream, grid);
  const auto best = sweep_argmax(rows);
  if (as_json) {
    json a = json::array();
    for (std::size_t i = 0; i < rows.size(); ++i)
      a.push_back({{"lambda", rows[i].lambda},
                   {"r", rows[i].r ? json(*rows[i].r) : json(nullptr)},
                   {"argmax", best && *best == i}});
    ctx.out << json{{"rows", a}, {"argmax_lambda", best ? json(rows[*best].lambda) : json(nullptr)}}
                   .dump(2)
            << "\n";
  } else {
    ctx.out << "lambda\tr\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      ctx.out << fmt(rows[i].lambda, "%.4f") << "\t"
              << (rows[i].r ? fmt(*rows[i].r, "%.6f") : std::string("degenerate"));
      if (best && *best == i) ctx.out << "\t*";
      ctx.out << "\n";
    }
  }
  if (!plot_path.empty()) write_text(plot_path, sweep_svg(rows, best));
  return 0;
}

inline int cmd_ppl_report(const AppConfig& cfg, const Context& ctx, const std::string& result_path) {
  std::ifstream in(result_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + result_path);
  PipelineResult res;
  try {
    res = pipeline_result_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw ParseError(result_path + ": " + e.what());
  }
  validate(cfg);
  const auto be = make_backends(cfg, ctx);
  const auto scorer = be.scorer_for(make_document(res.doc_id, res.document_text));
  std::vector<double> orig, done;
  bool any = false;
  ctx.out << "chunk\tppl_original\tppl_completed\tcompleted\n";
  for (std::size_t i = 0; i < res.completed.size(); ++i) {
    const auto& f = res.completed[i];
    orig.push_back(perplexity(*scorer, f.chunk.text));
    done.push_back(f.completion ? perplexity(*scorer, f.text()) : orig.back());
    any = any || f.completion.has_value();
    ctx.out << i << "\t" << fmt(orig.back(), "%.6f") << "\t" << fmt(done.back(), "%.6f") << "\t"
            << (f.completion ? "yes" : "no") << "\n";
  }
  auto stats = [](const std::vector<double>& v) {
    double mean = 0.0, var = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(std::max<std::size_t>(1, v.size()));
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(std::max<std::size_t>(1, v.size()));
    return std::pair{mean, var};
  };
  const auto [om, ov] = stats(orig);
  const auto [dm, dv] = stats(done);
  ctx.out << "mean\t" << fmt(om, "%.6f") << "\t" << fmt(dm, "%.6f") << "\n";
  ctx.out << "variance\t" << fmt(ov, "%.6f") << "\t" << fmt(dv, "%.6f") << "\n";
  if (!any) ctx.out << "no completions performed\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

inline AppConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path);
  try {
    return config_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

inline int run(int argc, const char* const* argv, const Context& ctx) {
  CLI::App app{"Chunking, ChunkScore evaluation and lambda calibration", "qchunk"};
  app.require_subcommand(1);

  std::string config_path, backend;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> parallelism;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("--backend", backend, "stub or http")->check(CLI::IsMember({"stub", "http"}));
    sub->add_option("--parallelism", parallelism, "concurrent model calls");
  };

  std::string input, strategy, out_path;
  auto* chunk = app.add_subcommand("chunk", "chunk a JSONL corpus");
  common(chunk);
  chunk->add_option("--input", input, "corpus JSONL")->required();
  chunk->add_option("--strategy", strategy, "fixed|sentence|semantic|qchunker")
      ->required()
      ->check(CLI::IsMember({"fixed", "sentence", "semantic", "qchunker"}));
  chunk->add_option("--out", out_path, "output JSONL")->required();

  std::string chunks_path, score_out;
  std::optional<double> lambda, alpha;
  auto* score = app.add_subcommand("score", "ChunkScore of stored chunkings");
  common(score);
  score->add_option("--chunks", chunks_path, "chunk JSONL")->required();
  score->add_option("--lambda", lambda, "weight of logical independence");
  score->add_option("--alpha", alpha, "ridge added to the Gram matrix");
  score->add_option("--out", score_out, "scored JSONL (default: <chunks>.scored.jsonl)");

  std::vector<std::string> compare_paths;
  bool compare_as_json = false;
  auto* compare = app.add_subcommand("compare", "compare chunkings of one corpus");
  common(compare);
  compare->add_option("--chunks", compare_paths, "chunk JSONL (repeat)")->required();
  compare->add_option("--lambda", lambda, "weight of logical independence");
  compare->add_option("--alpha", alpha, "ridge added to the Gram matrix");
  compare->add_flag("--json", compare_as_json, "machine-readable output");

  std::string scores_path, downstream_path, grid = "0:1:0.01", plot_path;
  bool sweep_as_json = false;
  auto* sweep = app.add_subcommand("sweep", "correlate ChunkScore with a downstream metric");
  sweep->add_option("--scores", scores_path, "JSONL with phi_li/phi_sd per scheme")->required();
  sweep->add_option("--downstream", downstream_path, "one value per scheme")->required();
  sweep->add_option("--grid", grid, "start:end:step");
  sweep->add_option("--plot", plot_path, "SVG output");
  sweep->add_flag("--json", sweep_as_json, "machine-readable output");

  std::string result_path;
  auto* ppl = app.add_subcommand("ppl-report", "perplexity before and after completion");
  common(ppl);
  ppl->add_option("--result", result_path, "pipeline result JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    ctx.out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    ctx.err << "error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    AppConfig cfg = load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!backend.empty()) cfg.backend = parse_backend(backend);
    if (parallelism) cfg.parallelism = *parallelism;
    if (lambda) cfg.lambda = *lambda;
    if (alpha) cfg.alpha = *alpha;

    if (*chunk) return cmd_chunk(cfg, ctx, input, strategy, out_path);
    if (*score) {
      if (score_out.empty())
        score_out = std::filesystem::path(chunks_path).replace_extension(".scored.jsonl").string();
      return cmd_score(cfg, ctx, chunks_path, score_out);
    }
    if (*compare) return cmd_compare(cfg, ctx, compare_paths, compare_as_json);
    if (*sweep) return cmd_sweep(ctx, scores_path, downstream_path, grid, plot_path, sweep_as_json);
    if (*ppl) return cmd_ppl_report(cfg, ctx, result_path);
  } catch (const BackendError& e) {
    ctx.err << "error: " << text::single_line(e.what()) << "\n";
    return 2;
  } catch (const PipelineError& e) {
    ctx.err << "error: " << text::single_line(e.what()) << "\n";
    return e.backend_failure() ? 2 : 1;
  } catch (const Error& e) {
    ctx.err << "error: " << text::single_line(e.what()) << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    ctx.err << "error: " << text::single_line(e.what()) << "\n";
    return 1;
  }
  return 1;
}

}  // namespace qchunk::cli
