#pragma once

// The four-agent chunking pipeline:
//
//   outline   generate expert questions about the document
//   segment   sample p boundary proposals guided by the outline
//   select    keep the proposal with the highest ChunkScore
//   review    per chunk, list knowledge it needs that lives elsewhere in D
//   verify    keep only items grounded in sentences outside the chunk
//   complete  rewrite flagged chunks to integrate the verified evidence
//
// Every model reply is parsed defensively; raw replies are kept for audit.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qchunk/chunkers.hpp"
#include "qchunk/corpus.hpp"
#include "qchunk/errors.hpp"
#include "qchunk/metrics.hpp"
#include "qchunk/model_clients.hpp"
#include "qchunk/parallel.hpp"
#include "qchunk/prompts.hpp"
#include "qchunk/text.hpp"

namespace qchunk {

inline constexpr std::size_t kDefaultCandidates = 5;
inline constexpr double kGroundingThreshold = 0.5;
inline constexpr double kCoverageRecall = 0.8;
inline constexpr double kCoverageGate = 0.9;

struct QuestionOutline {
  std::vector<std::string> questions;
  std::vector<std::string> raw_outputs;
};

struct CandidateSet {
  std::vector<Partition> candidates;
  SamplingParams sampling;
  std::vector<std::string> raw_outputs;
  std::vector<std::string> parse_errors;  // one entry per unparseable output
  bool fallback = false;
};

struct SentenceSpan {
  std::size_t first = 0;
  std::size_t last = 0;  // exclusive

  bool overlaps(const Chunk& c) const {
    return first < c.end_sentence && c.start_sentence < last;
  }
  friend bool operator==(const SentenceSpan&, const SentenceSpan&) = default;
};

struct MissingItem {
  std::string description;
  std::optional<SentenceSpan> evidence_span;
  bool grounded = false;
};

struct ReviewReport {
  std::size_t chunk_index = 0;
  std::vector<MissingItem> missing;
  bool needs_completion = false;
  std::vector<std::string> raw_outputs;
};

struct DroppedItem {
  MissingItem item;
  std::string reason;
};

struct Verification {
  std::vector<MissingItem> kept;
  std::vector<DroppedItem> dropped;
};

struct CompletedChunk {
  Chunk original;
  std::vector<MissingItem> supplements;
  std::string rewritten_text;
  double coverage_ratio = 0.0;
  bool fallback_concat = false;
  std::vector<std::string> raw_outputs;
};

struct FinalChunk {
  Chunk chunk;
  std::optional<CompletedChunk> completion;
  std::vector<DroppedItem> dropped;

  const std::string& text() const {
    return completion ? completion->rewritten_text : chunk.text;
  }
};

struct Selection {
  std::size_t selected_index = 0;
  std::vector<std::optional<ScoreBreakdown>> scores;  // parallel to candidates
  std::vector<std::string> failures;                  // empty when scored
  std::vector<double> normalized;                     // diagnostic only
};

struct RunMeta {
  std::uint64_t seed = 0;
  std::string backend;
  std::string template_hash;
  std::string prompt_version;
  std::vector<std::pair<std::string, double>> timings_ms;  // when recorded
};

struct PipelineResult {
  std::string doc_id;
  std::string document_text;
  QuestionOutline outline;
  CandidateSet candidates;
  Selection selection;
  std::vector<ReviewReport> reviews;
  std::vector<FinalChunk> completed;
  std::optional<ScoreBreakdown> completed_score;  // diagnostic rescore
  RunMeta run_meta;
};

struct Backends {
  std::string kind;
  std::shared_ptr<const Generator> generator;
  std::shared_ptr<const Embedder> embedder;
  // Scorer for one document (the stub scorer is estimated from it).
  std::function<std::shared_ptr<const TokenScorer>(const Document&)> scorer_for;
};

struct PipelineConfig {
  Backends backends;
  std::uint64_t seed = 0;
  std::size_t candidates_p = kDefaultCandidates;
  SamplingParams sampling;  // n is ignored; candidates_p governs
  double lambda = kDefaultLambda;
  double alpha = kDefaultAlpha;
  std::size_t chunk_target_tokens = kDefaultChunkTokens;
  // Document window shown to the reviewer; 0 means the scorer's context size.
  std::size_t review_context_tokens = 0;
  std::size_t parallelism = 1;
  bool record_timings = false;
  bool rescore_completed = false;
};

// Carries the stage name and whatever was finished before the failure.
class PipelineError : public Error {
 public:
  PipelineError(std::string stage, const std::string& what, PipelineResult partial,
                bool backend_failure = false)
      : Error("pipeline stage '" + stage + "' failed: " + what),
        stage_(std::move(stage)),
        partial_(std::move(partial)),
        backend_failure_(backend_failure) {}

  const std::string& stage() const { return stage_; }
  const PipelineResult& partial() const { return partial_; }
  bool backend_failure() const { return backend_failure_; }

 private:
  std::string stage_;
  PipelineResult partial_;
  bool backend_failure_;
};

// ---------------------------------------------------------------------------
// Reply parsers

// Numbered or bulleted lines that end in a question mark; exact duplicates
// are dropped.
inline std::vector<std::string> parse_outline(std::string_view raw) {
  static const std::regex kLine(R"(^\s*(?:\d+\s*(?:[.):]|、)|[-*]|•)\s*(.+?)\s*$)");
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= raw.size()) {
    std::size_t eol = raw.find('\n', pos);
    if (eol == std::string_view::npos) eol = raw.size();
    const std::string line(raw.substr(pos, eol - pos));
    pos = eol + 1;
    std::smatch m;
    if (!std::regex_match(line, m, kLine)) continue;
    std::string q = m[1].str();
    while (!q.empty() && (q.back() == '*' || text::is_space(static_cast<unsigned char>(q.back()))))
      q.pop_back();
    const bool ascii_q = !q.empty() && q.back() == '?';
    const bool wide_q = q.size() >= 3 && q.compare(q.size() - 3, 3, "？") == 0;
    if (!ascii_q && !wide_q) continue;
    if (std::find(out.begin(), out.end(), q) == out.end()) out.push_back(std::move(q));
  }
  return out;
}

// Accepts `boundaries: [a, b]`, any bracketed integer list, or one index per
// line. Repairs by sorting, deduplicating and dropping out-of-range values.
// `no split` (or an explicitly empty list) yields a single chunk.
inline Partition parse_segmenter_output(std::string_view raw, const Document& doc) {
  std::string lower(raw);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  const bool no_split = lower.find("no split") != std::string::npos;

  std::vector<long long> values;
  bool explicit_empty = false;
  auto ints_in = [](const std::string& s) {
    static const std::regex kInt(R"(-?\d+)");
    std::vector<long long> v;
    for (auto it = std::sregex_iterator(s.begin(), s.end(), kInt); it != std::sregex_iterator(); ++it)
      v.push_back(std::stoll(it->str()));
    return v;
  };
  static const std::regex kKeyed(R"(boundaries\s*[:=]?\s*\[([^\]]*)\])");
  static const std::regex kBracket(R"(\[([^\]]*)\])");
  std::smatch m;
  if (std::regex_search(lower, m, kKeyed) || std::regex_search(lower, m, kBracket)) {
    values = ints_in(m[1].str());
    explicit_empty = values.empty() && text::trim(m[1].str()).empty();
  } else {
    static const std::regex kIndexLine(R"(^\s*[-*]?\s*(\d+)\s*[.,;]?\s*$)");
    std::size_t pos = 0;
    while (pos <= lower.size()) {
      std::size_t eol = lower.find('\n', pos);
      if (eol == std::string::npos) eol = lower.size();
      const std::string line = lower.substr(pos, eol - pos);
      pos = eol + 1;
      if (std::regex_match(line, m, kIndexLine)) values.push_back(std::stoll(m[1].str()));
    }
  }
  std::set<std::size_t> clean;
  for (long long v : values)
    if (v > 0 && static_cast<std::size_t>(v) < doc.sentence_count())
      clean.insert(static_cast<std::size_t>(v));
  if (clean.empty() && !no_split && !explicit_empty)
    throw ParseError("segmenter output has no usable boundaries");
  return validate_partition(doc, {clean.begin(), clean.end()});
}

// `COMPLETE` means nothing is missing; otherwise a JSON object with
// `missing: [{description, evidence_sentences | evidence_span}]` and an
// optional `needs_completion` verdict.
inline ReviewReport parse_review(std::string_view raw, std::size_t chunk_index,
                                 const Document& doc) {
  ReviewReport r;
  r.chunk_index = chunk_index;
  const auto open = raw.find('{');
  const auto close = raw.rfind('}');
  if (open == std::string_view::npos || close == std::string_view::npos || close < open) {
    std::string head(text::trim(raw).substr(0, 8));
    std::transform(head.begin(), head.end(), head.begin(),
                   [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    if (head == "COMPLETE") return r;
    throw ParseError("review reply is neither COMPLETE nor JSON");
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(raw.substr(open, close - open + 1));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("review reply has malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("review reply JSON is not an object");
  const auto items = j.value("missing", nlohmann::json::array());
  if (!items.is_array()) throw ParseError("review reply: `missing` is not a list");
  for (const auto& it : items) {
    MissingItem mi;
    if (it.is_string()) {
      mi.description = it.get<std::string>();
    } else if (it.is_object() && it.contains("description") && it["description"].is_string()) {
      mi.description = it["description"].get<std::string>();
      std::vector<std::size_t> idx;
      if (it.contains("evidence_sentences") && it["evidence_sentences"].is_array()) {
        for (const auto& v : it["evidence_sentences"])
          if (v.is_number_integer() && v.get<long long>() >= 0) idx.push_back(v.get<std::size_t>());
      } else if (it.contains("evidence_span") && it["evidence_span"].is_array() &&
                 it["evidence_span"].size() == 2) {
        const auto a = it["evidence_span"][0].get<long long>();
        const auto b = it["evidence_span"][1].get<long long>();
        if (a >= 0 && b > a) {
          idx.push_back(static_cast<std::size_t>(a));
          idx.push_back(static_cast<std::size_t>(b - 1));
        }
      }
      if (!idx.empty()) {
        const auto [lo, hi] = std::minmax_element(idx.begin(), idx.end());
        if (*hi < doc.sentence_count()) mi.evidence_span = SentenceSpan{*lo, *hi + 1};
      }
    } else {
      continue;
    }
    if (text::trim(mi.description).empty()) continue;
    r.missing.push_back(std::move(mi));
  }
  r.needs_completion = j.value("needs_completion", !r.missing.empty());
  if (r.missing.empty()) r.needs_completion = false;
  return r;
}

// ---------------------------------------------------------------------------
// Agents

inline QuestionOutline generate_outline(const Generator& gen, const Document& doc,
                                        const SamplingParams& params = {}) {
  if (doc.sentence_count() == 0) throw ValidationError("generate_outline: empty document");
  SamplingParams one = params;
  one.n = 1;
  QuestionOutline out;
  for (int attempt = 0; attempt < 2; ++attempt) {
    const auto raw = qchunk::generate_n(gen, prompts::outline_prompt(doc, attempt > 0), one).front();
    out.raw_outputs.push_back(raw);
    out.questions = parse_outline(raw);
    if (!out.questions.empty()) return out;
  }
  throw ParseError("outline: no parseable questions after retry");
}

inline CandidateSet sample_candidates(const Generator& gen, const Document& doc,
                                      const QuestionOutline& outline, std::size_t p,
                                      SamplingParams params,
                                      std::size_t target_tokens = kDefaultChunkTokens) {
  if (p == 0) throw ValidationError("sample_candidates: p must be >= 1");
  params.n = p;
  CandidateSet set;
  set.sampling = params;
  set.raw_outputs = qchunk::generate_n(gen, prompts::segment_prompt(doc, outline.questions, target_tokens), params);
  for (const auto& raw : set.raw_outputs) {
    try {
      auto cand = parse_segmenter_output(raw, doc);
      if (std::find(set.candidates.begin(), set.candidates.end(), cand) == set.candidates.end())
        set.candidates.push_back(std::move(cand));
    } catch (const Error& e) {
      set.parse_errors.emplace_back(e.what());
    }
  }
  if (set.candidates.empty()) {
    set.candidates.push_back(sentence_window(doc, kDefaultChunkTokens));
    set.fallback = true;
  }
  return set;
}

// Scores closer than this count as tied.
inline constexpr double kTieTolerance = 1e-12;

// Index of the highest phi_cs among scored entries; ties go to the lowest
// index.
inline std::optional<std::size_t> argmax_phi_cs(
    const std::vector<std::optional<ScoreBreakdown>>& scores) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!scores[i]) continue;
    if (!best || scores[i]->phi_cs > scores[*best]->phi_cs + kTieTolerance) best = i;
  }
  return best;
}

// Scores every candidate; a candidate whose scoring fails is excluded with
// its reason.
inline Selection select_best(const CandidateSet& set, const TokenScorer& scorer,
                             const Embedder& embedder, double lambda = kDefaultLambda,
                             double alpha = kDefaultAlpha, std::size_t parallelism = 1) {
  if (set.candidates.empty()) throw ValidationError("select_best: no candidates");
  validate_weights(lambda, alpha);
  Selection sel;
  const std::size_t n = set.candidates.size();
  sel.scores.resize(n);
  sel.failures.resize(n);
  parallel_for(n, parallelism, [&](std::size_t i) {
    try {
      sel.scores[i] = chunk_score(set.candidates[i], scorer, embedder, lambda, alpha);
    } catch (const Error& e) {
      sel.failures[i] = e.what();
    }
  });
  const auto best = argmax_phi_cs(sel.scores);
  if (!best) throw Error("select_best: every candidate failed to score: " + sel.failures.front());
  std::vector<ScoreBreakdown> ok;
  for (const auto& s : sel.scores)
    if (s) ok.push_back(*s);
  sel.selected_index = *best;
  const auto norm = normalized_scores(ok, lambda);
  for (std::size_t i = 0, j = 0; i < n; ++i)
    sel.normalized.push_back(sel.scores[i] ? norm[j++] : 0.0);
  return sel;
}

// Sentence range shown to the reviewer: the whole document when it fits in
// `budget_tokens`, otherwise a window grown outward from the chunk.
inline SentenceSpan review_window(const Document& doc, const Chunk& chunk,
                                  std::size_t budget_tokens) {
  auto tokens = [&](std::size_t i) {
    return text::count_tokens(doc.sentences[i].content, text::TokenRule::cjk_char);
  };
  std::size_t total = 0;
  for (std::size_t i = 0; i < doc.sentence_count(); ++i) total += tokens(i);
  if (budget_tokens == 0 || total <= budget_tokens) return {0, doc.sentence_count()};
  SentenceSpan w{chunk.start_sentence, chunk.end_sentence};
  std::size_t used = 0;
  for (std::size_t i = w.first; i < w.last; ++i) used += tokens(i);
  bool grew = true;
  while (grew) {
    grew = false;
    if (w.first > 0 && used + tokens(w.first - 1) <= budget_tokens) {
      used += tokens(--w.first);
      grew = true;
    }
    if (w.last < doc.sentence_count() && used + tokens(w.last) <= budget_tokens) {
      used += tokens(w.last++);
      grew = true;
    }
  }
  return w;
}

inline ReviewReport review_integrity(const Generator& gen, const Chunk& chunk,
                                     std::size_t chunk_index, const Document& doc,
                                     const SamplingParams& params = {},
                                     std::size_t budget_tokens = 0) {
  const auto w = review_window(doc, chunk, budget_tokens);
  const auto prompt = prompts::review_prompt(doc, chunk, w.first, w.last);
  SamplingParams one = params;
  one.n = 1;
  std::vector<std::string> raws;
  for (int attempt = 0;; ++attempt) {
    raws.push_back(qchunk::generate_n(gen, prompt, one).front());
    try {
      auto r = parse_review(raws.back(), chunk_index, doc);
      r.raw_outputs = std::move(raws);
      return r;
    } catch (const ParseError&) {
      if (attempt >= 1) throw;
    }
  }
}

inline std::string span_text(const Document& doc, const SentenceSpan& s) {
  std::string out;
  for (std::size_t i = s.first; i < s.last; ++i) {
    if (!out.empty()) out += " ";
    out += doc.sentences[i].content;
  }
  return out;
}

// Fraction of the description's tokens found, in order, in `evidence`.
inline double containment(std::string_view description, std::string_view evidence) {
  return rouge_l(evidence, description).recall;
}

inline Verification verify_missing_items(const ReviewReport& report, const Document& doc,
                                         const Chunk& chunk) {
  Verification v;
  auto keep = [&](MissingItem item, SentenceSpan span) {
    for (const auto& k : v.kept)
      if (k.evidence_span == span) return v.dropped.push_back({std::move(item), "duplicate evidence"});
    item.evidence_span = span;
    item.grounded = true;
    v.kept.push_back(std::move(item));
  };
  for (const auto& item : report.missing) {
    if (item.evidence_span) {
      const auto span = *item.evidence_span;
      if (span.last > doc.sentence_count() || span.first >= span.last) {
        v.dropped.push_back({item, "span out of range"});
      } else if (span.overlaps(chunk)) {
        v.dropped.push_back({item, "span overlaps chunk"});
      } else if (containment(item.description, span_text(doc, span)) >= kGroundingThreshold) {
        keep(item, span);
      } else {
        v.dropped.push_back({item, "ungrounded"});
      }
      continue;
    }
    std::optional<std::size_t> best;
    double best_score = -1.0;
    for (std::size_t i = 0; i < doc.sentence_count(); ++i) {
      if (chunk.contains_sentence(i)) continue;
      const double s = containment(item.description, doc.sentences[i].content);
      if (s > best_score) {
        best_score = s;
        best = i;
      }
    }
    if (best && best_score >= kGroundingThreshold) keep(item, {*best, *best + 1});
    else v.dropped.push_back({item, "ungrounded"});
  }
  return v;
}

// Share of the chunk's sentences recoverable from `rewritten` at ROUGE-L
// recall >= 0.8.
inline double coverage_ratio(const Document& doc, const Chunk& chunk, std::string_view rewritten) {
  const auto cand = text::normalized_tokens(rewritten);
  std::size_t covered = 0, counted = 0;
  for (std::size_t i = chunk.start_sentence; i < chunk.end_sentence; ++i) {
    const auto ref = text::normalized_tokens(doc.sentences[i].content);
    if (ref.empty()) continue;
    ++counted;
    if (rouge_l(std::span<const std::string>(cand), std::span<const std::string>(ref)).recall >=
        kCoverageRecall)
      ++covered;
  }
  return counted == 0 ? 1.0 : static_cast<double>(covered) / static_cast<double>(counted);
}

inline CompletedChunk complete_chunk(const Generator& gen, const Chunk& chunk, const Document& doc,
                                     const std::vector<MissingItem>& verified,
                                     const SamplingParams& params = {}) {
  if (verified.empty()) throw ValidationError("complete_chunk: nothing to integrate");
  std::vector<std::string> evidence;
  for (const auto& item : verified) {
    if (!item.grounded || !item.evidence_span)
      throw ValidationError("complete_chunk: supplement is not grounded");
    evidence.push_back(span_text(doc, *item.evidence_span));
  }
  CompletedChunk out{chunk, verified, {}, 0.0, false, {}};
  const auto prompt = prompts::complete_prompt(chunk, evidence);
  SamplingParams one = params;
  one.n = 1;
  for (int attempt = 0; attempt < 2; ++attempt) {
    auto raw = qchunk::generate_n(gen, prompt, one).front();
    out.raw_outputs.push_back(raw);
    std::string candidate(text::trim(raw));
    const double cov = coverage_ratio(doc, chunk, candidate);
    if (cov >= kCoverageGate) {
      out.rewritten_text = std::move(candidate);
      out.coverage_ratio = cov;
      return out;
    }
  }
  out.rewritten_text = std::string(text::trim(chunk.text));
  for (const auto& e : evidence) out.rewritten_text += " " + e;
  out.coverage_ratio = coverage_ratio(doc, chunk, out.rewritten_text);
  out.fallback_concat = true;
  return out;
}

// ---------------------------------------------------------------------------
// Orchestration

inline PipelineResult run_pipeline(const Document& doc, const PipelineConfig& cfg) {
  const auto& be = cfg.backends;
  if (!be.generator || !be.embedder || !be.scorer_for)
    throw ConfigError("pipeline backends are incomplete");
  if (doc.sentence_count() == 0) throw ValidationError("run_pipeline: empty document");
  validate_weights(cfg.lambda, cfg.alpha);

  PipelineResult res;
  res.doc_id = doc.id;
  res.document_text = doc.text;
  res.run_meta = {cfg.seed, be.kind, prompts::template_hash(), std::string(prompts::kVersion), {}};

  SamplingParams params = cfg.sampling;
  params.seed = cfg.seed;
  std::string stage;
  auto timed = [&](const std::string& name, auto&& fn) {
    stage = name;
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    if (cfg.record_timings)
      res.run_meta.timings_ms.emplace_back(
          name, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  };

  try {
    const auto scorer = be.scorer_for(doc);
    const std::size_t budget =
        cfg.review_context_tokens ? cfg.review_context_tokens : scorer->max_context_tokens();

    timed("outline", [&] { res.outline = generate_outline(*be.generator, doc, params); });
    timed("segment", [&] {
      res.candidates = sample_candidates(*be.generator, doc, res.outline, cfg.candidates_p, params,
                                         cfg.chunk_target_tokens);
    });
    timed("select", [&] {
      res.selection = select_best(res.candidates, *scorer, *be.embedder, cfg.lambda, cfg.alpha,
                                  cfg.parallelism);
    });
    const Partition& chosen = res.candidates.candidates[res.selection.selected_index];
    const auto& chunks = chosen.chunks();

    timed("review", [&] {
      res.reviews.resize(chunks.size());
      parallel_for(chunks.size(), cfg.parallelism, [&](std::size_t i) {
        res.reviews[i] = review_integrity(*be.generator, chunks[i], i, doc, params, budget);
      });
    });
    timed("complete", [&] {
      std::vector<FinalChunk> finals(chunks.size());
      parallel_for(chunks.size(), cfg.parallelism, [&](std::size_t i) {
        finals[i].chunk = chunks[i];
        if (!res.reviews[i].needs_completion) return;
        auto verified = verify_missing_items(res.reviews[i], doc, chunks[i]);
        finals[i].dropped = std::move(verified.dropped);
        if (verified.kept.empty()) return;
        finals[i].completion = complete_chunk(*be.generator, chunks[i], doc, verified.kept, params);
      });
      res.completed = std::move(finals);
    });
    if (cfg.rescore_completed) {
      timed("rescore", [&] {
        std::vector<std::string> texts;
        for (const auto& f : res.completed) texts.push_back(f.text());
        res.completed_score = chunk_score(texts, *scorer, *be.embedder, cfg.lambda, cfg.alpha);
      });
    }
  } catch (const BackendError& e) {
    throw PipelineError(stage.empty() ? "setup" : stage, e.what(), std::move(res), true);
  } catch (const Error& e) {
    throw PipelineError(stage.empty() ? "setup" : stage, e.what(), std::move(res));
  }
  return res;
}

}  // namespace qchunk
