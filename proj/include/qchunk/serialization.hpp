#pragma once

// JSON forms of the public result types. Field names are snake_case and
// mirror the structs; every writer has a matching reader so outputs can be
// reloaded and compared.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qchunk/corpus.hpp"
#include "qchunk/errors.hpp"
#include "qchunk/metrics.hpp"
#include "qchunk/pipeline.hpp"

namespace qchunk {

using nlohmann::json;

inline json to_json(const ScoreBreakdown& s) {
  return {{"phi_li", s.phi_li},
          {"phi_sd", s.phi_sd},
          {"phi_cs", s.phi_cs},
          {"lambda", s.lambda},
          {"alpha", s.alpha},
          {"k", s.k},
          {"per_boundary_li", s.per_boundary_li},
          {"raw_li_ratios", s.raw_li_ratios},
          {"eigenvalues", s.eigenvalues}};
}

inline ScoreBreakdown score_breakdown_from_json(const json& j) {
  try {
    ScoreBreakdown s;
    s.phi_li = j.at("phi_li").get<double>();
    s.phi_sd = j.at("phi_sd").get<double>();
    s.phi_cs = j.at("phi_cs").get<double>();
    s.lambda = j.at("lambda").get<double>();
    s.alpha = j.at("alpha").get<double>();
    s.k = j.at("k").get<std::size_t>();
    s.per_boundary_li = j.value("per_boundary_li", std::vector<double>{});
    s.raw_li_ratios = j.value("raw_li_ratios", std::vector<double>{});
    s.eigenvalues = j.value("eigenvalues", std::vector<double>{});
    return s;
  } catch (const json::exception& e) {
    throw ParseError(std::string("score breakdown: ") + e.what());
  }
}

inline json to_json(const Chunk& c) {
  return {{"text", c.text}, {"start_sentence", c.start_sentence}, {"end_sentence", c.end_sentence}};
}

inline Chunk chunk_from_json(const json& j) {
  return {j.at("start_sentence").get<std::size_t>(), j.at("end_sentence").get<std::size_t>(),
          j.at("text").get<std::string>()};
}

// One line of chunker output.
inline json partition_line(const Partition& p, const std::string& strategy) {
  json chunks = json::array();
  for (const auto& c : p.chunks()) chunks.push_back(to_json(c));
  return {{"doc_id", p.doc_id()},
          {"strategy", strategy},
          {"boundaries", p.boundaries()},
          {"chunks", chunks}};
}

inline json to_json(const SamplingParams& s) {
  json j = {{"temperature", s.temperature}, {"top_p", s.top_p}, {"n", s.n}};
  j["seed"] = s.seed ? json(*s.seed) : json(nullptr);
  return j;
}

inline SamplingParams sampling_from_json(const json& j, SamplingParams base = {}) {
  base.temperature = j.value("temperature", base.temperature);
  base.top_p = j.value("top_p", base.top_p);
  base.n = j.value("n", base.n);
  if (j.contains("seed") && !j["seed"].is_null()) base.seed = j["seed"].get<std::uint64_t>();
  return base;
}

inline json to_json(const MissingItem& m) {
  json j = {{"description", m.description}, {"grounded", m.grounded}};
  j["evidence_span"] = m.evidence_span
                           ? json::array({m.evidence_span->first, m.evidence_span->last})
                           : json(nullptr);
  return j;
}

inline MissingItem missing_item_from_json(const json& j) {
  MissingItem m;
  m.description = j.at("description").get<std::string>();
  m.grounded = j.at("grounded").get<bool>();
  if (const auto& s = j.at("evidence_span"); !s.is_null())
    m.evidence_span = SentenceSpan{s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()};
  return m;
}

namespace detail {

inline json items_json(const std::vector<MissingItem>& items) {
  json a = json::array();
  for (const auto& m : items) a.push_back(to_json(m));
  return a;
}

inline std::vector<MissingItem> items_from(const json& a) {
  std::vector<MissingItem> out;
  for (const auto& m : a) out.push_back(missing_item_from_json(m));
  return out;
}

inline json dropped_json(const std::vector<DroppedItem>& items) {
  json a = json::array();
  for (const auto& d : items) a.push_back({{"item", to_json(d.item)}, {"reason", d.reason}});
  return a;
}

}  // namespace detail

inline json to_json(const PipelineResult& r) {
  json cands = json::array();
  for (const auto& p : r.candidates.candidates) cands.push_back(p.boundaries());
  json scores = json::array();
  for (const auto& s : r.selection.scores) scores.push_back(s ? to_json(*s) : json(nullptr));
  json reviews = json::array();
  json review_raw = json::array();
  for (const auto& rv : r.reviews) {
    reviews.push_back({{"chunk_index", rv.chunk_index},
                       {"needs_completion", rv.needs_completion},
                       {"missing", detail::items_json(rv.missing)}});
    review_raw.push_back(rv.raw_outputs);
  }
  json completed = json::array();
  json complete_raw = json::array();
  for (const auto& f : r.completed) {
    json e = {{"chunk", to_json(f.chunk)}, {"dropped", detail::dropped_json(f.dropped)}};
    if (f.completion) {
      const auto& c = *f.completion;
      e["kind"] = "completed";
      e["supplements"] = detail::items_json(c.supplements);
      e["rewritten_text"] = c.rewritten_text;
      e["coverage_ratio"] = c.coverage_ratio;
      e["fallback_concat"] = c.fallback_concat;
      complete_raw.push_back(c.raw_outputs);
    } else {
      e["kind"] = "chunk";
      complete_raw.push_back(json::array());
    }
    completed.push_back(std::move(e));
  }
  json meta = {{"seed", r.run_meta.seed},
               {"backend", r.run_meta.backend},
               {"template_hash", r.run_meta.template_hash},
               {"prompt_version", r.run_meta.prompt_version}};
  if (!r.run_meta.timings_ms.empty()) {
    json t = json::object();
    for (const auto& [k, v] : r.run_meta.timings_ms) t[k] = v;
    meta["timings_ms"] = t;
  }
  json out = {
      {"doc_id", r.doc_id},
      {"document_text", r.document_text},
      {"outline", {{"questions", r.outline.questions}}},
      {"candidates",
       {{"boundaries", cands},
        {"sampling", to_json(r.candidates.sampling)},
        {"fallback", r.candidates.fallback},
        {"parse_errors", r.candidates.parse_errors}}},
      {"scores", scores},
      {"score_failures", r.selection.failures},
      {"normalized_scores", r.selection.normalized},
      {"selected_index", r.selection.selected_index},
      {"reviews", reviews},
      {"completed", completed},
      {"completed_score", r.completed_score ? to_json(*r.completed_score) : json(nullptr)},
      {"run_meta", meta},
      {"audit",
       {{"outline", r.outline.raw_outputs},
        {"segment", r.candidates.raw_outputs},
        {"review", review_raw},
        {"complete", complete_raw}}}};
  return out;
}

inline PipelineResult pipeline_result_from_json(const json& j) {
  try {
    PipelineResult r;
    r.doc_id = j.at("doc_id").get<std::string>();
    r.document_text = j.at("document_text").get<std::string>();
    const Document doc = make_document(r.doc_id, r.document_text);
    const auto& audit = j.at("audit");

    r.outline.questions = j.at("outline").at("questions").get<std::vector<std::string>>();
    r.outline.raw_outputs = audit.at("outline").get<std::vector<std::string>>();

    const auto& c = j.at("candidates");
    for (const auto& b : c.at("boundaries"))
      r.candidates.candidates.push_back(validate_partition(doc, b.get<std::vector<std::size_t>>()));
    r.candidates.sampling = sampling_from_json(c.at("sampling"));
    r.candidates.fallback = c.at("fallback").get<bool>();
    r.candidates.parse_errors = c.at("parse_errors").get<std::vector<std::string>>();
    r.candidates.raw_outputs = audit.at("segment").get<std::vector<std::string>>();

    for (const auto& s : j.at("scores"))
      r.selection.scores.push_back(s.is_null() ? std::nullopt
                                               : std::optional(score_breakdown_from_json(s)));
    r.selection.failures = j.at("score_failures").get<std::vector<std::string>>();
    r.selection.normalized = j.at("normalized_scores").get<std::vector<double>>();
    r.selection.selected_index = j.at("selected_index").get<std::size_t>();
    if (r.selection.selected_index >= r.candidates.candidates.size())
      throw ParseError("selected_index out of range");

    const auto& review_raw = audit.at("review");
    std::size_t i = 0;
    for (const auto& rv : j.at("reviews")) {
      ReviewReport rep;
      rep.chunk_index = rv.at("chunk_index").get<std::size_t>();
      rep.needs_completion = rv.at("needs_completion").get<bool>();
      rep.missing = detail::items_from(rv.at("missing"));
      rep.raw_outputs = review_raw.at(i++).get<std::vector<std::string>>();
      r.reviews.push_back(std::move(rep));
    }

    const auto& complete_raw = audit.at("complete");
    i = 0;
    for (const auto& e : j.at("completed")) {
      FinalChunk f;
      f.chunk = chunk_from_json(e.at("chunk"));
      for (const auto& d : e.at("dropped"))
        f.dropped.push_back({missing_item_from_json(d.at("item")), d.at("reason").get<std::string>()});
      const auto kind = e.at("kind").get<std::string>();
      if (kind == "completed") {
        CompletedChunk cc;
        cc.original = f.chunk;
        cc.supplements = detail::items_from(e.at("supplements"));
        cc.rewritten_text = e.at("rewritten_text").get<std::string>();
        cc.coverage_ratio = e.at("coverage_ratio").get<double>();
        cc.fallback_concat = e.at("fallback_concat").get<bool>();
        cc.raw_outputs = complete_raw.at(i).get<std::vector<std::string>>();
        f.completion = std::move(cc);
      } else if (kind != "chunk") {
        throw ParseError("unknown completed entry kind '" + kind + "'");
      }
      ++i;
      r.completed.push_back(std::move(f));
    }
    if (const auto& cs = j.at("completed_score"); !cs.is_null())
      r.completed_score = score_breakdown_from_json(cs);

    const auto& m = j.at("run_meta");
    r.run_meta.seed = m.at("seed").get<std::uint64_t>();
    r.run_meta.backend = m.at("backend").get<std::string>();
    r.run_meta.template_hash = m.at("template_hash").get<std::string>();
    r.run_meta.prompt_version = m.at("prompt_version").get<std::string>();
    if (m.contains("timings_ms"))
      for (const auto& [k, v] : m["timings_ms"].items())
        r.run_meta.timings_ms.emplace_back(k, v.get<double>());
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("pipeline result: ") + e.what());
  }
}

}  // namespace qchunk
