#pragma once

// Prompt templates for the four agents. Each prompt starts with a role tag
// ([OUTLINE], [SEGMENT], [REVIEW], [COMPLETE]) followed by instructions and
// `### NAME` delimited sections. Output parsers depend on the reply formats
// requested here, so `template_hash()` is recorded with every run.

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qchunk/corpus.hpp"
#include "qchunk/text.hpp"

namespace qchunk::prompts {

inline constexpr std::string_view kVersion = "qchunk-prompts/1";

inline constexpr std::string_view kOutline =
    "You are a domain expert studying the document below before anyone asks "
    "you about it. Write a numbered list of questions that probe its "
    "motivation, core assumptions, methodology, key conclusions and the "
    "logical chains that connect them. Each line holds exactly one question "
    "and ends with a question mark. Output only the list.";

inline constexpr std::string_view kOutlineReminder =
    "Reply ONLY with lines of the form `1. <question>?`, one question per "
    "line, no other text.";

inline constexpr std::string_view kSegment =
    "Split the numbered sentences into chunks so that each chunk is an "
    "independent semantic unit that answers a coherent subset of the "
    "question outline. Place boundaries where the topic shifts. Aim for "
    "roughly TARGET_TOKENS tokens per chunk. Reply with `boundaries: [i, j, "
    "...]` listing the sentence numbers that START a new chunk (never 0), or "
    "with `no split` if the document is a single unit.";

inline constexpr std::string_view kReview =
    "Review the chunk as if it were read in isolation. Identify knowledge it "
    "needs but lacks: missing term definitions, missing background "
    "knowledge, and broken context dependencies (references to things "
    "explained elsewhere). Only report information that is explicitly stated "
    "in the document outside the chunk; never extrapolate or invent. If the "
    "chunk is understandable on its own reply `COMPLETE`. Otherwise reply "
    "with JSON: {\"needs_completion\": true, \"missing\": [{\"description\": "
    "\"<the missing fact, quoted from the document>\", "
    "\"evidence_sentences\": [<sentence numbers>]}]}";

inline constexpr std::string_view kComplete =
    "Rewrite the chunk so that it integrates the evidence below naturally, "
    "placing each piece where it best explains the chunk. Keep the content "
    "of every original sentence, keep the original style, and add nothing "
    "beyond the evidence. Output only the rewritten chunk.";

inline std::string template_hash() {
  std::uint64_t h = text::fnv1a64(kVersion);
  for (auto t : {kOutline, kOutlineReminder, kSegment, kReview, kComplete})
    h = text::fnv1a64(t, h);
  return text::hex64(h);
}

namespace detail {

inline void numbered_sentences(std::string& out, const Document& doc,
                               std::size_t first, std::size_t last) {
  for (std::size_t i = first; i < last; ++i)
    out += "[" + std::to_string(i) + "] " +
           text::single_line(doc.sentences[i].content) + "\n";
}

}  // namespace detail

inline std::string outline_prompt(const Document& doc, bool with_reminder) {
  std::string out = "[OUTLINE] ";
  out += kVersion;
  out += "\n";
  out += kOutline;
  out += "\n";
  if (with_reminder) {
    out += kOutlineReminder;
    out += "\n";
  }
  out += "### DOCUMENT\n" + doc.text + "\n### END\n";
  return out;
}

inline std::string segment_prompt(const Document& doc,
                                  const std::vector<std::string>& questions,
                                  std::size_t target_tokens) {
  std::string instr(kSegment);
  instr.replace(instr.find("TARGET_TOKENS"), 13, std::to_string(target_tokens));
  std::string out = "[SEGMENT] ";
  out += kVersion;
  out += "\n" + instr + "\n";
  out += "### TARGET_TOKENS " + std::to_string(target_tokens) + "\n";
  out += "### OUTLINE\n";
  for (std::size_t i = 0; i < questions.size(); ++i)
    out += std::to_string(i + 1) + ". " + text::single_line(questions[i]) + "\n";
  out += "### SENTENCES\n";
  detail::numbered_sentences(out, doc, 0, doc.sentence_count());
  out += "### END\n";
  return out;
}

// `window_first`/`window_last` bound the document sentences shown.
inline std::string review_prompt(const Document& doc, const Chunk& chunk,
                                 std::size_t window_first,
                                 std::size_t window_last) {
  std::string out = "[REVIEW] ";
  out += kVersion;
  out += "\n";
  out += kReview;
  out += "\n### CHUNK_RANGE " + std::to_string(chunk.start_sentence) + " " +
         std::to_string(chunk.end_sentence) + "\n";
  out += "### CHUNK\n" + text::single_line(chunk.text) + "\n";
  out += "### SENTENCES\n";
  detail::numbered_sentences(out, doc, window_first, window_last);
  out += "### END\n";
  return out;
}

inline std::string complete_prompt(const Chunk& chunk,
                                   const std::vector<std::string>& evidence) {
  std::string out = "[COMPLETE] ";
  out += kVersion;
  out += "\n";
  out += kComplete;
  out += "\n### CHUNK\n";
  out += text::trim(chunk.text);
  out += "\n### EVIDENCE\n";
  for (const auto& e : evidence) out += "- " + text::single_line(e) + "\n";
  out += "### END\n";
  return out;
}

// Leading [TAG] of a prompt, empty if absent.
inline std::string_view tag_of(std::string_view prompt) {
  if (prompt.empty() || prompt.front() != '[') return {};
  const auto close = prompt.find(']');
  return close == std::string_view::npos ? std::string_view{}
                                         : prompt.substr(1, close - 1);
}

// Body of section `### name` up to the next `### ` line. The rest of the
// header line is returned through `header_tail` when requested.
inline std::optional<std::string_view> section(
    std::string_view prompt, std::string_view name,
    std::string_view* header_tail = nullptr) {
  const std::string marker = "\n### " + std::string(name);
  std::size_t pos = 0;
  while ((pos = prompt.find(marker, pos)) != std::string_view::npos) {
    const std::size_t after = pos + marker.size();
    if (after == prompt.size() || prompt[after] == '\n' || prompt[after] == ' ')
      break;
    pos = after;
  }
  if (pos == std::string_view::npos) return std::nullopt;
  const std::size_t header_end = prompt.find('\n', pos + 1);
  if (header_end == std::string_view::npos) return std::nullopt;
  if (header_tail)
    *header_tail = text::trim(
        prompt.substr(pos + marker.size(), header_end - pos - marker.size()));
  const std::size_t body = header_end + 1;
  std::size_t stop = prompt.find("\n### ", header_end);
  if (stop == std::string_view::npos) stop = prompt.size();
  else stop += 1;
  if (stop < body) return std::string_view{};
  auto v = prompt.substr(body, stop - body);
  if (!v.empty() && v.back() == '\n') v.remove_suffix(1);
  return v;
}

}  // namespace qchunk::prompts
