#pragma once

// Documents, sentence inventories and partitions.
//
// A partition is expressed as sentence-index boundaries: the exclusive right
// edge of every chunk except the last. Chunk byte ranges are derived from
// sentence offsets; bytes between two sentences belong to the earlier chunk,
// and leading/trailing bytes of the text belong to the first/last chunk, so
// chunk texts always concatenate back to the document text.

#include <cstddef>
#include <fstream>
#include <istream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qchunk/errors.hpp"
#include "qchunk/text.hpp"

namespace qchunk {

struct Sentence {
  std::size_t index = 0;
  std::size_t start = 0;  // byte offset into Document::text
  std::size_t end = 0;    // exclusive
  std::string content;
};

struct Document {
  std::string id;
  std::string text;
  std::vector<Sentence> sentences;
  nlohmann::json meta;

  std::size_t sentence_count() const { return sentences.size(); }
};

struct Chunk {
  std::size_t start_sentence = 0;
  std::size_t end_sentence = 0;  // exclusive
  std::string text;

  std::size_t sentence_count() const { return end_sentence - start_sentence; }
  bool contains_sentence(std::size_t i) const {
    return i >= start_sentence && i < end_sentence;
  }
};

class Partition {
 public:
  const std::string& doc_id() const { return doc_id_; }
  const std::vector<std::size_t>& boundaries() const { return boundaries_; }
  const std::vector<Chunk>& chunks() const { return chunks_; }
  std::size_t size() const { return chunks_.size(); }

  std::vector<std::string> chunk_texts() const {
    std::vector<std::string> out;
    out.reserve(chunks_.size());
    for (const auto& c : chunks_) out.push_back(c.text);
    return out;
  }

  friend bool operator==(const Partition& a, const Partition& b) {
    return a.doc_id_ == b.doc_id_ && a.boundaries_ == b.boundaries_;
  }

 private:
  friend Partition validate_partition(const Document&,
                                      std::vector<std::size_t>);
  std::string doc_id_;
  std::vector<std::size_t> boundaries_;
  std::vector<Chunk> chunks_;
};

namespace detail {

// Length of a terminal punctuation mark at `pos`, 0 if none. `cjk` is set
// for full-width marks, which end a sentence regardless of what follows.
inline std::size_t terminal_at(std::string_view s, std::size_t pos, bool& cjk) {
  const auto cp = text::decode_utf8(s, pos);
  cjk = cp.value == U'。' || cp.value == U'！' || cp.value == U'？';
  if (cjk || cp.value == U'.' || cp.value == U'!' || cp.value == U'?')
    return cp.length;
  return 0;
}

}  // namespace detail

// Rule-based splitting on . ! ? (followed by whitespace or end of text) and
// 。！？ (unconditionally). Runs of terminal marks stay with their sentence.
// There is no abbreviation list.
inline std::vector<Sentence> split_sentences(std::string_view s) {
  std::vector<Sentence> out;
  auto emit = [&](std::size_t b, std::size_t e) {
    auto t = text::trim(s.substr(b, e - b));
    if (t.empty()) return;
    const std::size_t start = static_cast<std::size_t>(t.data() - s.data());
    out.push_back({out.size(), start, start + t.size(), std::string(t)});
  };

  std::size_t begin = 0;
  std::size_t i = 0;
  while (i < s.size()) {
    bool cjk = false;
    std::size_t len = detail::terminal_at(s, i, cjk);
    if (len == 0) {
      i += text::decode_utf8(s, i).length;
      continue;
    }
    std::size_t end = i + len;
    bool any_cjk = cjk;
    for (std::size_t more; end < s.size() && (more = detail::terminal_at(s, end, cjk)) > 0;) {
      any_cjk = any_cjk || cjk;
      end += more;
    }
    const bool at_break =
        end == s.size() || text::is_space(static_cast<unsigned char>(s[end]));
    if (any_cjk || at_break) {
      emit(begin, end);
      begin = end;
    }
    i = end;
  }
  emit(begin, s.size());
  return out;
}

inline Document make_document(std::string id, std::string text,
                              nlohmann::json meta = nullptr) {
  Document doc{std::move(id), std::move(text), {}, std::move(meta)};
  doc.sentences = split_sentences(doc.text);
  return doc;
}

// Validates `boundaries` against `doc` and derives the chunks.
inline Partition validate_partition(const Document& doc,
                                    std::vector<std::size_t> boundaries) {
  const std::size_t n = doc.sentence_count();
  if (n == 0)
    throw ValidationError("document '" + doc.id + "' has no sentences");
  for (std::size_t i = 0; i < boundaries.size(); ++i) {
    const auto b = boundaries[i];
    if (b == 0 || b >= n)
      throw ValidationError("boundary " + std::to_string(b) +
                            " out of range (0, " + std::to_string(n) +
                            ") at position " + std::to_string(i));
    if (i > 0 && b <= boundaries[i - 1])
      throw ValidationError("non-increasing at position " + std::to_string(i));
  }

  Partition p;
  p.doc_id_ = doc.id;
  p.boundaries_ = std::move(boundaries);
  std::size_t first = 0;
  for (std::size_t k = 0; k <= p.boundaries_.size(); ++k) {
    const bool last = k == p.boundaries_.size();
    const std::size_t stop = last ? n : p.boundaries_[k];
    const std::size_t byte_begin = k == 0 ? 0 : doc.sentences[first].start;
    const std::size_t byte_end = last ? doc.text.size() : doc.sentences[stop].start;
    p.chunks_.push_back(
        {first, stop, doc.text.substr(byte_begin, byte_end - byte_begin)});
    first = stop;
  }
  return p;
}

inline Partition whole_document(const Document& doc) {
  return validate_partition(doc, {});
}

// Parses corpus JSONL: one {"id", "text", optional "meta"} object per line.
// `source` names the stream in error messages. Blank lines are skipped.
inline std::vector<Document> parse_jsonl(std::istream& in,
                                         const std::string& source = "<input>") {
  std::vector<Document> docs;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim(line).empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ParseError(where + ": expected a JSON object");
    nlohmann::json meta = j.contains("meta") ? j["meta"] : nlohmann::json();
    const std::string ctx = meta.is_null() ? "" : " meta=" + meta.dump();
    if (!j.contains("id") || !j["id"].is_string())
      throw ParseError(where + ": missing string field \"id\"" + ctx);
    if (!j.contains("text") || !j["text"].is_string())
      throw ParseError(where + ": missing string field \"text\"" + ctx);
    auto id = j["id"].get<std::string>();
    auto body = j["text"].get<std::string>();
    if (!seen.insert(id).second)
      throw ValidationError(where + ": duplicate id '" + id + "'" + ctx);
    Document doc = make_document(std::move(id), std::move(body), std::move(meta));
    if (doc.sentences.empty())
      throw ValidationError(where + ": empty text for id '" + doc.id + "'" + ctx);
    docs.push_back(std::move(doc));
  }
  return docs;
}

inline std::vector<Document> load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return parse_jsonl(in, path);
}

}  // namespace qchunk
