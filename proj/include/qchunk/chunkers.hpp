#pragma once

// Baseline chunkers. All of them cut at sentence boundaries so their output
// is a Partition of the shared sentence inventory.

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "qchunk/corpus.hpp"
#include "qchunk/errors.hpp"
#include "qchunk/model_clients.hpp"
#include "qchunk/text.hpp"

namespace qchunk {

enum class Strategy { fixed, sentence, semantic };

inline constexpr std::size_t kDefaultChunkTokens = 178;
inline constexpr double kDefaultSimilarityThreshold = 0.75;

struct ChunkerConfig {
  Strategy strategy = Strategy::sentence;
  // Characters for `fixed`, tokens for `sentence`.
  std::size_t target_len = kDefaultChunkTokens;
  double similarity_threshold = kDefaultSimilarityThreshold;
  text::TokenRule token_rule = text::TokenRule::whitespace;

  void validate() const {
    if (target_len == 0) throw ConfigError("target_len must be positive");
    if (strategy == Strategy::semantic &&
        !(similarity_threshold >= -1.0 && similarity_threshold <= 1.0))
      throw ConfigError("similarity_threshold must lie in [-1, 1]");
  }
};

// Name recorded in output metadata.
inline std::string strategy_label(Strategy s) {
  switch (s) {
    case Strategy::fixed: return "fixed(sentence-granular)";
    case Strategy::sentence: return "sentence";
    case Strategy::semantic: return "semantic";
  }
  return "unknown";
}

// Greedy: close a chunk once its sentences reach `target_chars` code points.
inline Partition fixed_length(const Document& doc, std::size_t target_chars) {
  if (target_chars == 0) throw ValidationError("fixed_length: target must be >= 1");
  std::vector<std::size_t> bounds;
  std::size_t acc = 0;
  for (std::size_t i = 0; i + 1 < doc.sentence_count(); ++i) {
    acc += text::codepoint_count(doc.sentences[i].content);
    if (acc >= target_chars) {
      bounds.push_back(i + 1);
      acc = 0;
    }
  }
  return validate_partition(doc, std::move(bounds));
}

// Greedy by token count. When a sentence straddles the target, the cut goes
// before or after it, whichever leaves the chunk closer to the target (ties
// go before).
inline Partition sentence_window(const Document& doc, std::size_t target_tokens,
                                 text::TokenRule rule = text::TokenRule::whitespace) {
  if (target_tokens == 0) throw ValidationError("sentence_window: target must be >= 1");
  const auto target = static_cast<double>(target_tokens);
  std::vector<std::size_t> bounds;
  std::size_t acc = 0;
  const std::size_t n = doc.sentence_count();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = text::count_tokens(doc.sentences[i].content, rule);
    if (acc + len < target_tokens) {
      acc += len;
      continue;
    }
    const double before = std::abs(static_cast<double>(acc) - target);
    const double after = std::abs(static_cast<double>(acc + len) - target);
    if (acc > 0 && before <= after) {
      bounds.push_back(i);  // cut before i; i opens the next chunk
      acc = len;
      if (acc >= target_tokens && i + 1 < n) {
        bounds.push_back(i + 1);
        acc = 0;
      }
    } else if (i + 1 < n) {
      bounds.push_back(i + 1);
      acc = 0;
    }
  }
  return validate_partition(doc, std::move(bounds));
}

// Cosine similarity of consecutive sentence embeddings; a boundary follows
// sentence i whenever cos(z_i, z_{i+1}) < threshold.
inline Partition semantic_similarity(const Document& doc, const Embedder& embedder,
                                     double threshold = kDefaultSimilarityThreshold) {
  if (!(threshold >= -1.0 && threshold <= 1.0))
    throw ConfigError("similarity threshold must lie in [-1, 1]");
  if (doc.sentence_count() == 0)
    throw ValidationError("semantic_similarity: document has no sentences");
  std::vector<std::string> texts;
  for (const auto& s : doc.sentences) texts.push_back(s.content);
  const auto z = embed_batch(embedder, texts);
  std::vector<std::size_t> bounds;
  for (std::size_t i = 0; i + 1 < texts.size(); ++i) {
    const double cos = z.data.col(static_cast<Eigen::Index>(i))
                           .dot(z.data.col(static_cast<Eigen::Index>(i + 1)));
    if (cos < threshold) bounds.push_back(i + 1);
  }
  return validate_partition(doc, std::move(bounds));
}

inline Partition run_chunker(const Document& doc, const ChunkerConfig& cfg,
                             const Embedder* embedder = nullptr) {
  cfg.validate();
  switch (cfg.strategy) {
    case Strategy::fixed: return fixed_length(doc, cfg.target_len);
    case Strategy::sentence: return sentence_window(doc, cfg.target_len, cfg.token_rule);
    case Strategy::semantic:
      if (!embedder) throw ConfigError("semantic chunking needs an embedder");
      return semantic_similarity(doc, *embedder, cfg.similarity_threshold);
  }
  throw ConfigError("unknown strategy");
}

}  // namespace qchunk
