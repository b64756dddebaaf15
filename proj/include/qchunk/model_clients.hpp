#pragma once

// The three model capabilities the chunker consumes: token scoring,
// embedding and prompted generation. Backends implement the small virtual
// interfaces; the free functions below enforce the shared contracts
// (validation, normalization, empty-completion retry) so every backend gets
// them identically.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "qchunk/errors.hpp"

namespace qchunk {

struct SamplingParams {
  double temperature = 0.7;
  double top_p = 0.8;
  std::size_t n = 1;
  std::optional<std::uint64_t> seed;

  void validate() const {
    if (!(temperature >= 0.0) || !std::isfinite(temperature))
      throw ValidationError("temperature must be non-negative");
    if (!(top_p > 0.0 && top_p <= 1.0))
      throw ValidationError("top_p must lie in (0, 1]");
    if (n == 0) throw ValidationError("n must be positive");
  }
};

struct ScoredTokens {
  std::vector<double> logprobs;  // one per target token
  bool context_truncated = false;
};

class TokenScorer {
 public:
  virtual ~TokenScorer() = default;
  virtual std::size_t max_context_tokens() const = 0;
  // Natural-log probabilities of each target token given `context`.
  virtual ScoredTokens score(std::string_view context,
                             std::string_view target) const = 0;
};

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::size_t dimension() const = 0;
  // One raw (not necessarily normalized) vector per text.
  virtual std::vector<std::vector<double>> embed_raw(
      std::span<const std::string> texts) const = 0;
};

class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::vector<std::string> generate(std::string_view prompt,
                                            const SamplingParams& params) const = 0;
};

// d x K matrix of column embeddings.
struct EmbeddingMatrix {
  Eigen::MatrixXd data;

  std::size_t dim() const { return static_cast<std::size_t>(data.rows()); }
  std::size_t count() const { return static_cast<std::size_t>(data.cols()); }
};

inline ScoredTokens score_tokens(const TokenScorer& scorer,
                                 std::string_view context,
                                 std::string_view target) {
  if (target.empty()) throw ValidationError("score_tokens: empty target");
  ScoredTokens out = scorer.score(context, target);
  if (out.logprobs.empty())
    throw ValidationError("score_tokens: target tokenizes to zero tokens");
  for (double lp : out.logprobs)
    if (!std::isfinite(lp) || lp > 0.0)
      throw NumericError("score_tokens: log-probability out of range: " +
                         std::to_string(lp));
  return out;
}

// Embeds every text and L2-normalizes each column.
inline EmbeddingMatrix embed_batch(const Embedder& embedder,
                                   std::span<const std::string> texts) {
  if (texts.empty()) throw ValidationError("embed_batch: no texts");
  for (const auto& t : texts)
    if (t.empty()) throw ValidationError("embed_batch: empty text");
  const auto raw = embedder.embed_raw(texts);
  if (raw.size() != texts.size())
    throw BackendError("embed_batch: expected " + std::to_string(texts.size()) +
                           " vectors, got " + std::to_string(raw.size()),
                       false);
  const std::size_t d = raw.front().size();
  if (d == 0) throw BackendError("embed_batch: zero-dimensional embedding", false);
  EmbeddingMatrix z{Eigen::MatrixXd(static_cast<Eigen::Index>(d),
                                    static_cast<Eigen::Index>(raw.size()))};
  for (std::size_t k = 0; k < raw.size(); ++k) {
    if (raw[k].size() != d)
      throw BackendError("embed_batch: dimension mismatch in batch (" +
                             std::to_string(raw[k].size()) + " vs " +
                             std::to_string(d) + ")",
                         false);
    double norm2 = 0.0;
    for (double v : raw[k]) {
      if (!std::isfinite(v)) throw NumericError("embed_batch: non-finite value");
      norm2 += v * v;
    }
    if (norm2 == 0.0) throw NumericError("embed_batch: zero vector");
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t r = 0; r < d; ++r)
      z.data(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) =
          raw[k][r] * inv;
  }
  return z;
}

// n completions. Empty completions are requested again once; a second empty
// reply is an error.
inline std::vector<std::string> generate_n(const Generator& gen,
                                           std::string_view prompt,
                                           const SamplingParams& params) {
  if (prompt.empty()) throw ValidationError("generate_n: empty prompt");
  params.validate();
  auto out = gen.generate(prompt, params);
  if (out.size() != params.n)
    throw BackendError("generate_n: expected " + std::to_string(params.n) +
                           " completions, got " + std::to_string(out.size()),
                       false);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!out[i].empty()) continue;
    SamplingParams one = params;
    one.n = 1;
    if (one.seed) one.seed = *one.seed + 1 + i;
    auto again = gen.generate(prompt, one);
    if (again.empty() || again.front().empty())
      throw BackendError("generate_n: empty completion after retry", false);
    out[i] = std::move(again.front());
  }
  return out;
}

}  // namespace qchunk
