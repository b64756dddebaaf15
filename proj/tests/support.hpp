#pragma once

// Shared fixtures, fakes and independent reference implementations. The
// oracles here deliberately avoid the library's own helpers (no Eigen
// solvers, no library LCS) so agreement is meaningful.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "qchunk/corpus.hpp"
#include "qchunk/model_clients.hpp"
#include "qchunk/pipeline.hpp"
#include "qchunk/stub_backend.hpp"

namespace qtest {

// Topic A defines "Tokamak"; topic B (sentences 4..7) uses it. Sentence
// token counts are close enough that the equal split lands on 4.
inline const std::string kTwoTopic =
    "A Tokamak is a ring shaped machine that holds hot plasma inside strong magnetic fields. "
    "Hot plasma inside this ring must stay away from metal walls of that machine. "
    "Strong magnetic coils wrap around this ring to squeeze hot plasma into one thin loop. "
    "Sensors on those coils measure magnetic fields plus plasma current many times each second. "
    "Sourdough bread rises slowly because wild yeast eats flour, making gas bubbles. "
    "Bakers feed their sourdough starter fresh flour with warm water every single morning. "
    "Slow overnight rising gives sourdough bread its sour taste, chewy crust, open crumb. "
    "Some bakers joke their proofing box for sourdough runs as hot as a Tokamak.";
inline constexpr std::size_t kTwoTopicShift = 4;
inline constexpr std::size_t kTwoTopicMidA = 2;

// Two halves with disjoint vocabularies; consecutive sentences inside a half
// share most of their words.
inline const std::string kDisjointHalves =
    "Granite cliffs tower above quiet northern fjords. "
    "Granite cliffs tower above cold northern fjords. "
    "Granite cliffs tower above deep northern fjords. "
    "Violin strings hum during evening chamber concerts. "
    "Violin strings hum during late chamber concerts. "
    "Violin strings hum during summer chamber concerts.";
inline constexpr std::size_t kDisjointShift = 3;

inline qchunk::Document two_topic_doc() { return qchunk::make_document("two-topic", kTwoTopic); }

inline qchunk::Backends stub_backends(std::uint64_t seed,
                                      std::size_t dim = qchunk::stub::kStubEmbedDim) {
  qchunk::stub::StubBackend sb{seed, dim};
  return {"stub", sb.generator(), sb.embedder(),
          [sb](const qchunk::Document& d) { return sb.scorer(d.text); }};
}

inline qchunk::PipelineConfig stub_pipeline(std::uint64_t seed, std::size_t target_tokens = 60) {
  qchunk::PipelineConfig cfg;
  cfg.backends = stub_backends(seed);
  cfg.seed = seed;
  cfg.chunk_target_tokens = target_tokens;
  return cfg;
}

// Random ASCII document with sentence terminators, spaces and newlines.
inline std::string random_document(std::mt19937_64& rng, std::size_t max_sentences = 12) {
  static const std::vector<std::string> words = {
      "alpha", "beta",  "gamma", "delta", "river", "stone", "Cloud", "e.g",
      "3.14",  "x",     "yes!",  "no?",   "data",  "model", "chunk", "U.S."};
  static const std::vector<std::string> ends = {".", "!", "?", "...", "?!", ""};
  static const std::vector<std::string> gaps = {" ", "  ", "\n", "\n\n", "\t "};
  std::uniform_int_distribution<std::size_t> ns(1, max_sentences), nw(1, 9);
  std::string out;
  if (rng() % 4 == 0) out += gaps[rng() % gaps.size()];
  const std::size_t n = ns(rng);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t k = nw(rng);
    for (std::size_t w = 0; w < k; ++w) {
      if (w) out += " ";
      out += words[rng() % words.size()];
    }
    out += ends[rng() % ends.size()];
    if (s + 1 < n || rng() % 2) out += gaps[rng() % gaps.size()];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Oracles

// log|det A| by Gaussian elimination with partial pivoting.
inline double logdet_lu(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  double acc = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::fabs(a[r][c]) > std::fabs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    const double d = a[c][c];
    acc += std::log(std::fabs(d));
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r][c] / d;
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
    }
  }
  return acc;
}

// (1/K) log det(Z^T J_d Z + alpha I), forming J_d explicitly.
inline double phi_sd_oracle(const std::vector<std::vector<double>>& cols, double alpha) {
  const std::size_t k = cols.size(), d = cols.front().size();
  std::vector<std::vector<double>> j(d, std::vector<double>(d));
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) j[r][c] = (r == c ? 1.0 : 0.0) - 1.0 / static_cast<double>(d);
  std::vector<std::vector<double>> m(k, std::vector<double>(k, 0.0));
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b) {
      double s = 0.0;
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c) s += cols[a][r] * j[r][c] * cols[b][c];
      m[a][b] = s + (a == b ? alpha : 0.0);
    }
  return logdet_lu(m) / static_cast<double>(k);
}

// LCS length by memoized recursion over suffixes.
inline std::size_t lcs_oracle(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
  std::function<std::size_t(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) {
    if (i == a.size() || j == b.size()) return std::size_t{0};
    const auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    const std::size_t v = a[i] == b[j] ? 1 + go(i + 1, j + 1) : std::max(go(i + 1, j), go(i, j + 1));
    memo[key] = v;
    return v;
  };
  return go(0, 0);
}

// Pearson r from raw sums: (nSxy - SxSy) / sqrt((nSxx - Sx^2)(nSyy - Sy^2)).
inline double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  long double n = static_cast<long double>(x.size()), sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += static_cast<long double>(x[i]) * x[i];
    syy += static_cast<long double>(y[i]) * y[i];
    sxy += static_cast<long double>(x[i]) * y[i];
  }
  return static_cast<double>((n * sxy - sx * sy) /
                             std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy)));
}

// Stub scorer probability of each target token, recomputed from the formula
// with plain maps.
inline std::vector<double> stub_logprobs_oracle(const std::vector<std::string>& reference,
                                                const std::vector<std::string>& context,
                                                const std::vector<std::string>& target) {
  const std::string unk = std::string(qchunk::stub::kUnk);
  std::set<std::string> vocab(reference.begin(), reference.end());
  vocab.insert(target.begin(), target.end());
  const double v = static_cast<double>(vocab.size() + 1);
  std::map<std::string, double> uni, prev_total;
  std::map<std::pair<std::string, std::string>, double> bi;
  double n = 0.0;
  auto add = [&](const std::vector<std::string>& toks, bool map_unk) {
    std::string prev;
    for (std::size_t i = 0; i < toks.size(); ++i) {
      const std::string t = map_unk && !vocab.count(toks[i]) ? unk : toks[i];
      uni[t] += 1;
      n += 1;
      if (i > 0) {
        bi[{prev, t}] += 1;
        prev_total[prev] += 1;
      }
      prev = t;
    }
  };
  add(reference, false);
  add(context, true);
  std::vector<double> out;
  std::string prev;
  bool has_prev = false;
  if (!context.empty()) {
    prev = vocab.count(context.back()) ? context.back() : unk;
    has_prev = true;
  }
  for (const auto& t : target) {
    const double big = has_prev ? (bi[{prev, t}] + 1.0) / (prev_total[prev] + v) : 1.0 / v;
    const double p = 0.7 * big + 0.3 * (uni[t] + 1.0) / (n + v);
    out.push_back(std::log(p));
    prev = t;
    has_prev = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fakes

// Scorer returning fixed log-probabilities per (context, target) pair.
class TableScorer final : public qchunk::TokenScorer {
 public:
  std::map<std::pair<std::string, std::string>, std::vector<double>> table;
  std::size_t max_context_tokens() const override { return 1 << 20; }
  qchunk::ScoredTokens score(std::string_view ctx, std::string_view tgt) const override {
    const auto it = table.find({std::string(ctx), std::string(tgt)});
    if (it == table.end()) throw qchunk::BackendError("no entry", false);
    return {it->second, false};
  }
};

// Embedder serving fixed vectors by text.
class TableEmbedder final : public qchunk::Embedder {
 public:
  std::map<std::string, std::vector<double>> table;
  std::size_t dim = 3;
  std::size_t dimension() const override { return dim; }
  std::vector<std::vector<double>> embed_raw(std::span<const std::string> texts) const override {
    std::vector<std::vector<double>> out;
    for (const auto& t : texts) out.push_back(table.at(t));
    return out;
  }
};

// Generator replying through a callback; records prompts.
class ScriptedGenerator final : public qchunk::Generator {
 public:
  using Reply = std::function<std::vector<std::string>(std::string_view, const qchunk::SamplingParams&)>;
  explicit ScriptedGenerator(Reply reply) : reply_(std::move(reply)) {}
  std::vector<std::string> generate(std::string_view prompt,
                                    const qchunk::SamplingParams& params) const override {
    {
      std::lock_guard lock(mutex_);
      prompts_.emplace_back(prompt);
    }
    return reply_(prompt, params);
  }
  std::vector<std::string> prompts() const {
    std::lock_guard lock(mutex_);
    return prompts_;
  }

 private:
  Reply reply_;
  mutable std::mutex mutex_;
  mutable std::vector<std::string> prompts_;
};

// Wraps the stub generator but overrides replies for selected prompt tags.
inline std::shared_ptr<ScriptedGenerator> stub_with_override(
    std::uint64_t seed, std::string tag,
    std::function<std::vector<std::string>(std::string_view, const qchunk::SamplingParams&)> fn) {
  auto base = std::make_shared<qchunk::stub::StubGenerator>(seed);
  return std::make_shared<ScriptedGenerator>(
      [base, tag, fn](std::string_view prompt, const qchunk::SamplingParams& p) {
        if (qchunk::prompts::tag_of(prompt) == tag) return fn(prompt, p);
        return base->generate(prompt, p);
      });
}

}  // namespace qtest
