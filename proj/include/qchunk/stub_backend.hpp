#pragma once

// Deterministic offline backend. Every output is a pure function of the
// inputs and the seed; nothing touches the network.
//
//  * StubScorer: interpolated bigram/unigram model with add-one smoothing,
//      P(t | prev) = 0.7 * (c(prev,t) + 1) / (c(prev) + V)
//                  + 0.3 * (c(t) + 1) / (N + V),
//    where the counts come from a reference text (normally the document)
//    plus the scoring context. V is the reference+target vocabulary plus an
//    UNK token; context tokens outside it count as UNK. Target tokens never
//    update the counts, so with no reference and no context every token has
//    probability 1/V.
//  * StubEmbedder: signed hashed set of words over normalized tokens.
//  * StubGenerator: dispatches on the prompt tag and emits replies in the
//    formats the pipeline parsers accept.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "qchunk/corpus.hpp"
#include "qchunk/errors.hpp"
#include "qchunk/model_clients.hpp"
#include "qchunk/prompts.hpp"
#include "qchunk/text.hpp"

namespace qchunk::stub {

inline constexpr double kBigramWeight = 0.7;
inline constexpr double kUnigramWeight = 0.3;
inline constexpr std::size_t kStubEmbedDim = 512;
inline constexpr std::string_view kUnk = "\x01<unk>";

class StubScorer final : public TokenScorer {
 public:
  explicit StubScorer(std::string_view reference = {},
                      std::size_t max_context_tokens = 4096)
      : max_context_(max_context_tokens) {
    const auto toks = text::normalized_tokens(reference);
    for (const auto& t : toks) vocab_.insert(t);
    add_counts(toks, unigram_, bigram_, prev_total_, total_);
  }

  std::size_t max_context_tokens() const override { return max_context_; }

  ScoredTokens score(std::string_view context,
                     std::string_view target) const override {
    const auto tgt = text::normalized_tokens(target);
    auto ctx = text::normalized_tokens(context);
    ScoredTokens out;
    if (tgt.empty()) return out;

    const std::size_t budget =
        max_context_ > tgt.size() ? max_context_ - tgt.size() : 0;
    if (ctx.size() > budget) {
      ctx.erase(ctx.begin(), ctx.end() - static_cast<std::ptrdiff_t>(budget));
      out.context_truncated = true;
    }

    std::unordered_set<std::string> target_types;
    for (const auto& t : tgt)
      if (!vocab_.count(t)) target_types.insert(t);
    const double v = static_cast<double>(vocab_.size() + target_types.size() + 1);
    auto known = [&](const std::string& t) -> std::string {
      return vocab_.count(t) || target_types.count(t) ? t : std::string(kUnk);
    };

    // Context counts overlay the reference counts.
    std::vector<std::string> ctx_mapped;
    ctx_mapped.reserve(ctx.size());
    for (const auto& t : ctx) ctx_mapped.push_back(known(t));
    Unigrams uni;
    Bigrams bi;
    Unigrams prev_tot;
    std::size_t n_ctx = 0;
    add_counts(ctx_mapped, uni, bi, prev_tot, n_ctx);
    const double n = static_cast<double>(total_ + n_ctx);

    out.logprobs.reserve(tgt.size());
    for (std::size_t k = 0; k < tgt.size(); ++k) {
      const std::string& t = tgt[k];
      std::optional<std::string> prev;
      if (k > 0) prev = tgt[k - 1];
      else if (!ctx_mapped.empty()) prev = ctx_mapped.back();

      double c_bi = 0.0, c_prev = 0.0;
      if (prev) {
        c_bi = static_cast<double>(pair_count(bigram_, *prev, t) +
                                   pair_count(bi, *prev, t));
        c_prev = static_cast<double>(count(prev_total_, *prev) +
                                     count(prev_tot, *prev));
      }
      const double c_uni = static_cast<double>(count(unigram_, t) + count(uni, t));
      const double p = kBigramWeight * (c_bi + 1.0) / (c_prev + v) +
                       kUnigramWeight * (c_uni + 1.0) / (n + v);
      out.logprobs.push_back(std::log(p));
    }
    return out;
  }

 private:
  using Unigrams = std::unordered_map<std::string, std::size_t>;
  using Bigrams = std::unordered_map<std::string, Unigrams>;

  static void add_counts(const std::vector<std::string>& toks, Unigrams& uni,
                         Bigrams& bi, Unigrams& prev_total, std::size_t& total) {
    for (std::size_t i = 0; i < toks.size(); ++i) {
      ++uni[toks[i]];
      ++total;
      if (i + 1 < toks.size()) {
        ++bi[toks[i]][toks[i + 1]];
        ++prev_total[toks[i]];
      }
    }
  }
  static std::size_t count(const Unigrams& m, const std::string& k) {
    auto it = m.find(k);
    return it == m.end() ? 0 : it->second;
  }
  static std::size_t pair_count(const Bigrams& m, const std::string& a,
                                const std::string& b) {
    auto it = m.find(a);
    return it == m.end() ? 0 : count(it->second, b);
  }

  std::size_t max_context_;
  std::unordered_set<std::string> vocab_;
  Unigrams unigram_;
  Bigrams bigram_;
  Unigrams prev_total_;
  std::size_t total_ = 0;
};

// Signed hashed set-of-words: each distinct normalized token adds +-1 to one
// coordinate, so repeated function words do not dominate the direction.
class StubEmbedder final : public Embedder {
 public:
  explicit StubEmbedder(std::uint64_t seed, std::size_t dim = kStubEmbedDim)
      : salt_(text::splitmix64(seed)), dim_(dim) {
    if (dim_ == 0) throw ConfigError("stub embedder dimension must be positive");
  }

  std::size_t dimension() const override { return dim_; }

  std::vector<std::vector<double>> embed_raw(
      std::span<const std::string> texts) const override {
    std::vector<std::vector<double>> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed_one(t));
    return out;
  }

 private:
  std::vector<double> embed_one(std::string_view t) const {
    std::vector<double> v(dim_, 0.0);
    auto toks = text::normalized_tokens(t);
    std::sort(toks.begin(), toks.end());
    toks.erase(std::unique(toks.begin(), toks.end()), toks.end());
    for (const auto& tok : toks) {
      const std::uint64_t h = text::splitmix64(text::fnv1a64(tok) ^ salt_);
      v[h % dim_] += (h >> 63) ? -1.0 : 1.0;
    }
    if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) {
      const std::uint64_t h = text::splitmix64(text::fnv1a64(t) ^ salt_);
      v[h % dim_] = 1.0;
    }
    return v;
  }

  std::uint64_t salt_;
  std::size_t dim_;
};

// Helpers shared by the stub generator's reply builders.
namespace detail {

struct NumberedSentence {
  std::size_t index;
  std::string text;
};

inline std::vector<NumberedSentence> parse_numbered(std::string_view body) {
  std::vector<NumberedSentence> out;
  std::size_t pos = 0;
  while (pos < body.size()) {
    std::size_t eol = body.find('\n', pos);
    if (eol == std::string_view::npos) eol = body.size();
    auto line = body.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.size() < 3 || line.front() != '[') continue;
    const auto close = line.find(']');
    if (close == std::string_view::npos) continue;
    try {
      const auto idx = std::stoul(std::string(line.substr(1, close - 1)));
      out.push_back({idx, std::string(text::trim(line.substr(close + 1)))});
    } catch (const std::exception&) {
    }
  }
  return out;
}

inline std::string strip_punct(std::string_view tok) {
  std::string s(tok);
  while (!s.empty() && text::is_punct(static_cast<unsigned char>(s.back())))
    s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && text::is_punct(static_cast<unsigned char>(s[b]))) ++b;
  return s.substr(b);
}

inline bool capitalized(std::string_view tok) {
  return !tok.empty() && tok.front() >= 'A' && tok.front() <= 'Z';
}

// "[A|An|The] <Term> is/are/refers/means/denotes ..." defines <Term>.
inline std::optional<std::string> defined_term(std::string_view sentence) {
  const auto toks = text::tokenize(sentence, text::TokenRule::whitespace);
  static const std::set<std::string> kArticles = {"A", "An", "The"};
  const std::size_t at = !toks.empty() && kArticles.count(strip_punct(toks[0])) ? 1 : 0;
  if (toks.size() < at + 3) return std::nullopt;
  const std::string term = strip_punct(toks[at]);
  if (!capitalized(term)) return std::nullopt;
  static const std::set<std::string> kCopulas = {"is", "are", "refers",
                                                 "means", "denotes"};
  if (!kCopulas.count(strip_punct(toks[at + 1]))) return std::nullopt;
  return term;
}

inline bool mentions(std::string_view sentence, const std::string& term) {
  for (const auto& tok : text::tokenize(sentence, text::TokenRule::whitespace))
    if (strip_punct(tok) == term) return true;
  return false;
}

}  // namespace detail

class StubGenerator final : public Generator {
 public:
  explicit StubGenerator(std::uint64_t seed) : seed_(seed) {}

  std::vector<std::string> generate(std::string_view prompt,
                                    const SamplingParams& params) const override {
    const auto tag = prompts::tag_of(prompt);
    const std::uint64_t seed = params.seed.value_or(seed_);
    std::vector<std::string> out;
    out.reserve(params.n);
    for (std::size_t i = 0; i < params.n; ++i) {
      const std::size_t sample = params.temperature > 0.0 ? i : 0;
      if (tag == "OUTLINE") out.push_back(outline(prompt));
      else if (tag == "SEGMENT") out.push_back(segment(prompt, seed, sample));
      else if (tag == "REVIEW") out.push_back(review(prompt));
      else if (tag == "COMPLETE") out.push_back(complete(prompt));
      else throw BackendError("stub generator: untagged prompt", false);
    }
    return out;
  }

 private:
  static std::string outline(std::string_view prompt) {
    const auto body = prompts::section(prompt, "DOCUMENT");
    if (!body) throw BackendError("stub: OUTLINE prompt lacks DOCUMENT", false);
    std::vector<std::string> terms;
    auto add = [&](const std::string& t) {
      if (std::find(terms.begin(), terms.end(), t) == terms.end())
        terms.push_back(t);
    };
    for (const auto& s : split_sentences(*body)) {
      if (auto t = detail::defined_term(s.content)) add(*t);
      const auto toks = text::tokenize(s.content, text::TokenRule::whitespace);
      for (std::size_t k = 1; k < toks.size(); ++k) {
        const auto t = detail::strip_punct(toks[k]);
        if (detail::capitalized(t) && t.size() > 1) add(t);
      }
    }
    if (terms.size() > 8) terms.resize(8);
    std::string reply;
    if (terms.empty()) return "1. What is the main subject of this document?\n";
    for (std::size_t i = 0; i < terms.size(); ++i)
      reply += std::to_string(i + 1) + ". What is " + terms[i] +
               " and how does the document use it?\n";
    return reply;
  }

  // Equal-token-length split; sample i > 0 moves one boundary by
  // ceil(i/2) sentences, alternating direction.
  static std::string segment(std::string_view prompt, std::uint64_t seed,
                             std::size_t sample) {
    std::string_view target_tail;
    const auto body = prompts::section(prompt, "SENTENCES");
    if (!body || !prompts::section(prompt, "TARGET_TOKENS", &target_tail))
      throw BackendError("stub: malformed SEGMENT prompt", false);
    const auto sents = detail::parse_numbered(*body);
    const std::size_t n = sents.size();
    std::size_t target = 1;
    try {
      target = std::max<std::size_t>(1, std::stoul(std::string(target_tail)));
    } catch (const std::exception&) {
    }
    std::vector<double> cum(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      cum[i + 1] = cum[i] + static_cast<double>(text::count_tokens(
                                sents[i].text, text::TokenRule::cjk_char));
    const double total = cum[n];
    const auto k = static_cast<std::size_t>(std::clamp<double>(
        std::round(total / static_cast<double>(target)), 1.0,
        static_cast<double>(std::max<std::size_t>(n, 1))));

    std::vector<long> bounds;
    for (std::size_t j = 1; j < k; ++j) {
      const double goal = total * static_cast<double>(j) / static_cast<double>(k);
      std::size_t best = 1;
      for (std::size_t b = 1; b < n; ++b)
        if (std::abs(cum[b] - goal) < std::abs(cum[best] - goal)) best = b;
      bounds.push_back(static_cast<long>(best));
    }
    if (sample > 0 && !bounds.empty()) {
      const std::uint64_t h = text::splitmix64(seed ^ (0x5bd1e995ULL * sample));
      const std::size_t which = h % bounds.size();
      const long magnitude = static_cast<long>((sample + 1) / 2);
      const bool flip = text::splitmix64(seed) & 1;
      const long sign = ((sample % 2 == 1) != flip) ? 1 : -1;
      bounds[which] += sign * magnitude;
    }
    std::set<long> clean;
    for (long b : bounds)
      if (b > 0 && b < static_cast<long>(n)) clean.insert(b);
    if (clean.empty()) return "no split";
    std::string reply = "boundaries: [";
    bool first = true;
    for (long b : clean) {
      if (!first) reply += ", ";
      reply += std::to_string(b);
      first = false;
    }
    return reply + "]";
  }

  // Flags terms used in the chunk whose defining sentence lies outside it.
  static std::string review(std::string_view prompt) {
    std::string_view range;
    const auto body = prompts::section(prompt, "SENTENCES");
    if (!body || !prompts::section(prompt, "CHUNK_RANGE", &range))
      throw BackendError("stub: malformed REVIEW prompt", false);
    std::size_t first = 0, last = 0;
    if (std::sscanf(std::string(range).c_str(), "%zu %zu", &first, &last) != 2)
      throw BackendError("stub: malformed CHUNK_RANGE", false);
    const auto sents = detail::parse_numbered(*body);

    nlohmann::json missing = nlohmann::json::array();
    std::set<std::string> reported;
    for (const auto& def : sents) {
      if (def.index >= first && def.index < last) continue;
      const auto term = detail::defined_term(def.text);
      if (!term || reported.count(*term)) continue;
      const bool used = std::any_of(sents.begin(), sents.end(), [&](const auto& s) {
        return s.index >= first && s.index < last && detail::mentions(s.text, *term);
      });
      if (!used) continue;
      reported.insert(*term);
      missing.push_back({{"description", def.text},
                         {"evidence_sentences", {def.index}}});
    }
    if (missing.empty()) return "COMPLETE";
    return nlohmann::json{{"needs_completion", true}, {"missing", missing}}.dump();
  }

  static std::string complete(std::string_view prompt) {
    const auto chunk = prompts::section(prompt, "CHUNK");
    const auto evidence = prompts::section(prompt, "EVIDENCE");
    if (!chunk || !evidence)
      throw BackendError("stub: malformed COMPLETE prompt", false);
    std::string out(text::trim(*chunk));
    std::size_t pos = 0;
    while (pos < evidence->size()) {
      std::size_t eol = evidence->find('\n', pos);
      if (eol == std::string_view::npos) eol = evidence->size();
      auto line = text::trim(evidence->substr(pos, eol - pos));
      pos = eol + 1;
      if (line.size() >= 2 && line.substr(0, 2) == "- ") line.remove_prefix(2);
      if (line.empty()) continue;
      out += " ";
      out += line;
    }
    return out;
  }

  std::uint64_t seed_;
};

// Bundle of stub capabilities sharing one seed.
struct StubBackend {
  std::uint64_t seed = 0;
  std::size_t embed_dim = kStubEmbedDim;

  std::shared_ptr<const Generator> generator() const {
    return std::make_shared<StubGenerator>(seed);
  }
  std::shared_ptr<const Embedder> embedder() const {
    return std::make_shared<StubEmbedder>(seed, embed_dim);
  }
  std::shared_ptr<const TokenScorer> scorer(std::string_view reference) const {
    return std::make_shared<StubScorer>(reference);
  }
};

}  // namespace qchunk::stub
