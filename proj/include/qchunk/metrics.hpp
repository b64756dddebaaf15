#pragma once

// ChunkScore: logical independence (perplexity ratio across each internal
// boundary), semantic dispersion (normalized log-determinant of the
// regularized, feature-centered Gram matrix of chunk embeddings) and their
// lambda-weighted sum. Also ROUGE-L, Pearson r and the lambda sweep used to
// calibrate the weight against a downstream score.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "qchunk/corpus.hpp"
#include "qchunk/errors.hpp"
#include "qchunk/model_clients.hpp"
#include "qchunk/parallel.hpp"
#include "qchunk/text.hpp"

namespace qchunk {

inline constexpr double kDefaultLambda = 0.3;
inline constexpr double kDefaultAlpha = 1e-3;

// ---------------------------------------------------------------------------
// Perplexity and logical independence

inline double perplexity_from_logprobs(std::span<const double> logprobs) {
  if (logprobs.empty()) throw ValidationError("perplexity of zero tokens");
  const double mean =
      std::accumulate(logprobs.begin(), logprobs.end(), 0.0) /
      static_cast<double>(logprobs.size());
  const double ppl = std::exp(-mean);
  if (!std::isfinite(ppl)) throw NumericError("perplexity overflow");
  return ppl;
}

inline double perplexity(const TokenScorer& scorer, std::string_view target) {
  return perplexity_from_logprobs(score_tokens(scorer, "", target).logprobs);
}

// Use perplexity() for unconditional scoring; an empty context is rejected.
inline double conditional_perplexity(const TokenScorer& scorer,
                                     std::string_view context,
                                     std::string_view target) {
  if (context.empty())
    throw ValidationError("conditional_perplexity: empty context");
  return perplexity_from_logprobs(score_tokens(scorer, context, target).logprobs);
}

struct Independence {
  double value;  // min(1, raw)
  double raw;    // PPL(cur | prev) / PPL(cur)
};

inline Independence logical_independence(const TokenScorer& scorer,
                                         std::string_view prev,
                                         std::string_view cur) {
  if (prev.empty() || cur.empty())
    throw ValidationError("logical_independence: empty chunk");
  const double base = perplexity(scorer, cur);
  const double cond = conditional_perplexity(scorer, prev, cur);
  const double raw = cond / base;
  if (!std::isfinite(raw)) throw NumericError("logical_independence: non-finite ratio");
  return {std::min(1.0, raw), raw};
}

inline Independence logical_independence(const TokenScorer& scorer,
                                         const Chunk& prev, const Chunk& cur) {
  return logical_independence(scorer, prev.text, cur.text);
}

// Per-boundary independence for consecutive chunk pairs (K - 1 entries).
inline std::vector<Independence> boundary_independence(
    const TokenScorer& scorer, std::span<const std::string> chunks,
    std::size_t parallelism = 1) {
  std::vector<Independence> out(chunks.size() > 1 ? chunks.size() - 1 : 0);
  parallel_for(out.size(), parallelism, [&](std::size_t i) {
    out[i] = logical_independence(scorer, chunks[i], chunks[i + 1]);
  });
  return out;
}

// Mean of clamped values; 1.0 when there is no internal boundary.
inline double mean_independence(std::span<const double> per_boundary) {
  if (per_boundary.empty()) return 1.0;
  return std::accumulate(per_boundary.begin(), per_boundary.end(), 0.0) /
         static_cast<double>(per_boundary.size());
}

inline double phi_li(const TokenScorer& scorer, const Partition& partition,
                     std::size_t parallelism = 1) {
  const auto texts = partition.chunk_texts();
  std::vector<double> vals;
  for (const auto& b : boundary_independence(scorer, texts, parallelism))
    vals.push_back(b.value);
  return mean_independence(vals);
}

// ---------------------------------------------------------------------------
// Semantic dispersion

// J_d = I_d - (1/d) 1 1^T.
inline Eigen::MatrixXd centering_matrix(std::size_t d) {
  const auto n = static_cast<Eigen::Index>(d);
  return Eigen::MatrixXd::Identity(n, n) -
         Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(d));
}

// Sigma = Z^T J_d Z, computed as the Gram matrix of the feature-centered
// columns and symmetrized.
inline Eigen::MatrixXd centered_gram(const EmbeddingMatrix& z) {
  if (z.dim() < 2) throw ValidationError("centered_gram: need d >= 2");
  if (z.count() < 1) throw ValidationError("centered_gram: need K >= 1");
  if (!z.data.allFinite()) throw NumericError("centered_gram: non-finite entry");
  const Eigen::RowVectorXd means = z.data.colwise().mean();
  const Eigen::MatrixXd projected = z.data.rowwise() - means;
  Eigen::MatrixXd sigma = projected.transpose() * projected;
  return 0.5 * (sigma + sigma.transpose());
}

struct Dispersion {
  double value;
  std::vector<double> eigenvalues;  // of Sigma + alpha I, ascending
};

// (1/K) log det(Sigma + alpha I) as the mean log-eigenvalue.
inline Dispersion semantic_dispersion(const EmbeddingMatrix& z, double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw ValidationError("alpha must be positive");
  Eigen::MatrixXd m = centered_gram(z);
  m.diagonal().array() += alpha;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success)
    throw NumericError("semantic_dispersion: eigendecomposition failed");
  Dispersion out;
  const auto& ev = solver.eigenvalues();
  out.eigenvalues.assign(ev.data(), ev.data() + ev.size());
  double sum = 0.0;
  for (double l : out.eigenvalues) {
    if (!(l > 0.0)) throw NumericError("semantic_dispersion: non-positive eigenvalue");
    sum += std::log(l);
  }
  out.value = sum / static_cast<double>(out.eigenvalues.size());
  return out;
}

inline double phi_sd(const EmbeddingMatrix& z, double alpha = kDefaultAlpha) {
  return semantic_dispersion(z, alpha).value;
}

// ---------------------------------------------------------------------------
// ChunkScore

struct ScoreBreakdown {
  double phi_li = 1.0;
  double phi_sd = 0.0;
  double phi_cs = 0.0;
  double lambda = kDefaultLambda;
  double alpha = kDefaultAlpha;
  std::vector<double> per_boundary_li;
  std::vector<double> eigenvalues;
  std::size_t k = 0;
  std::vector<double> raw_li_ratios;  // unclamped, diagnostics only
};

inline double combine(double lambda, double li, double sd) {
  return lambda * li + (1.0 - lambda) * sd;
}

inline void validate_weights(double lambda, double alpha) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw ValidationError("lambda must lie in [0, 1]");
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw ValidationError("alpha must be positive");
}

// Assembles a breakdown from already-computed parts.
inline ScoreBreakdown make_breakdown(std::vector<Independence> boundaries,
                                     Dispersion dispersion, double lambda,
                                     double alpha) {
  ScoreBreakdown s;
  for (const auto& b : boundaries) {
    s.per_boundary_li.push_back(b.value);
    s.raw_li_ratios.push_back(b.raw);
  }
  s.phi_li = mean_independence(s.per_boundary_li);
  s.phi_sd = dispersion.value;
  s.eigenvalues = std::move(dispersion.eigenvalues);
  s.k = s.eigenvalues.size();
  s.lambda = lambda;
  s.alpha = alpha;
  s.phi_cs = combine(lambda, s.phi_li, s.phi_sd);
  return s;
}

inline ScoreBreakdown chunk_score(std::span<const std::string> chunks,
                                  const TokenScorer& scorer,
                                  const Embedder& embedder,
                                  double lambda = kDefaultLambda,
                                  double alpha = kDefaultAlpha,
                                  std::size_t parallelism = 1) {
  validate_weights(lambda, alpha);
  if (chunks.empty()) throw ValidationError("chunk_score: no chunks");
  auto boundaries = boundary_independence(scorer, chunks, parallelism);
  auto dispersion = semantic_dispersion(embed_batch(embedder, chunks), alpha);
  return make_breakdown(std::move(boundaries), std::move(dispersion), lambda, alpha);
}

inline ScoreBreakdown chunk_score(const Partition& partition,
                                  const TokenScorer& scorer,
                                  const Embedder& embedder,
                                  double lambda = kDefaultLambda,
                                  double alpha = kDefaultAlpha,
                                  std::size_t parallelism = 1) {
  const auto texts = partition.chunk_texts();
  return chunk_score(texts, scorer, embedder, lambda, alpha, parallelism);
}

// Min-max normalized Phi_LI and Phi_SD across a candidate set, recombined
// with lambda. Reported for inspection; selection uses raw phi_cs.
inline std::vector<double> normalized_scores(std::span<const ScoreBreakdown> scores,
                                             double lambda) {
  if (scores.empty()) return {};
  auto [li_lo, li_hi] = std::minmax_element(
      scores.begin(), scores.end(),
      [](const auto& a, const auto& b) { return a.phi_li < b.phi_li; });
  auto [sd_lo, sd_hi] = std::minmax_element(
      scores.begin(), scores.end(),
      [](const auto& a, const auto& b) { return a.phi_sd < b.phi_sd; });
  auto scale = [](double x, double lo, double hi) {
    return hi > lo ? (x - lo) / (hi - lo) : 0.5;
  };
  std::vector<double> out;
  for (const auto& s : scores)
    out.push_back(combine(lambda, scale(s.phi_li, li_lo->phi_li, li_hi->phi_li),
                          scale(s.phi_sd, sd_lo->phi_sd, sd_hi->phi_sd)));
  return out;
}

// ---------------------------------------------------------------------------
// ROUGE-L

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline std::size_t lcs_length(std::span<const std::string> a,
                              std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline RougeScore rouge_l(std::span<const std::string> candidate,
                          std::span<const std::string> reference) {
  RougeScore s;
  if (candidate.empty() || reference.empty()) return s;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  s.precision = lcs / static_cast<double>(candidate.size());
  s.recall = lcs / static_cast<double>(reference.size());
  s.f1 = s.precision + s.recall > 0.0
             ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
             : 0.0;
  return s;
}

inline RougeScore rouge_l(std::string_view candidate, std::string_view reference) {
  const auto c = text::normalized_tokens(candidate);
  const auto r = text::normalized_tokens(reference);
  return rouge_l(std::span<const std::string>(c), std::span<const std::string>(r));
}

// ---------------------------------------------------------------------------
// Correlation and lambda sweep

inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ValidationError("pearson: length mismatch");
  if (xs.size() < 2) throw ValidationError("pearson: need at least 2 points");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw NumericError("degenerate input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct LambdaGrid {
  double start = 0.0;
  double end = 1.0;
  double step = 0.01;

  void validate() const {
    if (!(start >= 0.0 && end <= 1.0 && start <= end))
      throw ValidationError("lambda grid must lie within [0, 1]");
    if (!(step > 0.0)) throw ValidationError("lambda grid step must be positive");
  }

  std::vector<double> points() const {
    validate();
    const auto n = static_cast<std::size_t>(std::floor((end - start) / step + 1e-9)) + 1;
    std::vector<double> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      out.push_back(std::min(end, start + static_cast<double>(i) * step));
    return out;
  }
};

struct SchemeScores {
  double phi_li;
  double phi_sd;
};

struct SweepRow {
  double lambda;
  std::optional<double> r;  // nullopt: correlation undefined at this lambda
};

inline std::vector<SweepRow> lambda_sweep(std::span<const SchemeScores> schemes,
                                          std::span<const double> downstream,
                                          const LambdaGrid& grid) {
  if (schemes.size() != downstream.size())
    throw ValidationError("lambda_sweep: length mismatch");
  if (schemes.size() < 3) throw ValidationError("lambda_sweep: need at least 3 schemes");
  std::vector<SweepRow> rows;
  std::vector<double> cs(schemes.size());
  for (double lambda : grid.points()) {
    for (std::size_t i = 0; i < schemes.size(); ++i)
      cs[i] = combine(lambda, schemes[i].phi_li, schemes[i].phi_sd);
    SweepRow row{lambda, std::nullopt};
    try {
      row.r = pearson(cs, downstream);
    } catch (const NumericError&) {
    }
    rows.push_back(row);
  }
  return rows;
}

// Index of the highest defined r (lowest lambda on ties).
inline std::optional<std::size_t> sweep_argmax(std::span<const SweepRow> rows) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].r && (!best || *rows[i].r > *rows[*best].r)) best = i;
  return best;
}

}  // namespace qchunk
