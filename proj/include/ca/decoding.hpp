// ca/decoding.hpp
// Chunkwise beam search (with its greedy specialization) plus the baseline
// transducer and aligner decoders, all instrumented with operation counts.
// Decoders are generic over a Scorer so tests can drive them with crafted
// joiner outputs:
//
//   struct Scorer {
//     using State = ...;    // predictor recurrent state
//     using Context = ...;  // one predictor output h_pred
//     struct Step { Context context; State state; };
//     State initial_state() const;
//     Step predictor_step(int64 token, const State&) const;
//     Joint joiner_space(int64 frame /*1-based*/, const Context&) const;
//     double gate(const Joint&) const;                 // blank or EOC prob
//     std::vector<double> labels(const Joint&) const;  // V probabilities
//     int64 frames(), vocab_size(), eos_id(), sos_id() const;
//   };
//
// Scores live in log domain; pruning order matches the probability-domain
// algorithm because log is monotone.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "ca/model.hpp"
#include "ca/tensor.hpp"

namespace ca {

struct DecodeStats {
  std::int64_t joiner_space_evals = 0;
  std::int64_t eoc_evals = 0;  // gate evaluations (blank for the transducer)
  std::int64_t label_softmax_evals = 0;
  std::int64_t predictor_steps = 0;
  std::int64_t frames_visited = 0;
  std::int64_t chunks_entered = 0;

  void accumulate(const DecodeStats& o) {
    joiner_space_evals += o.joiner_space_evals;
    eoc_evals += o.eoc_evals;
    label_softmax_evals += o.label_softmax_evals;
    predictor_steps += o.predictor_steps;
    frames_visited += o.frames_visited;
    chunks_entered += o.chunks_entered;
  }
};

struct RankedHypothesis {
  std::vector<std::int64_t> tokens;  // emitted labels, <sos> stripped
  double log_score = 0.0;
};

struct DecodeResult {
  std::vector<RankedHypothesis> finished;  // best first
  bool forced_final = false;  // no <eos> hypothesis; best unfinished returned
  bool truncated = false;     // aligner hit max_len without <eos>
  DecodeStats stats;
  std::vector<std::int64_t> chunk_last_frames;  // last frame visited per chunk

  const RankedHypothesis& best() const {
    if (finished.empty()) throw std::logic_error("decode produced no hypothesis");
    return finished.front();
  }
};

// Deterministic hypothesis order: higher score first; ties broken by shorter
// token sequence, then lexicographically.
inline bool hyp_better(double score_a, const std::vector<std::int64_t>& tokens_a, double score_b,
                       const std::vector<std::int64_t>& tokens_b) {
  if (score_a != score_b) return score_a > score_b;
  if (tokens_a.size() != tokens_b.size()) return tokens_a.size() < tokens_b.size();
  return tokens_a < tokens_b;
}

// Top-`beam_size` by the order above.
template <class Hyp>
void prune_hyps(std::vector<Hyp>& hyps, std::int64_t beam_size) {
  std::sort(hyps.begin(), hyps.end(), [](const Hyp& a, const Hyp& b) {
    return hyp_better(a.score, a.tokens, b.score, b.tokens);
  });
  if (static_cast<std::int64_t>(hyps.size()) > beam_size)
    hyps.resize(static_cast<std::size_t>(beam_size));
}

// Frame range of chunk n (1-based, inclusive); the last chunk may be short.
struct ChunkRange {
  std::int64_t begin = 0;
  std::int64_t end = 0;
};

inline std::int64_t chunk_count(std::int64_t total_frames, std::int64_t chunk_len) {
  return (total_frames + chunk_len - 1) / chunk_len;
}

inline ChunkRange chunk_range(std::int64_t total_frames, std::int64_t chunk_len, std::int64_t n) {
  if (chunk_len < 1) throw std::invalid_argument("chunk_range: chunk_len must be >= 1");
  if (n < 1 || n > chunk_count(total_frames, chunk_len))
    throw std::invalid_argument("chunk_range: chunk index out of range");
  return {(n - 1) * chunk_len + 1, std::min(n * chunk_len, total_frames)};
}

// Slice of the encoder output for chunk n.
inline Tensor chunk_generator(const Tensor& h_enc, std::int64_t chunk_len, std::int64_t n) {
  ChunkRange r = chunk_range(h_enc.dim(0), chunk_len, n);
  return slice_rows(h_enc, r.begin - 1, r.end);
}

namespace detail {

template <class Scorer>
struct BeamHyp {
  std::vector<std::int64_t> tokens;  // starts with <sos>
  double score = 0.0;                // log domain, always <= 0
  typename Scorer::State state;      // state before consuming tokens.back()'s step
  // pending predictor step (h_pred, next state); reused across chunk
  // transitions so the EOC path does not recompute it
  bool has_pending = false;
  typename Scorer::Context pending_context{};
  typename Scorer::State pending_state{};
};

template <class Scorer>
RankedHypothesis strip(const Scorer& scorer, const BeamHyp<Scorer>& h) {
  RankedHypothesis out;
  out.log_score = h.score;
  for (auto t : h.tokens)
    if (t != scorer.sos_id() && t != scorer.eos_id()) out.tokens.push_back(t);
  return out;
}

// Run (or reuse) the pending predictor step of `h`.
template <class Scorer>
void ensure_pending(const Scorer& scorer, BeamHyp<Scorer>& h, DecodeStats& stats) {
  if (h.has_pending) return;
  auto step = scorer.predictor_step(h.tokens.back(), h.state);
  h.pending_context = std::move(step.context);
  h.pending_state = std::move(step.state);
  h.has_pending = true;
  ++stats.predictor_steps;
}

}  // namespace detail

// Faithful realization of the chunkwise beam search: per chunk, hypotheses
// whose EOC fires move to C with the pre-step predictor state; otherwise each
// expands over every token, <eos> completions landing in F. B empties trigger
// an early exit from the frame loop; B and C merge at chunk boundaries.
template <class Scorer>
DecodeResult chunkwise_beam_search(const Scorer& scorer, std::int64_t chunk_len,
                                   std::int64_t beam_size, double tau) {
  if (scorer.frames() < 1) throw std::invalid_argument("beam search: empty encoder output");
  if (beam_size < 1) throw std::invalid_argument("beam search: beam_size must be >= 1");
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("beam search: tau must be in (0,1)");
  using Hyp = detail::BeamHyp<Scorer>;
  DecodeResult result;
  std::int64_t n_chunks = chunk_count(scorer.frames(), chunk_len);
  std::vector<Hyp> beam;
  beam.push_back({{scorer.sos_id()}, 0.0, scorer.initial_state()});
  std::vector<Hyp> done;  // F
  for (std::int64_t n = 1; n <= n_chunks; ++n) {
    ChunkRange range = chunk_range(scorer.frames(), chunk_len, n);
    std::vector<Hyp> transitioned;  // C
    std::int64_t last_frame = 0;
    for (std::int64_t f = range.begin; f <= range.end; ++f) {
      if (beam.empty()) break;
      if (last_frame == 0) ++result.stats.chunks_entered;
      last_frame = f;
      ++result.stats.frames_visited;
      std::vector<Hyp> expanded;  // A
      for (auto& h : beam) {
        detail::ensure_pending(scorer, h, result.stats);
        auto joint = scorer.joiner_space(f, h.pending_context);
        ++result.stats.joiner_space_evals;
        double eoc = scorer.gate(joint);
        ++result.stats.eoc_evals;
        if (eoc > tau) {
          Hyp moved = h;  // keeps the pre-step state and the pending step
          moved.score += std::log(eoc);
          transitioned.push_back(std::move(moved));
          continue;
        }
        std::vector<double> label = scorer.labels(joint);
        ++result.stats.label_softmax_evals;
        double log_stay = std::log(1.0 - eoc);
        for (std::int64_t k = 0; k < scorer.vocab_size(); ++k) {
          if (k == scorer.sos_id()) continue;
          Hyp child;
          child.tokens = h.tokens;
          child.tokens.push_back(k);
          child.score = h.score + std::log(label[static_cast<std::size_t>(k)]) + log_stay;
          child.state = h.pending_state;
          (k == scorer.eos_id() ? done : expanded).push_back(std::move(child));
        }
      }
      beam = std::move(expanded);
      prune_hyps(beam, beam_size);
    }
    result.chunk_last_frames.push_back(last_frame);
    for (auto& h : transitioned) beam.push_back(std::move(h));
    prune_hyps(beam, beam_size);
  }
  prune_hyps(done, static_cast<std::int64_t>(done.size()) + 1);  // sort F
  for (const auto& h : done) result.finished.push_back(detail::strip(scorer, h));
  if (result.finished.empty() && !beam.empty()) {
    result.forced_final = true;
    result.finished.push_back(detail::strip(scorer, beam.front()));
  }
  return result;
}

// Single-hypothesis specialization, written as its own loop: per frame either
// advance to the next chunk (EOC > tau) or record the <eos> completion and
// continue with the argmax label (EOC <= tau). Once the best completion
// strictly beats the live hypothesis no descendant can overtake it (scores
// only decay), so the walk stops there; beam_size = 1 beam search returns the
// same tokens and score.
template <class Scorer>
DecodeResult chunkwise_greedy(const Scorer& scorer, std::int64_t chunk_len, double tau) {
  if (scorer.frames() < 1) throw std::invalid_argument("greedy: empty encoder output");
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("greedy: tau must be in (0,1)");
  using Hyp = detail::BeamHyp<Scorer>;
  DecodeResult result;
  std::int64_t n_chunks = chunk_count(scorer.frames(), chunk_len);
  Hyp hyp{{scorer.sos_id()}, 0.0, scorer.initial_state()};
  bool have_best = false;
  RankedHypothesis best_done;
  for (std::int64_t n = 1; n <= n_chunks; ++n) {
    ChunkRange range = chunk_range(scorer.frames(), chunk_len, n);
    std::int64_t last_frame = 0;
    bool stop = false;
    for (std::int64_t f = range.begin; f <= range.end; ++f) {
      if (last_frame == 0) ++result.stats.chunks_entered;
      last_frame = f;
      ++result.stats.frames_visited;
      detail::ensure_pending(scorer, hyp, result.stats);
      auto joint = scorer.joiner_space(f, hyp.pending_context);
      ++result.stats.joiner_space_evals;
      double eoc = scorer.gate(joint);
      ++result.stats.eoc_evals;
      if (eoc > tau) {
        hyp.score += std::log(eoc);  // pending step survives for the next chunk
        break;
      }
      std::vector<double> label = scorer.labels(joint);
      ++result.stats.label_softmax_evals;
      double log_stay = std::log(1.0 - eoc);
      RankedHypothesis done = detail::strip(scorer, hyp);
      done.log_score = hyp.score + std::log(label[static_cast<std::size_t>(scorer.eos_id())]) +
                       log_stay;
      if (!have_best ||
          hyp_better(done.log_score, done.tokens, best_done.log_score, best_done.tokens)) {
        best_done = std::move(done);
        have_best = true;
      }
      std::int64_t best = -1;
      for (std::int64_t k = 0; k < scorer.vocab_size(); ++k) {
        if (k == scorer.sos_id() || k == scorer.eos_id()) continue;
        if (best < 0 || label[static_cast<std::size_t>(k)] > label[static_cast<std::size_t>(best)])
          best = k;
      }
      hyp.tokens.push_back(best);
      hyp.score += std::log(label[static_cast<std::size_t>(best)]) + log_stay;
      hyp.state = hyp.pending_state;
      hyp.has_pending = false;
      if (have_best && best_done.log_score > hyp.score) {
        stop = true;
        break;
      }
    }
    result.chunk_last_frames.push_back(last_frame);
    if (stop) break;
    if (have_best && best_done.log_score > hyp.score) break;
  }
  if (have_best) {
    result.finished.push_back(std::move(best_done));
  } else {
    result.forced_final = true;
    result.finished.push_back(detail::strip(scorer, hyp));
  }
  return result;
}

// Frame-synchronous HAT decoding: at each frame, emit labels while the blank
// probability stays at or below 0.5, then take the blank transition. The cap
// bounds emissions per frame.
template <class Scorer>
DecodeResult transducer_greedy(const Scorer& scorer, std::int64_t max_emits_per_frame = 10) {
  if (scorer.frames() < 1) throw std::invalid_argument("greedy: empty encoder output");
  using Hyp = detail::BeamHyp<Scorer>;
  DecodeResult result;
  Hyp hyp{{scorer.sos_id()}, 0.0, scorer.initial_state()};
  for (std::int64_t f = 1; f <= scorer.frames(); ++f) {
    ++result.stats.frames_visited;
    for (std::int64_t emitted = 0;; ++emitted) {
      detail::ensure_pending(scorer, hyp, result.stats);
      auto joint = scorer.joiner_space(f, hyp.pending_context);
      ++result.stats.joiner_space_evals;
      double blank = scorer.gate(joint);
      ++result.stats.eoc_evals;
      if (blank > 0.5 || emitted >= max_emits_per_frame) {
        hyp.score += std::log(blank);
        break;  // pending step carries to the next frame
      }
      std::vector<double> label = scorer.labels(joint);
      ++result.stats.label_softmax_evals;
      std::int64_t best = -1;
      for (std::int64_t k = 0; k < scorer.vocab_size(); ++k) {
        if (k == scorer.sos_id()) continue;
        if (best < 0 || label[static_cast<std::size_t>(k)] > label[static_cast<std::size_t>(best)])
          best = k;
      }
      hyp.tokens.push_back(best);
      hyp.score += std::log((1.0 - blank) * label[static_cast<std::size_t>(best)]);
      hyp.state = hyp.pending_state;
      hyp.has_pending = false;
    }
  }
  result.finished.push_back(detail::strip(scorer, hyp));
  return result;
}

// Breadth-pruned variant of the same threshold rule; beam_size 1 reproduces
// transducer_greedy token for token.
template <class Scorer>
DecodeResult transducer_beam(const Scorer& scorer, std::int64_t beam_size,
                             std::int64_t max_emits_per_frame = 10) {
  if (scorer.frames() < 1) throw std::invalid_argument("beam: empty encoder output");
  if (beam_size < 1) throw std::invalid_argument("beam: beam_size must be >= 1");
  using Hyp = detail::BeamHyp<Scorer>;
  DecodeResult result;
  std::vector<Hyp> beam;
  beam.push_back({{scorer.sos_id()}, 0.0, scorer.initial_state()});
  for (std::int64_t f = 1; f <= scorer.frames(); ++f) {
    ++result.stats.frames_visited;
    std::vector<Hyp> next_frame;
    std::vector<Hyp> frontier = std::move(beam);
    for (std::int64_t pass = 0; !frontier.empty(); ++pass) {
      std::vector<Hyp> expanded;
      for (auto& h : frontier) {
        detail::ensure_pending(scorer, h, result.stats);
        auto joint = scorer.joiner_space(f, h.pending_context);
        ++result.stats.joiner_space_evals;
        double blank = scorer.gate(joint);
        ++result.stats.eoc_evals;
        if (blank > 0.5 || pass >= max_emits_per_frame) {
          Hyp moved = h;
          moved.score += std::log(blank);
          next_frame.push_back(std::move(moved));
          continue;
        }
        std::vector<double> label = scorer.labels(joint);
        ++result.stats.label_softmax_evals;
        for (std::int64_t k = 0; k < scorer.vocab_size(); ++k) {
          if (k == scorer.sos_id()) continue;
          Hyp child;
          child.tokens = h.tokens;
          child.tokens.push_back(k);
          child.score = h.score + std::log((1.0 - blank) * label[static_cast<std::size_t>(k)]);
          child.state = h.pending_state;
          expanded.push_back(std::move(child));
        }
      }
      prune_hyps(expanded, beam_size);
      frontier = std::move(expanded);
    }
    prune_hyps(next_frame, beam_size);
    beam = std::move(next_frame);
  }
  for (const auto& h : beam) result.finished.push_back(detail::strip(scorer, h));
  return result;
}

// Label-synchronous aligner decoding over the diagonal pairing: step u reads
// encoder frame u. Stops at <eos> or max_len, whichever comes first; the
// <eos> stop fires once the best completion strictly dominates every live
// hypothesis, which is exact because scores only decay.
template <class Scorer>
DecodeResult aligner_decode(const Scorer& scorer, std::int64_t max_len, std::int64_t beam_size = 1) {
  if (max_len < 0 || max_len > scorer.frames())
    throw std::invalid_argument("aligner_decode: max_len must lie in [0, T]");
  if (beam_size < 1) throw std::invalid_argument("aligner_decode: beam_size must be >= 1");
  using Hyp = detail::BeamHyp<Scorer>;
  DecodeResult result;
  std::vector<Hyp> beam;
  beam.push_back({{scorer.sos_id()}, 0.0, scorer.initial_state()});
  std::vector<Hyp> done;
  for (std::int64_t u = 1; u <= max_len && !beam.empty(); ++u) {
    ++result.stats.frames_visited;
    std::vector<Hyp> expanded;
    for (auto& h : beam) {
      detail::ensure_pending(scorer, h, result.stats);
      auto joint = scorer.joiner_space(u, h.pending_context);
      ++result.stats.joiner_space_evals;
      std::vector<double> label = scorer.labels(joint);
      ++result.stats.label_softmax_evals;
      for (std::int64_t k = 0; k < scorer.vocab_size(); ++k) {
        if (k == scorer.sos_id()) continue;
        Hyp child;
        child.tokens = h.tokens;
        child.tokens.push_back(k);
        child.score = h.score + std::log(label[static_cast<std::size_t>(k)]);
        child.state = h.pending_state;
        (k == scorer.eos_id() ? done : expanded).push_back(std::move(child));
      }
    }
    prune_hyps(expanded, beam_size);
    beam = std::move(expanded);
    if (!done.empty()) {
      double best_done = done.front().score;
      for (const auto& h : done) best_done = std::max(best_done, h.score);
      bool dominated = true;
      for (const auto& h : beam)
        if (h.score >= best_done) dominated = false;
      if (dominated) break;
    }
  }
  prune_hyps(done, static_cast<std::int64_t>(done.size()) + 1);
  for (const auto& h : done) result.finished.push_back(detail::strip(scorer, h));
  if (result.finished.empty()) {
    result.truncated = true;
    if (!beam.empty()) result.finished.push_back(detail::strip(scorer, beam.front()));
    else result.finished.push_back(RankedHypothesis{});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Model-backed scorer: precomputed encoder output, tape-free evaluation.
// ---------------------------------------------------------------------------

class ModelScorer {
 public:
  using State = Tensor;
  using Context = Tensor;
  struct Step {
    Context context;
    State state;
  };

  ModelScorer(const Model& model, Tensor h_enc) : model_(model), h_enc_(std::move(h_enc)) {
    detail::require(h_enc_.rank() == 2 && h_enc_.dim(1) == model.config().encoder_dim,
                    "ModelScorer: h_enc must be [T x encoder_dim]");
  }

  State initial_state() const { return model_.predictor_initial_state(); }

  Step predictor_step(std::int64_t token, const State& s) const {
    auto r = model_.predictor_step(token, s);
    return {r.output, r.state};
  }

  Tensor joiner_space(std::int64_t frame, const Context& h_pred) const {
    return model_.joiner_joint(row(h_enc_, frame - 1), h_pred);
  }

  double gate(const Tensor& joint) const { return model_.gate_head(joint).item(); }

  std::vector<double> labels(const Tensor& joint) const {
    return model_.label_head(joint).vals();
  }

  std::int64_t frames() const { return h_enc_.dim(0); }
  std::int64_t vocab_size() const { return model_.config().vocab_size; }
  std::int64_t eos_id() const { return model_.config().eos_id(); }
  std::int64_t sos_id() const { return model_.config().sos_id(); }

 private:
  const Model& model_;
  Tensor h_enc_;
};

}  // namespace ca
