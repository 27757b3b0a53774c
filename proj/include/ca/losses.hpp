// ca/losses.hpp
// Training objectives: the full-sum transducer loss via the forward-backward
// recursion (log domain, analytic gradient node), the aligner cross-entropy,
// and the chunkwise label-CE + EOC-BCE pair. A brute-force path enumerator
// provides an independent check of the full-sum recursion on small grids.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ca/alignment.hpp"
#include "ca/common.hpp"
#include "ca/model.hpp"
#include "ca/tensor.hpp"

namespace ca {

// Probability floor before logs; keeps a saturated output from poisoning the
// loss with infinities while leaving gradients usable.
constexpr double kProbFloor = 1e-12;

// Log-probability lattice of a HAT joiner over a (T, U+1) grid:
//   lb[t, u]    = log blank probability at grid point (t, u)
//   ll[t, u, k] = log((1 - blank) * label_dist[k])
// Rows are laid out t-major, u-fast: row index g = t * (U+1) + u.
struct TransducerGrid {
  std::int64_t frames = 0;  // T
  std::int64_t labels = 0;  // U
  std::int64_t vocab = 0;   // V
  Tensor lb;                // [T*(U+1) x 1]
  Tensor ll;                // [T*(U+1) x V]

  std::int64_t row(std::int64_t t, std::int64_t u) const { return t * (labels + 1) + u; }

  // exp(lb) + sum_k exp(ll[k]) must be 1 at every grid point.
  double max_normalization_error() const {
    double worst = 0.0;
    for (std::int64_t g = 0; g < frames * (labels + 1); ++g) {
      double s = std::exp(lb.at(g, 0));
      for (std::int64_t k = 0; k < vocab; ++k) s += std::exp(ll.at(g, k));
      worst = std::max(worst, std::abs(s - 1.0));
    }
    return worst;
  }
};

// Assemble the full lattice from HAT joiner outputs for one utterance.
// Differentiable end to end; this is the memory-intensive T x U x (V+1) grid.
inline TransducerGrid build_transducer_grid(const Model& model, const Tensor& h_enc,
                                            const Tensor& h_pred) {
  std::int64_t t_frames = h_enc.dim(0);
  std::int64_t u1 = h_pred.dim(0);  // U + 1 predictor rows
  std::vector<std::int64_t> enc_idx, pred_idx;
  enc_idx.reserve(static_cast<std::size_t>(t_frames * u1));
  pred_idx.reserve(static_cast<std::size_t>(t_frames * u1));
  for (std::int64_t t = 0; t < t_frames; ++t)
    for (std::int64_t u = 0; u < u1; ++u) {
      enc_idx.push_back(t);
      pred_idx.push_back(u);
    }
  JoinerBatch jb = model.joiner(take_rows(h_enc, std::move(enc_idx)),
                                take_rows(h_pred, std::move(pred_idx)), true);
  TransducerGrid grid;
  grid.frames = t_frames;
  grid.labels = u1 - 1;
  grid.vocab = model.config().vocab_size;
  grid.lb = log(clamp_min(jb.gate, kProbFloor));
  Tensor one_minus = log(clamp_min(add_scalar(neg(jb.gate), 1.0), kProbFloor));
  grid.ll = add_colvec(log(clamp_min(jb.label, kProbFloor)), one_minus);
  return grid;
}

namespace detail {

// Forward recursion over the (T, U+1) lattice. alpha(0,0) = 0;
// alpha(t,u) = lse(alpha(t-1,u) + lb(t-1,u), alpha(t,u-1) + llt(t,u-1)).
// Returns alpha plus the total log-probability including the final blank.
inline std::vector<double> transducer_alpha(const std::vector<double>& lb,
                                            const std::vector<double>& llt, std::int64_t t_n,
                                            std::int64_t u_n, double* log_z) {
  std::int64_t u1 = u_n + 1;
  std::vector<double> a(static_cast<std::size_t>(t_n * u1), kNegInf);
  a[0] = 0.0;
  for (std::int64_t t = 0; t < t_n; ++t)
    for (std::int64_t u = 0; u <= u_n; ++u) {
      if (t == 0 && u == 0) continue;
      double s = kNegInf;
      if (t > 0) s = a[(t - 1) * u1 + u] + lb[(t - 1) * u1 + u];
      if (u > 0) s = logsumexp(s, a[t * u1 + u - 1] + llt[t * u_n + u - 1]);
      a[t * u1 + u] = s;
    }
  *log_z = a[(t_n - 1) * u1 + u_n] + lb[(t_n - 1) * u1 + u_n];
  return a;
}

}  // namespace detail

// Differentiable full-sum node: loss = -log sum over all monotone alignments.
// lb is [T x (U+1)] blank log-probs, llt is [T x U] log-probs of emitting the
// next reference label (empty when U = 0). Backward runs the beta recursion
// and injects the edge posteriors.
inline Tensor transducer_fullsum_node(const Tensor& lb, const Tensor& llt) {
  detail::require(lb.rank() == 2, "transducer_fullsum: lb must be [T x (U+1)]");
  std::int64_t t_n = lb.dim(0);
  std::int64_t u1 = lb.dim(1);
  std::int64_t u_n = u1 - 1;
  detail::require(t_n >= 1 && u1 >= 1, "transducer_fullsum: empty lattice");
  detail::require(llt.rank() == 2 && llt.dim(0) == t_n && llt.dim(1) == u_n,
                  "transducer_fullsum: llt must be [T x U]");
  double log_z = 0.0;
  std::vector<double> alpha = detail::transducer_alpha(lb.vals(), llt.vals(), t_n, u_n, &log_z);
  if (!std::isfinite(log_z)) throw NumericError("transducer_fullsum: non-finite path sum");
  Tensor out = Tensor::scalar(-log_z);
  if (Tape* tp = detail::tape_of({&lb, &llt})) {
    auto lbp = lb.payload(), lltp = llt.payload(), op = out.payload();
    tp->record(out, [lbp, lltp, op, t_n, u_n, u1, log_z, alpha = std::move(alpha)](Tape& t) {
      const auto* g = t.grad_ptr(op.get());
      if (!g) return;
      double go = (*g)[0];
      const auto& lbv = lbp->v;
      const auto& lltv = lltp->v;
      // beta(t,u): log-prob of completing from (t,u), final blank included
      std::vector<double> beta(static_cast<std::size_t>(t_n * u1), kNegInf);
      beta[(t_n - 1) * u1 + u_n] = lbv[(t_n - 1) * u1 + u_n];
      for (std::int64_t ti = t_n - 1; ti >= 0; --ti)
        for (std::int64_t u = u_n; u >= 0; --u) {
          if (ti == t_n - 1 && u == u_n) continue;
          double s = kNegInf;
          if (ti < t_n - 1) s = lbv[ti * u1 + u] + beta[(ti + 1) * u1 + u];
          if (u < u_n) s = logsumexp(s, lltv[ti * u_n + u] + beta[ti * u1 + u + 1]);
          beta[ti * u1 + u] = s;
        }
      auto& glb = t.grad_buf(lbp.get(), lbp->v.size());
      auto& gllt = t.grad_buf(lltp.get(), lltp->v.size());
      for (std::int64_t ti = 0; ti < t_n; ++ti)
        for (std::int64_t u = 0; u <= u_n; ++u) {
          std::int64_t i = ti * u1 + u;
          double post;
          if (ti == t_n - 1 && u == u_n) {
            post = std::exp(alpha[i] + lbv[i] - log_z);  // final blank, posterior 1
          } else if (ti < t_n - 1) {
            post = std::exp(alpha[i] + lbv[i] + beta[(ti + 1) * u1 + u] - log_z);
          } else {
            post = 0.0;  // blank at t = T-1, u < U leaves the lattice
          }
          glb[i] -= go * post;
          if (u < u_n) {
            double lp = std::exp(alpha[i] + lltv[ti * u_n + u] + beta[i + 1] - log_z);
            gllt[ti * u_n + u] -= go * lp;
          }
        }
    });
  }
  return out;
}

// Full-sum loss of one utterance from its lattice and reference labels.
// In strict mode every grid point must satisfy the HAT normalization.
inline Tensor transducer_full_sum(const TransducerGrid& grid,
                                  const std::vector<std::int64_t>& labels, bool strict = false) {
  if (static_cast<std::int64_t>(labels.size()) != grid.labels)
    throw std::invalid_argument("transducer_full_sum: label count does not match grid");
  for (auto y : labels)
    if (y < 0 || y >= grid.vocab)
      throw std::invalid_argument("transducer_full_sum: label id out of range");
  if (strict) {
    double err = grid.max_normalization_error();
    if (err > 1e-9)
      throw NumericError("transducer_full_sum: grid rows are not normalized (err=" +
                         fmt_double(err) + ")");
  }
  Tensor lb2d = reshape(grid.lb, {grid.frames, grid.labels + 1});
  Tensor llt;
  if (grid.labels == 0) {
    llt = Tensor::zeros({grid.frames, 0});
  } else {
    std::vector<std::int64_t> rows;
    std::vector<std::int64_t> cols;
    rows.reserve(static_cast<std::size_t>(grid.frames * grid.labels));
    cols.reserve(rows.capacity());
    for (std::int64_t t = 0; t < grid.frames; ++t)
      for (std::int64_t u = 0; u < grid.labels; ++u) {
        rows.push_back(grid.row(t, u));
        cols.push_back(labels[static_cast<std::size_t>(u)]);
      }
    llt = reshape(gather_cols(take_rows(grid.ll, std::move(rows)), std::move(cols)),
                  {grid.frames, grid.labels});
  }
  return transducer_fullsum_node(lb2d, llt);
}

// Exhaustive enumeration of every monotone alignment; the verification oracle
// for the recursion above. Only feasible on tiny grids.
inline double brute_force_transducer(const TransducerGrid& grid,
                                     const std::vector<std::int64_t>& labels) {
  std::int64_t t_n = grid.frames, u_n = static_cast<std::int64_t>(labels.size());
  if (t_n + u_n > 12)
    throw std::invalid_argument("brute_force_transducer: instance too large (T+U > 12)");
  double total = kNegInf;
  // walk every path of blank moves (t+1) and label moves (u+1) from (0,0)
  std::function<void(std::int64_t, std::int64_t, double)> walk = [&](std::int64_t t,
                                                                     std::int64_t u, double lp) {
    if (t == t_n - 1 && u == u_n) {
      total = logsumexp(total, lp + grid.lb.at(grid.row(t, u), 0));
      return;
    }
    if (t < t_n - 1) walk(t + 1, u, lp + grid.lb.at(grid.row(t, u), 0));
    if (u < u_n) walk(t, u + 1, lp + grid.ll.at(grid.row(t, u), labels[u]));
  };
  walk(0, 0, 0.0);
  return -total;
}

// -log p(target) summed over rows. `dists` is [U x V] row-stochastic.
inline Tensor chunkwise_label_ce(const Tensor& dists, const std::vector<std::int64_t>& targets,
                                 bool strict = false) {
  detail::require(dists.rank() == 2, "label_ce: dists must be [U x V]");
  detail::require(static_cast<std::int64_t>(targets.size()) == dists.dim(0),
                  "label_ce: one target per row required");
  for (auto y : targets)
    detail::require(y >= 0 && y < dists.dim(1), "label_ce: target out of range");
  if (dists.dim(0) == 0) return Tensor::scalar(0.0);
  if (strict) {
    for (std::size_t i = 0; i < targets.size(); ++i)
      if (dists.at(static_cast<std::int64_t>(i), targets[i]) <= 0.0)
        throw NumericError("label_ce: zero probability at target (infinite loss)");
  }
  Tensor picked = gather_cols(dists, std::vector<std::int64_t>(targets.begin(), targets.end()));
  return neg(sum(log(clamp_min(picked, kProbFloor))));
}

// Binary cross-entropy over the (U + N) EOC grid.
inline Tensor eoc_bce(const Tensor& probs, const EocTargetGrid& targets) {
  detail::require(probs.numel() == static_cast<std::int64_t>(targets.entries.size()),
                  "eoc_bce: probability/target length mismatch");
  for (double p : probs.vals())
    detail::require(p > 0.0 && p < 1.0, "eoc_bce: probabilities must lie in (0,1)");
  if (probs.numel() == 0) return Tensor::scalar(0.0);
  Tensor flat = reshape(probs, {probs.numel(), 1});
  std::vector<std::int64_t> pos_rows, neg_rows;
  for (std::size_t i = 0; i < targets.entries.size(); ++i)
    (targets.entries[i].target == 1 ? pos_rows : neg_rows).push_back(
        static_cast<std::int64_t>(i));
  Tensor loss = Tensor::scalar(0.0);
  if (!pos_rows.empty())
    loss = add(loss, neg(sum(log(clamp_min(take_rows(flat, std::move(pos_rows)), kProbFloor)))));
  if (!neg_rows.empty()) {
    Tensor one_minus = add_scalar(neg(take_rows(flat, std::move(neg_rows))), 1.0);
    loss = add(loss, neg(sum(log(clamp_min(one_minus, kProbFloor)))));
  }
  return loss;
}

// Diagonal cross-entropy of the aligner: pairs (h_enc_u, h_pred_u).
inline Tensor aligner_ce(const Model& model, const Tensor& h_enc, const Tensor& h_pred,
                         const std::vector<std::int64_t>& targets, bool strict = false) {
  std::int64_t u = static_cast<std::int64_t>(targets.size());
  if (h_enc.dim(0) < u)
    throw DataError("aligner_ce: need at least " + std::to_string(u) + " encoder frames, have " +
                    std::to_string(h_enc.dim(0)));
  detail::require(h_pred.dim(0) >= u, "aligner_ce: predictor rows missing");
  std::vector<std::int64_t> diag(static_cast<std::size_t>(u));
  std::iota(diag.begin(), diag.end(), 0);
  JoinerBatch jb = model.joiner(take_rows(h_enc, diag), take_rows(h_pred, diag), false);
  return chunkwise_label_ce(jb.label, targets, strict);
}

// Loss value plus diagnostics for one utterance (or one batch when summed).
struct LossReport {
  double total = 0.0;
  double label_ce = 0.0;
  double eoc_bce = 0.0;
  std::int64_t grid_label_entries = 0;  // U * V scalars
  std::int64_t grid_eoc_entries = 0;    // U + N scalars
  std::int64_t grid_transducer_entries = 0;  // T * U * (V+1) scalars

  void accumulate(const LossReport& other) {
    total += other.total;
    label_ce += other.label_ce;
    eoc_bce += other.eoc_bce;
    grid_label_entries += other.grid_label_entries;
    grid_eoc_entries += other.grid_eoc_entries;
    grid_transducer_entries += other.grid_transducer_entries;
  }
};

struct ChunkwiseLoss {
  Tensor loss;  // label CE + EOC BCE, unweighted sum
  LossReport report;
};

// Chunkwise objective for one utterance: label cross-entropy over the U label
// entries plus binary cross-entropy over the (U + N) EOC grid, computed from
// the grid entries produced by build_joiner_pairs.
inline ChunkwiseLoss total_chunkwise_loss(const Model& model, const Tensor& h_enc,
                                          const Tensor& h_pred,
                                          const std::vector<GridEntry>& entries,
                                          bool strict = false) {
  std::vector<std::int64_t> label_frames, label_steps, label_targets;
  std::vector<std::int64_t> eoc_frames, eoc_steps;
  EocTargetGrid bce_targets;
  for (const auto& e : entries) {
    if (e.kind == GridKind::kLabel) {
      label_frames.push_back(e.frame - 1);
      label_steps.push_back(e.pred_step - 1);
      label_targets.push_back(e.target);
    } else {
      eoc_frames.push_back(e.frame - 1);
      eoc_steps.push_back(e.pred_step - 1);
    }
    bce_targets.entries.push_back(
        {e.frame, e.pred_step, e.kind == GridKind::kEoc ? 1 : 0});
  }
  for (auto f : label_frames)
    if (f >= h_enc.dim(0)) throw DataError("chunkwise loss: grid frame beyond encoder output");
  for (auto f : eoc_frames)
    if (f >= h_enc.dim(0)) throw DataError("chunkwise loss: EOC frame beyond encoder output");

  ChunkwiseLoss out;
  std::int64_t vocab = model.config().vocab_size;
  Tensor gates_all;
  Tensor label_loss = Tensor::scalar(0.0);
  if (!label_targets.empty()) {
    JoinerBatch lb = model.joiner(take_rows(h_enc, label_frames),
                                  take_rows(h_pred, label_steps), true);
    label_loss = chunkwise_label_ce(lb.label, label_targets, strict);
    gates_all = lb.gate;
  }
  // chunk-final EOC entries: gate head only, no label softmax
  JoinerBatch eb = model.joiner(take_rows(h_enc, eoc_frames), take_rows(h_pred, eoc_steps), true,
                                /*want_label=*/false);
  // assemble the (U+N) probability column in grid order
  std::vector<Tensor> rows;
  rows.reserve(entries.size());
  std::int64_t li = 0, ei = 0;
  for (const auto& e : entries) {
    if (e.kind == GridKind::kLabel)
      rows.push_back(row(gates_all, li++));
    else
      rows.push_back(row(eb.gate, ei++));
  }
  Tensor eoc_probs = stack_rows(rows);
  Tensor bce = eoc_bce(eoc_probs, bce_targets);
  out.loss = add(label_loss, bce);

  out.report.label_ce = label_loss.item();
  out.report.eoc_bce = bce.item();
  out.report.total = out.loss.item();
  std::int64_t u = static_cast<std::int64_t>(label_targets.size());
  std::int64_t n = static_cast<std::int64_t>(eoc_frames.size());
  out.report.grid_label_entries = u * vocab;
  out.report.grid_eoc_entries = u + n;
  if (out.report.grid_eoc_entries != static_cast<std::int64_t>(entries.size()))
    throw std::logic_error("chunkwise loss: grid economy violated");
  return out;
}

}  // namespace ca
