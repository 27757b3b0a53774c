// ca/alignment.hpp
// Forced-alignment bookkeeping for chunkwise training: delay shifting,
// label-to-chunk assignment, spill repair, and the end-of-chunk target grid.
// Frames and predictor steps are 1-based throughout, matching the grid
// indexing used by the joiner.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ca/common.hpp"

namespace ca {

// Per-label encoder end frames (1-based, nondecreasing) over T encoder frames.
struct ForcedAlignment {
  std::vector<std::int64_t> frames;
  std::int64_t total_frames = 0;  // T

  std::int64_t label_count() const { return static_cast<std::int64_t>(frames.size()); }

  void validate() const {
    if (total_frames < 1) throw DataError("alignment: total_frames must be >= 1");
    std::int64_t prev = 1;
    for (auto f : frames) {
      if (f < 1 || f > total_frames)
        throw DataError("alignment: frame " + std::to_string(f) + " outside [1, " +
                        std::to_string(total_frames) + "]");
      if (f < prev) throw DataError("alignment: frames must be nondecreasing");
      prev = f;
    }
  }
};

struct DelayedAlignment {
  ForcedAlignment alignment;
  std::int64_t clamped_labels = 0;  // labels pushed past T and clamped back
};

// Shift every end frame later by delay_frames, clamping at T.
inline DelayedAlignment apply_delay(const ForcedAlignment& a, std::int64_t delay_frames) {
  if (delay_frames < 0) throw std::invalid_argument("apply_delay: negative delay");
  a.validate();
  DelayedAlignment out;
  out.alignment.total_frames = a.total_frames;
  out.alignment.frames.reserve(a.frames.size());
  for (auto f : a.frames) {
    std::int64_t shifted = f + delay_frames;
    if (shifted > a.total_frames) {
      shifted = a.total_frames;
      ++out.clamped_labels;
    }
    out.alignment.frames.push_back(shifted);
  }
  return out;
}

// Delay expressed in milliseconds of audio -> encoder frames.
inline std::int64_t delay_frames_from_ms(std::int64_t delay_ms, std::int64_t stride_ms,
                                         std::int64_t frame_reduction) {
  if (stride_ms <= 0 || frame_reduction <= 0)
    throw std::invalid_argument("delay_frames_from_ms: bad stride/reduction");
  return delay_ms / (stride_ms * frame_reduction);
}

struct LabelSlot {
  std::int64_t chunk = 0;  // n, 1-based
  std::int64_t rank = 0;   // u_n, 1-based within the chunk
};

// Labels grouped into fixed-length chunks. counts[n-1] = U_n; one frame per
// chunk is reserved for the end-of-chunk entry, so capacity is chunk_len - 1.
struct ChunkAssignment {
  std::int64_t chunk_len = 0;     // L_c
  std::int64_t chunk_count = 0;   // N = ceil(T / L_c)
  std::int64_t total_frames = 0;  // T
  std::vector<std::int64_t> counts;
  std::vector<LabelSlot> slots;  // one per label, original order

  std::int64_t label_count() const { return static_cast<std::int64_t>(slots.size()); }

  std::int64_t chunk_frame_count(std::int64_t n) const {  // length of chunk n
    std::int64_t end = std::min(n * chunk_len, total_frames);
    return end - (n - 1) * chunk_len;
  }

  std::int64_t capacity(std::int64_t n) const { return chunk_frame_count(n) - 1; }

  bool capacity_ok() const {
    for (std::int64_t n = 1; n <= chunk_count; ++n)
      if (counts[n - 1] > capacity(n)) return false;
    return true;
  }

  void require_capacity() const {
    for (std::int64_t n = 1; n <= chunk_count; ++n)
      if (counts[n - 1] > capacity(n))
        throw DataError("chunk " + std::to_string(n) + " holds " + std::to_string(counts[n - 1]) +
                        " labels but has capacity " + std::to_string(capacity(n)));
  }
};

// Label with end frame f belongs to chunk ceil(f / L_c); within-chunk ranks
// follow original label order (ties included).
inline ChunkAssignment assign_to_chunks(const ForcedAlignment& a, std::int64_t chunk_len) {
  if (chunk_len < 2) throw std::invalid_argument("assign_to_chunks: chunk_len must be >= 2");
  a.validate();
  ChunkAssignment c;
  c.chunk_len = chunk_len;
  c.total_frames = a.total_frames;
  c.chunk_count = (a.total_frames + chunk_len - 1) / chunk_len;
  c.counts.assign(static_cast<std::size_t>(c.chunk_count), 0);
  c.slots.reserve(a.frames.size());
  for (auto f : a.frames) {
    std::int64_t n = (f + chunk_len - 1) / chunk_len;
    c.slots.push_back({n, ++c.counts[n - 1]});
  }
  return c;
}

// Move labels that overflow a chunk forward, in order, to the earliest later
// chunk with room. Fails when the suffix capacity cannot absorb them.
inline ChunkAssignment repair_spill(const ChunkAssignment& in) {
  ChunkAssignment out = in;
  // Desired chunk per label from the input assignment; a label may only move
  // to a later chunk, so fill greedily left to right.
  std::vector<std::int64_t> desired(in.slots.size());
  for (std::size_t i = 0; i < in.slots.size(); ++i) desired[i] = in.slots[i].chunk;
  out.counts.assign(static_cast<std::size_t>(in.chunk_count), 0);
  out.slots.assign(in.slots.size(), {});
  std::size_t next = 0;  // next label to place
  for (std::int64_t n = 1; n <= in.chunk_count; ++n) {
    std::int64_t cap = in.capacity(n);
    while (next < desired.size() && desired[next] <= n && out.counts[n - 1] < cap) {
      out.counts[n - 1] += 1;
      out.slots[next] = {n, out.counts[n - 1]};
      ++next;
    }
  }
  if (next < desired.size())
    throw DataError("repair_spill: utterance unrepairable, " +
                    std::to_string(desired.size() - next) +
                    " labels exceed total chunk capacity");
  return out;
}

// One binary-target entry of the (U + N) x 1 EOC grid.
struct EocEntry {
  std::int64_t frame = 0;      // encoder frame, 1-based
  std::int64_t pred_step = 0;  // predictor output index, 1-based
  int target = 0;              // 1 only at the final entry of each chunk
};

struct EocTargetGrid {
  std::vector<EocEntry> entries;
};

// Per chunk n: U_n zero-target entries at frames (n-1)*L_c + j paired with the
// label's predictor step, then one one-target entry at the following frame
// paired with the predictor step that has consumed every label through chunk n.
inline EocTargetGrid build_eoc_targets(const ChunkAssignment& c) {
  c.require_capacity();
  EocTargetGrid grid;
  grid.entries.reserve(static_cast<std::size_t>(c.label_count() + c.chunk_count));
  std::int64_t consumed = 0;  // labels in chunks 1..n-1 plus current prefix
  for (std::int64_t n = 1; n <= c.chunk_count; ++n) {
    std::int64_t base = (n - 1) * c.chunk_len;
    std::int64_t u_n = c.counts[n - 1];
    for (std::int64_t j = 1; j <= u_n; ++j) {
      ++consumed;
      grid.entries.push_back({base + j, consumed, 0});
    }
    grid.entries.push_back({base + u_n + 1, consumed + 1, 1});
  }
  return grid;
}

enum class GridKind { kLabel, kEoc };

// One joiner evaluation of the chunkwise training grid. Label entries carry
// the target token and an implicit EOC target of 0; EOC entries carry target 1.
struct GridEntry {
  std::int64_t frame = 0;
  std::int64_t pred_step = 0;
  GridKind kind = GridKind::kLabel;
  std::int64_t target = 0;  // token id for labels, 1 for EOC finals
};

// Full evaluation list driving the chunkwise forward pass: U label entries
// (Eq.-style indexing frame = (n-1)*L_c + u_n) plus N chunk-final EOC entries.
// `tokens` supplies the label targets, in the same order as the slots.
inline std::vector<GridEntry> build_joiner_pairs(const ChunkAssignment& c,
                                                 const std::vector<std::int64_t>& tokens) {
  if (static_cast<std::int64_t>(tokens.size()) != c.label_count())
    throw std::invalid_argument("build_joiner_pairs: token/slot count mismatch");
  EocTargetGrid eoc = build_eoc_targets(c);
  std::vector<GridEntry> out;
  out.reserve(eoc.entries.size());
  std::size_t label_idx = 0;
  for (const auto& e : eoc.entries) {
    if (e.target == 1) {
      out.push_back({e.frame, e.pred_step, GridKind::kEoc, 1});
    } else {
      out.push_back({e.frame, e.pred_step, GridKind::kLabel, tokens[label_idx]});
      ++label_idx;
    }
  }
  return out;
}

// Scalar grid sizes for the efficiency comparison: the transducer evaluates
// T*U*(V+1) entries, the chunkwise objective U*V label entries + (U+N) EOC
// entries.
struct GridEntryCounts {
  std::int64_t transducer = 0;
  std::int64_t chunkwise = 0;
};

inline GridEntryCounts grid_entry_counts(std::int64_t t_frames, std::int64_t labels,
                                         std::int64_t vocab, std::int64_t chunk_len) {
  GridEntryCounts g;
  std::int64_t chunks = (t_frames + chunk_len - 1) / chunk_len;
  g.transducer = t_frames * labels * (vocab + 1);
  g.chunkwise = labels * vocab + labels + chunks;
  return g;
}

}  // namespace ca
