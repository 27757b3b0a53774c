// Alignment machinery tests: delay shifts, chunk assignment, spill repair,
// and EOC grid construction, with randomized property checks against the
// definitions.
#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "ca/alignment.hpp"
#include "ca/common.hpp"

using ca::ChunkAssignment;
using ca::ForcedAlignment;
using ca::Rng;

namespace {

ForcedAlignment align(std::vector<std::int64_t> frames, std::int64_t t) {
  return ForcedAlignment{std::move(frames), t};
}

ForcedAlignment random_alignment(Rng& rng, std::int64_t max_t = 40, std::int64_t max_u = 12) {
  std::int64_t t = rng.uniform_range(2, max_t);
  std::int64_t u = rng.uniform_range(0, max_u);
  std::vector<std::int64_t> frames(static_cast<std::size_t>(u));
  for (auto& f : frames) f = rng.uniform_range(1, t);
  std::sort(frames.begin(), frames.end());
  return align(std::move(frames), t);
}

}  // namespace

TEST_CASE("apply_delay shifts and clamps") {
  auto a = align({3, 7, 18}, 20);
  auto d0 = ca::apply_delay(a, 0);
  CHECK(d0.alignment.frames == std::vector<std::int64_t>{3, 7, 18});
  CHECK(d0.clamped_labels == 0);

  auto d2 = ca::apply_delay(a, 2);
  CHECK(d2.alignment.frames == std::vector<std::int64_t>{5, 9, 20});
  CHECK(d2.clamped_labels == 0);

  auto d5 = ca::apply_delay(a, 5);
  CHECK(d5.alignment.frames == std::vector<std::int64_t>{8, 12, 20});
  CHECK(d5.clamped_labels == 1);
}

TEST_CASE("delay in ms converts to encoder frames") {
  // 320 ms at a 10 ms stride with frame reduction 4
  CHECK(ca::delay_frames_from_ms(320, 10, 4) == 8);
  CHECK(ca::delay_frames_from_ms(0, 10, 4) == 0);
  CHECK(ca::delay_frames_from_ms(160, 10, 4) == 4);
}

TEST_CASE("assign_to_chunks follows the ceil rule") {
  auto c = ca::assign_to_chunks(align({3, 7, 18}, 20), 10);
  CHECK(c.chunk_count == 2);
  CHECK(c.counts == std::vector<std::int64_t>{2, 1});
  REQUIRE(c.slots.size() == 3);
  CHECK((c.slots[0].chunk == 1 && c.slots[0].rank == 1));
  CHECK((c.slots[1].chunk == 1 && c.slots[1].rank == 2));
  CHECK((c.slots[2].chunk == 2 && c.slots[2].rank == 1));
}

TEST_CASE("assign_to_chunks handles empty transcripts and ties") {
  auto empty = ca::assign_to_chunks(align({}, 20), 10);
  CHECK(empty.counts == std::vector<std::int64_t>{0, 0});

  auto ties = ca::assign_to_chunks(align({1, 1, 1}, 4), 4);
  CHECK(ties.counts == std::vector<std::int64_t>{3});
  for (std::int64_t i = 0; i < 3; ++i) CHECK(ties.slots[i].rank == i + 1);
}

TEST_CASE("assign_to_chunks after zero delay is the identity") {
  Rng rng = Rng::seeded(100);
  for (int i = 0; i < 200; ++i) {
    auto a = random_alignment(rng);
    auto d = ca::apply_delay(a, 0);
    CHECK(d.alignment.frames == a.frames);
    std::int64_t lc = rng.uniform_range(2, 9);
    auto c1 = ca::assign_to_chunks(a, lc);
    auto c2 = ca::assign_to_chunks(d.alignment, lc);
    CHECK(c1.counts == c2.counts);
  }
}

TEST_CASE("chunk count and label totals are exact") {
  Rng rng = Rng::seeded(101);
  for (int i = 0; i < 200; ++i) {
    auto a = random_alignment(rng);
    std::int64_t lc = rng.uniform_range(2, 9);
    auto c = ca::assign_to_chunks(a, lc);
    CHECK(c.chunk_count == (a.total_frames + lc - 1) / lc);
    std::int64_t total = 0;
    for (auto n : c.counts) total += n;
    CHECK(total == a.label_count());
  }
}

TEST_CASE("repair_spill moves a single overflow forward") {
  // L_c = 4, T = 8: chunk 1 capacity is 3, four labels land there
  auto c = ca::assign_to_chunks(align({1, 2, 3, 4}, 8), 4);
  CHECK(c.counts == std::vector<std::int64_t>{4, 0});
  CHECK_FALSE(c.capacity_ok());
  auto r = ca::repair_spill(c);
  CHECK(r.counts == std::vector<std::int64_t>{3, 1});
  CHECK(r.capacity_ok());
  CHECK(r.slots[3].chunk == 2);
  CHECK(r.slots[3].rank == 1);
}

TEST_CASE("repair_spill keeps valid assignments unchanged") {
  auto c = ca::assign_to_chunks(align({3, 7, 18}, 20), 10);
  auto r = ca::repair_spill(c);
  CHECK(r.counts == c.counts);
  for (std::size_t i = 0; i < c.slots.size(); ++i) {
    CHECK(r.slots[i].chunk == c.slots[i].chunk);
    CHECK(r.slots[i].rank == c.slots[i].rank);
  }
}

TEST_CASE("repair_spill property: capacity and label order hold") {
  Rng rng = Rng::seeded(102);
  int repaired = 0;
  for (int i = 0; i < 500; ++i) {
    auto a = random_alignment(rng, 30, 20);
    std::int64_t lc = rng.uniform_range(2, 6);
    auto c = ca::assign_to_chunks(a, lc);
    ChunkAssignment r;
    try {
      r = ca::repair_spill(c);
    } catch (const ca::DataError&) {
      // genuinely unrepairable: labels only move forward, so some suffix of
      // chunks must hold more labels than its combined capacity
      bool overfull_suffix = false;
      std::int64_t cap = 0, labels = 0;
      for (std::int64_t n = c.chunk_count; n >= 1; --n) {
        cap += c.capacity(n);
        labels += c.counts[n - 1];
        if (labels > cap) overfull_suffix = true;
      }
      CHECK(overfull_suffix);
      continue;
    }
    ++repaired;
    CHECK(r.capacity_ok());
    std::int64_t total = 0;
    for (auto n : r.counts) total += n;
    CHECK(total == c.label_count());
    // order preserved: (chunk, rank) strictly increases lexicographically,
    // and nobody moved to an earlier chunk
    for (std::size_t j = 0; j + 1 < r.slots.size(); ++j) {
      bool increasing = r.slots[j].chunk < r.slots[j + 1].chunk ||
                        (r.slots[j].chunk == r.slots[j + 1].chunk &&
                         r.slots[j].rank < r.slots[j + 1].rank);
      CHECK(increasing);
    }
    for (std::size_t j = 0; j < r.slots.size(); ++j) CHECK(r.slots[j].chunk >= c.slots[j].chunk);
  }
  CHECK(repaired > 100);
}

TEST_CASE("build_eoc_targets on forced examples") {
  // counts [2, 0, 1] over T = 9, L_c = 3 -> targets 0,0,1, 1, 0,1
  auto c = ca::assign_to_chunks(align({1, 2, 7}, 9), 3);
  REQUIRE(c.counts == std::vector<std::int64_t>{2, 0, 1});
  auto grid = ca::build_eoc_targets(c);
  std::vector<int> targets;
  for (const auto& e : grid.entries) targets.push_back(e.target);
  CHECK(targets == std::vector<int>{0, 0, 1, 1, 0, 1});
  REQUIRE(grid.entries.size() == 6);
  // chunk-final entries sit one frame past the chunk's labels
  CHECK(grid.entries[2].frame == 3);
  CHECK(grid.entries[3].frame == 4);
  CHECK(grid.entries[5].frame == 8);
  // the EOC entry reuses the predictor step following the chunk's last label
  CHECK(grid.entries[2].pred_step == 3);
  CHECK(grid.entries[3].pred_step == 3);
  CHECK(grid.entries[5].pred_step == 4);

  auto single = ca::build_eoc_targets(ca::assign_to_chunks(align({}, 3), 4));
  REQUIRE(single.entries.size() == 1);
  CHECK(single.entries[0].target == 1);
  CHECK(single.entries[0].frame == 1);
  CHECK(single.entries[0].pred_step == 1);
}

TEST_CASE("build_eoc_targets property: N ones terminating chunk blocks") {
  Rng rng = Rng::seeded(103);
  for (int i = 0; i < 300; ++i) {
    auto a = random_alignment(rng);
    std::int64_t lc = rng.uniform_range(2, 8);
    ChunkAssignment c;
    try {
      c = ca::repair_spill(ca::assign_to_chunks(a, lc));
    } catch (const ca::DataError&) {
      continue;
    }
    auto grid = ca::build_eoc_targets(c);
    CHECK(static_cast<std::int64_t>(grid.entries.size()) == c.label_count() + c.chunk_count);
    std::int64_t ones = 0;
    std::size_t pos = 0;
    for (std::int64_t n = 1; n <= c.chunk_count; ++n) {
      for (std::int64_t j = 0; j < c.counts[n - 1]; ++j) CHECK(grid.entries[pos++].target == 0);
      CHECK(grid.entries[pos++].target == 1);
      ++ones;
    }
    CHECK(ones == c.chunk_count);
    CHECK(pos == grid.entries.size());
  }
}

TEST_CASE("build_joiner_pairs direct indexing") {
  // counts [1], L_c = 4, token y1 = 5
  auto c1 = ca::assign_to_chunks(align({1}, 4), 4);
  auto g1 = ca::build_joiner_pairs(c1, {5});
  REQUIRE(g1.size() == 2);
  CHECK((g1[0].frame == 1 && g1[0].pred_step == 1 && g1[0].kind == ca::GridKind::kLabel));
  CHECK(g1[0].target == 5);
  CHECK((g1[1].frame == 2 && g1[1].pred_step == 2 && g1[1].kind == ca::GridKind::kEoc));

  // counts [2, 1], L_c = 3: label frames 1, 2 then 4; eoc frames 3 and 5
  auto c2 = ca::assign_to_chunks(align({1, 2, 4}, 6), 3);
  REQUIRE(c2.counts == std::vector<std::int64_t>{2, 1});
  auto g2 = ca::build_joiner_pairs(c2, {7, 8, 9});
  std::vector<std::int64_t> label_frames, eoc_frames;
  for (const auto& e : g2)
    (e.kind == ca::GridKind::kLabel ? label_frames : eoc_frames).push_back(e.frame);
  CHECK(label_frames == std::vector<std::int64_t>{1, 2, 4});
  CHECK(eoc_frames == std::vector<std::int64_t>{3, 5});
}

TEST_CASE("build_joiner_pairs property: entry counts and grid economy") {
  Rng rng = Rng::seeded(104);
  for (int i = 0; i < 300; ++i) {
    auto a = random_alignment(rng);
    std::int64_t lc = rng.uniform_range(2, 8);
    ChunkAssignment c;
    try {
      c = ca::repair_spill(ca::assign_to_chunks(a, lc));
    } catch (const ca::DataError&) {
      continue;
    }
    std::vector<std::int64_t> tokens(static_cast<std::size_t>(c.label_count()), 1);
    auto g = ca::build_joiner_pairs(c, tokens);
    std::int64_t labels = 0, eocs = 0;
    for (const auto& e : g) (e.kind == ca::GridKind::kLabel ? labels : eocs) += 1;
    CHECK(labels == c.label_count());
    CHECK(static_cast<std::int64_t>(g.size()) == c.label_count() + c.chunk_count);
    // grid economy: U*V label-grid scalars + (U+N) EOC scalars
    std::int64_t vocab = 10;
    auto counts = ca::grid_entry_counts(a.total_frames, c.label_count(), vocab, lc);
    CHECK(counts.chunkwise == labels * vocab + (labels + eocs));
  }
}

TEST_CASE("grid out of capacity throws") {
  auto c = ca::assign_to_chunks(align({1, 2, 3, 4}, 8), 4);
  CHECK_THROWS_AS(ca::build_eoc_targets(c), ca::DataError);
  CHECK_THROWS_AS(ca::build_joiner_pairs(c, {1, 2, 3, 4}), ca::DataError);
}

TEST_CASE("grid_entry_counts reference arithmetic") {
  auto g = ca::grid_entry_counts(100, 20, 1000, 10);
  CHECK(g.transducer == 2002000);
  CHECK(g.chunkwise == 20030);
}

TEST_CASE("alignment validation rejects malformed input") {
  CHECK_THROWS_AS(align({0, 2}, 5).validate(), ca::DataError);
  CHECK_THROWS_AS(align({2, 6}, 5).validate(), ca::DataError);
  CHECK_THROWS_AS(align({4, 2}, 5).validate(), ca::DataError);
  CHECK_THROWS_AS(ca::assign_to_chunks(align({1}, 4), 1), std::invalid_argument);
}
