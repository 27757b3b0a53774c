// Model tests: frame reduction, attention masks, predictor state replay,
// joiner algebra against a scalar-loop oracle, and checkpoint round-trips.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <vector>

#include "ca/model.hpp"

using ca::Arch;
using ca::MaskMode;
using ca::Model;
using ca::ModelConfig;
using ca::Rng;
using ca::Tensor;
using Catch::Approx;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.feature_dim = 4;
  c.encoder_dim = 8;
  c.predictor_dim = 6;
  c.joiner_dim = 8;
  c.vocab_size = 5;
  c.encoder_layers = 2;
  c.attention_heads = 2;
  c.ffn_dim = 16;
  c.frame_reduction = 2;
  c.init_seed = 7;
  return c;
}

// Independent scalar-loop re-implementation of the HAT joiner heads.
ca::JoinerOutputs joiner_oracle(const Model& m, const std::vector<double>& h_enc,
                                const std::vector<double>& h_pred, bool want_gate) {
  const auto& c = m.config();
  std::vector<double> joint(static_cast<std::size_t>(c.joiner_dim));
  for (std::int64_t d = 0; d < c.joiner_dim; ++d) {
    double s = m.param("joiner.b").at(d);
    for (std::int64_t i = 0; i < c.encoder_dim; ++i)
      s += h_enc[i] * m.param("joiner.wenc").at(i, d);
    for (std::int64_t i = 0; i < c.predictor_dim; ++i)
      s += h_pred[i] * m.param("joiner.wpred").at(i, d);
    joint[d] = std::tanh(s);
  }
  ca::JoinerOutputs out;
  if (want_gate) {
    double z = m.param("joiner.bgate").at(0);
    for (std::int64_t d = 0; d < c.joiner_dim; ++d) z += joint[d] * m.param("joiner.wgate").at(d, 0);
    out.gate = 1.0 / (1.0 + std::exp(-z));
  }
  std::vector<double> logits(static_cast<std::size_t>(c.vocab_size));
  double mx = -1e300;
  for (std::int64_t k = 0; k < c.vocab_size; ++k) {
    double z = m.param("joiner.blabel").at(k);
    for (std::int64_t d = 0; d < c.joiner_dim; ++d) z += joint[d] * m.param("joiner.wlabel").at(d, k);
    logits[k] = z;
    mx = std::max(mx, z);
  }
  double zsum = 0.0;
  for (auto& l : logits) {
    l = std::exp(l - mx);
    zsum += l;
  }
  for (auto& l : logits) l /= zsum;
  out.label_dist = logits;
  return out;
}

void zero_param(Model& m, const std::string& name) {
  m.set_param(name, Tensor::zeros(m.param(name).shape()));
}

}  // namespace

TEST_CASE("encode applies frame reduction by flooring") {
  ModelConfig c = small_config();
  c.frame_reduction = 4;
  Model m(Arch::kChunkwise, c);
  Rng rng = Rng::seeded(1);
  Tensor feats = Tensor::uniform({8, 4}, -1, 1, rng);
  auto r = m.encode(feats);
  CHECK(r.encoded.dim(0) == 2);
  CHECK(r.encoded.dim(1) == c.encoder_dim);
  // 11 raw frames also floor to 2
  Tensor feats11 = Tensor::uniform({11, 4}, -1, 1, rng);
  CHECK(m.encode(feats11).encoded.dim(0) == 2);
  CHECK_THROWS_AS(m.encode(Tensor::uniform({3, 4}, -1, 1, rng)), ca::DataError);
}

TEST_CASE("offline mask leaves every attention position open") {
  Tensor mask = ca::offline_mask(5);
  for (std::int64_t i = 0; i < 25; ++i) CHECK(mask.vals()[i] == 0.0);
}

TEST_CASE("streaming mask matches the window definition") {
  // current = 2, history = 2 frames, T = 6: query frame 5 (1-based) sees 3..6
  Tensor mask = ca::streaming_mask(6, 2, 2);
  auto visible = [&](std::int64_t q, std::int64_t k) { return mask.at(q, k) == 0.0; };
  for (std::int64_t k = 0; k < 6; ++k) {
    bool want = k >= 2 && k <= 5;
    CHECK(visible(4, k) == want);
  }
  // independent enumeration over every query from the chunk-window definition
  for (std::int64_t q = 0; q < 6; ++q) {
    std::int64_t chunk = q / 2;
    for (std::int64_t k = 0; k < 6; ++k) {
      bool want = k <= chunk * 2 + 1 && k >= chunk * 2 - 2;
      CHECK(visible(q, k) == want);
    }
  }
}

TEST_CASE("streaming mask never looks past the chunk end") {
  Rng rng = Rng::seeded(11);
  for (int trial = 0; trial < 40; ++trial) {
    std::int64_t t = rng.uniform_range(1, 24);
    std::int64_t cur = rng.uniform_range(1, 8);
    std::int64_t hist = rng.uniform_range(0, 10);
    Tensor mask = ca::streaming_mask(t, cur, hist);
    for (std::int64_t q = 0; q < t; ++q) {
      std::int64_t chunk_end = (q / cur + 1) * cur - 1;
      bool any_open = false;
      for (std::int64_t k = 0; k < t; ++k) {
        if (mask.at(q, k) == 0.0) any_open = true;
        if (k > chunk_end) CHECK(mask.at(q, k) == ca::kMaskHidden);
      }
      CHECK(any_open);
    }
  }
}

TEST_CASE("offline encode equals streaming encode with a covering window") {
  ModelConfig c = small_config();
  Model m(Arch::kChunkwise, c);
  Rng rng = Rng::seeded(5);
  Tensor feats = Tensor::uniform({14, 4}, -1, 1, rng);
  auto offline = m.encode(feats);

  ModelConfig cs = c;
  cs.mask_mode = MaskMode::kStreaming;
  cs.mask_current_frames = 32;  // >= T
  cs.mask_history_frames = 32;
  Model ms(Arch::kChunkwise, cs);
  for (const auto& [name, t] : m.params()) ms.set_param(name, t);
  auto streaming = ms.encode(feats);
  REQUIRE(offline.encoded.numel() == streaming.encoded.numel());
  for (std::int64_t i = 0; i < offline.encoded.numel(); ++i)
    CHECK(offline.encoded.vals()[i] == streaming.encoded.vals()[i]);
}

TEST_CASE("predictor steps are deterministic and replayable") {
  Model m(Arch::kChunkwise, small_config());
  Tensor s0 = m.predictor_initial_state();
  auto a = m.predictor_step(2, s0);
  auto b = m.predictor_step(2, s0);
  for (std::int64_t i = 0; i < a.output.numel(); ++i)
    CHECK(a.output.vals()[i] == b.output.vals()[i]);

  // stepping <sos> from zeros produces the first-label context
  auto first = m.predictor_step(m.config().sos_id(), s0);
  CHECK(first.output.numel() == m.config().predictor_dim);

  // replay from a saved intermediate state matches the straight-through run
  std::vector<std::int64_t> steps = {m.config().sos_id(), 1, 3, 0};
  Tensor state = s0;
  Tensor saved;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    state = m.predictor_step(steps[i], state).state;
    if (i == 1) saved = state;
  }
  Tensor replayed = saved;
  for (std::size_t i = 2; i < steps.size(); ++i)
    replayed = m.predictor_step(steps[i], replayed).state;
  for (std::int64_t i = 0; i < state.numel(); ++i)
    CHECK(state.vals()[i] == replayed.vals()[i]);

  CHECK_THROWS_AS(m.predictor_step(99, s0), std::invalid_argument);
}

TEST_CASE("predictor_matrix rows equal manual stepping") {
  Model m(Arch::kChunkwise, small_config());
  std::vector<std::int64_t> tokens = {0, 2, 4};
  Tensor mat = m.predictor_matrix(tokens, 4);
  REQUIRE(mat.dim(0) == 4);
  Tensor state = m.predictor_initial_state();
  std::int64_t tok = m.config().sos_id();
  for (std::int64_t i = 0; i < 4; ++i) {
    auto st = m.predictor_step(tok, state);
    for (std::int64_t j = 0; j < mat.dim(1); ++j) CHECK(mat.at(i, j) == st.output.at(0, j));
    state = st.state;
    if (i < 3) tok = tokens[static_cast<std::size_t>(i)];
  }
}

TEST_CASE("zeroed joiner parameters give a half gate and uniform labels") {
  Model m(Arch::kChunkwise, small_config());
  for (const auto& name : {"joiner.wenc", "joiner.wpred", "joiner.b", "joiner.wgate",
                           "joiner.bgate", "joiner.wlabel", "joiner.blabel"})
    zero_param(m, name);
  Rng rng = Rng::seeded(2);
  Tensor he = Tensor::uniform({8}, -1, 1, rng);
  Tensor hp = Tensor::uniform({6}, -1, 1, rng);
  auto out = m.chunkwise_joiner(he, hp);
  REQUIRE(out.gate.has_value());
  CHECK(*out.gate == 0.5);
  for (double p : out.label_dist) CHECK(p == Approx(1.0 / 5.0).margin(1e-15));
}

TEST_CASE("joiner normalization identity holds") {
  Model m(Arch::kChunkwise, small_config());
  Rng rng = Rng::seeded(3);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor he = Tensor::uniform({8}, -2, 2, rng);
    Tensor hp = Tensor::uniform({6}, -2, 2, rng);
    auto out = m.chunkwise_joiner(he, hp);
    double total = *out.gate;
    for (double p : out.label_dist) total += (1.0 - *out.gate) * p;
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("hat joiner matches the scalar-loop oracle") {
  Model m(Arch::kTransducer, small_config());
  Rng rng = Rng::seeded(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor he = Tensor::uniform({8}, -2, 2, rng);
    Tensor hp = Tensor::uniform({6}, -2, 2, rng);
    auto got = m.hat_joiner(he, hp);
    auto want = joiner_oracle(m, he.vals(), hp.vals(), true);
    CHECK(std::abs(*got.gate - *want.gate) < 1e-12);
    for (std::size_t k = 0; k < want.label_dist.size(); ++k)
      CHECK(std::abs(got.label_dist[k] - want.label_dist[k]) < 1e-12);
  }
}

TEST_CASE("aligner joiner shares the label map with the hat joiner") {
  Model hat(Arch::kTransducer, small_config());
  Model aligner(Arch::kAligner, small_config());
  for (const auto& [name, t] : aligner.params()) aligner.set_param(name, hat.param(name));
  Rng rng = Rng::seeded(6);
  Tensor he = Tensor::uniform({8}, -1, 1, rng);
  Tensor hp = Tensor::uniform({6}, -1, 1, rng);
  auto a = aligner.aligner_joiner(he, hp);
  auto h = hat.hat_joiner(he, hp);
  CHECK_FALSE(a.gate.has_value());
  double s = 0.0;
  for (std::size_t k = 0; k < a.label_dist.size(); ++k) {
    CHECK(a.label_dist[k] == h.label_dist[k]);
    s += a.label_dist[k];
  }
  CHECK(std::abs(s - 1.0) < 1e-12);
}

TEST_CASE("hat and chunkwise joiners have identical parameter shapes") {
  Model hat(Arch::kTransducer, small_config());
  Model cw(Arch::kChunkwise, small_config());
  CHECK(hat.param_count("joiner.") == cw.param_count("joiner."));
  CHECK(hat.param_count() == cw.param_count());
  // swapping parameter sets is well-formed
  for (const auto& [name, t] : hat.params()) cw.set_param(name, t);
  Rng rng = Rng::seeded(8);
  Tensor he = Tensor::uniform({8}, -1, 1, rng);
  Tensor hp = Tensor::uniform({6}, -1, 1, rng);
  auto a = cw.chunkwise_joiner(he, hp);
  auto b = hat.hat_joiner(he, hp);
  CHECK(*a.gate == *b.gate);
}

TEST_CASE("joiners are pure functions") {
  Model m(Arch::kChunkwise, small_config());
  Rng rng = Rng::seeded(9);
  Tensor he = Tensor::uniform({8}, -1, 1, rng);
  Tensor hp = Tensor::uniform({6}, -1, 1, rng);
  auto a = m.chunkwise_joiner(he, hp);
  auto b = m.chunkwise_joiner(he, hp);
  CHECK(*a.gate == *b.gate);
  for (std::size_t k = 0; k < a.label_dist.size(); ++k)
    CHECK(a.label_dist[k] == b.label_dist[k]);
}

TEST_CASE("encode exposes per-layer per-head attention weights") {
  Model m(Arch::kChunkwise, small_config());
  Rng rng = Rng::seeded(10);
  Tensor feats = Tensor::uniform({12, 4}, -1, 1, rng);
  auto r = m.encode(feats, true);
  REQUIRE(r.attention.size() == 2);
  REQUIRE(r.attention[0].size() == 2);
  for (const auto& layer : r.attention)
    for (const auto& w : layer) {
      REQUIRE(w.dim(0) == 6);
      for (std::int64_t i = 0; i < 6; ++i) {
        double s = 0.0;
        for (std::int64_t j = 0; j < 6; ++j) s += w.at(i, j);
        CHECK(std::abs(s - 1.0) < 1e-9);
      }
    }
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  ModelConfig c = small_config();
  c.mask_mode = MaskMode::kStreaming;
  c.mask_current_frames = 4;
  c.mask_history_frames = 6;
  Model m(Arch::kChunkwise, c);
  ca::CheckpointExtras extras{12, 0.625, 2};
  std::string path = "ckpt_roundtrip_test.bin";
  ca::save_checkpoint(m, extras, path);
  auto loaded = ca::load_checkpoint(path);
  std::remove(path.c_str());

  CHECK(loaded.model.arch() == Arch::kChunkwise);
  CHECK(loaded.extras.chunk_frames == 12);
  CHECK(loaded.extras.tau == 0.625);
  CHECK(loaded.extras.delay_frames == 2);
  CHECK(loaded.model.config().mask_mode == MaskMode::kStreaming);
  CHECK(loaded.model.config().mask_current_frames == 4);
  REQUIRE(loaded.model.params().size() == m.params().size());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& [name, t] = m.params()[i];
    const auto& lt = loaded.model.param(name);
    REQUIRE(lt.shape() == t.shape());
    for (std::int64_t j = 0; j < t.numel(); ++j) CHECK(lt.vals()[j] == t.vals()[j]);
  }
}

TEST_CASE("identical seeds build identical models") {
  Model a(Arch::kChunkwise, small_config());
  Model b(Arch::kChunkwise, small_config());
  for (const auto& [name, t] : a.params()) {
    const auto& u = b.param(name);
    for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(t.vals()[i] == u.vals()[i]);
  }
}
