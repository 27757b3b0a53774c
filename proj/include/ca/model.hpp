// ca/model.hpp
// Encoder / predictor / joiner stacks for the three architectures. One
// parameter registry serves them all: the transducer (HAT) and chunkwise
// joiners share shapes exactly; the aligner simply has no gate head.
//
// Vocabulary convention: ids 0..V-1 are emittable tokens with <eos> = V-1;
// the predictor embedding has one extra row V for <sos>, which is never an
// output class.
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ca/common.hpp"
#include "ca/tensor.hpp"

namespace ca {

enum class Arch { kTransducer, kAligner, kChunkwise };

inline std::string arch_name(Arch a) {
  switch (a) {
    case Arch::kTransducer: return "transducer";
    case Arch::kAligner: return "aligner";
    case Arch::kChunkwise: return "chunkwise";
  }
  return "?";
}

inline Arch arch_from_name(const std::string& s) {
  if (s == "transducer") return Arch::kTransducer;
  if (s == "aligner") return Arch::kAligner;
  if (s == "chunkwise") return Arch::kChunkwise;
  throw UsageError("unknown architecture '" + s + "'");
}

enum class MaskMode { kOffline, kStreaming };

struct ModelConfig {
  std::int64_t feature_dim = 8;     // D_in
  std::int64_t encoder_dim = 32;    // D'
  std::int64_t predictor_dim = 32;  // D''
  std::int64_t joiner_dim = 32;     // D
  std::int64_t vocab_size = 17;     // V, emittable tokens including <eos>
  std::int64_t encoder_layers = 2;
  std::int64_t attention_heads = 2;
  std::int64_t ffn_dim = 64;
  std::int64_t frame_reduction = 2;  // r, raw frames stacked per encoder frame
  MaskMode mask_mode = MaskMode::kOffline;
  std::int64_t mask_current_frames = 8;  // streaming chunk length, encoder frames
  std::int64_t mask_history_frames = 8;  // visible history, encoder frames
  std::uint64_t init_seed = 1;

  std::int64_t eos_id() const { return vocab_size - 1; }
  std::int64_t sos_id() const { return vocab_size; }  // embedding-only row

  void validate() const {
    if (vocab_size < 2) throw UsageError("model: vocab_size must be >= 2");
    if (feature_dim < 1 || encoder_dim < 1 || predictor_dim < 1 || joiner_dim < 1 ||
        ffn_dim < 1 || encoder_layers < 1 || attention_heads < 1)
      throw UsageError("model: all dimensions must be >= 1");
    if (frame_reduction < 1) throw UsageError("model: frame_reduction must be >= 1");
    if (encoder_dim % attention_heads != 0)
      throw UsageError("model: encoder_dim must be divisible by attention_heads");
    if (mask_mode == MaskMode::kStreaming &&
        (mask_current_frames < 1 || mask_history_frames < 0))
      throw UsageError("model: bad streaming mask sizes");
  }
};

// Additive attention masks (0 = visible, kMaskHidden = hidden), 0-based frames.
inline Tensor offline_mask(std::int64_t t) { return Tensor::zeros({t, t}); }

// Query frame q in attention chunk c = q / current may see its whole chunk
// (including lookahead up to the chunk end) plus `history` frames before the
// chunk start. Never anything past the chunk's last frame.
inline Tensor streaming_mask(std::int64_t t, std::int64_t current, std::int64_t history) {
  std::vector<double> m(static_cast<std::size_t>(t * t), kMaskHidden);
  for (std::int64_t q = 0; q < t; ++q) {
    std::int64_t c = q / current;
    std::int64_t lo = std::max<std::int64_t>(0, c * current - history);
    std::int64_t hi = std::min(t - 1, (c + 1) * current - 1);
    for (std::int64_t k = lo; k <= hi; ++k) m[q * t + k] = 0.0;
  }
  return Tensor::from({t, t}, std::move(m));
}

inline Tensor build_mask(const ModelConfig& cfg, std::int64_t t) {
  if (cfg.mask_mode == MaskMode::kOffline) return offline_mask(t);
  return streaming_mask(t, cfg.mask_current_frames, cfg.mask_history_frames);
}

// Fixed sinusoidal position table, [t x d].
inline Tensor positional_encoding(std::int64_t t, std::int64_t d) {
  std::vector<double> v(static_cast<std::size_t>(t * d));
  for (std::int64_t i = 0; i < t; ++i)
    for (std::int64_t j = 0; j < d; ++j) {
      double rate = std::pow(10000.0, -2.0 * static_cast<double>(j / 2) / static_cast<double>(d));
      double x = static_cast<double>(i) * rate;
      v[i * d + j] = (j % 2 == 0) ? std::sin(x) : std::cos(x);
    }
  return Tensor::from({t, d}, std::move(v));
}

// (gate, label distribution) pair from one joiner evaluation. The gate is the
// blank probability for the transducer and the EOC probability for the
// chunkwise model; the aligner has no gate.
struct JoinerOutputs {
  std::optional<double> gate;
  std::vector<double> label_dist;
};

struct EncodeResult {
  Tensor encoded;  // [T x D']
  // attention[layer][head] is the [T x T] weight matrix (row-stochastic)
  std::vector<std::vector<Tensor>> attention;
};

// Batched joiner evaluation over G (encoder frame, predictor step) pairs.
struct JoinerBatch {
  Tensor gate;   // [G x 1] probabilities; empty tensor when not requested
  Tensor label;  // [G x V] row-stochastic; empty tensor when not requested
};

class Model {
 public:
  Model() = default;

  Model(Arch arch, const ModelConfig& cfg) : arch_(arch), cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng::seeded(cfg_.init_seed);
    std::int64_t r_in = cfg_.frame_reduction * cfg_.feature_dim;
    std::int64_t dh = cfg_.encoder_dim / cfg_.attention_heads;
    add_param("enc.embed.w", {r_in, cfg_.encoder_dim}, r_in, rng);
    add_param("enc.embed.b", {cfg_.encoder_dim}, r_in, rng);
    for (std::int64_t l = 0; l < cfg_.encoder_layers; ++l) {
      std::string p = "enc.l" + std::to_string(l) + ".";
      add_ones(p + "ln1.g", {cfg_.encoder_dim});
      add_param(p + "ln1.b", {cfg_.encoder_dim}, cfg_.encoder_dim, rng);
      for (std::int64_t h = 0; h < cfg_.attention_heads; ++h) {
        std::string q = p + "h" + std::to_string(h) + ".";
        add_param(q + "wq", {cfg_.encoder_dim, dh}, cfg_.encoder_dim, rng);
        add_param(q + "wk", {cfg_.encoder_dim, dh}, cfg_.encoder_dim, rng);
        add_param(q + "wv", {cfg_.encoder_dim, dh}, cfg_.encoder_dim, rng);
        add_param(q + "wo", {dh, cfg_.encoder_dim}, dh, rng);
      }
      add_ones(p + "ln2.g", {cfg_.encoder_dim});
      add_param(p + "ln2.b", {cfg_.encoder_dim}, cfg_.encoder_dim, rng);
      add_param(p + "ff.w1", {cfg_.encoder_dim, cfg_.ffn_dim}, cfg_.encoder_dim, rng);
      add_param(p + "ff.b1", {cfg_.ffn_dim}, cfg_.encoder_dim, rng);
      add_param(p + "ff.w2", {cfg_.ffn_dim, cfg_.encoder_dim}, cfg_.ffn_dim, rng);
      add_param(p + "ff.b2", {cfg_.encoder_dim}, cfg_.ffn_dim, rng);
    }
    add_ones("enc.lnf.g", {cfg_.encoder_dim});
    add_param("enc.lnf.b", {cfg_.encoder_dim}, cfg_.encoder_dim, rng);

    add_param("pred.embed", {cfg_.vocab_size + 1, cfg_.predictor_dim}, cfg_.predictor_dim, rng);
    add_param("pred.wx", {cfg_.predictor_dim, cfg_.predictor_dim}, cfg_.predictor_dim, rng);
    add_param("pred.wh", {cfg_.predictor_dim, cfg_.predictor_dim}, cfg_.predictor_dim, rng);
    add_param("pred.b", {cfg_.predictor_dim}, cfg_.predictor_dim, rng);

    add_param("joiner.wenc", {cfg_.encoder_dim, cfg_.joiner_dim}, cfg_.encoder_dim, rng);
    add_param("joiner.wpred", {cfg_.predictor_dim, cfg_.joiner_dim}, cfg_.predictor_dim, rng);
    add_param("joiner.b", {cfg_.joiner_dim}, cfg_.joiner_dim, rng);
    if (arch_ != Arch::kAligner) {
      add_param("joiner.wgate", {cfg_.joiner_dim, 1}, cfg_.joiner_dim, rng);
      add_param("joiner.bgate", {1}, cfg_.joiner_dim, rng);
    }
    add_param("joiner.wlabel", {cfg_.joiner_dim, cfg_.vocab_size}, cfg_.joiner_dim, rng);
    add_param("joiner.blabel", {cfg_.vocab_size}, cfg_.joiner_dim, rng);
  }

  Arch arch() const { return arch_; }
  const ModelConfig& config() const { return cfg_; }

  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
  std::vector<std::pair<std::string, Tensor>>& mutable_params() { return params_; }

  const Tensor& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return params_[it->second].second;
  }

  void set_param(const std::string& name, Tensor t) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
    if (t.shape() != params_[it->second].second.shape())
      throw std::invalid_argument("set_param: shape mismatch for " + name);
    params_[it->second].second = std::move(t);
  }

  std::int64_t param_count(const std::string& prefix = "") const {
    std::int64_t n = 0;
    for (const auto& [name, t] : params_)
      if (name.rfind(prefix, 0) == 0) n += t.numel();
    return n;
  }

  // Deep copy: tensors are shared handles, so plain copies alias parameter
  // storage. Use this when snapshotting (e.g. best-dev checkpointing).
  Model clone() const {
    Model m = *this;
    for (auto& [name, t] : m.params_) t = Tensor::from(t.shape(), t.vals());
    m.index_ = index_;
    return m;
  }

  void watch_all(Tape& tape) const {
    for (const auto& [name, t] : params_) tape.watch(t);
  }

  // --- encoder ---

  std::int64_t reduced_frames(std::int64_t t_raw) const { return t_raw / cfg_.frame_reduction; }

  EncodeResult encode(const Tensor& features, bool want_attention = false) const {
    detail::require(features.rank() == 2 && features.dim(1) == cfg_.feature_dim,
                    "encode: features must be [T_raw x feature_dim]");
    std::int64_t t_raw = features.dim(0);
    std::int64_t r = cfg_.frame_reduction;
    std::int64_t t = t_raw / r;
    if (t < 1) throw DataError("encode: fewer raw frames than the frame reduction factor");
    // stack r consecutive raw frames per encoder frame, drop the remainder
    Tensor stacked = reshape(slice_rows(features, 0, t * r), {t, r * cfg_.feature_dim});
    Tensor x = add_rowvec(matmul(stacked, param("enc.embed.w")), param("enc.embed.b"));
    x = add(x, positional_encoding(t, cfg_.encoder_dim));
    Tensor mask = build_mask(cfg_, t);
    EncodeResult out;
    for (std::int64_t l = 0; l < cfg_.encoder_layers; ++l) {
      std::string p = "enc.l" + std::to_string(l) + ".";
      Tensor normed = layernorm_rows(x, param(p + "ln1.g"), param(p + "ln1.b"));
      std::vector<Tensor> head_weights;
      Tensor attn_sum;
      bool first = true;
      for (std::int64_t h = 0; h < cfg_.attention_heads; ++h) {
        std::string q = p + "h" + std::to_string(h) + ".";
        auto res = attention(matmul(normed, param(q + "wq")), matmul(normed, param(q + "wk")),
                             matmul(normed, param(q + "wv")), mask);
        Tensor proj = matmul(res.output, param(q + "wo"));
        attn_sum = first ? proj : add(attn_sum, proj);
        first = false;
        if (want_attention) head_weights.push_back(res.weights);
      }
      x = add(x, attn_sum);
      Tensor normed2 = layernorm_rows(x, param(p + "ln2.g"), param(p + "ln2.b"));
      Tensor ff = add_rowvec(
          matmul(tanh(add_rowvec(matmul(normed2, param(p + "ff.w1")), param(p + "ff.b1"))),
                 param(p + "ff.w2")),
          param(p + "ff.b2"));
      x = add(x, ff);
      if (want_attention) out.attention.push_back(std::move(head_weights));
    }
    out.encoded = layernorm_rows(x, param("enc.lnf.g"), param("enc.lnf.b"));
    return out;
  }

  // --- predictor ---

  Tensor predictor_initial_state() const { return Tensor::zeros({1, cfg_.predictor_dim}); }

  struct PredictorStep {
    Tensor output;  // [1 x D''], equals the new hidden state
    Tensor state;
  };

  // One recurrent step over the token embedding. `token` may be any emittable
  // token or <sos>.
  PredictorStep predictor_step(std::int64_t token, const Tensor& state) const {
    if (token < 0 || token > cfg_.sos_id())
      throw std::invalid_argument("predictor_step: unknown token id " + std::to_string(token));
    Tensor emb = row(param("pred.embed"), token);
    Tensor h = tanh(add_rowvec(
        add(matmul(emb, param("pred.wx")), matmul(state, param("pred.wh"))), param("pred.b")));
    return {h, h};
  }

  // Rows 1..steps of predictor outputs for the prefix sequence: row i holds
  // h_pred_{i+1}, the state after consuming <sos>, y_1, ..., y_i.
  Tensor predictor_matrix(const std::vector<std::int64_t>& tokens, std::int64_t steps) const {
    detail::require(steps >= 1 && steps <= static_cast<std::int64_t>(tokens.size()) + 1,
                    "predictor_matrix: steps out of range");
    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(steps));
    Tensor state = predictor_initial_state();
    std::int64_t tok = cfg_.sos_id();
    for (std::int64_t i = 0; i < steps; ++i) {
      auto st = predictor_step(tok, state);
      rows.push_back(st.output);
      state = st.state;
      if (i < static_cast<std::int64_t>(tokens.size())) tok = tokens[static_cast<std::size_t>(i)];
    }
    return stack_rows(rows);
  }

  // --- joiners ---

  // Joint space over G (encoder frame, predictor output) pairs: [G x D].
  Tensor joiner_joint(const Tensor& h_enc, const Tensor& h_pred) const {
    detail::require(h_enc.rank() == 2 && h_enc.dim(1) == cfg_.encoder_dim,
                    "joiner: h_enc must be [G x encoder_dim]");
    detail::require(h_pred.rank() == 2 && h_pred.dim(1) == cfg_.predictor_dim,
                    "joiner: h_pred must be [G x predictor_dim]");
    detail::require(h_enc.dim(0) == h_pred.dim(0), "joiner: row count mismatch");
    return tanh(add_rowvec(
        add(matmul(h_enc, param("joiner.wenc")), matmul(h_pred, param("joiner.wpred"))),
        param("joiner.b")));
  }

  // Gate head: blank probability (transducer) or EOC probability (chunkwise).
  Tensor gate_head(const Tensor& joint) const {
    if (arch_ == Arch::kAligner)
      throw std::invalid_argument("joiner: the aligner has no gate head");
    return sigmoid(add_rowvec(matmul(joint, param("joiner.wgate")), param("joiner.bgate")));
  }

  Tensor label_head(const Tensor& joint) const {
    return softmax(add_rowvec(matmul(joint, param("joiner.wlabel")), param("joiner.blabel")));
  }

  JoinerBatch joiner(const Tensor& h_enc, const Tensor& h_pred, bool want_gate,
                     bool want_label = true) const {
    Tensor joint = joiner_joint(h_enc, h_pred);
    JoinerBatch out;
    if (want_gate) out.gate = gate_head(joint);
    if (want_label) out.label = label_head(joint);
    return out;
  }

  JoinerOutputs hat_joiner(const Tensor& h_enc_row, const Tensor& h_pred_row) const {
    return single_joiner(h_enc_row, h_pred_row, true);
  }

  JoinerOutputs chunkwise_joiner(const Tensor& h_enc_row, const Tensor& h_pred_row) const {
    return single_joiner(h_enc_row, h_pred_row, true);
  }

  JoinerOutputs aligner_joiner(const Tensor& h_enc_row, const Tensor& h_pred_row) const {
    return single_joiner(h_enc_row, h_pred_row, false);
  }

 private:
  JoinerOutputs single_joiner(const Tensor& h_enc_row, const Tensor& h_pred_row,
                              bool want_gate) const {
    Tensor he = h_enc_row.rank() == 1 ? reshape(h_enc_row, {1, h_enc_row.numel()}) : h_enc_row;
    Tensor hp = h_pred_row.rank() == 1 ? reshape(h_pred_row, {1, h_pred_row.numel()}) : h_pred_row;
    JoinerBatch b = joiner(he, hp, want_gate && arch_ != Arch::kAligner);
    JoinerOutputs out;
    if (want_gate && arch_ != Arch::kAligner) out.gate = b.gate.item();
    out.label_dist = b.label.vals();
    return out;
  }

  void add_param(const std::string& name, Shape shape, std::int64_t fan_in, Rng& rng) {
    double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    push(name, Tensor::uniform(std::move(shape), -a, a, rng));
  }

  void add_ones(const std::string& name, Shape shape) { push(name, Tensor::full(shape, 1.0)); }

  void push(const std::string& name, Tensor t) {
    index_[name] = params_.size();
    params_.emplace_back(name, std::move(t));
  }

  Arch arch_ = Arch::kChunkwise;
  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Checkpoint: text header (self-describing config echo), "---" separator,
// then length-prefixed little-endian parameter payloads.
// ---------------------------------------------------------------------------

struct CheckpointExtras {
  std::int64_t chunk_frames = 8;
  double tau = 0.5;
  std::int64_t delay_frames = 0;
};

namespace detail {

inline std::string mask_mode_name(MaskMode m) {
  return m == MaskMode::kOffline ? "offline" : "streaming";
}

inline MaskMode mask_mode_from_name(const std::string& s) {
  if (s == "offline") return MaskMode::kOffline;
  if (s == "streaming") return MaskMode::kStreaming;
  throw DataError("unknown mask mode '" + s + "'");
}

}  // namespace detail

inline void save_checkpoint(const Model& model, const CheckpointExtras& extras,
                            const std::string& path) {
  std::string out;
  out += "ca-checkpoint v1\n";
  const ModelConfig& c = model.config();
  auto kv = [&out](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
  kv("arch", arch_name(model.arch()));
  kv("feature_dim", std::to_string(c.feature_dim));
  kv("encoder_dim", std::to_string(c.encoder_dim));
  kv("predictor_dim", std::to_string(c.predictor_dim));
  kv("joiner_dim", std::to_string(c.joiner_dim));
  kv("vocab_size", std::to_string(c.vocab_size));
  kv("encoder_layers", std::to_string(c.encoder_layers));
  kv("attention_heads", std::to_string(c.attention_heads));
  kv("ffn_dim", std::to_string(c.ffn_dim));
  kv("frame_reduction", std::to_string(c.frame_reduction));
  kv("mask", detail::mask_mode_name(c.mask_mode));
  kv("mask_current_frames", std::to_string(c.mask_current_frames));
  kv("mask_history_frames", std::to_string(c.mask_history_frames));
  kv("init_seed", std::to_string(c.init_seed));
  kv("chunk_frames", std::to_string(extras.chunk_frames));
  kv("tau", fmt_double(extras.tau));
  kv("delay_frames", std::to_string(extras.delay_frames));
  kv("params", std::to_string(model.params().size()));
  out += "---\n";
  for (const auto& [name, t] : model.params()) {
    put_u32_le(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32_le(out, static_cast<std::uint32_t>(t.shape().size()));
    for (auto d : t.shape()) put_i64_le(out, d);
    for (double v : t.vals()) put_f64_le(out, v);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("failed writing checkpoint: " + path);
}

struct LoadedCheckpoint {
  Model model;
  CheckpointExtras extras;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto next_line = [&]() {
    std::size_t nl = buf.find('\n', pos);
    if (nl == std::string::npos) throw DataError("checkpoint: truncated header");
    std::string line = buf.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (next_line() != "ca-checkpoint v1") throw DataError("checkpoint: bad magic");
  std::map<std::string, std::string> kv;
  for (;;) {
    std::string line = next_line();
    if (line == "---") break;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw DataError("checkpoint: malformed header line");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto geti = [&kv](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw DataError("checkpoint: missing key " + k);
    return std::stoll(it->second);
  };
  ModelConfig c;
  c.feature_dim = geti("feature_dim");
  c.encoder_dim = geti("encoder_dim");
  c.predictor_dim = geti("predictor_dim");
  c.joiner_dim = geti("joiner_dim");
  c.vocab_size = geti("vocab_size");
  c.encoder_layers = geti("encoder_layers");
  c.attention_heads = geti("attention_heads");
  c.ffn_dim = geti("ffn_dim");
  c.frame_reduction = geti("frame_reduction");
  c.mask_mode = detail::mask_mode_from_name(kv.at("mask"));
  c.mask_current_frames = geti("mask_current_frames");
  c.mask_history_frames = geti("mask_history_frames");
  c.init_seed = static_cast<std::uint64_t>(geti("init_seed"));
  LoadedCheckpoint out{Model(arch_from_name(kv.at("arch")), c), {}};
  out.extras.chunk_frames = geti("chunk_frames");
  out.extras.tau = std::stod(kv.at("tau"));
  out.extras.delay_frames = geti("delay_frames");
  std::int64_t n_params = geti("params");
  std::string tail = buf.substr(pos);
  ByteReader rd{tail};
  for (std::int64_t i = 0; i < n_params; ++i) {
    std::uint32_t name_len = rd.u32();
    std::string name = rd.bytes(name_len);
    std::uint32_t ndim = rd.u32();
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(rd.i64());
    std::vector<double> vals(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : vals) v = rd.f64();
    out.model.set_param(name, Tensor::from(std::move(shape), std::move(vals)));
  }
  return out;
}

}  // namespace ca
