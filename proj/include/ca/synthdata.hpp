// ca/synthdata.hpp
// Synthetic token-to-frames corpus with exact ground-truth alignments, plus
// edit-distance evaluation. Each vocabulary entry is a fixed random unit
// prototype vector; an utterance renders its tokens as prototype repeats with
// Gaussian noise, recording per-token end frames in encoder units.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ca/alignment.hpp"
#include "ca/common.hpp"
#include "ca/tensor.hpp"

namespace ca {

struct SynthTaskConfig {
  std::int64_t vocab = 16;         // synthetic tokens, excluding <eos>
  std::int64_t feature_dim = 8;    // D_in
  std::int64_t dur_min = 3;        // raw frames per token, inclusive range
  std::int64_t dur_max = 6;
  double noise_std = 0.1;
  std::int64_t len_min = 5;  // tokens per utterance, inclusive range
  std::int64_t len_max = 20;
  std::int64_t frame_reduction = 2;  // encoder stacking factor, alignment units
  std::uint64_t seed = 7;

  void validate() const {
    if (vocab < 1) throw UsageError("task: vocab must be >= 1");
    if (feature_dim < 1) throw UsageError("task: feature_dim must be >= 1");
    if (dur_min < 1 || dur_max < dur_min) throw UsageError("task: bad duration range");
    if (len_min < 1 || len_max < len_min) throw UsageError("task: bad length range");
    if (frame_reduction < 1) throw UsageError("task: frame_reduction must be >= 1");
  }

  // Model vocabulary: synthetic tokens plus <eos>.
  std::int64_t model_vocab() const { return vocab + 1; }
  std::int64_t eos_id() const { return vocab; }
};

struct Utterance {
  std::int64_t id = 0;
  Tensor features;                    // [T_raw x feature_dim]
  std::vector<std::int64_t> tokens;   // reference labels, no <eos>
  ForcedAlignment alignment;          // end frames in encoder units
};

struct Dataset {
  SynthTaskConfig config;
  std::vector<Utterance> utterances;
};

// Per-token prototype directions, deterministic in the task seed.
inline std::vector<std::vector<double>> token_prototypes(const SynthTaskConfig& cfg) {
  Rng rng = Rng::seeded(cfg.seed ^ 0x70726f746f);  // distinct stream from sampling
  std::vector<std::vector<double>> protos(static_cast<std::size_t>(cfg.vocab));
  for (auto& p : protos) {
    p.resize(static_cast<std::size_t>(cfg.feature_dim));
    double norm = 0.0;
    for (auto& x : p) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : p) x /= norm;
  }
  return protos;
}

struct RenderedUtterance {
  Utterance utterance;
  std::vector<std::int64_t> durations;  // raw frames per token
};

// Sample and render one utterance. End frames convert to encoder units by
// ceiling division, clamped to the floor(T_raw / r) frames the encoder keeps.
inline RenderedUtterance render_utterance(const SynthTaskConfig& cfg,
                                          const std::vector<std::vector<double>>& protos,
                                          Rng& rng) {
  cfg.validate();
  RenderedUtterance out;
  std::int64_t n_tokens = rng.uniform_range(cfg.len_min, cfg.len_max);
  out.utterance.tokens.resize(static_cast<std::size_t>(n_tokens));
  out.durations.resize(static_cast<std::size_t>(n_tokens));
  std::int64_t t_raw = 0;
  for (std::int64_t i = 0; i < n_tokens; ++i) {
    out.utterance.tokens[i] = rng.uniform_int(cfg.vocab);
    out.durations[i] = rng.uniform_range(cfg.dur_min, cfg.dur_max);
    t_raw += out.durations[i];
  }
  std::vector<double> feats(static_cast<std::size_t>(t_raw * cfg.feature_dim));
  std::int64_t row_at = 0;
  std::int64_t t_enc = t_raw / cfg.frame_reduction;
  out.utterance.alignment.total_frames = t_enc;
  for (std::int64_t i = 0; i < n_tokens; ++i) {
    const auto& p = protos[static_cast<std::size_t>(out.utterance.tokens[i])];
    for (std::int64_t d = 0; d < out.durations[i]; ++d) {
      for (std::int64_t j = 0; j < cfg.feature_dim; ++j)
        feats[(row_at + d) * cfg.feature_dim + j] = p[j] + cfg.noise_std * rng.normal();
    }
    row_at += out.durations[i];
    std::int64_t end_enc = (row_at + cfg.frame_reduction - 1) / cfg.frame_reduction;
    out.utterance.alignment.frames.push_back(std::min(end_enc, t_enc));
  }
  out.utterance.features = Tensor::from({t_raw, cfg.feature_dim}, std::move(feats));
  return out;
}

// Repairability sweep used at generation time: with <eos> appended at frame T,
// the assignment must be repairable for every chunk length >= min_chunk.
inline bool capacity_feasible(const ForcedAlignment& a, std::int64_t min_chunk) {
  ForcedAlignment with_eos = a;
  with_eos.frames.push_back(a.total_frames);
  for (std::int64_t lc = std::max<std::int64_t>(2, min_chunk); lc <= a.total_frames; ++lc) {
    auto c = assign_to_chunks(with_eos, lc);
    // labels only move forward: every chunk suffix must fit
    std::int64_t cap = 0, labels = 0;
    for (std::int64_t n = c.chunk_count; n >= 1; --n) {
      cap += c.capacity(n);
      labels += c.counts[n - 1];
      if (labels > cap) return false;
    }
  }
  return true;
}

inline Utterance generate_utterance(const SynthTaskConfig& cfg,
                                    const std::vector<std::vector<double>>& protos, Rng& rng,
                                    std::int64_t id) {
  // resample the rare utterance whose alignment cannot satisfy chunk capacity
  std::int64_t min_chunk = cfg.dur_min / cfg.frame_reduction + 1;
  for (int attempt = 0; attempt < 64; ++attempt) {
    RenderedUtterance r = render_utterance(cfg, protos, rng);
    if (r.utterance.alignment.total_frames < 1) continue;
    if (!capacity_feasible(r.utterance.alignment, min_chunk)) continue;
    r.utterance.id = id;
    r.utterance.alignment.validate();
    return std::move(r.utterance);
  }
  throw DataError("generate_utterance: could not sample a capacity-feasible utterance");
}

inline Dataset generate_split(const SynthTaskConfig& cfg, std::int64_t count,
                              std::uint64_t split_stream) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  auto protos = token_prototypes(cfg);
  Rng base = Rng::seeded(cfg.seed);
  for (std::int64_t i = 0; i < count; ++i) {
    Rng rng = base.derive(split_stream * 1000003 + static_cast<std::uint64_t>(i));
    ds.utterances.push_back(generate_utterance(cfg, protos, rng, i));
  }
  return ds;
}

struct DatasetSplits {
  Dataset train, dev, test;
};

// Splits draw from disjoint derived seed streams of one base seed.
inline DatasetSplits generate_dataset(const SynthTaskConfig& cfg, std::int64_t n_train,
                                      std::int64_t n_dev, std::int64_t n_test) {
  return {generate_split(cfg, n_train, 1), generate_split(cfg, n_dev, 2),
          generate_split(cfg, n_test, 3)};
}

// ---------------------------------------------------------------------------
// Dataset file: one header line echoing the config, then one record line per
// utterance (id, tokens, alignment frames, feature shape, base64 features).
// ---------------------------------------------------------------------------

inline std::string task_config_echo(const SynthTaskConfig& c) {
  std::string s;
  s += "vocab=" + std::to_string(c.vocab);
  s += " feature_dim=" + std::to_string(c.feature_dim);
  s += " dur_min=" + std::to_string(c.dur_min);
  s += " dur_max=" + std::to_string(c.dur_max);
  s += " noise_std=" + fmt_double(c.noise_std);
  s += " len_min=" + std::to_string(c.len_min);
  s += " len_max=" + std::to_string(c.len_max);
  s += " frame_reduction=" + std::to_string(c.frame_reduction);
  s += " seed=" + std::to_string(c.seed);
  return s;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open dataset for writing: " + path);
  f << "ca-synthset v1 " << task_config_echo(ds.config)
    << " count=" << ds.utterances.size() << "\n";
  for (const auto& u : ds.utterances) {
    f << "utt " << u.id << " tokens";
    for (auto t : u.tokens) f << " " << t;
    f << " | align " << u.alignment.total_frames;
    for (auto a : u.alignment.frames) f << " " << a;
    f << " | shape " << u.features.dim(0) << " " << u.features.dim(1) << " | feat ";
    std::string raw;
    raw.reserve(u.features.vals().size() * 8);
    for (double v : u.features.vals()) put_f64_le(raw, v);
    f << base64_encode(raw) << "\n";
  }
  if (!f) throw DataError("failed writing dataset: " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open dataset: " + path);
  std::string header;
  if (!std::getline(f, header)) throw DataError("dataset: missing header");
  auto fields = split_ws(header);
  if (fields.size() < 2 || fields[0] != "ca-synthset" || fields[1] != "v1")
    throw DataError("dataset: bad magic in " + path);
  Dataset ds;
  for (std::size_t i = 2; i < fields.size(); ++i) {
    auto eq = fields[i].find('=');
    if (eq == std::string::npos) continue;
    std::string k = fields[i].substr(0, eq), v = fields[i].substr(eq + 1);
    if (k == "vocab") ds.config.vocab = std::stoll(v);
    else if (k == "feature_dim") ds.config.feature_dim = std::stoll(v);
    else if (k == "dur_min") ds.config.dur_min = std::stoll(v);
    else if (k == "dur_max") ds.config.dur_max = std::stoll(v);
    else if (k == "noise_std") ds.config.noise_std = std::stod(v);
    else if (k == "len_min") ds.config.len_min = std::stoll(v);
    else if (k == "len_max") ds.config.len_max = std::stoll(v);
    else if (k == "frame_reduction") ds.config.frame_reduction = std::stoll(v);
    else if (k == "seed") ds.config.seed = std::stoull(v);
  }
  std::string line;
  while (std::getline(f, line)) {
    if (trim(line).empty()) continue;
    auto toks = split_ws(line);
    if (toks.size() < 2 || toks[0] != "utt") throw DataError("dataset: malformed record");
    Utterance u;
    u.id = std::stoll(toks[1]);
    std::size_t i = 2;
    if (i >= toks.size() || toks[i] != "tokens") throw DataError("dataset: missing tokens field");
    for (++i; i < toks.size() && toks[i] != "|"; ++i) u.tokens.push_back(std::stoll(toks[i]));
    if (i >= toks.size() || toks[++i] != "align") throw DataError("dataset: missing align field");
    ++i;
    u.alignment.total_frames = std::stoll(toks[i]);
    for (++i; i < toks.size() && toks[i] != "|"; ++i)
      u.alignment.frames.push_back(std::stoll(toks[i]));
    if (i >= toks.size() || toks[++i] != "shape") throw DataError("dataset: missing shape field");
    std::int64_t rows = std::stoll(toks[i + 1]);
    std::int64_t cols = std::stoll(toks[i + 2]);
    i += 3;
    if (i >= toks.size() || toks[i] != "|" || toks[i + 1] != "feat")
      throw DataError("dataset: missing feat field");
    std::string raw = base64_decode(toks[i + 2]);
    ByteReader rd{raw};
    std::vector<double> vals(static_cast<std::size_t>(rows * cols));
    for (auto& v : vals) v = rd.f64();
    u.features = Tensor::from({rows, cols}, std::move(vals));
    ds.utterances.push_back(std::move(u));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Token error rate: edit distance over token sequences.
// ---------------------------------------------------------------------------

inline std::int64_t levenshtein(const std::vector<std::int64_t>& a,
                                const std::vector<std::int64_t>& b) {
  std::size_t n = b.size();
  std::vector<std::int64_t> prev(n + 1), cur(n + 1);
  for (std::size_t j = 0; j <= n; ++j) prev[j] = static_cast<std::int64_t>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<std::int64_t>(i);
    for (std::size_t j = 1; j <= n; ++j) {
      std::int64_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[n];
}

inline double token_error_rate(const std::vector<std::vector<std::int64_t>>& refs,
                               const std::vector<std::vector<std::int64_t>>& hyps) {
  if (refs.size() != hyps.size())
    throw std::invalid_argument("token_error_rate: corpus size mismatch");
  if (refs.empty()) throw std::invalid_argument("token_error_rate: empty reference corpus");
  std::int64_t edits = 0, ref_len = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    edits += levenshtein(refs[i], hyps[i]);
    ref_len += static_cast<std::int64_t>(refs[i].size());
  }
  if (ref_len == 0) throw std::invalid_argument("token_error_rate: empty references");
  return static_cast<double>(edits) / static_cast<double>(ref_len);
}

}  // namespace ca
