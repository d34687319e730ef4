// dnnlab/corpus.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dnnlab/error.hpp"
#include "dnnlab/features.hpp"
#include "dnnlab/types.hpp"

namespace dnnlab {

struct ConditionSpec {
  std::string id = "clean";
  std::optional<double> snr_db;  // empty: clean, no noise added
};

/// Synthetic frame corpus. Class prototypes are smooth channel envelopes
/// riding on a common level; the high band is a fixed nonlinear function
/// of the low band mixed with an unrelated signal.
struct CorpusSpec {
  int classes = 10;
  int d_low = 8;
  int d_high = 4;
  int frames_per_utterance = 40;
  int utterances_per_split = 200;
  int min_segment = 3;
  int max_segment = 7;
  double level = 3.0;          // common channel level
  double class_spread = 1.0;   // prototype deviation scale
  double jitter = 0.6;         // per-frame Gaussian std
  double jitter_correlation = 0.0;   // channel correlation length, 0: i.i.d.
  int speakers = 8;            // per split; train and test speakers differ
  double speaker_distortion = 0.15;  // max |entry| of A - I and of b
  double speaker_warp = 0.0;         // max |alpha - 1| of per-speaker warp
  std::vector<ConditionSpec> conditions{ConditionSpec{}};
  int noise_types = 3;
  double noise_fluctuation = 0.3;  // per-frame share of the noise shape
  double coupling_strength = 1.0;
  std::uint64_t seed = 1;

  int d_static() const { return d_low + d_high; }
};

inline void validate(const CorpusSpec &s) {
  if (s.classes < 2 || s.classes > 1000000) throw InvalidConfigError("classes must be in [2, 1e6]");
  if (s.d_low < 1) throw InvalidConfigError("d_low must be >= 1");
  if (s.d_high < 0) throw InvalidConfigError("d_high must be >= 0");
  if (s.frames_per_utterance < 1) throw InvalidConfigError("frames_per_utterance must be >= 1");
  if (s.utterances_per_split < 1) throw InvalidConfigError("utterances_per_split must be >= 1");
  if (s.min_segment < 1 || s.max_segment < s.min_segment)
    throw InvalidConfigError("segment lengths must satisfy 1 <= min <= max");
  if (!(s.jitter >= 0.0) || !std::isfinite(s.jitter)) throw InvalidConfigError("jitter must be >= 0");
  if (!(s.jitter_correlation >= 0.0) || !std::isfinite(s.jitter_correlation))
    throw InvalidConfigError("jitter_correlation must be >= 0");
  if (!std::isfinite(s.level) || !(s.class_spread >= 0.0) || !std::isfinite(s.class_spread))
    throw InvalidConfigError("level and class_spread must be finite");
  if (s.speakers < 1) throw InvalidConfigError("speakers must be >= 1");
  if (!(s.speaker_distortion >= 0.0) || !std::isfinite(s.speaker_distortion))
    throw InvalidConfigError("speaker_distortion must be >= 0");
  if (!(s.speaker_warp >= 0.0 && s.speaker_warp < 0.5))
    throw InvalidConfigError("speaker_warp must lie in [0, 0.5)");
  if (s.conditions.empty()) throw InvalidConfigError("at least one condition is required");
  for (const auto &c : s.conditions)
    if (c.snr_db && !std::isfinite(*c.snr_db))
      throw InvalidConfigError("condition '" + c.id + "' has a non-finite SNR");
  if (s.noise_types < 1) throw InvalidConfigError("noise_types must be >= 1");
  if (!(s.noise_fluctuation >= 0.0)) throw InvalidConfigError("noise_fluctuation must be >= 0");
  if (!(s.coupling_strength >= 0.0 && s.coupling_strength <= 1.0))
    throw InvalidConfigError("coupling_strength must lie in [0, 1]");
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  return splitmix64(splitmix64(splitmix64(seed ^ 0x5851f42d4c957f2dull) ^ a) ^ b) ^ c;
}

inline Vector gaussian_vector(std::mt19937_64 &rng, Eigen::Index n, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = sd * nd(rng);
  return v;
}

// Gaussian vector with per-entry std `sd`; for corr > 0 the entries are
// smoothed along the channel axis by a Gaussian kernel of that width.
inline Vector jitter_vector(std::mt19937_64 &rng, Eigen::Index n, double sd, double corr) {
  const Vector g = gaussian_vector(rng, n, 1.0);
  if (corr <= 0.0) return sd * g;
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double acc = 0.0, norm = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
      const double u = static_cast<double>(i - k) / corr;
      const double w = std::exp(-0.5 * u * u);
      acc += w * g[k];
      norm += w * w;
    }
    out[i] = sd * acc / std::sqrt(norm);
  }
  return out;
}

// Sum of a few Gaussian bumps along the channel axis.
inline Vector smooth_envelope(std::mt19937_64 &rng, Eigen::Index n, int bumps) {
  std::uniform_real_distribution<double> pos(-0.5, static_cast<double>(n) - 0.5);
  std::uniform_real_distribution<double> width(0.8, 2.0);
  std::normal_distribution<double> amp(0.0, 1.0);
  Vector v = Vector::Zero(n);
  for (int b = 0; b < bumps; ++b) {
    const double c = pos(rng), w = width(rng), a = amp(rng);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double u = (static_cast<double>(i) - c) / w;
      v[i] += a * std::exp(-0.5 * u * u);
    }
  }
  return v;
}

}  // namespace detail

/// Seed-derived quantities shared by both splits.
struct CorpusWorld {
  std::vector<Vector> low_prototypes;  // per class, length d_low
  Matrix coupling_mix;                 // d_high x d_low
  Vector coupling_offset;              // d_high
  std::vector<Vector> noise_shapes;    // per noise type, length d_static

  /// Fixed nonlinear map from a low-band frame to the high band.
  Vector couple(const Vector &low, double level) const {
    Vector z = coupling_mix * (low.array() - level).matrix() + coupling_offset;
    return (level + 1.5 * z.array().tanh()).matrix();
  }
};

inline CorpusWorld make_world(const CorpusSpec &spec) {
  validate(spec);
  std::mt19937_64 rng(detail::derive_seed(spec.seed, 1));
  CorpusWorld w;
  for (int c = 0; c < spec.classes; ++c)
    w.low_prototypes.push_back(
        (spec.level + spec.class_spread * detail::smooth_envelope(rng, spec.d_low, 3).array())
            .matrix());
  std::normal_distribution<double> nd(0.0, 1.0);
  w.coupling_mix = Matrix::Zero(spec.d_high, spec.d_low);
  for (Eigen::Index i = 0; i < w.coupling_mix.rows(); ++i)
    for (Eigen::Index j = 0; j < w.coupling_mix.cols(); ++j)
      w.coupling_mix(i, j) = nd(rng) * 1.5 / std::sqrt(static_cast<double>(spec.d_low));
  w.coupling_offset = detail::gaussian_vector(rng, spec.d_high, 0.3);
  for (int k = 0; k < spec.noise_types; ++k) {
    Vector shape = detail::smooth_envelope(rng, spec.d_static(), 2).cwiseAbs();
    shape.array() += 0.5;
    w.noise_shapes.push_back(shape);
  }
  return w;
}

/// Per-speaker channel distortion: statics -> A * warp(statics, alpha) + b.
struct SpeakerDistortion {
  Matrix A;
  Vector b;
  double alpha = 1.0;
};

inline SpeakerDistortion draw_speaker(std::mt19937_64 &rng, int dim, double magnitude,
                                      double warp) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  SpeakerDistortion s{Matrix::Identity(dim, dim), Vector::Zero(dim), 1.0};
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) s.A(i, j) += magnitude * u(rng);
  for (int i = 0; i < dim; ++i) s.b[i] = magnitude * u(rng);
  if (warp > 0.0) s.alpha = 1.0 + warp * u(rng);
  return s;
}

inline Utterance apply_speaker(const SpeakerDistortion &s, const Utterance &u) {
  Utterance out = s.alpha == 1.0 ? u : vtln_warp(u, s.alpha);
  out.frames = out.frames * s.A.transpose();
  out.frames.rowwise() += s.b.transpose();
  return out;
}

/// Mean square over frames and static channels.
inline double static_power(const Utterance &u) {
  return u.frames.leftCols(u.d_static).array().square().mean();
}

/// Adds noise with a fixed spectral shape plus per-frame Gaussian
/// fluctuation, scaled so the utterance SNR is exactly snr_db.
inline Utterance add_noise(const Utterance &u, const Vector &shape, double snr_db,
                           double fluctuation, std::mt19937_64 &rng) {
  if (shape.size() != u.d_static) throw ShapeError("noise shape length != d_static");
  if (!std::isfinite(snr_db)) throw InvalidConfigError("SNR must be finite");
  Matrix noise(u.num_frames(), u.d_static);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (Eigen::Index t = 0; t < noise.rows(); ++t)
    for (Eigen::Index c = 0; c < noise.cols(); ++c)
      noise(t, c) = shape[c] * (1.0 + fluctuation * nd(rng));
  const double noise_power = noise.array().square().mean();
  Utterance out = u;
  if (noise_power > 0.0) {
    const double target = static_power(u) / std::pow(10.0, snr_db / 10.0);
    out.frames.leftCols(u.d_static) += std::sqrt(target / noise_power) * noise;
  }
  return out;
}

/// 10 log10(P(clean) / P(noisy - clean)) over static channels; +inf when
/// nothing was added.
inline double measured_snr_db(const Utterance &clean, const Utterance &noisy) {
  if (clean.frames.rows() != noisy.frames.rows() || clean.d_static != noisy.d_static)
    throw ShapeError("SNR operands differ in shape");
  const double pn =
      (noisy.frames.leftCols(noisy.d_static) - clean.frames.leftCols(clean.d_static))
          .array()
          .square()
          .mean();
  if (pn == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_power(clean) / pn);
}

enum class Split : std::uint64_t { kTrain = 11, kTest = 12 };

/// Draws the speakers of one split.
inline std::vector<SpeakerDistortion> split_speakers(const CorpusSpec &spec, Split split) {
  std::mt19937_64 rng(detail::derive_seed(spec.seed, 2, static_cast<std::uint64_t>(split)));
  std::vector<SpeakerDistortion> out;
  for (int s = 0; s < spec.speakers; ++s)
    out.push_back(draw_speaker(rng, spec.d_static(), spec.speaker_distortion, spec.speaker_warp));
  return out;
}

/// Undistorted, noise-free utterance i of a split.
inline Utterance clean_utterance(const CorpusSpec &spec, const CorpusWorld &world, Split split,
                                 int index) {
  std::mt19937_64 rng(detail::derive_seed(spec.seed, 3, static_cast<std::uint64_t>(split),
                                          static_cast<std::uint64_t>(index)));
  const int T = spec.frames_per_utterance;
  Utterance u;
  u.d_static = spec.d_static();
  u.class_count = spec.classes;
  u.frames.resize(T, spec.d_static());
  u.labels.resize(T);

  // Segment classes come from a shuffled deck so every class is used
  // equally often; the deck continues across utterances of a split.
  const std::uint64_t per_utt = (T + spec.min_segment - 1) / spec.min_segment;
  const std::uint64_t deck_offset = static_cast<std::uint64_t>(index) * per_utt;
  std::uniform_int_distribution<int> seg_len(spec.min_segment, spec.max_segment);
  std::vector<int> deck(spec.classes);
  std::uint64_t draws = 0;
  auto next_class = [&]() {
    const std::uint64_t round = (deck_offset + draws) / spec.classes;
    const std::uint64_t slot = (deck_offset + draws) % spec.classes;
    ++draws;
    std::mt19937_64 r(detail::derive_seed(spec.seed, 5, static_cast<std::uint64_t>(split), round));
    std::iota(deck.begin(), deck.end(), 0);
    std::shuffle(deck.begin(), deck.end(), r);
    return deck[slot];
  };

  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_int_distribution<int> any_class(0, spec.classes - 1);
  int t = 0;
  while (t < T) {
    const int c = next_class();
    const int len = std::min(seg_len(rng), T - t);
    for (int k = 0; k < len; ++k, ++t) {
      u.labels[t] = c;
      Vector low = world.low_prototypes[c] +
                   detail::jitter_vector(rng, spec.d_low, spec.jitter, spec.jitter_correlation);
      u.frames.row(t).head(spec.d_low) = low.transpose();
      if (spec.d_high > 0) {
        Vector high = spec.coupling_strength * world.couple(low, spec.level);
        if (spec.coupling_strength < 1.0) {
          const Vector other = world.low_prototypes[any_class(rng)] +
                               detail::jitter_vector(rng, spec.d_low, spec.jitter,
                                                     spec.jitter_correlation);
          high += (1.0 - spec.coupling_strength) * world.couple(other, spec.level);
        }
        high += detail::jitter_vector(rng, spec.d_high, spec.jitter, spec.jitter_correlation);
        u.frames.row(t).tail(spec.d_high) = high.transpose();
      }
    }
  }
  return u;
}

struct Corpus {
  Dataset train;
  Dataset test;
};

inline std::string speaker_name(Split split, int s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-spk%02d", split == Split::kTrain ? "train" : "test", s);
  return buf;
}

/// One split: clean frames, per-speaker distortion, then per-condition
/// noise. Utterance i belongs to speaker i % speakers and condition
/// i % conditions; every stage draws from its own seed stream, so changing
/// conditions leaves the underlying speech untouched.
inline Dataset generate_split(const CorpusSpec &spec, const CorpusWorld &world, Split split) {
  const auto speakers = split_speakers(spec, split);
  Dataset out;
  out.reserve(spec.utterances_per_split);
  for (int i = 0; i < spec.utterances_per_split; ++i) {
    const int s = i % spec.speakers;
    const ConditionSpec &cond = spec.conditions[i % spec.conditions.size()];
    Utterance u = apply_speaker(speakers[s], clean_utterance(spec, world, split, i));
    u.speaker_id = speaker_name(split, s);
    u.condition_id = cond.id;
    if (cond.snr_db) {
      std::mt19937_64 rng(detail::derive_seed(spec.seed, 6, static_cast<std::uint64_t>(split),
                                              static_cast<std::uint64_t>(i)));
      std::uniform_int_distribution<int> type(0, spec.noise_types - 1);
      const Vector &shape = world.noise_shapes[type(rng)];
      u = add_noise(u, shape, *cond.snr_db, spec.noise_fluctuation, rng);
    }
    out.push_back(std::move(u));
  }
  return out;
}

inline Corpus generate(const CorpusSpec &spec) {
  const CorpusWorld world = make_world(spec);
  return {generate_split(spec, world, Split::kTrain), generate_split(spec, world, Split::kTest)};
}

// ---------------------------------------------------------------------------
// CorpusSpec JSON

inline nlohmann::json corpus_spec_to_json(const CorpusSpec &s) {
  nlohmann::json conds = nlohmann::json::array();
  for (const auto &c : s.conditions)
    conds.push_back({{"id", c.id},
                     {"snr_db", c.snr_db ? nlohmann::json(*c.snr_db) : nlohmann::json(nullptr)}});
  return {{"classes", s.classes},
          {"d_low", s.d_low},
          {"d_high", s.d_high},
          {"frames_per_utterance", s.frames_per_utterance},
          {"utterances_per_split", s.utterances_per_split},
          {"min_segment", s.min_segment},
          {"max_segment", s.max_segment},
          {"level", s.level},
          {"class_spread", s.class_spread},
          {"jitter", s.jitter},
          {"jitter_correlation", s.jitter_correlation},
          {"speakers", s.speakers},
          {"speaker_distortion", s.speaker_distortion},
          {"speaker_warp", s.speaker_warp},
          {"conditions", conds},
          {"noise_types", s.noise_types},
          {"noise_fluctuation", s.noise_fluctuation},
          {"coupling_strength", s.coupling_strength},
          {"seed", s.seed}};
}

/// Missing keys keep their defaults.
inline CorpusSpec corpus_spec_from_json(const nlohmann::json &j) {
  CorpusSpec s;
  try {
    s.classes = j.value("classes", s.classes);
    s.d_low = j.value("d_low", s.d_low);
    s.d_high = j.value("d_high", s.d_high);
    s.frames_per_utterance = j.value("frames_per_utterance", s.frames_per_utterance);
    s.utterances_per_split = j.value("utterances_per_split", s.utterances_per_split);
    s.min_segment = j.value("min_segment", s.min_segment);
    s.max_segment = j.value("max_segment", s.max_segment);
    s.level = j.value("level", s.level);
    s.class_spread = j.value("class_spread", s.class_spread);
    s.jitter = j.value("jitter", s.jitter);
    s.jitter_correlation = j.value("jitter_correlation", s.jitter_correlation);
    s.speakers = j.value("speakers", s.speakers);
    s.speaker_distortion = j.value("speaker_distortion", s.speaker_distortion);
    s.speaker_warp = j.value("speaker_warp", s.speaker_warp);
    if (j.contains("conditions")) {
      s.conditions.clear();
      for (const auto &c : j.at("conditions")) {
        ConditionSpec cs;
        cs.id = c.at("id").get<std::string>();
        if (c.contains("snr_db") && !c.at("snr_db").is_null())
          cs.snr_db = c.at("snr_db").get<double>();
        s.conditions.push_back(cs);
      }
    }
    s.noise_types = j.value("noise_types", s.noise_types);
    s.noise_fluctuation = j.value("noise_fluctuation", s.noise_fluctuation);
    s.coupling_strength = j.value("coupling_strength", s.coupling_strength);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception &e) {
    throw InvalidConfigError(std::string("malformed corpus spec: ") + e.what());
  }
  validate(s);
  return s;
}

// ---------------------------------------------------------------------------
// Dataset files: per utterance, one JSON header line followed by T CSV
// lines (frame values, then the label).

inline void write_dataset(std::ostream &os, const Dataset &data) {
  char buf[32];
  for (const auto &u : data) {
    validate(u);
    nlohmann::json h = {{"speaker_id", u.speaker_id}, {"condition_id", u.condition_id},
                        {"band", band_name(u.band)},  {"T", u.num_frames()},
                        {"d_static", u.d_static},     {"class_count", u.class_count}};
    os << h.dump() << '\n';
    for (Eigen::Index t = 0; t < u.frames.rows(); ++t) {
      for (Eigen::Index c = 0; c < u.frames.cols(); ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", u.frames(t, c));
        os << buf << ',';
      }
      os << u.labels[t] << '\n';
    }
  }
}

inline Dataset read_dataset(std::istream &is) {
  Dataset out;
  std::string line;
  std::size_t lineno = 0;
  while (true) {
    // Header (blank lines between utterances are tolerated).
    if (!std::getline(is, line)) break;
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Utterance u;
    int T = 0;
    try {
      const auto h = nlohmann::json::parse(line);
      u.speaker_id = h.at("speaker_id").get<std::string>();
      u.condition_id = h.at("condition_id").get<std::string>();
      u.band = parse_band(h.at("band").get<std::string>());
      T = h.at("T").get<int>();
      u.d_static = h.at("d_static").get<int>();
      u.class_count = h.at("class_count").get<int>();
    } catch (const nlohmann::json::exception &e) {
      throw ParseError(std::string("bad utterance header: ") + e.what(), lineno);
    } catch (const Error &e) {
      throw ParseError(e.what(), lineno);
    }
    if (T < 1 || u.d_static < 1 || u.class_count < 1)
      throw ParseError("header fields T, d_static, class_count must be positive", lineno);
    std::vector<std::vector<double>> rows;
    for (int t = 0; t < T; ++t) {
      if (!std::getline(is, line))
        throw ParseError("file ends after " + std::to_string(t) + " of " + std::to_string(T) +
                             " frames",
                         lineno + 1);
      ++lineno;
      std::vector<double> vals;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) {
        char *end = nullptr;
        const double v = std::strtod(cell.c_str(), &end);
        if (cell.empty() || end == cell.c_str() ||
            std::string(end).find_first_not_of(" \t\r") != std::string::npos)
          throw ParseError("bad number '" + cell + "'", lineno);
        vals.push_back(v);
      }
      if (vals.size() < 2) throw ParseError("frame row needs values and a label", lineno);
      const std::size_t width = vals.size() - 1;
      if (!rows.empty() && width != rows.front().size() - 1)
        throw ParseError("frame row has inconsistent width", lineno);
      if (width % u.d_static != 0 || width / u.d_static > 3)
        throw ParseError("frame width is not 1-3 blocks of d_static", lineno);
      const double label = vals.back();
      if (label != std::floor(label) || label < 0 || label >= u.class_count)
        throw ParseError("bad frame label", lineno);
      rows.push_back(std::move(vals));
    }
    const std::size_t width = rows.front().size() - 1;
    u.frames.resize(T, static_cast<Eigen::Index>(width));
    u.labels.resize(T);
    for (int t = 0; t < T; ++t) {
      for (std::size_t c = 0; c < width; ++c) u.frames(t, c) = rows[t][c];
      u.labels[t] = static_cast<int>(rows[t].back());
    }
    if (!u.frames.allFinite()) throw ParseError("non-finite frame value", lineno);
    out.push_back(std::move(u));
  }
  return out;
}

inline void save_dataset(const Dataset &data, const std::string &path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_dataset(os, data);
  if (!os) throw IoError("write to '" + path + "' failed");
}

inline Dataset load_dataset(const std::string &path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path + "'");
  return read_dataset(is);
}

}  // namespace dnnlab
