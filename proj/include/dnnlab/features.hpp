// dnnlab/features.hpp

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
#include <string>
#include <utility>
#include <vector>

#include "dnnlab/error.hpp"
#include "dnnlab/types.hpp"

namespace dnnlab {

enum class Band { kWide, kNarrow };

inline const char *band_name(Band b) { return b == Band::kWide ? "wide" : "narrow"; }

inline Band parse_band(const std::string &s) {
  if (s == "wide") return Band::kWide;
  if (s == "narrow") return Band::kNarrow;
  throw InvalidConfigError("unknown band '" + s + "'");
}

/// A labeled frame sequence. frames has T rows; its width is d_static
/// for raw statics or d_static * (order + 1) after add_dynamics, laid out
/// as [statics | delta | delta-delta].
struct Utterance {
  Matrix frames;
  std::vector<int> labels;
  std::string speaker_id;
  std::string condition_id;
  Band band = Band::kWide;
  int d_static = 0;
  int class_count = 0;

  int num_frames() const { return static_cast<int>(frames.rows()); }
  int dim() const { return static_cast<int>(frames.cols()); }
  int blocks() const { return d_static > 0 ? dim() / d_static : 0; }
};

using Dataset = std::vector<Utterance>;

inline void validate(const Utterance &u) {
  if (u.num_frames() < 1) throw InvalidInputError("utterance has no frames");
  if (u.d_static < 1) throw ShapeError("utterance d_static must be positive");
  if (u.dim() % u.d_static != 0 || u.blocks() < 1 || u.blocks() > 3)
    throw ShapeError("frame width " + std::to_string(u.dim()) +
                     " is not 1-3 blocks of d_static " + std::to_string(u.d_static));
  if (static_cast<int>(u.labels.size()) != u.num_frames())
    throw ShapeError("utterance has " + std::to_string(u.labels.size()) +
                     " labels for " + std::to_string(u.num_frames()) + " frames");
  if (u.class_count < 1) throw InvalidConfigError("class_count must be positive");
  for (int l : u.labels)
    if (l < 0 || l >= u.class_count)
      throw InvalidLabelError("frame label " + std::to_string(l) + " out of range");
  if (!u.frames.allFinite()) throw InvalidInputError("utterance frames not finite");
}

/// Channel layout and front-end settings. mean_normalize and the
/// dynamics order together decide the per-frame block fed to splicing.
struct FeatureSpec {
  int n_low = 1;
  int n_high = 0;
  int context = 1;
  int dynamics_order = 0;
  bool mean_normalize = false;

  int d_static() const { return n_low + n_high; }
  int frame_dim() const { return d_static() * (dynamics_order + 1); }
  int input_dim() const { return frame_dim() * context; }
};

inline void validate(const FeatureSpec &spec) {
  if (spec.n_low < 1) throw InvalidConfigError("n_low must be >= 1");
  if (spec.n_high < 0) throw InvalidConfigError("n_high must be >= 0");
  if (spec.context < 1 || spec.context % 2 == 0)
    throw InvalidConfigError("context must be odd and >= 1");
  if (spec.dynamics_order < 0 || spec.dynamics_order > 2)
    throw InvalidConfigError("dynamics_order must be 0, 1 or 2");
}

namespace detail {

// Regression deltas over +-2 frames with edge replication.
inline Matrix regression_deltas(const Matrix &c) {
  const Eigen::Index T = c.rows();
  Matrix d = Matrix::Zero(T, c.cols());
  auto at = [&](Eigen::Index t) {
    return c.row(std::clamp<Eigen::Index>(t, 0, T - 1));
  };
  for (Eigen::Index t = 0; t < T; ++t)
    d.row(t) = (1.0 * (at(t + 1) - at(t - 1)) + 2.0 * (at(t + 2) - at(t - 2))) / 10.0;
  return d;
}

}  // namespace detail

inline Utterance add_dynamics(const Utterance &u, int order) {
  if (order < 0 || order > 2) throw InvalidConfigError("dynamics order must be 0, 1 or 2");
  if (u.dim() != u.d_static)
    throw ShapeError("add_dynamics expects static-only frames");
  Utterance out = u;
  if (order == 0) return out;
  const Matrix delta = detail::regression_deltas(u.frames);
  out.frames.resize(u.num_frames(), u.d_static * (order + 1));
  out.frames.leftCols(u.d_static) = u.frames;
  out.frames.middleCols(u.d_static, u.d_static) = delta;
  if (order == 2)
    out.frames.rightCols(u.d_static) = detail::regression_deltas(delta);
  return out;
}

inline Utterance mean_normalize(const Utterance &u) {
  if (u.num_frames() < 1) throw InvalidInputError("utterance has no frames");
  Utterance out = u;
  const Eigen::RowVectorXd mean = u.frames.colwise().mean();
  out.frames.rowwise() -= mean;
  return out;
}

/// Row t is frames t-k .. t+k concatenated, k = (context - 1) / 2, with
/// out-of-range indices replicated from the nearest edge.
inline Matrix splice_context(const Matrix &frames, int context) {
  if (context < 1 || context % 2 == 0)
    throw InvalidConfigError("context must be odd and >= 1, got " + std::to_string(context));
  const Eigen::Index T = frames.rows(), d = frames.cols();
  const int k = (context - 1) / 2;
  Matrix out(T, d * context);
  for (Eigen::Index t = 0; t < T; ++t)
    for (int o = -k; o <= k; ++o) {
      const Eigen::Index src = std::clamp<Eigen::Index>(t + o, 0, T - 1);
      out.block(t, (o + k) * d, 1, d) = frames.row(src);
    }
  return out;
}

inline Matrix splice_context(const Utterance &u, int context) {
  return splice_context(u.frames, context);
}

/// Zeroes the top n_high static channels and their dynamic counterparts.
inline Utterance mask_high_band(const Utterance &u, const FeatureSpec &spec) {
  if (u.d_static != spec.d_static())
    throw ShapeError("utterance d_static " + std::to_string(u.d_static) +
                     " != n_low + n_high = " + std::to_string(spec.d_static()));
  if (u.dim() % u.d_static != 0) throw ShapeError("frame width not a multiple of d_static");
  Utterance out = u;
  out.band = Band::kNarrow;
  if (spec.n_high == 0) return out;
  for (int b = 0; b < u.blocks(); ++b)
    out.frames.middleCols(b * u.d_static + spec.n_low, spec.n_high).setZero();
  return out;
}

/// Resamples the channel axis: output channel i reads source position
/// i * alpha by linear interpolation, clamping past the last channel.
inline Vector warp_channels(const Vector &frame, double alpha) {
  const Eigen::Index d = frame.size();
  Vector out(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const double pos = static_cast<double>(i) * alpha;
    if (pos >= static_cast<double>(d - 1)) {
      out[i] = frame[d - 1];
      continue;
    }
    const auto j = static_cast<Eigen::Index>(std::floor(pos));
    const double f = pos - static_cast<double>(j);
    out[i] = f == 0.0 ? frame[j] : (1.0 - f) * frame[j] + f * frame[j + 1];
  }
  return out;
}

inline void check_warp_factor(double alpha) {
  if (!(alpha > 0.5 && alpha < 2.0))
    throw InvalidConfigError("warp factor must lie in (0.5, 2.0)");
}

inline Utterance vtln_warp(const Utterance &u, double alpha) {
  check_warp_factor(alpha);
  if (u.dim() != u.d_static)
    throw ShapeError("vtln_warp applies to static-only frames");
  Utterance out = u;
  for (Eigen::Index t = 0; t < u.frames.rows(); ++t)
    out.frames.row(t) = warp_channels(u.frames.row(t).transpose(), alpha).transpose();
  return out;
}

/// Static utterance -> per-frame block (dynamics, optional mean
/// normalization). This is the stage feature transforms act on.
inline Utterance frame_stage(const Utterance &u, const FeatureSpec &spec) {
  if (u.d_static != spec.d_static())
    throw ShapeError("utterance d_static " + std::to_string(u.d_static) +
                     " does not match feature spec " + std::to_string(spec.d_static()));
  Utterance out = add_dynamics(u, spec.dynamics_order);
  if (spec.mean_normalize) out = mean_normalize(out);
  return out;
}

/// Spliced network inputs for a dataset of static utterances.
inline FrameSet to_frames(const Dataset &data, const FeatureSpec &spec) {
  validate(spec);
  FrameSet out;
  Eigen::Index rows = 0;
  for (const auto &u : data) rows += u.num_frames();
  out.inputs.resize(rows, spec.input_dim());
  out.labels.reserve(rows);
  Eigen::Index r = 0;
  for (const auto &u : data) {
    const Matrix spliced = splice_context(frame_stage(u, spec), spec.context);
    out.inputs.middleRows(r, spliced.rows()) = spliced;
    r += spliced.rows();
    out.labels.insert(out.labels.end(), u.labels.begin(), u.labels.end());
  }
  return out;
}

inline Dataset mask_dataset(const Dataset &data, const FeatureSpec &spec) {
  Dataset out;
  out.reserve(data.size());
  for (const auto &u : data) out.push_back(mask_high_band(u, spec));
  return out;
}

}  // namespace dnnlab
