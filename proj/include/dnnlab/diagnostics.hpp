// dnnlab/diagnostics.hpp

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
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dnnlab/error.hpp"
#include "dnnlab/network.hpp"
#include "dnnlab/types.hpp"

namespace dnnlab {

struct SpectralNormOptions {
  double tolerance = 1e-10;
  int max_iterations = 10000;
};

/// Largest singular value of M by power iteration on M^T M, starting from
/// the normalized all-ones vector. Stops when successive Rayleigh
/// quotients agree to `tolerance` relative.
inline double spectral_norm(const Matrix &m, const SpectralNormOptions &opts = {}) {
  if (m.size() == 0) throw InvalidInputError("spectral_norm of an empty matrix");
  if (!m.allFinite()) throw InvalidInputError("spectral_norm of a non-finite matrix");
  if (m.isZero(0.0)) return 0.0;

  const Eigen::Index n = m.cols();
  Vector v = Vector::Ones(n) / std::sqrt(static_cast<double>(n));
  Vector w = m.transpose() * (m * v);
  if (w.norm() == 0.0) {
    // All-ones start is orthogonal to the row space; restart from the
    // largest row, which lies in it.
    Eigen::Index best = 0;
    m.rowwise().norm().maxCoeff(&best);
    v = m.row(best).transpose().normalized();
    w = m.transpose() * (m * v);
  }
  double lambda = v.dot(w);
  for (int it = 0; it < opts.max_iterations; ++it) {
    v = w / w.norm();
    w = m.transpose() * (m * v);
    const double next = v.dot(w);
    if (std::abs(next - lambda) < opts.tolerance * std::abs(next))
      return std::sqrt(std::max(next, 0.0));
    lambda = next;
  }
  const double best = std::sqrt(std::max(lambda, 0.0));
  throw ConvergenceError("power iteration did not converge in " +
                             std::to_string(opts.max_iterations) + " iterations",
                         best);
}

/// Fraction of hidden activations below eps or above 1 - eps, per hidden
/// layer, over all rows of `inputs`.
inline std::vector<double> saturation_stats(const Network &net, const Matrix &inputs,
                                            double eps = 0.05) {
  if (!(eps > 0.0 && eps < 0.5)) throw InvalidConfigError("eps must lie in (0, 0.5)");
  std::vector<double> counts(net.num_hidden(), 0.0);
  std::vector<double> totals(net.num_hidden(), 0.0);
  for (Eigen::Index r = 0; r < inputs.rows(); ++r) {
    const ActivationTrace tr = forward(net, inputs.row(r).transpose());
    for (std::size_t l = 0; l < net.num_hidden(); ++l) {
      const Vector &v = tr.activations[l + 1];
      counts[l] += static_cast<double>(
          ((v.array() < eps) || (v.array() > 1.0 - eps)).count());
      totals[l] += static_cast<double>(v.size());
    }
  }
  std::vector<double> out(net.num_hidden(), 0.0);
  for (std::size_t l = 0; l < out.size(); ++l)
    out[l] = totals[l] > 0 ? counts[l] / totals[l] : 0.0;
  return out;
}

/// ||diag(v(1 - v)) W^T||_2 for layer `l`, where v is that layer's output.
inline double layer_gain_norm(const LayerParams &layer, const Vector &output,
                              const SpectralNormOptions &opts = {}) {
  const Vector slope = output.array() * (1.0 - output.array());
  const Matrix scaled = slope.asDiagonal() * layer.weights.transpose();
  return spectral_norm(scaled, opts);
}

/// Per-hidden-layer gain norms at a single input.
inline std::vector<double> frame_gain_norms(const Network &net, const Vector &x,
                                            const SpectralNormOptions &opts = {}) {
  const ActivationTrace tr = forward(net, x);
  std::vector<double> out(net.num_hidden());
  for (std::size_t l = 0; l < net.num_hidden(); ++l) {
    try {
      out[l] = layer_gain_norm(net.layer(l), tr.activations[l + 1], opts);
    } catch (const ConvergenceError &e) {
      throw ConvergenceError("hidden layer " + std::to_string(l + 1) + ": " + e.what(),
                             e.best_estimate());
    }
  }
  return out;
}

struct MeanMax {
  double mean = 0.0;
  double max = 0.0;
};

/// Gain norms per frame, aggregated per hidden layer (max is over frames).
inline std::vector<MeanMax> gain_norms(const Network &net, const Matrix &inputs,
                                       const SpectralNormOptions &opts = {}) {
  if (inputs.rows() == 0) throw InvalidConfigError("gain_norms needs at least one frame");
  std::vector<MeanMax> out(net.num_hidden());
  for (Eigen::Index r = 0; r < inputs.rows(); ++r) {
    std::vector<double> g;
    try {
      g = frame_gain_norms(net, inputs.row(r).transpose(), opts);
    } catch (const ConvergenceError &e) {
      throw ConvergenceError("frame " + std::to_string(r) + ", " + e.what(),
                             e.best_estimate());
    }
    for (std::size_t l = 0; l < g.size(); ++l) {
      out[l].mean += g[l];
      out[l].max = std::max(out[l].max, g[l]);
    }
  }
  for (auto &m : out) m.mean /= static_cast<double>(inputs.rows());
  return out;
}

/// Fraction of weights (biases excluded) with |w| < threshold, per layer.
inline std::vector<double> weight_fraction_below(const Network &net, double threshold) {
  if (!(threshold > 0.0)) throw InvalidConfigError("threshold must be positive");
  std::vector<double> out;
  for (const auto &p : net.layers())
    out.push_back(static_cast<double>((p.weights.array().abs() < threshold).count()) /
                  static_cast<double>(p.weights.size()));
  return out;
}

/// Row-aligned input pairs: row r of `first` and row r of `second` are the
/// same frame seen under two conditions (first = wideband/clean member).
struct PairSet {
  Matrix first;
  Matrix second;

  int size() const { return static_cast<int>(first.rows()); }
};

inline void check_pairs(const Network &net, const PairSet &pairs) {
  if (pairs.first.rows() != pairs.second.rows())
    throw ShapeError("pair set members have different row counts");
  if (pairs.size() == 0) throw InvalidConfigError("pair set is empty");
  if (pairs.first.cols() != net.input_dim() || pairs.second.cols() != net.input_dim())
    throw ShapeError("pair inputs do not match network input_dim");
}

struct MeanVar {
  double mean = 0.0;
  double variance = 0.0;
};

/// Euclidean distance between paired hidden activations; mean and
/// population variance per hidden layer.
inline std::vector<MeanVar> paired_layer_distances(const Network &net,
                                                   const PairSet &pairs) {
  check_pairs(net, pairs);
  const std::size_t hidden = net.num_hidden();
  std::vector<std::vector<double>> dists(hidden);
  for (int r = 0; r < pairs.size(); ++r) {
    const ActivationTrace a = forward(net, pairs.first.row(r).transpose());
    const ActivationTrace b = forward(net, pairs.second.row(r).transpose());
    for (std::size_t l = 0; l < hidden; ++l)
      dists[l].push_back((a.activations[l + 1] - b.activations[l + 1]).norm());
  }
  std::vector<MeanVar> out(hidden);
  for (std::size_t l = 0; l < hidden; ++l) {
    double sum = 0.0;
    for (double d : dists[l]) sum += d;
    const double mean = sum / pairs.size();
    double sq = 0.0;
    for (double d : dists[l]) sq += (d - mean) * (d - mean);
    out[l] = {mean, sq / pairs.size()};
  }
  return out;
}

/// KL(p || q) in nats; q is clamped at 1e-300 and terms with p = 0 vanish.
inline double kl_divergence(const Vector &p, const Vector &q) {
  if (p.size() != q.size()) throw ShapeError("KL operands differ in length");
  double kl = 0.0;
  for (Eigen::Index j = 0; j < p.size(); ++j)
    if (p[j] > 0.0) kl += p[j] * std::log(p[j] / std::max(q[j], 1e-300));
  return kl;
}

/// Mean over pairs of KL(posterior(first) || posterior(second)).
inline double top_layer_kl(const Network &net, const PairSet &pairs) {
  check_pairs(net, pairs);
  double sum = 0.0;
  for (int r = 0; r < pairs.size(); ++r)
    sum += kl_divergence(forward(net, pairs.first.row(r).transpose()).posteriors,
                         forward(net, pairs.second.row(r).transpose()).posteriors);
  return sum / pairs.size();
}

/// Pushes x by t along a unit direction and reports, per hidden layer,
/// ||delta^{l+1}|| / ||delta^l|| (zero when delta^l vanishes).
inline std::vector<double> perturbation_shrinkage(const Network &net, const Vector &x,
                                                  const Vector &direction, double t) {
  if (!(t > 0.0) || !std::isfinite(t))
    throw InvalidConfigError("perturbation size t must be positive");
  if (direction.size() != x.size()) throw ShapeError("direction length != input length");
  if (std::abs(direction.norm() - 1.0) > 1e-9)
    throw InvalidConfigError("perturbation direction must have unit norm");
  const ActivationTrace base = forward(net, x);
  const ActivationTrace moved = forward(net, x + t * direction);
  std::vector<double> ratios(net.num_hidden());
  double prev = (moved.activations[0] - base.activations[0]).norm();
  for (std::size_t l = 0; l < net.num_hidden(); ++l) {
    const double cur = (moved.activations[l + 1] - base.activations[l + 1]).norm();
    ratios[l] = prev > 0.0 ? cur / prev : 0.0;
    prev = cur;
  }
  return ratios;
}

// ---------------------------------------------------------------------------
// Aggregate report

struct ProbeSettings {
  double eps = 0.05;
  double weight_threshold = 0.5;
};

struct LayerProbe {
  int layer = 0;  // 1-based hidden layer index
  double saturation = 0.0;
  double gain_mean = 0.0;
  double gain_max = 0.0;
  std::optional<double> dist_mean;
  std::optional<double> dist_var;
  double wfrac = 0.0;  // weights feeding this layer
};

struct ProbeReport {
  ProbeSettings settings;
  std::vector<LayerProbe> hidden;
  std::optional<double> kl_mean;
  double top_wfrac = 0.0;  // softmax-layer weights
  int frames = 0;
  int pairs = 0;
};

inline ProbeReport probe(const Network &net, const Matrix &inputs,
                         const std::optional<PairSet> &pairs,
                         const ProbeSettings &settings = {}) {
  ProbeReport rep;
  rep.settings = settings;
  rep.frames = static_cast<int>(inputs.rows());
  const auto sat = saturation_stats(net, inputs, settings.eps);
  const auto gains = gain_norms(net, inputs);
  const auto wfrac = weight_fraction_below(net, settings.weight_threshold);
  std::vector<MeanVar> dists;
  if (pairs) {
    dists = paired_layer_distances(net, *pairs);
    rep.kl_mean = top_layer_kl(net, *pairs);
    rep.pairs = pairs->size();
  }
  for (std::size_t l = 0; l < net.num_hidden(); ++l) {
    LayerProbe lp;
    lp.layer = static_cast<int>(l + 1);
    lp.saturation = sat[l];
    lp.gain_mean = gains[l].mean;
    lp.gain_max = gains[l].max;
    if (pairs) {
      lp.dist_mean = dists[l].mean;
      lp.dist_var = dists[l].variance;
    }
    lp.wfrac = wfrac[l];
    rep.hidden.push_back(lp);
  }
  rep.top_wfrac = wfrac.back();
  return rep;
}

inline nlohmann::json to_json(const ProbeReport &rep) {
  auto opt = [](const std::optional<double> &v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json layers = nlohmann::json::array();
  for (const auto &lp : rep.hidden)
    layers.push_back({{"layer", lp.layer},
                      {"saturation", lp.saturation},
                      {"gain_mean", lp.gain_mean},
                      {"gain_max", lp.gain_max},
                      {"dist_mean", opt(lp.dist_mean)},
                      {"dist_var", opt(lp.dist_var)},
                      {"wfrac", lp.wfrac}});
  return {{"eps", rep.settings.eps},
          {"weight_threshold", rep.settings.weight_threshold},
          {"frames", rep.frames},
          {"pairs", rep.pairs},
          {"layers", layers},
          {"top", {{"kl_mean", opt(rep.kl_mean)}, {"wfrac", rep.top_wfrac}}}};
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Flat CSV, one row per hidden layer plus a final "top" row.
inline std::string to_csv(const ProbeReport &rep) {
  auto opt = [](const std::optional<double> &v) {
    return v ? format_double(*v) : std::string();
  };
  std::ostringstream os;
  os << "layer,saturation,gain_mean,gain_max,dist_mean,dist_var,kl_mean,wfrac\n";
  for (const auto &lp : rep.hidden)
    os << lp.layer << ',' << format_double(lp.saturation) << ','
       << format_double(lp.gain_mean) << ',' << format_double(lp.gain_max) << ','
       << opt(lp.dist_mean) << ',' << opt(lp.dist_var) << ",," << format_double(lp.wfrac)
       << '\n';
  os << "top,,,,,," << opt(rep.kl_mean) << ',' << format_double(rep.top_wfrac) << '\n';
  return os.str();
}

}  // namespace dnnlab
