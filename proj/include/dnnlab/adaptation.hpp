// dnnlab/adaptation.hpp

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
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "dnnlab/error.hpp"
#include "dnnlab/features.hpp"
#include "dnnlab/network.hpp"
#include "dnnlab/types.hpp"

namespace dnnlab {

/// Per-frame affine feature transform f -> A f + b, applied before
/// context splicing.
struct FdlrTransform {
  Matrix A;
  Vector b;

  static FdlrTransform identity(int dim) {
    return {Matrix::Identity(dim, dim), Vector::Zero(dim)};
  }
  int dim() const { return static_cast<int>(A.rows()); }
};

inline void validate(const FdlrTransform &t) {
  if (t.A.rows() != t.A.cols()) throw ShapeError("fDLR matrix must be square");
  if (t.b.size() != t.A.rows()) throw ShapeError("fDLR offset length != matrix size");
  if (!t.A.allFinite() || !t.b.allFinite())
    throw InvalidInputError("fDLR transform is not finite");
}

/// (outer o inner)(f) = outer(inner(f)).
inline FdlrTransform compose(const FdlrTransform &outer, const FdlrTransform &inner) {
  if (outer.dim() != inner.dim()) throw ShapeError("cannot compose transforms of different size");
  return {outer.A * inner.A, outer.A * inner.b + outer.b};
}

inline Matrix apply_fdlr(const FdlrTransform &t, const Matrix &frames) {
  if (frames.cols() != t.dim())
    throw ShapeError("frame width " + std::to_string(frames.cols()) +
                     " != transform dimension " + std::to_string(t.dim()));
  Matrix out = frames * t.A.transpose();
  out.rowwise() += t.b.transpose();
  return out;
}

inline Utterance apply_fdlr(const FdlrTransform &t, const Utterance &u) {
  Utterance out = u;
  out.frames = apply_fdlr(t, u.frames);
  return out;
}

inline nlohmann::json transform_to_json(const FdlrTransform &t) {
  std::vector<double> a;
  a.reserve(t.A.size());
  for (Eigen::Index i = 0; i < t.A.rows(); ++i)
    for (Eigen::Index j = 0; j < t.A.cols(); ++j) a.push_back(t.A(i, j));
  return {{"dim", t.dim()},
          {"A", a},
          {"b", std::vector<double>(t.b.data(), t.b.data() + t.b.size())}};
}

inline FdlrTransform transform_from_json(const nlohmann::json &j) {
  try {
    const int dim = j.at("dim").get<int>();
    const auto a = j.at("A").get<std::vector<double>>();
    const auto b = j.at("b").get<std::vector<double>>();
    if (dim < 1 || a.size() != static_cast<std::size_t>(dim) * dim ||
        b.size() != static_cast<std::size_t>(dim))
      throw ShapeError("transform JSON sizes do not match dim");
    FdlrTransform t{Eigen::Map<const RowMajorMatrix>(a.data(), dim, dim),
                    Eigen::Map<const Vector>(b.data(), dim)};
    validate(t);
    return t;
  } catch (const nlohmann::json::exception &e) {
    throw InvalidConfigError(std::string("malformed transform JSON: ") + e.what());
  }
}

/// Adaptation data: frame-stage utterances (after dynamics and
/// normalization, before splicing).
inline FrameSet splice_with_transform(const Dataset &frame_stage, int context,
                                      const FdlrTransform &t) {
  FrameSet out;
  Eigen::Index rows = 0;
  for (const auto &u : frame_stage) rows += u.num_frames();
  out.inputs.resize(rows, static_cast<Eigen::Index>(t.dim()) * context);
  Eigen::Index r = 0;
  for (const auto &u : frame_stage) {
    const Matrix spliced = splice_context(apply_fdlr(t, u.frames), context);
    out.inputs.middleRows(r, spliced.rows()) = spliced;
    r += spliced.rows();
    out.labels.insert(out.labels.end(), u.labels.begin(), u.labels.end());
  }
  return out;
}

struct FdlrOptions {
  int steps = 40;
  double lr0 = 1.0;
  int max_halvings = 30;
  int context = 1;
};

struct FdlrResult {
  FdlrTransform transform;
  /// Mean cross-entropy at the start and after every accepted step.
  std::vector<double> objective;
};

namespace detail {

struct FdlrEval {
  double objective = 0.0;
  Matrix grad_a;
  Vector grad_b;
};

// Mean cross-entropy of net(splice(A f + b)) and, optionally, its gradient
// with respect to A and b. The spliced-input gradient is scattered back to
// the frames each block was copied from.
inline FdlrEval fdlr_evaluate(const Network &net, const Dataset &data,
                              const std::vector<std::vector<int>> &labels, int context,
                              const FdlrTransform &t, bool with_grad) {
  const int d = t.dim();
  const int k = (context - 1) / 2;
  FdlrEval ev;
  if (with_grad) {
    ev.grad_a = Matrix::Zero(d, d);
    ev.grad_b = Vector::Zero(d);
  }
  double loss = 0.0;
  long frames = 0;
  Matrix input_grads;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Matrix &x = data[i].frames;
    const Matrix mapped = apply_fdlr(t, x);
    if (!mapped.allFinite()) {
      ev.objective = std::numeric_limits<double>::infinity();
      return ev;
    }
    const Matrix spliced = splice_context(mapped, context);
    if (!with_grad) {
      loss += batch_loss(net, spliced, labels[i]);
    } else {
      loss += batch_input_gradients(net, spliced, labels[i], input_grads);
      const Eigen::Index T = x.rows();
      Matrix g = Matrix::Zero(T, d);
      for (Eigen::Index row = 0; row < T; ++row)
        for (int o = -k; o <= k; ++o) {
          const Eigen::Index src = std::clamp<Eigen::Index>(row + o, 0, T - 1);
          g.row(src) += input_grads.block(row, (o + k) * d, 1, d);
        }
      ev.grad_a += g.transpose() * x;
      ev.grad_b += g.colwise().sum().transpose();
    }
    frames += x.rows();
  }
  const double inv = frames > 0 ? 1.0 / static_cast<double>(frames) : 0.0;
  ev.objective = loss * inv;
  if (with_grad) {
    ev.grad_a *= inv;
    ev.grad_b *= inv;
  }
  return ev;
}

}  // namespace detail

/// Discriminative feature-space transform estimation through a frozen
/// network: full-batch gradient descent on mean cross-entropy with step
/// halving, so the recorded objective never increases.
inline FdlrResult fdlr_estimate(const Network &net, const Dataset &data,
                                const std::vector<std::vector<int>> &labels,
                                const FdlrOptions &opts,
                                const FdlrTransform *initial = nullptr) {
  if (data.empty()) throw InvalidConfigError("fDLR needs adaptation data");
  if (labels.size() != data.size()) throw ShapeError("need one label vector per utterance");
  if (opts.steps < 0) throw InvalidConfigError("steps must be >= 0");
  if (!(opts.lr0 > 0.0)) throw InvalidConfigError("lr0 must be positive");
  if (opts.context < 1 || opts.context % 2 == 0)
    throw InvalidConfigError("context must be odd and >= 1");
  const int d = data.front().dim();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].dim() != d) throw ShapeError("adaptation utterances differ in width");
    if (labels[i].size() != static_cast<std::size_t>(data[i].num_frames()))
      throw ShapeError("labels do not cover utterance " + std::to_string(i));
  }
  if (d * opts.context != net.input_dim())
    throw ShapeError("frame width x context != network input_dim");

  FdlrResult res{initial ? *initial : FdlrTransform::identity(d), {}};
  validate(res.transform);
  if (res.transform.dim() != d) throw ShapeError("initial transform has the wrong size");

  detail::FdlrEval cur =
      detail::fdlr_evaluate(net, data, labels, opts.context, res.transform, true);
  if (!std::isfinite(cur.objective))
    throw AdaptationDivergedError("initial fDLR objective is not finite");
  res.objective.push_back(cur.objective);

  double lr = opts.lr0;
  for (int step = 0; step < opts.steps; ++step) {
    bool accepted = false, saw_nonfinite = false;
    for (int h = 0; h <= opts.max_halvings; ++h, lr *= 0.5) {
      FdlrTransform cand{res.transform.A - lr * cur.grad_a,
                         res.transform.b - lr * cur.grad_b};
      const double obj =
          detail::fdlr_evaluate(net, data, labels, opts.context, cand, false).objective;
      if (!std::isfinite(obj)) {
        saw_nonfinite = true;
        continue;
      }
      if (obj <= cur.objective) {
        res.transform = std::move(cand);
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (saw_nonfinite)
        throw AdaptationDivergedError("fDLR objective non-finite after " +
                                      std::to_string(opts.max_halvings) +
                                      " halvings at step " + std::to_string(step));
      break;  // no descent left at machine precision
    }
    cur = detail::fdlr_evaluate(net, data, labels, opts.context, res.transform, true);
    res.objective.push_back(cur.objective);
    lr = std::min(2.0 * lr, opts.lr0);
  }
  return res;
}

/// Frame-level argmax labels of the network on transformed data.
inline std::vector<std::vector<int>> self_labels(const Network &net, const Dataset &data,
                                                 int context, const FdlrTransform &t) {
  std::vector<std::vector<int>> out;
  out.reserve(data.size());
  for (const auto &u : data)
    out.push_back(predict_all(net, splice_context(apply_fdlr(t, u.frames), context)));
  return out;
}

struct SelfAdaptResult {
  FdlrTransform transform;
  /// Per iteration: frames whose self-label changed after re-estimation.
  std::vector<int> label_changes;
  std::vector<std::vector<double>> objectives;
};

/// Unsupervised loop: label with the current transform, re-estimate
/// (continuing from the current transform), repeat.
inline SelfAdaptResult self_adapt(const Network &net, const Dataset &data,
                                  const FdlrOptions &opts, int iterations = 4) {
  if (iterations < 1) throw InvalidConfigError("self_adapt needs at least one iteration");
  if (data.empty()) throw InvalidConfigError("self_adapt needs adaptation data");
  SelfAdaptResult res{FdlrTransform::identity(data.front().dim()), {}, {}};
  for (int it = 0; it < iterations; ++it) {
    const auto labels = self_labels(net, data, opts.context, res.transform);
    FdlrResult est;
    try {
      est = fdlr_estimate(net, data, labels, opts, &res.transform);
    } catch (const AdaptationDivergedError &e) {
      throw AdaptationDivergedError("self-adaptation iteration " + std::to_string(it + 1) +
                                    ": " + e.what());
    }
    res.transform = std::move(est.transform);
    res.objectives.push_back(std::move(est.objective));
    const auto relabeled = self_labels(net, data, opts.context, res.transform);
    int changed = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
      for (std::size_t t = 0; t < labels[i].size(); ++t)
        changed += labels[i][t] != relabeled[i][t];
    res.label_changes.push_back(changed);
  }
  return res;
}

// ---------------------------------------------------------------------------
// VTLN warp selection

struct WarpGrid {
  std::vector<double> alphas;
};

inline void validate(const WarpGrid &g) {
  if (g.alphas.empty()) throw InvalidConfigError("warp grid is empty");
  for (std::size_t i = 0; i < g.alphas.size(); ++i) {
    check_warp_factor(g.alphas[i]);
    if (i > 0 && !(g.alphas[i] > g.alphas[i - 1]))
      throw InvalidConfigError("warp grid must be strictly increasing");
  }
}

/// 0.88 .. 1.12 in steps of 0.02.
inline WarpGrid default_warp_grid() {
  WarpGrid g;
  for (int i = 0; i <= 12; ++i) g.alphas.push_back((88 + 2 * i) / 100.0);
  return g;
}

/// Mean log-posterior of the argmax labels on one static utterance.
inline double warp_score(const Network &net, const FeatureSpec &spec, const Utterance &u,
                         double alpha) {
  const Utterance warped = vtln_warp(u, alpha);
  const Matrix inputs = splice_context(frame_stage(warped, spec), spec.context);
  double sum = 0.0;
  for (Eigen::Index r = 0; r < inputs.rows(); ++r) {
    const Vector p = forward(net, inputs.row(r).transpose()).posteriors;
    sum += std::log(std::max(p.maxCoeff(), 1e-300));
  }
  return sum / static_cast<double>(inputs.rows());
}

struct WarpSelection {
  double alpha = 1.0;
  std::vector<double> scores;  // aligned with the grid
};

/// Highest score wins; ties go to the factor nearest 1, then the smaller.
inline WarpSelection select_vtln_warp(const Network &net, const FeatureSpec &spec,
                                      const Utterance &u, const WarpGrid &grid) {
  validate(grid);
  WarpSelection sel;
  double best = -std::numeric_limits<double>::infinity();
  bool have = false;
  for (double alpha : grid.alphas) {
    const double s = warp_score(net, spec, u, alpha);
    sel.scores.push_back(s);
    const bool better =
        !have || s > best ||
        (s == best && (std::abs(alpha - 1.0) < std::abs(sel.alpha - 1.0) ||
                       (std::abs(alpha - 1.0) == std::abs(sel.alpha - 1.0) &&
                        alpha < sel.alpha)));
    if (better) {
      best = s;
      sel.alpha = alpha;
      have = true;
    }
  }
  return sel;
}

}  // namespace dnnlab
