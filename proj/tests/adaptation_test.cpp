// tests/adaptation_test.cpp

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

#include <gtest/gtest.h>

#include <random>

#include "dnnlab/adaptation.hpp"
#include "dnnlab/corpus.hpp"
#include "oracles.hpp"

namespace dnnlab {
namespace {

Utterance MakeUtt(const Matrix &frames, int classes) {
  Utterance u;
  u.frames = frames;
  for (int t = 0; t < frames.rows(); ++t) u.labels.push_back(t % classes);
  u.d_static = static_cast<int>(frames.cols());
  u.class_count = classes;
  return u;
}

TEST(ApplyFdlr, IdentityAndScaling) {
  std::mt19937_64 rng(1);
  const Utterance u = MakeUtt(oracle::random_matrix(rng, 5, 3), 2);
  EXPECT_EQ(apply_fdlr(FdlrTransform::identity(3), u).frames, u.frames);
  FdlrTransform t{2.0 * Matrix::Identity(2, 2), Vector::Zero(2)};
  const Matrix out = apply_fdlr(t, (Matrix(1, 2) << 1.0, 2.0).finished());
  EXPECT_EQ(out(0, 0), 2.0);
  EXPECT_EQ(out(0, 1), 4.0);
}

TEST(ApplyFdlr, MatchesLonghand) {
  std::mt19937_64 rng(2);
  const FdlrTransform t{oracle::random_matrix(rng, 4, 4), oracle::random_vector(rng, 4)};
  const Matrix f = oracle::random_matrix(rng, 6, 4);
  const Matrix out = apply_fdlr(t, f);
  for (int r = 0; r < 6; ++r)
    for (int i = 0; i < 4; ++i) {
      double s = t.b[i];
      for (int j = 0; j < 4; ++j) s += t.A(i, j) * f(r, j);
      EXPECT_NEAR(out(r, i), s, 1e-12);
    }
  EXPECT_THROW(apply_fdlr(t, oracle::random_matrix(rng, 2, 3)), ShapeError);
}

TEST(ApplyFdlr, Composition) {
  std::mt19937_64 rng(3);
  for (int n = 0; n < 100; ++n) {
    const FdlrTransform t1{oracle::random_matrix(rng, 3, 3), oracle::random_vector(rng, 3)};
    const FdlrTransform t2{oracle::random_matrix(rng, 3, 3), oracle::random_vector(rng, 3)};
    const Matrix f = oracle::random_matrix(rng, 4, 3);
    EXPECT_LT((apply_fdlr(t2, apply_fdlr(t1, f)) - apply_fdlr(compose(t2, t1), f))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-10);
  }
}

TEST(TransformJson, RoundTrip) {
  std::mt19937_64 rng(4);
  const FdlrTransform t{oracle::random_matrix(rng, 3, 3), oracle::random_vector(rng, 3)};
  const FdlrTransform back = transform_from_json(nlohmann::json::parse(transform_to_json(t).dump()));
  EXPECT_EQ(back.A, t.A);
  EXPECT_EQ(back.b, t.b);
  EXPECT_THROW(transform_from_json(nlohmann::json::parse(R"({"dim":2,"A":[1,0,0],"b":[0,0]})")),
               ShapeError);
}

// Longhand mean cross-entropy of a transformed, spliced dataset.
double LonghandObjective(const Network &net, const Dataset &data,
                         const std::vector<std::vector<int>> &labels, int context,
                         const FdlrTransform &t) {
  double sum = 0.0;
  int frames = 0;
  const int k = (context - 1) / 2, d = t.dim();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Matrix &f = data[i].frames;
    const int T = static_cast<int>(f.rows());
    for (int r = 0; r < T; ++r) {
      oracle::Vec x;
      for (int o = -k; o <= k; ++o) {
        const int src = std::clamp(r + o, 0, T - 1);
        for (int a = 0; a < d; ++a) {
          double v = t.b[a];
          for (int c = 0; c < d; ++c) v += t.A(a, c) * f(src, c);
          x.push_back(v);
        }
      }
      sum += oracle::loss(net, x, labels[i][r]);
      ++frames;
    }
  }
  return sum / frames;
}

TEST(FdlrEstimate, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const Network net = oracle::random_network(rng, {9, 5, 3});
  const Dataset data{MakeUtt(oracle::random_matrix(rng, 4, 3), 3),
                     MakeUtt(oracle::random_matrix(rng, 2, 3), 3)};
  const std::vector<std::vector<int>> labels{{0, 1, 2, 0}, {2, 1}};
  const FdlrTransform t{Matrix::Identity(3, 3) + 0.1 * oracle::random_matrix(rng, 3, 3),
                        0.1 * oracle::random_vector(rng, 3)};
  const auto ev = detail::fdlr_evaluate(net, data, labels, 3, t, true);
  EXPECT_NEAR(ev.objective, LonghandObjective(net, data, labels, 3, t), 1e-12);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      FdlrTransform up = t, down = t;
      up.A(i, j) += 1e-5;
      down.A(i, j) -= 1e-5;
      const double fd = (LonghandObjective(net, data, labels, 3, up) -
                         LonghandObjective(net, data, labels, 3, down)) / 2e-5;
      EXPECT_TRUE(oracle::close_rel(ev.grad_a(i, j), fd, 1e-4)) << i << "," << j;
    }
  for (int i = 0; i < 3; ++i) {
    FdlrTransform up = t, down = t;
    up.b[i] += 1e-5;
    down.b[i] -= 1e-5;
    const double fd = (LonghandObjective(net, data, labels, 3, up) -
                       LonghandObjective(net, data, labels, 3, down)) / 2e-5;
    EXPECT_TRUE(oracle::close_rel(ev.grad_b[i], fd, 1e-4));
  }
}

TEST(FdlrEstimate, StepsZeroAndErrors) {
  std::mt19937_64 rng(6);
  const Network net = oracle::random_network(rng, {3, 4, 3});
  const Dataset data{MakeUtt(oracle::random_matrix(rng, 5, 3), 3)};
  const std::vector<std::vector<int>> labels{{0, 1, 2, 0, 1}};
  FdlrOptions opts;
  opts.steps = 0;
  const auto res = fdlr_estimate(net, data, labels, opts);
  EXPECT_EQ(res.transform.A, Matrix::Identity(3, 3));
  EXPECT_TRUE(res.transform.b.isZero(0.0));
  EXPECT_EQ(res.objective.size(), 1u);
  EXPECT_THROW(fdlr_estimate(net, {}, {}, opts), InvalidConfigError);
  EXPECT_THROW(fdlr_estimate(net, data, {{0, 1}}, opts), ShapeError);
  opts.context = 3;
  EXPECT_THROW(fdlr_estimate(net, data, labels, opts), ShapeError);
}

TEST(FdlrEstimate, DivergenceIsReported) {
  // Huge frames make the gradient overflow, so every candidate step is
  // non-finite however far it is halved.
  const Network net({{(Matrix(1, 2) << 1.0, -1.0).finished(), Vector::Zero(2)}});
  const Dataset data{MakeUtt(Matrix::Constant(2, 1, 1e308), 2)};
  EXPECT_THROW(fdlr_estimate(net, data, {{1, 1}}, FdlrOptions{}), AdaptationDivergedError);
}

TEST(FdlrEstimate, MonotoneAndFrozenOverSeeds) {
  std::mt19937_64 rng(7);
  for (int n = 0; n < 100; ++n) {
    const Network net = oracle::random_network(rng, {6, 4, 3}, 1.5);
    const std::string before = network_to_json(net).dump();
    const Dataset data{MakeUtt(oracle::random_matrix(rng, 6, 2), 3)};
    const std::vector<std::vector<int>> labels{{0, 1, 2, 2, 1, 0}};
    FdlrOptions opts;
    opts.steps = 8;
    opts.context = 3;
    opts.lr0 = 4.0;
    const auto res = fdlr_estimate(net, data, labels, opts);
    for (std::size_t s = 1; s < res.objective.size(); ++s)
      EXPECT_LE(res.objective[s], res.objective[s - 1]);
    EXPECT_EQ(network_to_json(net).dump(), before);
  }
}

// Small trained model on an undistorted corpus, shared by the tests below.
struct Trained {
  CorpusSpec cs;
  FeatureSpec fs;
  Corpus corpus;
  Network net = init_network({1, 2}, 1, 0.0);
};

const Trained &Model() {
  static const Trained m = [] {
    Trained t;
    t.cs.speaker_distortion = 0.0;
    t.cs.utterances_per_split = 120;
    t.cs.seed = 5;
    t.fs.n_low = t.cs.d_low;
    t.fs.n_high = t.cs.d_high;
    t.fs.context = 3;
    t.corpus = generate(t.cs);
    TrainConfig cfg;
    cfg.learning_rate = 1.0;
    cfg.epochs = 25;
    cfg.seed = 3;
    const FrameSet tr = to_frames(t.corpus.train, t.fs);
    t.net = train(init_network({t.fs.input_dim(), 48, t.cs.classes}, 3, 0.05), tr, cfg).network;
    return t;
  }();
  return m;
}

// Level-free, single-band corpus with channel-correlated jitter, so that
// channel interpolation does not act as a denoiser.
const Trained &WarpModel() {
  static const Trained m = [] {
    Trained t;
    t.cs.d_low = 24;
    t.cs.d_high = 0;
    t.cs.level = 0.0;
    t.cs.jitter_correlation = 2.0;
    t.cs.speaker_distortion = 0.0;
    t.cs.utterances_per_split = 120;
    t.cs.seed = 5;
    t.fs.n_low = t.cs.d_low;
    t.fs.context = 1;
    t.corpus = generate(t.cs);
    TrainConfig cfg;
    cfg.learning_rate = 1.0;
    cfg.epochs = 25;
    cfg.seed = 3;
    const FrameSet tr = to_frames(t.corpus.train, t.fs);
    t.net = train(init_network({t.fs.input_dim(), 48, t.cs.classes}, 3, 0.05), tr, cfg).network;
    return t;
  }();
  return m;
}

double Accuracy(const Network &net, const Dataset &frame_stage, int context,
                const FdlrTransform &t) {
  return frame_accuracy(net, splice_with_transform(frame_stage, context, t));
}

TEST(FdlrEstimate, UndoesKnownAffine) {
  const Trained &m = Model();
  const int d = m.fs.frame_dim();
  Dataset clean, distorted;
  for (int i = 0; i < 30; ++i) clean.push_back(frame_stage(m.corpus.test[i], m.fs));
  std::mt19937_64 rng(8);
  const FdlrTransform known{Matrix::Identity(d, d) + 0.25 * oracle::random_matrix(rng, d, d) / std::sqrt(d),
                            0.8 * oracle::random_vector(rng, d)};
  for (const auto &u : clean) distorted.push_back(apply_fdlr(known, u));
  const FdlrTransform id = FdlrTransform::identity(d);
  const double err_clean = 1.0 - Accuracy(m.net, clean, m.fs.context, id);
  const double err_dist = 1.0 - Accuracy(m.net, distorted, m.fs.context, id);
  ASSERT_GT(err_dist, err_clean + 0.1);
  std::vector<std::vector<int>> labels;
  for (const auto &u : distorted) labels.push_back(u.labels);
  FdlrOptions opts;
  opts.context = m.fs.context;
  opts.steps = 200;
  const auto res = fdlr_estimate(m.net, distorted, labels, opts);
  const double err_adapted = 1.0 - Accuracy(m.net, distorted, m.fs.context, res.transform);
  EXPECT_LE(err_adapted, 1.1 * err_clean);
  for (std::size_t s = 1; s < res.objective.size(); ++s)
    EXPECT_LE(res.objective[s], res.objective[s - 1]);
}

TEST(SelfAdapt, PerfectDataKeepsIdentity) {
  const Trained &m = WarpModel();
  // Low-jitter speech from the same world: the model is confident on it.
  CorpusSpec easy = m.cs;
  easy.jitter = 0.3;
  const Corpus c = generate(easy);
  Dataset data;
  for (int i = 0; i < 10; ++i) data.push_back(frame_stage(c.test[i], m.fs));
  for (auto &u : data) u.labels = predict_all(m.net, splice_context(u.frames, m.fs.context));
  FdlrOptions opts;
  opts.context = m.fs.context;
  opts.lr0 = 0.2;
  opts.steps = 20;
  const auto res = self_adapt(m.net, data, opts);
  ASSERT_EQ(res.label_changes.size(), 4u);
  for (int changes : res.label_changes) EXPECT_EQ(changes, 0);
  EXPECT_LT((res.transform.A - Matrix::Identity(res.transform.dim(), res.transform.dim())).norm(),
            0.1);
}

TEST(SelfAdapt, OneIterationEqualsEstimate) {
  const Trained &m = Model();
  Dataset data;
  for (int i = 0; i < 4; ++i) data.push_back(frame_stage(m.corpus.test[i], m.fs));
  FdlrOptions opts;
  opts.context = m.fs.context;
  opts.steps = 5;
  const auto one = self_adapt(m.net, data, opts, 1);
  const auto labels = self_labels(m.net, data, opts.context,
                                  FdlrTransform::identity(m.fs.frame_dim()));
  const auto direct = fdlr_estimate(m.net, data, labels, opts);
  EXPECT_EQ(one.transform.A, direct.transform.A);
  EXPECT_EQ(one.transform.b, direct.transform.b);
  EXPECT_THROW(self_adapt(m.net, data, opts, 0), InvalidConfigError);
}

TEST(Vtln, SingletonGrid) {
  const Trained &m = WarpModel();
  EXPECT_EQ(select_vtln_warp(m.net, m.fs, m.corpus.test[0], WarpGrid{{1.0}}).alpha, 1.0);
  EXPECT_THROW(select_vtln_warp(m.net, m.fs, m.corpus.test[0], WarpGrid{{1.0, 0.9}}),
               InvalidConfigError);
  EXPECT_EQ(default_warp_grid().alphas.size(), 13u);
}

TEST(Vtln, UnwarpedDataSelectsOne) {
  const Trained &m = WarpModel();
  int hits = 0, n = 40;
  for (int i = 0; i < n; ++i)
    hits += select_vtln_warp(m.net, m.fs, m.corpus.test[i], default_warp_grid()).alpha == 1.0;
  EXPECT_GE(hits, 0.9 * n);
}

TEST(Vtln, RecoversCompensatingWarp) {
  const Trained &m = WarpModel();
  const double compensate = 1.0 / 1.1;
  int hits = 0, n = 40;
  for (int i = 0; i < n; ++i) {
    const Utterance warped = vtln_warp(m.corpus.test[i], 1.1);
    const double a = select_vtln_warp(m.net, m.fs, warped, default_warp_grid()).alpha;
    hits += std::abs(a - compensate) <= 0.02 + 1e-12;
  }
  EXPECT_GT(hits, n / 2);
}

}  // namespace
}  // namespace dnnlab
