// dnnlab/experiments.hpp

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

#include <cmath>
#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "dnnlab/adaptation.hpp"
#include "dnnlab/corpus.hpp"
#include "dnnlab/diagnostics.hpp"
#include "dnnlab/error.hpp"
#include "dnnlab/features.hpp"
#include "dnnlab/network.hpp"
#include "dnnlab/types.hpp"

namespace dnnlab {

inline const std::vector<std::string> &experiment_names() {
  static const std::vector<std::string> names{"depth-sweep", "shrinkage", "mixed-band",
                                              "speaker-adapt", "noise-robust"};
  return names;
}

/// Everything a named experiment needs. Fields an experiment does not use
/// are still part of the config (and its hash).
struct ExperimentConfig {
  std::string name;
  std::uint64_t seed = 1;  // corpus seed; training seeds derive from it
  CorpusSpec corpus;
  FeatureSpec features;  // n_low / n_high follow the corpus
  std::vector<int> hidden{32, 32, 32, 32};
  TrainConfig train;     // seed field unused, see run_seeds()
  int runs = 1;

  // depth-sweep: extra hidden-layer counts trained at the same width
  std::vector<int> sweep_depths{2, 3};

  // shrinkage
  ProbeSettings probe;
  double perturbation_t = 1e-4;
  int probe_frames = 100;
  double pair_snr_db = 20.0;

  // mixed-band
  double narrowband_fraction = 0.5;

  // speaker-adapt
  double test_distortion = 0.3;
  FdlrOptions fdlr;
  int adapt_iterations = 4;

  // noise-robust
  std::vector<ConditionSpec> train_conditions;  // multi-condition set
  double test_snr_db = 10.0;
};

inline nlohmann::json conditions_to_json(const std::vector<ConditionSpec> &cs) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto &c : cs)
    out.push_back({{"id", c.id},
                   {"snr_db", c.snr_db ? nlohmann::json(*c.snr_db) : nlohmann::json(nullptr)}});
  return out;
}

inline std::vector<ConditionSpec> conditions_from_json(const nlohmann::json &j) {
  std::vector<ConditionSpec> out;
  for (const auto &c : j) {
    ConditionSpec cs;
    cs.id = c.at("id").get<std::string>();
    if (c.contains("snr_db") && !c.at("snr_db").is_null()) cs.snr_db = c.at("snr_db").get<double>();
    out.push_back(cs);
  }
  return out;
}

inline nlohmann::json feature_spec_to_json(const FeatureSpec &f) {
  return {{"n_low", f.n_low},
          {"n_high", f.n_high},
          {"context", f.context},
          {"dynamics_order", f.dynamics_order},
          {"mean_normalize", f.mean_normalize}};
}

inline FeatureSpec feature_spec_from_json(const nlohmann::json &j) {
  FeatureSpec f;
  try {
    f.n_low = j.value("n_low", f.n_low);
    f.n_high = j.value("n_high", f.n_high);
    f.context = j.value("context", f.context);
    f.dynamics_order = j.value("dynamics_order", f.dynamics_order);
    f.mean_normalize = j.value("mean_normalize", f.mean_normalize);
  } catch (const nlohmann::json::exception &e) {
    throw InvalidConfigError(std::string("malformed feature spec: ") + e.what());
  }
  validate(f);
  return f;
}

inline nlohmann::json to_json(const ExperimentConfig &c) {
  auto corpus = corpus_spec_to_json(c.corpus);
  corpus.erase("seed");
  auto features = feature_spec_to_json(c.features);
  features.erase("n_low");
  features.erase("n_high");
  return {{"name", c.name},
          {"seed", c.seed},
          {"corpus", corpus},
          {"features", features},
          {"hidden", c.hidden},
          {"train",
           {{"learning_rate", c.train.learning_rate},
            {"minibatch_size", c.train.minibatch_size},
            {"epochs", c.train.epochs},
            {"init_scale", c.train.init_scale}}},
          {"runs", c.runs},
          {"sweep_depths", c.sweep_depths},
          {"probe",
           {{"eps", c.probe.eps},
            {"weight_threshold", c.probe.weight_threshold},
            {"perturbation_t", c.perturbation_t},
            {"frames", c.probe_frames},
            {"pair_snr_db", c.pair_snr_db}}},
          {"narrowband_fraction", c.narrowband_fraction},
          {"adapt",
           {{"test_distortion", c.test_distortion},
            {"steps", c.fdlr.steps},
            {"lr0", c.fdlr.lr0},
            {"max_halvings", c.fdlr.max_halvings},
            {"iterations", c.adapt_iterations}}},
          {"noise",
           {{"train_conditions", conditions_to_json(c.train_conditions)},
            {"test_snr_db", c.test_snr_db}}}};
}

namespace detail {

// Rejects keys of `j` that `reference` (a fully populated config) lacks, so
// a misspelt option fails loudly instead of silently keeping its default.
inline void check_keys(const nlohmann::json &j, const nlohmann::json &reference,
                       const std::string &where) {
  if (!j.is_object()) throw InvalidConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!reference.contains(it.key()))
      throw InvalidConfigError("unknown config key '" + where + it.key() + "'");
    const auto &ref = reference.at(it.key());
    if (ref.is_object()) check_keys(*it, ref, where + it.key() + ".");
  }
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const nlohmann::json &j) {
  ExperimentConfig c;
  try {
    auto ref = to_json(c);
    ref["corpus"] = corpus_spec_to_json(c.corpus);
    detail::check_keys(j, ref, "");
    c.name = j.value("name", c.name);
    c.seed = j.value("seed", c.seed);
    if (j.contains("corpus")) {
      if (j.at("corpus").contains("seed"))
        throw InvalidConfigError("set the corpus seed through the top-level 'seed'");
      c.corpus = corpus_spec_from_json(j.at("corpus"));
    }
    c.corpus.seed = c.seed;
    nlohmann::json fj = j.value("features", nlohmann::json::object());
    fj["n_low"] = c.corpus.d_low;
    fj["n_high"] = c.corpus.d_high;
    c.features = feature_spec_from_json(fj);
    c.hidden = j.value("hidden", c.hidden);
    if (j.contains("train")) {
      const auto &t = j.at("train");
      c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
      c.train.minibatch_size = t.value("minibatch_size", c.train.minibatch_size);
      c.train.epochs = t.value("epochs", c.train.epochs);
      c.train.init_scale = t.value("init_scale", c.train.init_scale);
    }
    c.runs = j.value("runs", c.runs);
    c.sweep_depths = j.value("sweep_depths", c.sweep_depths);
    if (j.contains("probe")) {
      const auto &p = j.at("probe");
      c.probe.eps = p.value("eps", c.probe.eps);
      c.probe.weight_threshold = p.value("weight_threshold", c.probe.weight_threshold);
      c.perturbation_t = p.value("perturbation_t", c.perturbation_t);
      c.probe_frames = p.value("frames", c.probe_frames);
      c.pair_snr_db = p.value("pair_snr_db", c.pair_snr_db);
    }
    c.narrowband_fraction = j.value("narrowband_fraction", c.narrowband_fraction);
    if (j.contains("adapt")) {
      const auto &a = j.at("adapt");
      c.test_distortion = a.value("test_distortion", c.test_distortion);
      c.fdlr.steps = a.value("steps", c.fdlr.steps);
      c.fdlr.lr0 = a.value("lr0", c.fdlr.lr0);
      c.fdlr.max_halvings = a.value("max_halvings", c.fdlr.max_halvings);
      c.adapt_iterations = a.value("iterations", c.adapt_iterations);
    }
    if (j.contains("noise")) {
      const auto &n = j.at("noise");
      if (n.contains("train_conditions"))
        c.train_conditions = conditions_from_json(n.at("train_conditions"));
      c.test_snr_db = n.value("test_snr_db", c.test_snr_db);
    }
  } catch (const nlohmann::json::exception &e) {
    throw InvalidConfigError(std::string("malformed experiment config: ") + e.what());
  }
  for (int h : c.hidden)
    if (h < 1) throw InvalidConfigError("hidden layer sizes must be positive");
  for (int d : c.sweep_depths)
    if (d < 1) throw InvalidConfigError("sweep depths must be positive");
  if (!(c.train.learning_rate > 0.0)) throw InvalidConfigError("learning_rate must be positive");
  if (c.train.minibatch_size < 1) throw InvalidConfigError("minibatch_size must be >= 1");
  if (c.train.epochs < 0) throw InvalidConfigError("epochs must be >= 0");
  if (!(c.train.init_scale >= 0.0)) throw InvalidConfigError("init_scale must be >= 0");
  if (c.runs < 1) throw InvalidConfigError("runs must be >= 1");
  if (!(c.probe.eps > 0.0 && c.probe.eps < 0.5)) throw InvalidConfigError("probe eps must lie in (0, 0.5)");
  if (!(c.probe.weight_threshold > 0.0)) throw InvalidConfigError("weight_threshold must be positive");
  if (!(c.perturbation_t > 0.0)) throw InvalidConfigError("perturbation_t must be positive");
  if (c.probe_frames < 1) throw InvalidConfigError("probe frames must be >= 1");
  if (!std::isfinite(c.pair_snr_db) || !std::isfinite(c.test_snr_db))
    throw InvalidConfigError("SNRs must be finite");
  if (!(c.narrowband_fraction >= 0.0 && c.narrowband_fraction <= 1.0))
    throw InvalidConfigError("narrowband_fraction must lie in [0, 1]");
  if (!(c.test_distortion >= 0.0)) throw InvalidConfigError("test_distortion must be >= 0");
  if (c.fdlr.steps < 0 || !(c.fdlr.lr0 > 0.0) || c.fdlr.max_halvings < 0)
    throw InvalidConfigError("adapt steps/lr0/max_halvings out of range");
  if (c.adapt_iterations < 1) throw InvalidConfigError("adapt iterations must be >= 1");
  for (const auto &cs : c.train_conditions)
    if (cs.snr_db && !std::isfinite(*cs.snr_db))
      throw InvalidConfigError("train condition SNRs must be finite");
  c.fdlr.context = c.features.context;
  return c;
}

/// fnv1a64 of the canonical (key-sorted, compact) config JSON.
inline std::string config_hash(const ExperimentConfig &c) {
  return hex64(fnv1a64(to_json(c).dump()));
}

/// The configuration each named experiment runs with by default.
inline ExperimentConfig default_experiment_config(const std::string &name) {
  ExperimentConfig c;
  c.name = name;
  c.features.n_low = c.corpus.d_low;
  c.features.n_high = c.corpus.d_high;
  c.features.context = 11;
  c.features.mean_normalize = true;
  c.train.learning_rate = 1.0;
  c.train.epochs = 40;
  if (name == "depth-sweep" || name == "shrinkage") {
    c.corpus.speakers = 64;
    c.corpus.utterances_per_split = 400;
    c.corpus.speaker_distortion = 0.3;
    c.runs = name == "depth-sweep" ? 5 : 1;
  } else if (name == "mixed-band") {
    c.corpus.level = 1.5;
    c.corpus.jitter = 0.4;
    c.corpus.speaker_distortion = 0.0;
    c.features.context = 5;
    c.features.mean_normalize = false;
    c.hidden = {64, 64};
    c.runs = 3;
  } else if (name == "speaker-adapt") {
    c.corpus.level = 0.0;
    c.features.context = 5;
    c.features.mean_normalize = false;
    c.hidden = {64, 64};
  } else if (name == "noise-robust") {
    c.corpus.level = 0.75;
    c.corpus.jitter = 0.4;
    c.corpus.class_spread = 0.8;
    c.corpus.noise_fluctuation = 0.0;
    c.features.context = 7;
    c.features.mean_normalize = false;
    c.hidden = {64, 64};
    c.runs = 3;
    c.train_conditions = {{"clean", std::nullopt}, {"snr10", 10.0}, {"snr15", 15.0},
                          {"snr20", 20.0}};
  } else {
    throw InvalidConfigError("unknown experiment '" + name + "'");
  }
  c.fdlr.context = c.features.context;
  return c;
}

/// Default config for `name`, with `overrides` merged on top (JSON merge
/// patch semantics).
inline ExperimentConfig resolve_experiment_config(const std::string &name,
                                                  const nlohmann::json &overrides) {
  nlohmann::json j = to_json(default_experiment_config(name));
  if (!overrides.is_null()) {
    if (!overrides.is_object()) throw InvalidConfigError("config must be a JSON object");
    if (overrides.contains("name") && overrides.at("name") != name)
      throw InvalidConfigError("config is for experiment '" +
                               overrides.at("name").dump() + "', not '" + name + "'");
    j.merge_patch(overrides);
  }
  return experiment_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Shared steps

struct RunSeeds {
  std::uint64_t init;
  std::uint64_t train;
};

inline RunSeeds run_seeds(const ExperimentConfig &c, int run) {
  return {detail::derive_seed(c.seed, 21, static_cast<std::uint64_t>(run)),
          detail::derive_seed(c.seed, 22, static_cast<std::uint64_t>(run))};
}

inline std::vector<int> layer_sizes(int input_dim, const std::vector<int> &hidden, int classes) {
  std::vector<int> sizes{input_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(classes);
  return sizes;
}

inline std::size_t parameter_count(const std::vector<int> &sizes) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l)
    n += static_cast<std::size_t>(sizes[l]) * sizes[l + 1] + sizes[l + 1];
  return n;
}

/// Width of the one-hidden-layer net whose parameter count is closest to
/// `target`.
inline int matched_shallow_width(int input_dim, int classes, std::size_t target) {
  const double h = (static_cast<double>(target) - classes) / (input_dim + 1 + classes);
  return std::max(1, static_cast<int>(std::lround(h)));
}

inline Network train_model(const ExperimentConfig &c, const std::vector<int> &hidden,
                           const FrameSet &data, int run) {
  const RunSeeds s = run_seeds(c, run);
  TrainConfig tc = c.train;
  tc.seed = s.train;
  const Network init =
      init_network(layer_sizes(data.dim(), hidden, c.corpus.classes), s.init, tc.init_scale);
  return train(init, data, tc).network;
}

inline nlohmann::json report_envelope(const ExperimentConfig &c, nlohmann::json results) {
  return {{"format", "dnnlab-report-v1"},
          {"experiment", c.name},
          {"config_hash", config_hash(c)},
          {"config", to_json(c)},
          {"results", std::move(results)}};
}

inline double mean_of(const std::vector<double> &v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// depth-sweep

inline nlohmann::json run_depth_sweep(const ExperimentConfig &c,
                                      std::optional<Network> *deep_model = nullptr) {
  const Corpus corpus = generate(c.corpus);
  const FrameSet tr = to_frames(corpus.train, c.features);
  const FrameSet te = to_frames(corpus.test, c.features);
  const int D = c.features.input_dim(), K = c.corpus.classes;
  const std::size_t deep_params = parameter_count(layer_sizes(D, c.hidden, K));
  const int width = matched_shallow_width(D, K, deep_params);

  struct Arm {
    std::string role;
    std::vector<int> hidden;
  };
  std::vector<Arm> arms{{"shallow", {width}}};
  for (int d : c.sweep_depths)
    arms.push_back({"sweep", std::vector<int>(d, c.hidden.empty() ? 32 : c.hidden.front())});
  arms.push_back({"deep", c.hidden});

  nlohmann::json models = nlohmann::json::array();
  double deep_mean = 0.0, shallow_mean = 0.0;
  for (const Arm &arm : arms) {
    std::vector<double> test_acc, train_acc;
    for (int r = 0; r < c.runs; ++r) {
      const Network net = train_model(c, arm.hidden, tr, r);
      test_acc.push_back(frame_accuracy(net, te));
      train_acc.push_back(frame_accuracy(net, tr));
      if (arm.role == "deep" && r == 0 && deep_model) *deep_model = net;
    }
    const auto sizes = layer_sizes(D, arm.hidden, K);
    models.push_back({{"role", arm.role},
                      {"hidden", arm.hidden},
                      {"parameters", parameter_count(sizes)},
                      {"test_accuracy", test_acc},
                      {"train_accuracy", train_acc},
                      {"mean_test_accuracy", mean_of(test_acc)}});
    if (arm.role == "deep") deep_mean = mean_of(test_acc);
    if (arm.role == "shallow") shallow_mean = mean_of(test_acc);
  }
  return {{"input_dim", D},
          {"train_frames", tr.size()},
          {"test_frames", te.size()},
          {"models", models},
          {"deep_mean_accuracy", deep_mean},
          {"shallow_mean_accuracy", shallow_mean},
          {"deep_minus_shallow", deep_mean - shallow_mean}};
}

// ---------------------------------------------------------------------------
// shrinkage

/// Clean test frames paired with the same frames under additive noise.
inline PairSet noisy_pairs(const ExperimentConfig &c, int frames) {
  CorpusSpec noisy = c.corpus;
  noisy.conditions = {{"pair", c.pair_snr_db}};
  const Corpus a = generate(c.corpus), b = generate(noisy);
  const FrameSet fa = to_frames(a.test, c.features), fb = to_frames(b.test, c.features);
  const int n = std::min(frames, fa.size());
  return {fa.inputs.topRows(n), fb.inputs.topRows(n)};
}

inline nlohmann::json run_shrinkage(const ExperimentConfig &c,
                                    const std::optional<Network> &trained = std::nullopt) {
  const Network net = trained ? *trained : [&] {
    const Corpus corpus = generate(c.corpus);
    return train_model(c, c.hidden, to_frames(corpus.train, c.features), 0);
  }();
  const PairSet pairs = noisy_pairs(c, c.probe_frames);
  const ProbeReport rep = probe(net, pairs.first, pairs, c.probe);

  // Empirical perturbation ratios against the per-frame linearized bound.
  std::mt19937_64 rng(detail::derive_seed(c.seed, 31));
  const std::size_t H = net.num_hidden();
  std::vector<double> ratio_sum(H, 0.0), ratio_max(H, 0.0);
  std::vector<int> violations(H, 0);
  for (int r = 0; r < pairs.size(); ++r) {
    const Vector x = pairs.first.row(r).transpose();
    const Vector dir = detail::gaussian_vector(rng, x.size()).normalized();
    const auto ratios = perturbation_shrinkage(net, x, dir, c.perturbation_t);
    const auto gains = frame_gain_norms(net, x);
    for (std::size_t l = 0; l < H; ++l) {
      ratio_sum[l] += ratios[l];
      ratio_max[l] = std::max(ratio_max[l], ratios[l]);
      if (ratios[l] > gains[l] * 1.01) ++violations[l];
    }
  }
  nlohmann::json layers = to_json(rep)["layers"];
  int total_violations = 0;
  for (std::size_t l = 0; l < H; ++l) {
    layers[l]["ratio_mean"] = ratio_sum[l] / pairs.size();
    layers[l]["ratio_max"] = ratio_max[l];
    layers[l]["bound_violations"] = violations[l];
    total_violations += violations[l];
  }
  return {{"frames", pairs.size()},
          {"perturbation_t", c.perturbation_t},
          {"bound_slack", 0.01},
          {"layers", layers},
          {"top", to_json(rep)["top"]},
          {"bound_violations", total_violations}};
}

// ---------------------------------------------------------------------------
// mixed-band

inline nlohmann::json run_mixed_band(const ExperimentConfig &c) {
  const Corpus corpus = generate(c.corpus);
  const Dataset train_nb = mask_dataset(corpus.train, c.features);
  const Dataset test_nb = mask_dataset(corpus.test, c.features);
  const FrameSet tr_wb = to_frames(corpus.train, c.features);
  const FrameSet te_wb = to_frames(corpus.test, c.features);
  const FrameSet te_nb = to_frames(test_nb, c.features);

  // Narrowband utterances spread evenly through the training list.
  Dataset mixed;
  int n_nb = 0;
  const double f = c.narrowband_fraction;
  for (std::size_t i = 0; i < corpus.train.size(); ++i) {
    const bool nb = std::floor((i + 1) * f) > std::floor(i * f);
    mixed.push_back(nb ? train_nb[i] : corpus.train[i]);
    n_nb += nb;
  }
  const FrameSet tr_mixed = to_frames(mixed, c.features);
  const PairSet pairs{te_wb.inputs, te_nb.inputs};

  auto evaluate = [&](const FrameSet &train_set) {
    std::vector<double> wb, nb, kl;
    nlohmann::json dists = nlohmann::json::array();
    for (int r = 0; r < c.runs; ++r) {
      const Network net = train_model(c, c.hidden, train_set, r);
      wb.push_back(frame_accuracy(net, te_wb));
      nb.push_back(frame_accuracy(net, te_nb));
      kl.push_back(top_layer_kl(net, pairs));
      if (r == 0)
        for (const auto &mv : paired_layer_distances(net, pairs))
          dists.push_back({{"mean", mv.mean}, {"variance", mv.variance}});
    }
    return nlohmann::json{{"wideband_accuracy", mean_of(wb)},
                          {"narrowband_accuracy", mean_of(nb)},
                          {"gap", mean_of(wb) - mean_of(nb)},
                          {"kl_mean", mean_of(kl)},
                          {"layer_distances", dists}};
  };
  return {{"narrowband_utterances", n_nb},
          {"pairs", pairs.size()},
          {"wideband_model", evaluate(tr_wb)},
          {"mixed_model", evaluate(tr_mixed)}};
}

// ---------------------------------------------------------------------------
// speaker-adapt

inline nlohmann::json run_speaker_adapt(const ExperimentConfig &c) {
  // Training and reference test data are undistorted; the adaptation test
  // set is the same test speech under per-speaker affine distortion.
  CorpusSpec plain = c.corpus;
  plain.speaker_distortion = 0.0;
  CorpusSpec bent = c.corpus;
  bent.speaker_distortion = c.test_distortion;
  const Corpus base = generate(plain);
  const Dataset distorted = generate(bent).test;

  const Network net = train_model(c, c.hidden, to_frames(base.train, c.features), 0);
  const double clean_acc = frame_accuracy(net, to_frames(base.test, c.features));

  std::vector<std::string> speakers;
  for (const auto &u : distorted)
    if (std::find(speakers.begin(), speakers.end(), u.speaker_id) == speakers.end())
      speakers.push_back(u.speaker_id);

  nlohmann::json per_speaker = nlohmann::json::array();
  long correct_before = 0, correct_after = 0, correct_supervised = 0, frames = 0;
  bool never_worse = true;
  for (const auto &spk : speakers) {
    Dataset stage;
    for (const auto &u : distorted)
      if (u.speaker_id == spk) stage.push_back(frame_stage(u, c.features));
    const FdlrTransform id = FdlrTransform::identity(c.features.frame_dim());
    const FrameSet before_set = splice_with_transform(stage, c.features.context, id);
    const SelfAdaptResult res = self_adapt(net, stage, c.fdlr, c.adapt_iterations);
    const FrameSet after_set = splice_with_transform(stage, c.features.context, res.transform);
    const double before = frame_accuracy(net, before_set);
    const double after = frame_accuracy(net, after_set);
    // Reference: the same estimator given the true labels.
    std::vector<std::vector<int>> truth;
    for (const auto &u : stage) truth.push_back(u.labels);
    const FdlrResult sup = fdlr_estimate(net, stage, truth, c.fdlr);
    const double supervised =
        frame_accuracy(net, splice_with_transform(stage, c.features.context, sup.transform));
    correct_supervised += std::lround(supervised * before_set.size());
    correct_before += std::lround(before * before_set.size());
    correct_after += std::lround(after * after_set.size());
    frames += before_set.size();
    never_worse = never_worse && after >= before;
    per_speaker.push_back({{"speaker", spk},
                           {"frames", before_set.size()},
                           {"accuracy_before", before},
                           {"accuracy_after", after},
                           {"accuracy_supervised", supervised},
                           {"label_changes", res.label_changes},
                           {"transform_offset_norm",
                            (res.transform.A - id.A).norm() + res.transform.b.norm()}});
  }
  const double before = static_cast<double>(correct_before) / frames;
  const double after = static_cast<double>(correct_after) / frames;
  const double supervised = static_cast<double>(correct_supervised) / frames;
  const double gap = clean_acc - before;
  return {{"undistorted_accuracy", clean_acc},
          {"distorted_accuracy", before},
          {"adapted_accuracy", after},
          {"supervised_accuracy", supervised},
          {"recovered_fraction", gap > 0 ? (after - before) / gap : 0.0},
          {"never_reduces_accuracy", never_worse},
          {"speakers", per_speaker}};
}

// ---------------------------------------------------------------------------
// noise-robust

inline nlohmann::json run_noise_robust(const ExperimentConfig &c) {
  CorpusSpec clean = c.corpus;
  clean.conditions = {{"clean", std::nullopt}};
  CorpusSpec multi = c.corpus;
  multi.conditions = c.train_conditions;
  CorpusSpec noisy = c.corpus;
  noisy.conditions = {{"test", c.test_snr_db}};

  const Corpus clean_corpus = generate(clean);
  const FrameSet te_clean = to_frames(clean_corpus.test, c.features);
  const FrameSet te_noisy = to_frames(generate(noisy).test, c.features);

  auto evaluate = [&](const FrameSet &train_set) {
    std::vector<double> a, b;
    for (int r = 0; r < c.runs; ++r) {
      const Network net = train_model(c, c.hidden, train_set, r);
      a.push_back(frame_accuracy(net, te_clean));
      b.push_back(frame_accuracy(net, te_noisy));
    }
    return nlohmann::json{{"clean_accuracy", mean_of(a)},
                          {"noisy_accuracy", mean_of(b)},
                          {"loss", mean_of(a) - mean_of(b)}};
  };
  nlohmann::json out{{"test_snr_db", c.test_snr_db},
                     {"clean_model", evaluate(to_frames(clean_corpus.train, c.features))}};
  if (!c.train_conditions.empty())
    out["multi_condition_model"] = evaluate(to_frames(generate(multi).train, c.features));
  return out;
}

/// Runs a named experiment and returns its report.
inline nlohmann::json run_experiment(const ExperimentConfig &c) {
  nlohmann::json results;
  if (c.name == "depth-sweep") results = run_depth_sweep(c);
  else if (c.name == "shrinkage") results = run_shrinkage(c);
  else if (c.name == "mixed-band") results = run_mixed_band(c);
  else if (c.name == "speaker-adapt") results = run_speaker_adapt(c);
  else if (c.name == "noise-robust") results = run_noise_robust(c);
  else throw InvalidConfigError("unknown experiment '" + c.name + "'");
  return report_envelope(c, std::move(results));
}

}  // namespace dnnlab
