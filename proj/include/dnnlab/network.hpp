// dnnlab/network.hpp

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
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dnnlab/error.hpp"
#include "dnnlab/types.hpp"

namespace dnnlab {

/// One log-linear layer: z = W^T v + a, with W stored fan_in x fan_out.
struct LayerParams {
  Matrix weights;
  Vector biases;

  int fan_in() const { return static_cast<int>(weights.rows()); }
  int fan_out() const { return static_cast<int>(weights.cols()); }
};

using Gradients = std::vector<LayerParams>;

/// Where a network's parameters came from. Serialized with the model.
struct Lineage {
  std::uint64_t init_seed = 0;
  double init_scale = 0.0;
  std::vector<std::uint64_t> train_seeds;
};

/// Sigmoid hidden layers followed by one softmax layer. The last entry of
/// layers() is the softmax layer; everything before it is hidden.
class Network {
 public:
  explicit Network(std::vector<LayerParams> layers, Lineage lineage = {})
      : layers_(std::move(layers)), lineage_(std::move(lineage)) {
    if (layers_.empty()) throw InvalidConfigError("network needs at least one layer");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const LayerParams &p = layers_[l];
      if (p.fan_in() < 1 || p.fan_out() < 1)
        throw InvalidConfigError("layer " + std::to_string(l) + " is empty");
      if (p.biases.size() != p.fan_out())
        throw ShapeError("layer " + std::to_string(l) + " bias length " +
                         std::to_string(p.biases.size()) + " != fan_out " +
                         std::to_string(p.fan_out()));
      if (l > 0 && p.fan_in() != layers_[l - 1].fan_out())
        throw ShapeError("layer " + std::to_string(l) + " fan_in " +
                         std::to_string(p.fan_in()) + " != previous fan_out " +
                         std::to_string(layers_[l - 1].fan_out()));
      if (!p.weights.allFinite() || !p.biases.allFinite())
        throw InvalidInputError("layer " + std::to_string(l) +
                                " has non-finite parameters");
    }
  }

  const std::vector<LayerParams> &layers() const { return layers_; }
  const LayerParams &layer(std::size_t l) const { return layers_.at(l); }
  std::size_t num_layers() const { return layers_.size(); }
  std::size_t num_hidden() const { return layers_.size() - 1; }
  int input_dim() const { return layers_.front().fan_in(); }
  int num_classes() const { return layers_.back().fan_out(); }
  const Lineage &lineage() const { return lineage_; }

  std::vector<int> layer_sizes() const {
    std::vector<int> sizes{input_dim()};
    for (const auto &p : layers_) sizes.push_back(p.fan_out());
    return sizes;
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto &p : layers_) n += p.weights.size() + p.biases.size();
    return n;
  }

  bool operator==(const Network &o) const {
    if (layers_.size() != o.layers_.size()) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto &a = layers_[l], &b = o.layers_[l];
      if (a.weights.rows() != b.weights.rows() ||
          a.weights.cols() != b.weights.cols() || a.weights != b.weights ||
          a.biases != b.biases)
        return false;
    }
    return true;
  }

 private:
  std::vector<LayerParams> layers_;
  Lineage lineage_;
};

/// Everything one forward pass produces. activations[0] is the input;
/// activations[l + 1] = sigmoid(pre_activations[l]) for hidden l.
struct ActivationTrace {
  std::vector<Vector> pre_activations;
  std::vector<Vector> activations;
  Vector posteriors;
};

struct TrainConfig {
  double learning_rate = 0.1;
  int minibatch_size = 32;
  int epochs = 10;
  std::uint64_t seed = 1;
  double init_scale = 0.05;
};

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Softmax with max-subtraction, scalar exp per entry.
inline Vector softmax(const Vector &z) {
  const double m = z.maxCoeff();
  Vector e = z.unaryExpr([m](double v) { return std::exp(v - m); });
  return e / e.sum();
}

inline Network init_network(const std::vector<int> &layer_sizes,
                            std::uint64_t seed, double init_scale = 0.05) {
  if (layer_sizes.size() < 2)
    throw InvalidConfigError("layer_sizes needs at least input and class count");
  for (int s : layer_sizes)
    if (s < 1) throw InvalidConfigError("layer sizes must be positive");
  if (!(init_scale >= 0.0) || !std::isfinite(init_scale))
    throw InvalidConfigError("init_scale must be finite and nonnegative");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  std::vector<LayerParams> layers;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    LayerParams p;
    p.weights = Matrix::Zero(layer_sizes[l], layer_sizes[l + 1]);
    p.biases = Vector::Zero(layer_sizes[l + 1]);
    // Draw order is row-major so the stream layout matches the file layout.
    for (Eigen::Index i = 0; i < p.weights.rows(); ++i)
      for (Eigen::Index j = 0; j < p.weights.cols(); ++j)
        p.weights(i, j) = init_scale * unif(rng);
    layers.push_back(std::move(p));
  }
  return Network(std::move(layers), Lineage{seed, init_scale, {}});
}

inline ActivationTrace forward(const Network &net, const Vector &x) {
  if (x.size() != net.input_dim())
    throw ShapeError("input length " + std::to_string(x.size()) +
                     " != network input_dim " + std::to_string(net.input_dim()));
  if (!x.allFinite()) throw InvalidInputError("input vector is not finite");

  ActivationTrace trace;
  trace.activations.reserve(net.num_layers());
  trace.pre_activations.reserve(net.num_layers());
  trace.activations.push_back(x);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const LayerParams &p = net.layer(l);
    Vector z = p.weights.transpose() * trace.activations.back() + p.biases;
    if (l + 1 < net.num_layers())
      trace.activations.push_back(z.unaryExpr([](double v) { return sigmoid(v); }));
    else
      trace.posteriors = softmax(z);
    trace.pre_activations.push_back(std::move(z));
  }
  return trace;
}

inline void check_label(int label, int num_classes) {
  if (label < 0 || label >= num_classes)
    throw InvalidLabelError("label " + std::to_string(label) +
                            " outside [0, " + std::to_string(num_classes) + ")");
}

/// -ln p(label), with the posterior clamped at 1e-300.
inline double cross_entropy(const ActivationTrace &trace, int label) {
  check_label(label, static_cast<int>(trace.posteriors.size()));
  return -std::log(std::max(trace.posteriors[label], 1e-300));
}

namespace detail {

inline void check_trace(const Network &net, const ActivationTrace &trace) {
  if (trace.activations.size() != net.num_layers() ||
      trace.pre_activations.size() != net.num_layers() ||
      trace.posteriors.size() != net.num_classes())
    throw ShapeError("activation trace does not match network depth");
  for (std::size_t l = 0; l < net.num_layers(); ++l)
    if (trace.activations[l].size() != net.layer(l).fan_in())
      throw ShapeError("activation trace layer " + std::to_string(l) +
                       " does not match network width");
}

// Output delta is p - onehot(label); hidden deltas multiply by v(1 - v).
// Calls sink(l, delta_l) from the top layer down and returns the delta
// with respect to the input vector.
template <typename Sink>
Vector backpropagate(const Network &net, const ActivationTrace &trace,
                     int label, Sink &&sink) {
  check_trace(net, trace);
  check_label(label, net.num_classes());
  Vector delta = trace.posteriors;
  delta[label] -= 1.0;
  for (std::size_t l = net.num_layers(); l-- > 0;) {
    sink(l, delta);
    Vector back = net.layer(l).weights * delta;
    if (l > 0) {
      const Vector &v = trace.activations[l];
      delta = back.array() * v.array() * (1.0 - v.array());
    } else {
      delta = std::move(back);
    }
  }
  return delta;
}

}  // namespace detail

/// Exact gradient of cross_entropy(trace, label) for every parameter.
inline Gradients backward(const Network &net, const ActivationTrace &trace,
                          int label) {
  Gradients grads(net.num_layers());
  detail::backpropagate(net, trace, label, [&](std::size_t l, const Vector &delta) {
    grads[l].weights = trace.activations[l] * delta.transpose();
    grads[l].biases = delta;
  });
  return grads;
}

/// Gradient of cross_entropy with respect to the network input.
inline Vector input_gradient(const Network &net, const ActivationTrace &trace,
                             int label) {
  return detail::backpropagate(net, trace, label,
                               [](std::size_t, const Vector &) {});
}

/// Mean gradient and summed loss over a block of frames (one per row),
/// computed with matrix-matrix products.
struct BatchResult {
  Gradients grads;
  double loss_sum = 0.0;
};

namespace detail {

// One batched forward/backward pass. Fills mean parameter gradients when
// `grads` is non-null and per-row (unaveraged) input gradients when
// `input_grads` is non-null. Returns the summed loss.
inline double batch_pass(const std::vector<LayerParams> &layers, const Matrix &inputs,
                         const std::vector<int> &labels, Gradients *grads,
                         Matrix *input_grads) {
  const Eigen::Index n = inputs.rows();
  const std::size_t depth = layers.size();
  const int num_classes = layers.back().fan_out();
  if (grads) {
    grads->resize(depth);
    for (std::size_t l = 0; l < depth; ++l) {
      (*grads)[l].weights = Matrix::Zero(layers[l].fan_in(), layers[l].fan_out());
      (*grads)[l].biases = Vector::Zero(layers[l].fan_out());
    }
  }
  if (input_grads) *input_grads = Matrix::Zero(n, inputs.cols());
  if (n == 0) return 0.0;

  double loss_sum = 0.0;
  std::vector<Matrix> acts(depth);
  acts[0] = inputs;
  Matrix delta;
  for (std::size_t l = 0; l < depth; ++l) {
    const LayerParams &p = layers[l];
    Matrix z = acts[l] * p.weights;
    z.rowwise() += p.biases.transpose();
    if (l + 1 < depth) {
      acts[l + 1] = z.unaryExpr([](double v) { return sigmoid(v); });
    } else {
      for (Eigen::Index r = 0; r < n; ++r) {
        const int label = labels[r];
        check_label(label, num_classes);
        Vector p_row = softmax(z.row(r).transpose());
        loss_sum += -std::log(std::max(p_row[label], 1e-300));
        p_row[label] -= 1.0;
        z.row(r) = p_row.transpose();
      }
      delta = std::move(z);
    }
  }
  if (!grads && !input_grads) return loss_sum;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t l = depth; l-- > 0;) {
    if (grads) {
      (*grads)[l].weights = acts[l].transpose() * delta * inv_n;
      (*grads)[l].biases = delta.colwise().sum().transpose() * inv_n;
    }
    if (l == 0 && !input_grads) break;
    Matrix back = delta * layers[l].weights.transpose();
    if (l > 0)
      delta = back.array() * acts[l].array() * (1.0 - acts[l].array());
    else
      *input_grads = std::move(back);
  }
  return loss_sum;
}

inline BatchResult batch_gradients(const std::vector<LayerParams> &layers,
                                   const Matrix &inputs,
                                   const std::vector<int> &labels) {
  BatchResult out;
  out.loss_sum = batch_pass(layers, inputs, labels, &out.grads, nullptr);
  return out;
}

inline void check_batch(const Network &net, const Matrix &inputs,
                        const std::vector<int> &labels) {
  if (inputs.cols() != net.input_dim())
    throw ShapeError("batch width " + std::to_string(inputs.cols()) +
                     " != network input_dim " + std::to_string(net.input_dim()));
  if (static_cast<std::size_t>(inputs.rows()) != labels.size())
    throw ShapeError("batch rows and labels disagree");
}

}  // namespace detail

inline BatchResult batch_gradients(const Network &net, const Matrix &inputs,
                                   const std::vector<int> &labels) {
  detail::check_batch(net, inputs, labels);
  return detail::batch_gradients(net.layers(), inputs, labels);
}

/// Summed cross-entropy over rows.
inline double batch_loss(const Network &net, const Matrix &inputs,
                         const std::vector<int> &labels) {
  detail::check_batch(net, inputs, labels);
  return detail::batch_pass(net.layers(), inputs, labels, nullptr, nullptr);
}

/// Summed cross-entropy and, per row, its gradient with respect to that
/// row's input vector.
inline double batch_input_gradients(const Network &net, const Matrix &inputs,
                                    const std::vector<int> &labels, Matrix &grads) {
  detail::check_batch(net, inputs, labels);
  return detail::batch_pass(net.layers(), inputs, labels, nullptr, &grads);
}

struct TrainResult {
  Network network;
  std::vector<double> epoch_losses;
};

/// Plain minibatch gradient descent on mean cross-entropy. The input
/// network is never touched; a new one is returned.
inline TrainResult train(const Network &net, const FrameSet &data,
                         const TrainConfig &cfg) {
  if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate))
    throw InvalidConfigError("learning_rate must be positive");
  if (cfg.minibatch_size < 1) throw InvalidConfigError("minibatch_size must be >= 1");
  if (cfg.epochs < 0) throw InvalidConfigError("epochs must be >= 0");
  check_frame_set(data);
  if (data.size() == 0) throw InvalidConfigError("training set is empty");
  if (data.dim() != net.input_dim())
    throw ShapeError("training frames have width " + std::to_string(data.dim()) +
                     ", network expects " + std::to_string(net.input_dim()));
  for (int label : data.labels) check_label(label, net.num_classes());

  Lineage lineage = net.lineage();
  if (cfg.epochs == 0) return {net, {}};
  lineage.train_seeds.push_back(cfg.seed);

  std::vector<LayerParams> params = net.layers();
  std::mt19937_64 rng(cfg.seed);
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> losses;
  Matrix batch;
  std::vector<int> batch_labels;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (int start = 0; start < data.size(); start += cfg.minibatch_size) {
      const int count = std::min(cfg.minibatch_size, data.size() - start);
      batch.resize(count, data.dim());
      batch_labels.resize(count);
      for (int r = 0; r < count; ++r) {
        batch.row(r) = data.inputs.row(order[start + r]);
        batch_labels[r] = data.labels[order[start + r]];
      }
      BatchResult step = detail::batch_gradients(params, batch, batch_labels);
      if (!std::isfinite(step.loss_sum)) throw TrainingDivergedError(epoch + 1);
      loss_sum += step.loss_sum;
      for (std::size_t l = 0; l < params.size(); ++l) {
        params[l].weights -= cfg.learning_rate * step.grads[l].weights;
        params[l].biases -= cfg.learning_rate * step.grads[l].biases;
        if (!params[l].weights.allFinite() || !params[l].biases.allFinite())
          throw TrainingDivergedError(epoch + 1);
      }
    }
    losses.push_back(loss_sum / data.size());
  }
  return {Network(std::move(params), std::move(lineage)), std::move(losses)};
}

/// Argmax of the posteriors; ties go to the lowest class index.
inline int argmax(const Vector &posteriors) {
  int best = 0;
  for (int s = 1; s < posteriors.size(); ++s)
    if (posteriors[s] > posteriors[best]) best = s;
  return best;
}

inline int predict(const Network &net, const Vector &x) {
  return argmax(forward(net, x).posteriors);
}

inline std::vector<int> predict_all(const Network &net, const Matrix &inputs) {
  std::vector<int> out(inputs.rows());
  for (Eigen::Index r = 0; r < inputs.rows(); ++r)
    out[r] = predict(net, inputs.row(r).transpose());
  return out;
}

inline double frame_error_rate(const Network &net, const FrameSet &data) {
  check_frame_set(data);
  if (data.size() == 0) return 0.0;
  if (data.dim() != net.input_dim())
    throw ShapeError("frame width " + std::to_string(data.dim()) +
                     " != network input_dim " + std::to_string(net.input_dim()));
  int wrong = 0;
  for (int r = 0; r < data.size(); ++r)
    if (predict(net, data.inputs.row(r).transpose()) != data.labels[r]) ++wrong;
  return static_cast<double>(wrong) / data.size();
}

inline double frame_accuracy(const Network &net, const FrameSet &data) {
  return 1.0 - frame_error_rate(net, data);
}

// ---------------------------------------------------------------------------
// JSON model file: {format, layer_sizes, lineage, weights (row-major), biases}

inline nlohmann::json network_to_json(const Network &net) {
  nlohmann::json j;
  j["format"] = "dnnlab-network-v1";
  j["layer_sizes"] = net.layer_sizes();
  j["lineage"] = {{"init_seed", net.lineage().init_seed},
                  {"init_scale", net.lineage().init_scale},
                  {"train_seeds", net.lineage().train_seeds}};
  nlohmann::json weights = nlohmann::json::array();
  nlohmann::json biases = nlohmann::json::array();
  for (const auto &p : net.layers()) {
    std::vector<double> w;
    w.reserve(p.weights.size());
    for (Eigen::Index i = 0; i < p.weights.rows(); ++i)
      for (Eigen::Index k = 0; k < p.weights.cols(); ++k) w.push_back(p.weights(i, k));
    weights.push_back(std::move(w));
    biases.push_back(std::vector<double>(p.biases.data(),
                                         p.biases.data() + p.biases.size()));
  }
  j["weights"] = std::move(weights);
  j["biases"] = std::move(biases);
  return j;
}

inline Network network_from_json(const nlohmann::json &j) {
  try {
    const auto sizes = j.at("layer_sizes").get<std::vector<int>>();
    const auto &weights = j.at("weights");
    const auto &biases = j.at("biases");
    if (sizes.size() < 2 || weights.size() != sizes.size() - 1 ||
        biases.size() != sizes.size() - 1)
      throw ShapeError("model file layer counts disagree");
    std::vector<LayerParams> layers;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      const auto w = weights[l].get<std::vector<double>>();
      const auto b = biases[l].get<std::vector<double>>();
      if (sizes[l] < 1 || sizes[l + 1] < 1 ||
          w.size() != static_cast<std::size_t>(sizes[l]) * sizes[l + 1] ||
          b.size() != static_cast<std::size_t>(sizes[l + 1]))
        throw ShapeError("model file layer " + std::to_string(l) +
                         " has the wrong number of entries");
      LayerParams p;
      p.weights = Eigen::Map<const RowMajorMatrix>(w.data(), sizes[l], sizes[l + 1]);
      p.biases = Eigen::Map<const Vector>(b.data(), sizes[l + 1]);
      layers.push_back(std::move(p));
    }
    Lineage lineage;
    if (j.contains("lineage")) {
      const auto &lj = j.at("lineage");
      lineage.init_seed = lj.value("init_seed", std::uint64_t{0});
      lineage.init_scale = lj.value("init_scale", 0.0);
      lineage.train_seeds =
          lj.value("train_seeds", std::vector<std::uint64_t>{});
    }
    return Network(std::move(layers), std::move(lineage));
  } catch (const nlohmann::json::exception &e) {
    throw InvalidConfigError(std::string("malformed model JSON: ") + e.what());
  }
}

}  // namespace dnnlab
