// tools/dnnlab.cpp

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

// Command-line front end: gen, train, eval, probe, adapt, experiment.
// Reports go to --out; timestamps only ever reach <out>/dnnlab.log.

#include <cerrno>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "dnnlab/adaptation.hpp"
#include "dnnlab/corpus.hpp"
#include "dnnlab/diagnostics.hpp"
#include "dnnlab/experiments.hpp"
#include "dnnlab/features.hpp"
#include "dnnlab/network.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dnnlab {
namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string format = "json";
  std::string model, data, pairs, name;
};

int ExitCode(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kIo: return 2;
    case ErrorKind::kInvalidConfig:
    case ErrorKind::kShape:
    case ErrorKind::kInvalidInput:
    case ErrorKind::kInvalidLabel:
    case ErrorKind::kParse: return 3;
    case ErrorKind::kTrainingDiverged:
    case ErrorKind::kConvergenceFailure:
    case ErrorKind::kAdaptationDiverged: return 4;
  }
  return 1;
}

int Fail(const std::string &kind, int code, const std::string &message) {
  std::cerr << json{{"error", kind}, {"exit_code", code}, {"message", message}}.dump() << '\n';
  return code;
}

std::string ReadFile(const std::string &path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path + "': " + std::strerror(errno));
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json ReadJson(const std::string &path) {
  const std::string text = ReadFile(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error &e) {
    throw InvalidConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

void WriteFile(const fs::path &path, const std::string &text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

void MakeDir(const fs::path &dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

void Log(const Options &o, const std::string &line) {
  std::error_code ec;
  fs::create_directories(o.out, ec);
  std::ofstream os(fs::path(o.out) / "dnnlab.log", std::ios::app);
  if (!os) return;
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &tm);
  os << stamp << ' ' << line << '\n';
}

// One "key,value" row per leaf, keys joined with '.'.
void Flatten(const json &j, const std::string &prefix, std::ostringstream &os) {
  if (j.is_object() || j.is_array()) {
    std::size_t i = 0;
    for (auto it = j.begin(); it != j.end(); ++it, ++i) {
      const std::string key = j.is_object() ? it.key() : std::to_string(i);
      Flatten(*it, prefix.empty() ? key : prefix + "." + key, os);
    }
    return;
  }
  std::string v;
  if (j.is_number_float()) v = format_double(j.get<double>());
  else if (j.is_string()) v = j.get<std::string>();
  else v = j.dump();
  if (v.find_first_of(",\"\n") != std::string::npos) {
    std::string q = "\"";
    for (char c : v) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    v = q + "\"";
  }
  os << prefix << ',' << v << '\n';
}

std::string ToCsv(const json &report) {
  std::ostringstream os;
  os << "key,value\n";
  Flatten(report, "", os);
  return os.str();
}

// Writes <out>/<stem>.json or .csv and returns the path.
fs::path WriteReport(const Options &o, const std::string &stem, const json &report,
                     const std::optional<std::string> &csv = std::nullopt) {
  MakeDir(o.out);
  const fs::path path = fs::path(o.out) / (stem + "." + o.format);
  WriteFile(path, o.format == "csv" ? (csv ? *csv : ToCsv(report)) : report.dump(2) + "\n");
  return path;
}

json Overrides(const Options &o) {
  json j = o.config.empty() ? json::object() : ReadJson(o.config);
  if (!j.is_object()) throw InvalidConfigError("config must be a JSON object");
  if (o.seed) j["seed"] = *o.seed;
  return j;
}

ExperimentConfig CommandConfig(const std::string &command, const Options &o) {
  ExperimentConfig base;
  base.name = command;
  json j = to_json(base);
  json over = Overrides(o);
  over.erase("name");
  j.merge_patch(over);
  return experiment_config_from_json(j);
}

json Envelope(const std::string &command, const ExperimentConfig &c, json results) {
  return {{"format", "dnnlab-report-v1"},
          {"experiment", command},
          {"config_hash", config_hash(c)},
          {"config", to_json(c)},
          {"results", std::move(results)}};
}

struct Model {
  FeatureSpec features;
  Network net;
  std::string config_hash;
};

Model LoadModel(const std::string &path) {
  const json j = ReadJson(path);
  try {
    if (j.at("format") != "dnnlab-model-v1")
      throw InvalidConfigError("'" + path + "' is not a dnnlab model");
    return {feature_spec_from_json(j.at("features")), network_from_json(j.at("network")),
            j.at("config_hash").get<std::string>()};
  } catch (const json::exception &e) {
    throw InvalidConfigError("malformed model '" + path + "': " + e.what());
  }
}

void CheckWidth(const Dataset &data, const FeatureSpec &f, const std::string &what) {
  for (const auto &u : data)
    if (u.d_static != f.d_static())
      throw ShapeError(what + " has " + std::to_string(u.d_static) + " static channels, model expects " +
                       std::to_string(f.d_static()));
}

void Require(const std::string &value, const std::string &flag) {
  if (value.empty()) throw InvalidConfigError(flag + " is required");
}

// ---------------------------------------------------------------------------

int Gen(const Options &o) {
  const ExperimentConfig c = CommandConfig("gen", o);
  const Corpus corpus = generate(c.corpus);
  MakeDir(o.out);
  save_dataset(corpus.train, (fs::path(o.out) / "train.data").string());
  save_dataset(corpus.test, (fs::path(o.out) / "test.data").string());
  auto count = [](const Dataset &d) {
    long n = 0;
    for (const auto &u : d) n += u.num_frames();
    return n;
  };
  const json results{{"train", {{"file", "train.data"}, {"utterances", corpus.train.size()},
                                {"frames", count(corpus.train)}}},
                     {"test", {{"file", "test.data"}, {"utterances", corpus.test.size()},
                               {"frames", count(corpus.test)}}}};
  std::cout << WriteReport(o, "gen", Envelope("gen", c, results)).string() << '\n';
  return 0;
}

int Train(const Options &o) {
  Require(o.data, "--data");
  const ExperimentConfig c = CommandConfig("train", o);
  const Dataset data = load_dataset(o.data);
  CheckWidth(data, c.features, "training data");
  const FrameSet frames = to_frames(data, c.features);
  const RunSeeds s = run_seeds(c, 0);
  TrainConfig tc = c.train;
  tc.seed = s.train;
  const TrainResult res = train(
      init_network(layer_sizes(frames.dim(), c.hidden, c.corpus.classes), s.init, tc.init_scale),
      frames, tc);
  MakeDir(o.out);
  const json model{{"format", "dnnlab-model-v1"},
                   {"config_hash", config_hash(c)},
                   {"features", feature_spec_to_json(c.features)},
                   {"network", network_to_json(res.network)}};
  WriteFile(fs::path(o.out) / "model.json", model.dump() + "\n");
  std::ostringstream loss;
  loss << "epoch,loss\n";
  for (std::size_t e = 0; e < res.epoch_losses.size(); ++e)
    loss << e + 1 << ',' << format_double(res.epoch_losses[e]) << '\n';
  WriteFile(fs::path(o.out) / "loss.csv", loss.str());
  const json results{{"model", "model.json"},
                     {"frames", frames.size()},
                     {"epoch_losses", res.epoch_losses},
                     {"train_accuracy", frame_accuracy(res.network, frames)}};
  std::cout << WriteReport(o, "train", Envelope("train", c, results)).string() << '\n';
  return 0;
}

int Eval(const Options &o) {
  Require(o.model, "--model");
  Require(o.data, "--data");
  const ExperimentConfig c = CommandConfig("eval", o);
  const Model m = LoadModel(o.model);
  const Dataset data = load_dataset(o.data);
  CheckWidth(data, m.features, "evaluation data");
  const FrameSet frames = to_frames(data, m.features);
  const double acc = frame_accuracy(m.net, frames);
  const json results{{"model_config_hash", m.config_hash},
                     {"frames", frames.size()},
                     {"accuracy", acc},
                     {"frame_error_rate", 1.0 - acc}};
  std::cout << WriteReport(o, "eval", Envelope("eval", c, results)).string() << '\n';
  return 0;
}

int Probe(const Options &o) {
  Require(o.model, "--model");
  Require(o.data, "--data");
  const ExperimentConfig c = CommandConfig("probe", o);
  const Model m = LoadModel(o.model);
  const Dataset data = load_dataset(o.data);
  CheckWidth(data, m.features, "probe data");
  const FrameSet frames = to_frames(data, m.features);
  // Without --pairs each frame is paired with its narrowband version.
  const Dataset partner = o.pairs.empty() ? mask_dataset(data, m.features) : load_dataset(o.pairs);
  CheckWidth(partner, m.features, "pair data");
  const FrameSet other = to_frames(partner, m.features);
  if (other.size() != frames.size())
    throw ShapeError("pair data has " + std::to_string(other.size()) + " frames, data has " +
                     std::to_string(frames.size()));
  const ProbeReport rep = probe(m.net, frames.inputs, PairSet{frames.inputs, other.inputs}, c.probe);
  json results = to_json(rep);
  results["model_config_hash"] = m.config_hash;
  results["pairing"] = o.pairs.empty() ? "narrowband-mask" : "file";
  const json report = Envelope("probe", c, results);
  std::cout << WriteReport(o, "probe", report, to_csv(rep)).string() << '\n';
  return 0;
}

int Adapt(const Options &o) {
  Require(o.model, "--model");
  Require(o.data, "--data");
  const ExperimentConfig c = CommandConfig("adapt", o);
  const Model m = LoadModel(o.model);
  const Dataset data = load_dataset(o.data);
  CheckWidth(data, m.features, "adaptation data");
  FdlrOptions opts = c.fdlr;
  opts.context = m.features.context;

  std::vector<std::string> speakers;
  for (const auto &u : data)
    if (std::find(speakers.begin(), speakers.end(), u.speaker_id) == speakers.end())
      speakers.push_back(u.speaker_id);
  const fs::path tdir = fs::path(o.out) / "transforms";
  MakeDir(tdir);
  json per = json::array();
  long before_ok = 0, after_ok = 0, total = 0;
  for (const auto &spk : speakers) {
    Dataset stage;
    for (const auto &u : data)
      if (u.speaker_id == spk) stage.push_back(frame_stage(u, m.features));
    const SelfAdaptResult res = self_adapt(m.net, stage, opts, c.adapt_iterations);
    const FrameSet b = splice_with_transform(
        stage, opts.context, FdlrTransform::identity(m.features.frame_dim()));
    const FrameSet a = splice_with_transform(stage, opts.context, res.transform);
    const double acc_b = frame_accuracy(m.net, b), acc_a = frame_accuracy(m.net, a);
    before_ok += std::lround(acc_b * b.size());
    after_ok += std::lround(acc_a * a.size());
    total += b.size();
    const std::string file = spk + ".json";
    WriteFile(tdir / file, transform_to_json(res.transform).dump() + "\n");
    per.push_back({{"speaker", spk},
                   {"transform", "transforms/" + file},
                   {"frames", b.size()},
                   {"accuracy_before", acc_b},
                   {"accuracy_after", acc_a},
                   {"label_changes", res.label_changes}});
  }
  const json results{{"model_config_hash", m.config_hash},
                     {"accuracy_before", total ? static_cast<double>(before_ok) / total : 0.0},
                     {"accuracy_after", total ? static_cast<double>(after_ok) / total : 0.0},
                     {"speakers", per}};
  std::cout << WriteReport(o, "adapt", Envelope("adapt", c, results)).string() << '\n';
  return 0;
}

int Experiment(const Options &o) {
  const auto &names = experiment_names();
  if (std::find(names.begin(), names.end(), o.name) == names.end())
    throw InvalidConfigError("unknown experiment '" + o.name + "'");
  const ExperimentConfig c = resolve_experiment_config(o.name, Overrides(o));
  const json report = run_experiment(c);
  std::cout << WriteReport(o, o.name, report).string() << '\n';
  return 0;
}

void CommonFlags(CLI::App *cmd, Options &o) {
  cmd->add_option("--config", o.config, "JSON config (merged over the defaults)");
  cmd->add_option("--seed", o.seed, "seed, overrides the config");
  cmd->add_option("--out", o.out, "output directory")->capture_default_str();
  cmd->add_option("--format", o.format, "report format")
      ->check(CLI::IsMember({"json", "csv"}))
      ->capture_default_str();
}

}  // namespace
}  // namespace dnnlab

int main(int argc, char **argv) {
  using namespace dnnlab;
  CLI::App app{"dnnlab: deep network feature-learning toolkit"};
  app.require_subcommand(1);
  Options o;
  auto *gen = app.add_subcommand("gen", "generate a synthetic corpus");
  auto *trn = app.add_subcommand("train", "train a network on a dataset");
  auto *evl = app.add_subcommand("eval", "frame accuracy of a model on a dataset");
  auto *prb = app.add_subcommand("probe", "layer diagnostics of a model");
  auto *adp = app.add_subcommand("adapt", "per-speaker unsupervised fDLR adaptation");
  auto *exp = app.add_subcommand("experiment", "run a named experiment");
  for (auto *cmd : {gen, trn, evl, prb, adp, exp}) CommonFlags(cmd, o);
  trn->add_option("--data", o.data, "training dataset");
  for (auto *cmd : {evl, prb, adp}) {
    cmd->add_option("--model", o.model, "model.json from train");
    cmd->add_option("--data", o.data, "dataset");
  }
  prb->add_option("--pairs", o.pairs, "frame-aligned partner dataset (default: narrowband mask)");
  exp->add_option("name", o.name, "depth-sweep | shrinkage | mixed-band | speaker-adapt | noise-robust")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    return Fail("usage", 3, e.what());
  }

  CLI::App *cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();
  int code = 0;
  try {
    if (cmd == gen) code = Gen(o);
    else if (cmd == trn) code = Train(o);
    else if (cmd == evl) code = Eval(o);
    else if (cmd == prb) code = Probe(o);
    else if (cmd == adp) code = Adapt(o);
    else code = Experiment(o);
  } catch (const Error &e) {
    code = Fail(ErrorKindName(e.kind()), ExitCode(e.kind()), e.what());
  } catch (const json::exception &e) {
    code = Fail("invalid-config", 3, e.what());
  } catch (const std::exception &e) {
    code = Fail("internal", 1, e.what());
  }
  Log(o, name + (o.name.empty() ? "" : " " + o.name) + " exit=" + std::to_string(code));
  return code;
}
